#include "snag/graph.hpp"

#include <cmath>
#include <utility>

namespace snag {

namespace {

constexpr double kLnEps = 1e-5;

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

Graph::NodeId Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&)> bw) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(NodeId id) {
    Node& n = node(id);
    if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor(n.value.shape());
    return n.grad;
}

const Tensor& Graph::grad(NodeId id) { return grad_buf(id); }

void Graph::check_same_shape(NodeId a, NodeId b, const char* op) const {
    if (value(a).shape() != value(b).shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(value(a).shape()) + " vs " +
                         shape_str(value(b).shape()));
    }
}

Graph::NodeId Graph::input(const Tensor& t) { return push(t, t.requires_grad(), nullptr); }

Graph::NodeId Graph::constant(Tensor t) { return push(std::move(t), false, nullptr); }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#define SNAG_BINARY_OP(NAME, FWD_EXPR, BW_BODY)                                                  \
    Graph::NodeId Graph::NAME(NodeId a, NodeId b) {                                              \
        check_same_shape(a, b, #NAME);                                                           \
        const Tensor& av = value(a);                                                             \
        const Tensor& bv = value(b);                                                             \
        Tensor out(av.shape());                                                                  \
        for (int64_t i = 0; i < av.size(); ++i) {                                                \
            const double x = av[i];                                                              \
            const double y = bv[i];                                                              \
            out[i] = (FWD_EXPR);                                                                 \
        }                                                                                        \
        const bool rg = wants_grad(a) || wants_grad(b);                                          \
        const NodeId id = push(std::move(out), rg, nullptr);                                     \
        if (rg) {                                                                                \
            node(id).backward = [id, a, b](Graph& g) {                                           \
                const Tensor& go = g.node(id).grad;                                              \
                const Tensor& av2 = g.value(a);                                                  \
                const Tensor& bv2 = g.value(b);                                                  \
                const bool ga = g.wants_grad(a);                                                 \
                const bool gb = g.wants_grad(b);                                                 \
                Tensor* da = ga ? &g.grad_buf(a) : nullptr;                                      \
                Tensor* db = gb ? &g.grad_buf(b) : nullptr;                                      \
                for (int64_t i = 0; i < go.size(); ++i) {                                        \
                    const double x = av2[i];                                                     \
                    const double y = bv2[i];                                                     \
                    const double gz = go[i];                                                     \
                    (void)x;                                                                     \
                    (void)y;                                                                     \
                    BW_BODY                                                                      \
                }                                                                                \
            };                                                                                   \
        }                                                                                        \
        return id;                                                                               \
    }

SNAG_BINARY_OP(add, x + y, {
    if (da) (*da)[i] += gz;
    if (db) (*db)[i] += gz;
})
SNAG_BINARY_OP(sub, x - y, {
    if (da) (*da)[i] += gz;
    if (db) (*db)[i] -= gz;
})
SNAG_BINARY_OP(mul, x* y, {
    if (da) (*da)[i] += gz * y;
    if (db) (*db)[i] += gz * x;
})
SNAG_BINARY_OP(div, x / y, {
    if (da) (*da)[i] += gz / y;
    if (db) (*db)[i] -= gz * x / (y * y);
})
SNAG_BINARY_OP(minimum, (x <= y) ? x : y, {
    if (x <= y) {
        if (da) (*da)[i] += gz;
    } else if (db) {
        (*db)[i] += gz;
    }
})
SNAG_BINARY_OP(maximum, (x >= y) ? x : y, {
    if (x >= y) {
        if (da) (*da)[i] += gz;
    } else if (db) {
        (*db)[i] += gz;
    }
})

#undef SNAG_BINARY_OP

Graph::NodeId Graph::unary_elementwise(NodeId x, double (*fwd)(double), double (*dfdx)(double, double)) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, dfdx](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& yv = g.value(id);
            const Tensor& xv2 = g.value(x);
            Tensor& dx = g.grad_buf(x);
            for (int64_t i = 0; i < go.size(); ++i) dx[i] += go[i] * dfdx(xv2[i], yv[i]);
        };
    }
    return id;
}

Graph::NodeId Graph::relu(NodeId x) {
    return unary_elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Graph::NodeId Graph::gelu(NodeId x) {
    return unary_elementwise(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
            return cdf + v * pdf;
        });
}

Graph::NodeId Graph::sigmoid(NodeId x) {
    return unary_elementwise(
        x, [](double v) { return stable_sigmoid(v); },
        [](double, double y) { return y * (1.0 - y); });
}

Graph::NodeId Graph::softplus(NodeId x) {
    return unary_elementwise(
        x, [](double v) { return stable_softplus(v); },
        [](double v, double) { return stable_sigmoid(v); });
}

Graph::NodeId Graph::exp(NodeId x) {
    return unary_elementwise(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Graph::NodeId Graph::log(NodeId x) {
    return unary_elementwise(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Graph::NodeId Graph::pow_const(NodeId x, double p) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) out[i] = std::pow(xv[i], p);
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, p](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& xv2 = g.value(x);
            Tensor& dx = g.grad_buf(x);
            if (p == 0.0) return;
            for (int64_t i = 0; i < go.size(); ++i) dx[i] += go[i] * p * std::pow(xv2[i], p - 1.0);
        };
    }
    return id;
}

Graph::NodeId Graph::scale(NodeId x, double c) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, c](Graph& g) {
            const Tensor& go = g.node(id).grad;
            Tensor& dx = g.grad_buf(x);
            for (int64_t i = 0; i < go.size(); ++i) dx[i] += go[i] * c;
        };
    }
    return id;
}

Graph::NodeId Graph::add_const(NodeId x, double c) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + c;
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x](Graph& g) {
            const Tensor& go = g.node(id).grad;
            Tensor& dx = g.grad_buf(x);
            for (int64_t i = 0; i < go.size(); ++i) dx[i] += go[i];
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// row broadcast
// ---------------------------------------------------------------------------

Graph::NodeId Graph::add_row(NodeId x, NodeId row) {
    const Tensor& xv = value(x);
    const Tensor& rv = value(row);
    if (xv.ndim() != 2 || rv.ndim() != 1 || xv.dim(1) != rv.dim(0)) {
        throw ShapeError("add_row: incompatible shapes " + shape_str(xv.shape()) + " vs " +
                         shape_str(rv.shape()));
    }
    const int64_t T = xv.dim(0), D = xv.dim(1);
    Tensor out(xv.shape());
    for (int64_t t = 0; t < T; ++t)
        for (int64_t d = 0; d < D; ++d) out[t * D + d] = xv[t * D + d] + rv[d];
    const bool rg = wants_grad(x) || wants_grad(row);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, row, T, D](Graph& g) {
            const Tensor& go = g.node(id).grad;
            if (g.wants_grad(x)) {
                Tensor& dx = g.grad_buf(x);
                for (int64_t i = 0; i < go.size(); ++i) dx[i] += go[i];
            }
            if (g.wants_grad(row)) {
                Tensor& dr = g.grad_buf(row);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t d = 0; d < D; ++d) dr[d] += go[t * D + d];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::mul_row(NodeId x, NodeId row) {
    const Tensor& xv = value(x);
    const Tensor& rv = value(row);
    if (xv.ndim() != 2 || rv.ndim() != 1 || xv.dim(1) != rv.dim(0)) {
        throw ShapeError("mul_row: incompatible shapes " + shape_str(xv.shape()) + " vs " +
                         shape_str(rv.shape()));
    }
    const int64_t T = xv.dim(0), D = xv.dim(1);
    Tensor out(xv.shape());
    for (int64_t t = 0; t < T; ++t)
        for (int64_t d = 0; d < D; ++d) out[t * D + d] = xv[t * D + d] * rv[d];
    const bool rg = wants_grad(x) || wants_grad(row);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, row, T, D](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& xv2 = g.value(x);
            const Tensor& rv2 = g.value(row);
            if (g.wants_grad(x)) {
                Tensor& dx = g.grad_buf(x);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t d = 0; d < D; ++d) dx[t * D + d] += go[t * D + d] * rv2[d];
            }
            if (g.wants_grad(row)) {
                Tensor& dr = g.grad_buf(row);
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t d = 0; d < D; ++d) dr[d] += go[t * D + d] * xv2[t * D + d];
            }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Graph::NodeId Graph::slice_cols(NodeId x, int64_t c0, int64_t c1) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 2 || c0 < 0 || c1 > xv.dim(1) || c0 >= c1) {
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") for shape " + shape_str(xv.shape()));
    }
    const int64_t T = xv.dim(0), D = xv.dim(1), W = c1 - c0;
    Tensor out({T, W});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < W; ++c) out[t * W + c] = xv[t * D + c0 + c];
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, c0, T, D, W](Graph& g) {
            const Tensor& go = g.node(id).grad;
            Tensor& dx = g.grad_buf(x);
            for (int64_t t = 0; t < T; ++t)
                for (int64_t c = 0; c < W; ++c) dx[t * D + c0 + c] += go[t * W + c];
        };
    }
    return id;
}

Graph::NodeId Graph::gather_rows(NodeId x, std::vector<int64_t> rows) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 2) throw ShapeError("gather_rows: expected 2-d input, got " + shape_str(xv.shape()));
    const int64_t T = xv.dim(0), D = xv.dim(1);
    for (int64_t r : rows) {
        if (r < 0 || r >= T) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
    }
    const int64_t N = static_cast<int64_t>(rows.size());
    Tensor out({N, D});
    for (int64_t i = 0; i < N; ++i)
        for (int64_t d = 0; d < D; ++d) out[i * D + d] = xv[rows[static_cast<size_t>(i)] * D + d];
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, rows = std::move(rows), D](Graph& g) {
            const Tensor& go = g.node(id).grad;
            Tensor& dx = g.grad_buf(x);
            const int64_t N2 = static_cast<int64_t>(rows.size());
            for (int64_t i = 0; i < N2; ++i)
                for (int64_t d = 0; d < D; ++d) dx[rows[static_cast<size_t>(i)] * D + d] += go[i * D + d];
        };
    }
    return id;
}

Graph::NodeId Graph::mean_rows(NodeId x) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 2 || xv.dim(0) == 0) {
        throw ShapeError("mean_rows: expected non-empty 2-d input, got " + shape_str(xv.shape()));
    }
    const int64_t T = xv.dim(0), D = xv.dim(1);
    Tensor out({D});
    for (int64_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (int64_t t = 0; t < T; ++t) acc += xv[t * D + d];
        out[d] = acc / static_cast<double>(T);
    }
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, T, D](Graph& g) {
            const Tensor& go = g.node(id).grad;
            Tensor& dx = g.grad_buf(x);
            const double inv = 1.0 / static_cast<double>(T);
            for (int64_t t = 0; t < T; ++t)
                for (int64_t d = 0; d < D; ++d) dx[t * D + d] += go[d] * inv;
        };
    }
    return id;
}

Graph::NodeId Graph::sum(NodeId x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
    const bool rg = wants_grad(x);
    const NodeId id = push(Tensor::scalar(acc), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x](Graph& g) {
            const double gz = g.node(id).grad[0];
            Tensor& dx = g.grad_buf(x);
            for (int64_t i = 0; i < dx.size(); ++i) dx[i] += gz;
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    }
    const int64_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
    Tensor out({M, N});
    // i,k,j order: contiguous writes, and for a fixed output cell the k sum
    // still runs left to right.
    for (int64_t i = 0; i < M; ++i) {
        double* orow = out.data() + i * N;
        for (int64_t k = 0; k < K; ++k) {
            const double aik = av[i * K + k];
            const double* brow = bv.data() + k * N;
            for (int64_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
        }
    }
    macs_ += M * K * N;
    const bool rg = wants_grad(a) || wants_grad(b);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, b, M, K, N](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& av2 = g.value(a);
            const Tensor& bv2 = g.value(b);
            if (g.wants_grad(a)) {
                Tensor& da = g.grad_buf(a);  // dA = G B^T
                for (int64_t i = 0; i < M; ++i)
                    for (int64_t j = 0; j < N; ++j) {
                        const double gz = go[i * N + j];
                        const double* brow = bv2.data() + 0 * N + j;
                        for (int64_t k = 0; k < K; ++k) da[i * K + k] += gz * brow[k * N];
                    }
            }
            if (g.wants_grad(b)) {
                Tensor& db = g.grad_buf(b);  // dB = A^T G
                for (int64_t i = 0; i < M; ++i)
                    for (int64_t k = 0; k < K; ++k) {
                        const double aik = av2[i * K + k];
                        const double* grow = go.data() + i * N;
                        for (int64_t j = 0; j < N; ++j) db[k * N + j] += aik * grow[j];
                    }
            }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// softmax / layernorm
// ---------------------------------------------------------------------------

Graph::NodeId Graph::softmax(NodeId x, int axis) {
    const Tensor& xv = value(x);
    const int nd = xv.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("softmax: bad axis for shape " + shape_str(xv.shape()));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    const int64_t n = xv.dim(axis);
    for (int i = axis + 1; i < nd; ++i) inner *= xv.dim(i);

    Tensor out(xv.shape());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            double mx = xv[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const double e = std::exp(xv[base + i * inner] - mx);
                out[base + i * inner] = e;
                s += e;
            }
            for (int64_t i = 0; i < n; ++i) out[base + i * inner] /= s;
        }
    }
    const bool rg = wants_grad(x);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, outer, n, inner](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& yv = g.value(id);
            Tensor& dx = g.grad_buf(x);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (int64_t i = 0; i < n; ++i) dot += go[base + i * inner] * yv[base + i * inner];
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t k = base + i * inner;
                        dx[k] += yv[k] * (go[k] - dot);
                    }
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::layernorm(NodeId x, NodeId gain, NodeId bias) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    const Tensor& bv = value(bias);
    if (xv.ndim() < 1) throw ShapeError("layernorm: scalar input");
    const int64_t D = xv.dim(xv.ndim() - 1);
    if (gv.ndim() != 1 || gv.dim(0) != D || bv.ndim() != 1 || bv.dim(0) != D) {
        throw ShapeError("layernorm: gain/bias must be length " + std::to_string(D));
    }
    const int64_t R = xv.size() / D;
    Tensor out(xv.shape());
    std::vector<double> inv_std(static_cast<size_t>(R));
    std::vector<double> norm(static_cast<size_t>(xv.size()));
    for (int64_t r = 0; r < R; ++r) {
        const double* row = xv.data() + r * D;
        double mean = 0.0;
        for (int64_t d = 0; d < D; ++d) mean += row[d];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            const double c = row[d] - mean;
            var += c * c;
        }
        var /= static_cast<double>(D);
        const double istd = 1.0 / std::sqrt(var + kLnEps);
        inv_std[static_cast<size_t>(r)] = istd;
        for (int64_t d = 0; d < D; ++d) {
            const double y0 = (row[d] - mean) * istd;
            norm[static_cast<size_t>(r * D + d)] = y0;
            out[r * D + d] = y0 * gv[d] + bv[d];
        }
    }
    const bool rg = wants_grad(x) || wants_grad(gain) || wants_grad(bias);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, gain, bias, R, D, inv_std = std::move(inv_std),
                             norm = std::move(norm)](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& gv2 = g.value(gain);
            if (g.wants_grad(bias)) {
                Tensor& db = g.grad_buf(bias);
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t d = 0; d < D; ++d) db[d] += go[r * D + d];
            }
            if (g.wants_grad(gain)) {
                Tensor& dg = g.grad_buf(gain);
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t d = 0; d < D; ++d)
                        dg[d] += go[r * D + d] * norm[static_cast<size_t>(r * D + d)];
            }
            if (g.wants_grad(x)) {
                Tensor& dx = g.grad_buf(x);
                for (int64_t r = 0; r < R; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t d = 0; d < D; ++d) {
                        const double dy0 = go[r * D + d] * gv2[d];
                        m1 += dy0;
                        m2 += dy0 * norm[static_cast<size_t>(r * D + d)];
                    }
                    m1 /= static_cast<double>(D);
                    m2 /= static_cast<double>(D);
                    const double istd = inv_std[static_cast<size_t>(r)];
                    for (int64_t d = 0; d < D; ++d) {
                        const double dy0 = go[r * D + d] * gv2[d];
                        dx[r * D + d] += istd * (dy0 - m1 - norm[static_cast<size_t>(r * D + d)] * m2);
                    }
                }
            }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

Graph::NodeId Graph::conv1d(NodeId x, NodeId w, int64_t stride) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    if (xv.ndim() != 2 || xv.dim(0) == 0) {
        throw ShapeError("conv1d: expected non-empty (T x C_in) input, got " + shape_str(xv.shape()));
    }
    if (wv.ndim() != 3) throw ShapeError("conv1d: kernel must be (k x C_in x C_out)");
    const int64_t T = xv.dim(0), Cin = xv.dim(1);
    const int64_t K = wv.dim(0), Cout = wv.dim(2);
    if (K % 2 == 0) throw ShapeError("conv1d: kernel size must be odd, got " + std::to_string(K));
    if (wv.dim(1) != Cin) {
        throw ShapeError("conv1d: kernel C_in " + std::to_string(wv.dim(1)) + " != input C_in " +
                         std::to_string(Cin));
    }
    if (stride < 1) throw ShapeError("conv1d: stride must be >= 1");
    const int64_t P = (K - 1) / 2;
    const int64_t Tout = (T + stride - 1) / stride;
    Tensor out({Tout, Cout});
    for (int64_t to = 0; to < Tout; ++to) {
        double* orow = out.data() + to * Cout;
        for (int64_t dt = 0; dt < K; ++dt) {
            const int64_t ti = to * stride + dt - P;
            if (ti < 0 || ti >= T) continue;
            const double* xrow = xv.data() + ti * Cin;
            const double* wmat = wv.data() + dt * Cin * Cout;
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const double xval = xrow[ci];
                const double* wrow = wmat + ci * Cout;
                for (int64_t co = 0; co < Cout; ++co) orow[co] += xval * wrow[co];
            }
        }
    }
    macs_ += Tout * K * Cin * Cout;
    const bool rg = wants_grad(x) || wants_grad(w);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, w, T, Cin, K, Cout, P, stride, Tout](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& xv2 = g.value(x);
            const Tensor& wv2 = g.value(w);
            const bool gx = g.wants_grad(x);
            const bool gw = g.wants_grad(w);
            Tensor* dx = gx ? &g.grad_buf(x) : nullptr;
            Tensor* dw = gw ? &g.grad_buf(w) : nullptr;
            for (int64_t to = 0; to < Tout; ++to) {
                const double* grow = go.data() + to * Cout;
                for (int64_t dt = 0; dt < K; ++dt) {
                    const int64_t ti = to * stride + dt - P;
                    if (ti < 0 || ti >= T) continue;
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const double xval = xv2[ti * Cin + ci];
                        const double* wrow = wv2.data() + (dt * Cin + ci) * Cout;
                        double accx = 0.0;
                        for (int64_t co = 0; co < Cout; ++co) {
                            const double gz = grow[co];
                            accx += gz * wrow[co];
                            if (gw) (*dw)[(dt * Cin + ci) * Cout + co] += gz * xval;
                        }
                        if (gx) (*dx)[ti * Cin + ci] += accx;
                    }
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::depthwise_conv1d(NodeId x, NodeId w, int64_t stride) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    if (xv.ndim() != 2 || xv.dim(0) == 0) {
        throw ShapeError("depthwise_conv1d: expected non-empty (T x C) input, got " + shape_str(xv.shape()));
    }
    if (wv.ndim() != 2 || wv.dim(1) != xv.dim(1)) {
        throw ShapeError("depthwise_conv1d: kernel must be (k x C) with C = " + std::to_string(xv.dim(1)));
    }
    const int64_t T = xv.dim(0), C = xv.dim(1), K = wv.dim(0);
    if (K % 2 == 0) throw ShapeError("depthwise_conv1d: kernel size must be odd");
    if (stride < 1) throw ShapeError("depthwise_conv1d: stride must be >= 1");
    const int64_t P = (K - 1) / 2;
    const int64_t Tout = (T + stride - 1) / stride;
    Tensor out({Tout, C});
    for (int64_t to = 0; to < Tout; ++to) {
        for (int64_t dt = 0; dt < K; ++dt) {
            const int64_t ti = to * stride + dt - P;
            if (ti < 0 || ti >= T) continue;
            const double* xrow = xv.data() + ti * C;
            const double* wrow = wv.data() + dt * C;
            double* orow = out.data() + to * C;
            for (int64_t c = 0; c < C; ++c) orow[c] += xrow[c] * wrow[c];
        }
    }
    macs_ += Tout * K * C;
    const bool rg = wants_grad(x) || wants_grad(w);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, w, T, C, K, P, stride, Tout](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& xv2 = g.value(x);
            const Tensor& wv2 = g.value(w);
            const bool gx = g.wants_grad(x);
            const bool gw = g.wants_grad(w);
            Tensor* dx = gx ? &g.grad_buf(x) : nullptr;
            Tensor* dw = gw ? &g.grad_buf(w) : nullptr;
            for (int64_t to = 0; to < Tout; ++to) {
                for (int64_t dt = 0; dt < K; ++dt) {
                    const int64_t ti = to * stride + dt - P;
                    if (ti < 0 || ti >= T) continue;
                    for (int64_t c = 0; c < C; ++c) {
                        const double gz = go[to * C + c];
                        if (gx) (*dx)[ti * C + c] += gz * wv2[dt * C + c];
                        if (gw) (*dw)[dt * C + c] += gz * xv2[ti * C + c];
                    }
                }
            }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

namespace {

struct AttnSpec {
    int64_t tq = 0, tk = 0, d = 0, dh = 0;
    int heads = 0;
    int64_t window = 0;  // 0 = global
    std::vector<uint8_t> mask;

    // Admissible key range for query i (before the mask).
    void key_range(int64_t i, int64_t& lo, int64_t& hi) const {
        if (window <= 0) {
            lo = 0;
            hi = tk - 1;
        } else {
            const int64_t hw = (window - 1) / 2;
            lo = std::max<int64_t>(0, i - hw);
            hi = std::min<int64_t>(tk - 1, i + hw);
        }
    }

    bool key_ok(int64_t j) const { return mask.empty() || mask[static_cast<size_t>(j)] != 0; }

    // Softmax weights for one head/query; returns false when every key is
    // masked out (the output row stays zero).
    bool weights(const Tensor& qv, const Tensor& kv, int h, int64_t i, std::vector<double>& w,
                 std::vector<int64_t>& js) const {
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        int64_t lo, hi;
        key_range(i, lo, hi);
        js.clear();
        w.clear();
        const int64_t off = static_cast<int64_t>(h) * dh;
        for (int64_t j = lo; j <= hi; ++j) {
            if (!key_ok(j)) continue;
            double s = 0.0;
            for (int64_t c = 0; c < dh; ++c) s += qv[i * d + off + c] * kv[j * d + off + c];
            js.push_back(j);
            w.push_back(s * sc);
        }
        if (js.empty()) return false;
        double mx = w[0];
        for (double s : w) mx = std::max(mx, s);
        double sum = 0.0;
        for (double& s : w) {
            s = std::exp(s - mx);
            sum += s;
        }
        for (double& s : w) s /= sum;
        return true;
    }
};

}  // namespace

Graph::NodeId Graph::attention(NodeId q, NodeId k, NodeId v, std::optional<std::vector<uint8_t>> key_mask,
                               int heads, int64_t window) {
    const Tensor& qv = value(q);
    const Tensor& kv = value(k);
    const Tensor& vv = value(v);
    if (qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2) {
        throw ShapeError("attention: q, k, v must be 2-d");
    }
    const int64_t Tq = qv.dim(0), D = qv.dim(1), Tk = kv.dim(0);
    if (kv.dim(1) != D || vv.dim(0) != Tk || vv.dim(1) != D) {
        throw ShapeError("attention: shape mismatch q" + shape_str(qv.shape()) + " k" +
                         shape_str(kv.shape()) + " v" + shape_str(vv.shape()));
    }
    if (heads < 1 || D % heads != 0) {
        throw ShapeError("attention: head count " + std::to_string(heads) + " must divide dim " +
                         std::to_string(D));
    }
    if (window > 0) {
        if (window % 2 == 0) throw ShapeError("attention: window must be odd");
        if (Tq != Tk) throw ShapeError("attention: local window requires Tq == Tk");
    }
    if (key_mask && static_cast<int64_t>(key_mask->size()) != Tk) {
        throw ShapeError("attention: mask length must equal key count");
    }

    AttnSpec spec;
    spec.tq = Tq;
    spec.tk = Tk;
    spec.d = D;
    spec.dh = D / heads;
    spec.heads = heads;
    spec.window = window;
    if (key_mask) spec.mask = std::move(*key_mask);

    Tensor out({Tq, D});
    int64_t pairs = 0;
    std::vector<double> w;
    std::vector<int64_t> js;
    for (int h = 0; h < heads; ++h) {
        const int64_t off = static_cast<int64_t>(h) * spec.dh;
        for (int64_t i = 0; i < Tq; ++i) {
            if (!spec.weights(qv, kv, h, i, w, js)) continue;
            pairs += static_cast<int64_t>(js.size());
            for (size_t a = 0; a < js.size(); ++a) {
                const int64_t j = js[a];
                const double wj = w[a];
                for (int64_t c = 0; c < spec.dh; ++c) out[i * D + off + c] += wj * vv[j * D + off + c];
            }
        }
    }
    macs_ += 2 * pairs * spec.dh;

    const bool rg = wants_grad(q) || wants_grad(k) || wants_grad(v);
    const NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, q, k, v, spec = std::move(spec)](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& qv2 = g.value(q);
            const Tensor& kv2 = g.value(k);
            const Tensor& vv2 = g.value(v);
            const bool gq = g.wants_grad(q);
            const bool gk = g.wants_grad(k);
            const bool gv = g.wants_grad(v);
            Tensor* dq = gq ? &g.grad_buf(q) : nullptr;
            Tensor* dk = gk ? &g.grad_buf(k) : nullptr;
            Tensor* dv = gv ? &g.grad_buf(v) : nullptr;
            const double sc = 1.0 / std::sqrt(static_cast<double>(spec.dh));
            std::vector<double> w;
            std::vector<int64_t> js;
            std::vector<double> dwv;
            for (int h = 0; h < spec.heads; ++h) {
                const int64_t off = static_cast<int64_t>(h) * spec.dh;
                for (int64_t i = 0; i < spec.tq; ++i) {
                    if (!spec.weights(qv2, kv2, h, i, w, js)) continue;
                    dwv.assign(js.size(), 0.0);
                    for (size_t a = 0; a < js.size(); ++a) {
                        const int64_t j = js[a];
                        double acc = 0.0;
                        for (int64_t c = 0; c < spec.dh; ++c)
                            acc += go[i * spec.d + off + c] * vv2[j * spec.d + off + c];
                        dwv[a] = acc;
                        if (gv) {
                            for (int64_t c = 0; c < spec.dh; ++c)
                                (*dv)[j * spec.d + off + c] += w[a] * go[i * spec.d + off + c];
                        }
                    }
                    double dot = 0.0;
                    for (size_t a = 0; a < js.size(); ++a) dot += w[a] * dwv[a];
                    for (size_t a = 0; a < js.size(); ++a) {
                        const int64_t j = js[a];
                        const double ds = w[a] * (dwv[a] - dot) * sc;
                        if (gq) {
                            for (int64_t c = 0; c < spec.dh; ++c)
                                (*dq)[i * spec.d + off + c] += ds * kv2[j * spec.d + off + c];
                        }
                        if (gk) {
                            for (int64_t c = 0; c < spec.dh; ++c)
                                (*dk)[j * spec.d + off + c] += ds * qv2[i * spec.d + off + c];
                        }
                    }
                }
            }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(NodeId root) {
    if (ran_backward_) throw std::logic_error("Graph::backward may only run once per graph");
    const Tensor& rv = value(root);
    if (rv.size() != 1) {
        throw ShapeError("backward: root must be scalar, got " + shape_str(rv.shape()));
    }
    if (!wants_grad(root)) {
        throw std::logic_error("backward: root does not depend on any differentiable input");
    }
    ran_backward_ = true;
    grad_buf(root)[0] = 1.0;
    for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
        n.backward(*this);
    }
}

}  // namespace snag
