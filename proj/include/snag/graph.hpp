#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "snag/tensor.hpp"

namespace snag {

// Reverse-mode autodiff tape. Ops append nodes in topological order;
// backward() walks the tape in reverse, so every node is visited exactly
// once. All reductions accumulate left to right, which makes forward passes
// bitwise deterministic for identical inputs — the inference cache
// equivalence test depends on this.
//
// Multiply-accumulate counts are tracked per graph as ops are recorded:
// matmul (m x k)(k x n) adds m*k*n, conv1d adds T_out*k*C_in*C_out,
// depthwise conv adds T_out*k*C, attention adds 2*head_dim per scored
// (query, key) pair. Elementwise ops, normalization and activations do
// not contribute, matching the usual profiler convention.
class Graph {
  public:
    using NodeId = int32_t;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // --- leaves ---
    NodeId input(const Tensor& t);   // differentiable iff t.requires_grad()
    NodeId constant(Tensor t);       // never differentiable

    // --- elementwise, same shape ---
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId minimum(NodeId a, NodeId b);  // ties take the first argument
    NodeId maximum(NodeId a, NodeId b);

    // --- elementwise unary ---
    NodeId relu(NodeId x);
    NodeId gelu(NodeId x);  // exact erf form
    NodeId sigmoid(NodeId x);
    NodeId softplus(NodeId x);
    NodeId exp(NodeId x);
    NodeId log(NodeId x);
    NodeId pow_const(NodeId x, double p);  // requires x > 0 when p is non-integer
    NodeId scale(NodeId x, double c);
    NodeId add_const(NodeId x, double c);

    // --- broadcast over rows: x is (T x D), row is (D) ---
    NodeId add_row(NodeId x, NodeId row);
    NodeId mul_row(NodeId x, NodeId row);

    // --- structure ---
    NodeId slice_cols(NodeId x, int64_t c0, int64_t c1);
    NodeId gather_rows(NodeId x, std::vector<int64_t> rows);
    NodeId mean_rows(NodeId x);  // (T x D) -> (D)
    NodeId sum(NodeId x);        // -> scalar {1}

    // --- core ops ---
    NodeId matmul(NodeId a, NodeId b);
    NodeId softmax(NodeId x, int axis);
    // Normalizes over the last axis with epsilon 1e-5 inside the sqrt; a
    // zero-variance slice maps to zeros before gain/bias.
    NodeId layernorm(NodeId x, NodeId gain, NodeId bias);
    // x: (T x C_in), w: (k x C_in x C_out), odd k, zero "same" padding.
    // Output length is ceil(T / stride).
    NodeId conv1d(NodeId x, NodeId w, int64_t stride);
    // x: (T x C), w: (k x C); one filter per channel.
    NodeId depthwise_conv1d(NodeId x, NodeId w, int64_t stride);
    // Scaled dot-product attention over `heads` heads, scale 1/sqrt(head_dim).
    // q: (Tq x D), k/v: (Tk x D). key_mask (optional, length Tk) marks valid
    // keys; masked keys get exactly zero weight. window > 0 restricts query i
    // to keys |j - i| <= (window-1)/2 and requires Tq == Tk. A query with no
    // admissible key outputs zeros.
    NodeId attention(NodeId q, NodeId k, NodeId v, std::optional<std::vector<uint8_t>> key_mask,
                     int heads, int64_t window);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool node_requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    // Gradient of the last backward() root w.r.t. this node; zeros if the
    // node does not influence the root.
    const Tensor& grad(NodeId id);

    // Root must be scalar. One backward per graph.
    void backward(NodeId root);

    int64_t macs() const { return macs_; }
    size_t num_nodes() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily
        bool requires_grad = false;
        std::function<void(Graph&)> backward;
    };

    Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    NodeId push(Tensor value, bool requires_grad, std::function<void(Graph&)> bw);
    Tensor& grad_buf(NodeId id);
    bool wants_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    void check_same_shape(NodeId a, NodeId b, const char* op) const;

    NodeId unary_elementwise(NodeId x, double (*fwd)(double), double (*dfdx)(double, double));

    std::vector<Node> nodes_;
    int64_t macs_ = 0;
    bool ran_backward_ = false;
};

using NodeId = Graph::NodeId;

}  // namespace snag
