#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "snag/graph.hpp"

namespace snag::nn {

// Per-forward binding of parameter tensors into a graph. Each parameter is
// bound at most once, so weight sharing (e.g. heads across pyramid levels)
// accumulates gradients into one node.
struct Ctx {
    explicit Ctx(Graph& graph) : g(graph) {}
    Graph& g;
    std::unordered_map<const Tensor*, NodeId> bound;

    NodeId use(const Tensor& t) {
        auto it = bound.find(&t);
        if (it != bound.end()) return it->second;
        const NodeId id = g.input(t);
        bound.emplace(&t, id);
        return id;
    }
};

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct Linear {
    Tensor w;  // (in x out)
    Tensor b;  // (out)

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng);
    NodeId forward(Ctx& c, NodeId x) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    explicit LayerNorm(int64_t d);
    NodeId forward(Ctx& c, NodeId x) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct Conv1d {
    Tensor w;  // (k x c_in x c_out)
    Tensor b;  // (c_out)
    int64_t stride = 1;

    Conv1d() = default;
    Conv1d(int64_t k, int64_t c_in, int64_t c_out, int64_t stride, Rng& rng);
    NodeId forward(Ctx& c, NodeId x) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Center-tap initialized so stride-2 downsampling starts out as plain
// strided subsampling instead of crushing the signal.
struct DepthwiseConv1d {
    Tensor w;  // (k x c)
    int64_t stride = 1;

    DepthwiseConv1d() = default;
    DepthwiseConv1d(int64_t k, int64_t c, int64_t stride);
    NodeId forward(Ctx& c, NodeId x) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct MultiheadAttention {
    Linear q_proj, k_proj, v_proj, out_proj;
    int heads = 1;
    int64_t window = 0;  // 0 = global; odd window restricts self-attention

    MultiheadAttention() = default;
    // d_out lets cross-attention emit wider outputs (the affine fusion needs
    // 2*D channels); internal attention always runs at d_model.
    MultiheadAttention(int64_t d_model, int heads, int64_t window, int64_t d_out, Rng& rng);
    NodeId forward(Ctx& c, NodeId q_in, NodeId kv_in, const std::vector<uint8_t>* key_mask) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(int64_t d, int64_t hidden, Rng& rng);
    NodeId forward(Ctx& c, NodeId x) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Pre-layernorm block: x + attn(LN(x)), then x + mlp(LN(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiheadAttention attn;
    Mlp mlp;

    TransformerBlock() = default;
    TransformerBlock(int64_t d, int heads, int64_t window, int64_t mlp_hidden, Rng& rng);
    NodeId forward(Ctx& c, NodeId x, const std::vector<uint8_t>* mask) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

}  // namespace snag::nn
