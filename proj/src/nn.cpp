#include "snag/nn.hpp"

namespace snag::nn {

namespace {
constexpr double kInitStd = 0.02;
}

Linear::Linear(int64_t in, int64_t out, Rng& rng)
    : w(rng.trunc_normal_tensor({in, out}, kInitStd)), b(Tensor({out})) {}

NodeId Linear::forward(Ctx& c, NodeId x) const {
    return c.g.add_row(c.g.matmul(x, c.use(w)), c.use(b));
}

void Linear::visit(const std::string& prefix, const ParamVisitor& v) {
    v(prefix + ".w", w);
    v(prefix + ".b", b);
}

LayerNorm::LayerNorm(int64_t d) : gain(Tensor::full({d}, 1.0)), bias(Tensor({d})) {}

NodeId LayerNorm::forward(Ctx& c, NodeId x) const {
    return c.g.layernorm(x, c.use(gain), c.use(bias));
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& v) {
    v(prefix + ".gain", gain);
    v(prefix + ".bias", bias);
}

Conv1d::Conv1d(int64_t k, int64_t c_in, int64_t c_out, int64_t stride_, Rng& rng)
    : w(rng.trunc_normal_tensor({k, c_in, c_out}, kInitStd)), b(Tensor({c_out})), stride(stride_) {}

NodeId Conv1d::forward(Ctx& c, NodeId x) const {
    return c.g.add_row(c.g.conv1d(x, c.use(w), stride), c.use(b));
}

void Conv1d::visit(const std::string& prefix, const ParamVisitor& v) {
    v(prefix + ".w", w);
    v(prefix + ".b", b);
}

DepthwiseConv1d::DepthwiseConv1d(int64_t k, int64_t c, int64_t stride_) : w(Tensor({k, c})), stride(stride_) {
    const int64_t center = (k - 1) / 2;
    for (int64_t ch = 0; ch < c; ++ch) w[center * c + ch] = 1.0;
}

NodeId DepthwiseConv1d::forward(Ctx& c, NodeId x) const {
    return c.g.depthwise_conv1d(x, c.use(w), stride);
}

void DepthwiseConv1d::visit(const std::string& prefix, const ParamVisitor& v) { v(prefix + ".w", w); }

MultiheadAttention::MultiheadAttention(int64_t d_model, int heads_, int64_t window_, int64_t d_out, Rng& rng)
    : q_proj(d_model, d_model, rng),
      k_proj(d_model, d_model, rng),
      v_proj(d_model, d_model, rng),
      out_proj(d_model, d_out, rng),
      heads(heads_),
      window(window_) {}

NodeId MultiheadAttention::forward(Ctx& c, NodeId q_in, NodeId kv_in,
                                   const std::vector<uint8_t>* key_mask) const {
    const NodeId q = q_proj.forward(c, q_in);
    const NodeId k = k_proj.forward(c, kv_in);
    const NodeId v = v_proj.forward(c, kv_in);
    std::optional<std::vector<uint8_t>> mask;
    if (key_mask) mask = *key_mask;
    const NodeId attn = c.g.attention(q, k, v, std::move(mask), heads, window);
    return out_proj.forward(c, attn);
}

void MultiheadAttention::visit(const std::string& prefix, const ParamVisitor& v) {
    q_proj.visit(prefix + ".q", v);
    k_proj.visit(prefix + ".k", v);
    v_proj.visit(prefix + ".v", v);
    out_proj.visit(prefix + ".out", v);
}

Mlp::Mlp(int64_t d, int64_t hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

NodeId Mlp::forward(Ctx& c, NodeId x) const { return fc2.forward(c, c.g.gelu(fc1.forward(c, x))); }

void Mlp::visit(const std::string& prefix, const ParamVisitor& v) {
    fc1.visit(prefix + ".fc1", v);
    fc2.visit(prefix + ".fc2", v);
}

TransformerBlock::TransformerBlock(int64_t d, int heads, int64_t window, int64_t mlp_hidden, Rng& rng)
    : ln1(d), ln2(d), attn(d, heads, window, d, rng), mlp(d, mlp_hidden, rng) {}

NodeId TransformerBlock::forward(Ctx& c, NodeId x, const std::vector<uint8_t>* mask) const {
    const NodeId n1 = ln1.forward(c, x);
    const NodeId h = c.g.add(x, attn.forward(c, n1, n1, mask));
    return c.g.add(h, mlp.forward(c, ln2.forward(c, h)));
}

void TransformerBlock::visit(const std::string& prefix, const ParamVisitor& v) {
    ln1.visit(prefix + ".ln1", v);
    ln2.visit(prefix + ".ln2", v);
    attn.visit(prefix + ".attn", v);
    mlp.visit(prefix + ".mlp", v);
}

}  // namespace snag::nn
