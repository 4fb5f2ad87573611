#pragma once

#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "snag/checkpoint.hpp"
#include "snag/data.hpp"
#include "snag/nn.hpp"

namespace snag::model {

// Token-wise cross-attention with an affine modulation (the default), plain
// cross-attention, or broadcast addition of the mean-pooled sentence
// embedding.
enum class FusionVariant { XAttnAffine, XAttn, Add };
// Late: fuse each pyramid level after video encoding (cacheable encodings).
// Early: fuse once into the projected features before the pyramid.
enum class FusionPlacement { Late, Early };

std::string to_string(FusionVariant v);
std::string to_string(FusionPlacement p);
FusionVariant fusion_variant_from(const std::string& s);
FusionPlacement fusion_placement_from(const std::string& s);

struct ModelConfig {
    int64_t d_model = 32;
    int levels = 3;      // pyramid levels; level l has stride 2^(l-1)
    int64_t window = 9;  // local self-attention window (odd)
    int heads = 4;
    int stem_blocks = 2;  // stride-1 transformer blocks before level 1
    int mlp_ratio = 4;
    int text_layers = 2;
    int64_t max_tokens = 32;
    int64_t d_video_in = 0;
    int64_t d_text_in = 0;
    FusionVariant fusion = FusionVariant::XAttnAffine;
    FusionPlacement placement = FusionPlacement::Late;
    double layer_scale_init = 0.1;  // per-channel fusion scale init
    double cls_prior = 0.01;        // classification-head prior

    int64_t min_snippet_len() const { return int64_t{1} << (levels - 1); }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Named presets ("tiny", "tacos", "mad", "charades"); a "-small" suffix
// divides the embedding width by 4 for desk-scale runs.
ModelConfig preset(const std::string& name, int64_t d_video_in, int64_t d_text_in);

inline int64_t level_stride(int level) { return int64_t{1} << (level - 1); }  // level is 1-based
std::vector<int64_t> level_lengths(int64_t t_w, int levels);

// Multi-scale video representation inside one graph.
struct Pyramid {
    std::vector<NodeId> levels;
    std::vector<int64_t> lengths;
    std::vector<std::vector<uint8_t>> masks;
};

// Detached level values, cacheable across queries of the same snippet.
struct PyramidValues {
    std::vector<Tensor> levels;
    std::vector<int64_t> lengths;
    std::vector<std::vector<uint8_t>> masks;
};

struct HeadOutputs {
    std::vector<NodeId> scores;   // per level (T_l x 1), sigmoid
    std::vector<NodeId> offsets;  // per level (T_l x 2), softplus
};

struct HeadValues {
    std::vector<Tensor> scores;
    std::vector<Tensor> offsets;
};

// Interval decoded from a (level, step, distances) candidate, in the same
// coordinates the step grid lives in. Exact inverse of label assignment.
inline data::MomentInterval decode_offsets(int level, int64_t t, double d_s, double d_e) {
    const double stride = static_cast<double>(level_stride(level));
    return {stride * (static_cast<double>(t) - d_s), stride * (static_cast<double>(t) + d_e)};
}

class GroundingModel {
  public:
    GroundingModel(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    // Query-independent video encoding: identical output for every query of
    // the same snippet, which is what makes caching sound.
    Pyramid encode_video(nn::Ctx& c, const Tensor& features) const;
    NodeId encode_text(nn::Ctx& c, const Tensor& tokens) const;
    Pyramid fuse(nn::Ctx& c, const Pyramid& pyramid, NodeId text) const;
    HeadOutputs heads(nn::Ctx& c, const Pyramid& fused) const;

    HeadOutputs forward(nn::Ctx& c, const Tensor& features, const Tensor& tokens) const;
    // Early-fusion ablation: one affine fusion on the projected features,
    // then the pyramid and heads with no further fusion.
    HeadOutputs forward_early(nn::Ctx& c, const Tensor& features, const Tensor& tokens) const;

    PyramidValues detach(const nn::Ctx& c, const Pyramid& p) const;
    Pyramid wrap_cached(nn::Ctx& c, const PyramidValues& cached) const;
    HeadValues head_values(const nn::Ctx& c, const HeadOutputs& out) const;

    void visit(const nn::ParamVisitor& v);
    std::vector<std::pair<std::string, Tensor*>> parameters();
    int64_t parameter_count();
    // Component split: "encoder", "text", "fusion_heads".
    std::map<std::string, int64_t> parameter_breakdown();

    void save(const std::string& path, const nlohmann::json& extra_meta = {});
    static GroundingModel load(const std::string& path);
    void load_parameters(const std::map<std::string, Tensor>& tensors);

  private:
    struct FusionBlock {
        nn::LayerNorm ln_z, ln_e;
        nn::MultiheadAttention mca;
    };

    NodeId stem(nn::Ctx& c, const Tensor& features) const;
    Pyramid pyramid_from(nn::Ctx& c, NodeId x) const;
    NodeId fuse_level(nn::Ctx& c, NodeId z, NodeId text, const FusionBlock* block) const;
    bool has_mca() const { return cfg_.fusion != FusionVariant::Add; }

    ModelConfig cfg_;
    // encoder
    nn::Linear proj_;
    nn::Conv1d stem_conv1_, stem_conv2_;
    std::vector<nn::TransformerBlock> stem_blocks_;
    std::vector<nn::TransformerBlock> level_blocks_;
    std::vector<nn::DepthwiseConv1d> downsamples_;
    // text
    nn::Linear text_proj_;
    Tensor text_pos_;
    std::vector<nn::TransformerBlock> text_blocks_;
    // fusion (shared MLP + per-channel scales; MCA weights per level)
    std::vector<FusionBlock> fusion_;
    FusionBlock early_fusion_;
    nn::LayerNorm fuse_ln_;
    nn::Mlp fuse_mlp_;
    Tensor fuse_scale_;
    // heads, shared across levels
    nn::Conv1d cls1_, cls2_, cls3_;
    nn::Conv1d reg1_, reg2_, reg3_;
};

}  // namespace snag::model
