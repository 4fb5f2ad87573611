#include "snag/model.hpp"

#include <cmath>
#include <numeric>

namespace snag::model {

using nlohmann::json;

std::string to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::XAttnAffine: return "xattn_affine";
        case FusionVariant::XAttn: return "xattn";
        case FusionVariant::Add: return "add";
    }
    return "?";
}

std::string to_string(FusionPlacement p) {
    return p == FusionPlacement::Late ? "late" : "early";
}

FusionVariant fusion_variant_from(const std::string& s) {
    if (s == "xattn_affine") return FusionVariant::XAttnAffine;
    if (s == "xattn") return FusionVariant::XAttn;
    if (s == "add") return FusionVariant::Add;
    throw ConfigError("unknown fusion variant: " + s);
}

FusionPlacement fusion_placement_from(const std::string& s) {
    if (s == "late") return FusionPlacement::Late;
    if (s == "early") return FusionPlacement::Early;
    throw ConfigError("unknown fusion placement: " + s);
}

void ModelConfig::validate() const {
    if (d_model < 1 || heads < 1 || d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " must be a positive multiple of heads " +
                          std::to_string(heads));
    }
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (window < 1 || window % 2 == 0) throw ConfigError("window must be odd and >= 1");
    if (stem_blocks < 0 || mlp_ratio < 1 || text_layers < 0) throw ConfigError("bad encoder sizes");
    if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (d_video_in < 1 || d_text_in < 1) throw ConfigError("input dims must be set");
    if (!(cls_prior > 0.0) || !(cls_prior < 1.0)) throw ConfigError("cls_prior must be in (0,1)");
}

json ModelConfig::to_json() const {
    return json{{"d_model", d_model},
                {"levels", levels},
                {"window", window},
                {"heads", heads},
                {"stem_blocks", stem_blocks},
                {"mlp_ratio", mlp_ratio},
                {"text_layers", text_layers},
                {"max_tokens", max_tokens},
                {"d_video_in", d_video_in},
                {"d_text_in", d_text_in},
                {"fusion", to_string(fusion)},
                {"placement", to_string(placement)},
                {"layer_scale_init", layer_scale_init},
                {"cls_prior", cls_prior}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int64_t>();
    c.levels = j.at("levels").get<int>();
    c.window = j.at("window").get<int64_t>();
    c.heads = j.at("heads").get<int>();
    c.stem_blocks = j.at("stem_blocks").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.text_layers = j.at("text_layers").get<int>();
    c.max_tokens = j.at("max_tokens").get<int64_t>();
    c.d_video_in = j.at("d_video_in").get<int64_t>();
    c.d_text_in = j.at("d_text_in").get<int64_t>();
    c.fusion = fusion_variant_from(j.at("fusion").get<std::string>());
    c.placement = fusion_placement_from(j.at("placement").get<std::string>());
    c.layer_scale_init = j.at("layer_scale_init").get<double>();
    c.cls_prior = j.at("cls_prior").get<double>();
    return c;
}

ModelConfig preset(const std::string& name, int64_t d_video_in, int64_t d_text_in) {
    std::string base = name;
    bool small = false;
    if (const auto pos = name.rfind("-small"); pos != std::string::npos && pos == name.size() - 6) {
        base = name.substr(0, pos);
        small = true;
    }
    ModelConfig c;
    if (base == "tiny") {
        c.d_model = 32;
        c.levels = 3;
        c.window = 9;
        c.text_layers = 2;
    } else if (base == "tacos") {
        c.d_model = 128;
        c.levels = 6;  // 8 video layers = 2 stem + 6
        c.window = 19;
        c.text_layers = 5;
    } else if (base == "mad") {
        c.d_model = 512;
        c.levels = 7;  // 9 video layers
        c.window = 17;
        c.text_layers = 1;
    } else if (base == "charades") {
        c.d_model = 256;
        c.levels = 5;  // 7 video layers
        c.window = 5;
        c.text_layers = 5;
    } else {
        throw ConfigError("unknown preset: " + name);
    }
    if (small) c.d_model = std::max<int64_t>(16, c.d_model / 4);
    c.d_video_in = d_video_in;
    c.d_text_in = d_text_in;
    return c;
}

std::vector<int64_t> level_lengths(int64_t t_w, int levels) {
    std::vector<int64_t> out;
    int64_t len = t_w;
    for (int l = 1; l <= levels; ++l) {
        out.push_back(len);
        len = (len + 1) / 2;
    }
    return out;
}

GroundingModel::GroundingModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0x6d0de1));
    const int64_t d = cfg_.d_model;
    const int64_t hidden = d * cfg_.mlp_ratio;

    proj_ = nn::Linear(cfg_.d_video_in, d, rng);
    stem_conv1_ = nn::Conv1d(3, d, d, 1, rng);
    stem_conv2_ = nn::Conv1d(3, d, d, 1, rng);
    for (int i = 0; i < cfg_.stem_blocks; ++i)
        stem_blocks_.emplace_back(d, cfg_.heads, cfg_.window, hidden, rng);
    for (int l = 0; l < cfg_.levels; ++l)
        level_blocks_.emplace_back(d, cfg_.heads, cfg_.window, hidden, rng);
    for (int l = 0; l + 1 < cfg_.levels; ++l) downsamples_.emplace_back(3, d, 2);

    text_proj_ = nn::Linear(cfg_.d_text_in, d, rng);
    text_pos_ = rng.trunc_normal_tensor({cfg_.max_tokens, d}, 0.02);
    for (int i = 0; i < cfg_.text_layers; ++i) text_blocks_.emplace_back(d, cfg_.heads, 0, hidden, rng);

    const int64_t mca_out = cfg_.fusion == FusionVariant::XAttnAffine ? 2 * d : d;
    auto make_fusion_block = [&](FusionBlock& b) {
        b.ln_z = nn::LayerNorm(d);
        b.ln_e = nn::LayerNorm(d);
        if (has_mca()) b.mca = nn::MultiheadAttention(d, cfg_.heads, 0, mca_out, rng);
    };
    if (cfg_.placement == FusionPlacement::Late) {
        fusion_.resize(static_cast<size_t>(cfg_.levels));
        for (auto& b : fusion_) make_fusion_block(b);
    } else {
        make_fusion_block(early_fusion_);
    }
    fuse_ln_ = nn::LayerNorm(d);
    fuse_mlp_ = nn::Mlp(d, hidden, rng);
    fuse_scale_ = Tensor::full({d}, cfg_.layer_scale_init);

    cls1_ = nn::Conv1d(3, d, d, 1, rng);
    cls2_ = nn::Conv1d(3, d, d, 1, rng);
    cls3_ = nn::Conv1d(3, d, 1, 1, rng);
    // Bias the classification logits toward the prior so focal loss starts
    // from a calm background.
    cls3_.b[0] = -std::log((1.0 - cfg_.cls_prior) / cfg_.cls_prior);
    reg1_ = nn::Conv1d(3, d, d, 1, rng);
    reg2_ = nn::Conv1d(3, d, d, 1, rng);
    reg3_ = nn::Conv1d(3, d, 2, 1, rng);
}

NodeId GroundingModel::stem(nn::Ctx& c, const Tensor& features) const {
    if (features.ndim() != 2 || features.dim(1) != cfg_.d_video_in) {
        throw ShapeError("encode_video: expected (T x " + std::to_string(cfg_.d_video_in) +
                         ") features, got " + shape_str(features.shape()));
    }
    if (features.dim(0) < cfg_.min_snippet_len()) {
        throw ConfigError("snippet length " + std::to_string(features.dim(0)) + " too short for " +
                          std::to_string(cfg_.levels) + " pyramid levels (need >= " +
                          std::to_string(cfg_.min_snippet_len()) + ")");
    }
    NodeId x = proj_.forward(c, c.g.constant(features));
    x = c.g.relu(stem_conv1_.forward(c, x));
    x = c.g.relu(stem_conv2_.forward(c, x));
    return x;
}

Pyramid GroundingModel::pyramid_from(nn::Ctx& c, NodeId x) const {
    for (const auto& blk : stem_blocks_) x = blk.forward(c, x, nullptr);
    Pyramid p;
    for (int l = 0; l < cfg_.levels; ++l) {
        if (l > 0) x = downsamples_[static_cast<size_t>(l - 1)].forward(c, x);
        x = level_blocks_[static_cast<size_t>(l)].forward(c, x, nullptr);
        const int64_t len = c.g.value(x).dim(0);
        p.levels.push_back(x);
        p.lengths.push_back(len);
        p.masks.emplace_back(static_cast<size_t>(len), uint8_t{1});
    }
    return p;
}

Pyramid GroundingModel::encode_video(nn::Ctx& c, const Tensor& features) const {
    return pyramid_from(c, stem(c, features));
}

NodeId GroundingModel::encode_text(nn::Ctx& c, const Tensor& tokens) const {
    if (tokens.ndim() != 2 || tokens.dim(1) != cfg_.d_text_in) {
        throw ShapeError("encode_text: expected (K x " + std::to_string(cfg_.d_text_in) +
                         ") tokens, got " + shape_str(tokens.shape()));
    }
    const int64_t K = tokens.dim(0);
    if (K < 1 || K > cfg_.max_tokens) {
        throw ConfigError("token count " + std::to_string(K) + " outside [1, " +
                          std::to_string(cfg_.max_tokens) + "]");
    }
    NodeId x = text_proj_.forward(c, c.g.constant(tokens));
    std::vector<int64_t> idx(static_cast<size_t>(K));
    std::iota(idx.begin(), idx.end(), int64_t{0});
    x = c.g.add(x, c.g.gather_rows(c.use(text_pos_), idx));
    for (const auto& blk : text_blocks_) x = blk.forward(c, x, nullptr);
    return x;
}

NodeId GroundingModel::fuse_level(nn::Ctx& c, NodeId z, NodeId text, const FusionBlock* block) const {
    Graph& g = c.g;
    const int64_t d = cfg_.d_model;
    NodeId modulated;
    switch (cfg_.fusion) {
        case FusionVariant::XAttnAffine: {
            const NodeId wb = block->mca.forward(c, block->ln_z.forward(c, z),
                                                 block->ln_e.forward(c, text), nullptr);
            const NodeId w = g.slice_cols(wb, 0, d);
            const NodeId b = g.slice_cols(wb, d, 2 * d);
            modulated = g.add(g.mul(w, z), b);
            const NodeId mlp_out = fuse_mlp_.forward(c, fuse_ln_.forward(c, modulated));
            return g.add(g.mul_row(mlp_out, c.use(fuse_scale_)), modulated);
        }
        case FusionVariant::XAttn: {
            const NodeId attn = block->mca.forward(c, block->ln_z.forward(c, z),
                                                   block->ln_e.forward(c, text), nullptr);
            modulated = g.add(z, attn);
            return g.add(modulated, fuse_mlp_.forward(c, fuse_ln_.forward(c, modulated)));
        }
        case FusionVariant::Add: {
            modulated = g.add_row(z, g.mean_rows(text));
            return g.add(modulated, fuse_mlp_.forward(c, fuse_ln_.forward(c, modulated)));
        }
    }
    throw ConfigError("unreachable fusion variant");
}

Pyramid GroundingModel::fuse(nn::Ctx& c, const Pyramid& pyramid, NodeId text) const {
    if (cfg_.placement != FusionPlacement::Late) {
        throw ConfigError("fuse() requires late placement; early models fuse inside forward_early");
    }
    if (pyramid.levels.size() != static_cast<size_t>(cfg_.levels)) {
        throw ConfigError("pyramid has " + std::to_string(pyramid.levels.size()) + " levels, model expects " +
                          std::to_string(cfg_.levels));
    }
    Pyramid out;
    out.lengths = pyramid.lengths;
    out.masks = pyramid.masks;
    for (int l = 0; l < cfg_.levels; ++l) {
        out.levels.push_back(
            fuse_level(c, pyramid.levels[static_cast<size_t>(l)], text, &fusion_[static_cast<size_t>(l)]));
    }
    return out;
}

HeadOutputs GroundingModel::heads(nn::Ctx& c, const Pyramid& fused) const {
    Graph& g = c.g;
    HeadOutputs out;
    for (const NodeId z : fused.levels) {
        NodeId h = g.relu(cls1_.forward(c, z));
        h = g.relu(cls2_.forward(c, h));
        out.scores.push_back(g.sigmoid(cls3_.forward(c, h)));
        NodeId r = g.relu(reg1_.forward(c, z));
        r = g.relu(reg2_.forward(c, r));
        out.offsets.push_back(g.softplus(reg3_.forward(c, r)));
    }
    return out;
}

HeadOutputs GroundingModel::forward(nn::Ctx& c, const Tensor& features, const Tensor& tokens) const {
    const Pyramid p = encode_video(c, features);
    const NodeId text = encode_text(c, tokens);
    return heads(c, fuse(c, p, text));
}

HeadOutputs GroundingModel::forward_early(nn::Ctx& c, const Tensor& features, const Tensor& tokens) const {
    if (cfg_.placement != FusionPlacement::Early) {
        throw ConfigError("forward_early requires an early-placement model");
    }
    const NodeId text = encode_text(c, tokens);
    NodeId x = stem(c, features);
    x = fuse_level(c, x, text, &early_fusion_);
    return heads(c, pyramid_from(c, x));
}

PyramidValues GroundingModel::detach(const nn::Ctx& c, const Pyramid& p) const {
    PyramidValues v;
    v.lengths = p.lengths;
    v.masks = p.masks;
    for (const NodeId id : p.levels) v.levels.push_back(const_cast<Graph&>(c.g).value(id));
    return v;
}

Pyramid GroundingModel::wrap_cached(nn::Ctx& c, const PyramidValues& cached) const {
    Pyramid p;
    p.lengths = cached.lengths;
    p.masks = cached.masks;
    for (const Tensor& t : cached.levels) p.levels.push_back(c.g.constant(t));
    return p;
}

HeadValues GroundingModel::head_values(const nn::Ctx& c, const HeadOutputs& out) const {
    HeadValues v;
    for (const NodeId id : out.scores) v.scores.push_back(const_cast<Graph&>(c.g).value(id));
    for (const NodeId id : out.offsets) v.offsets.push_back(const_cast<Graph&>(c.g).value(id));
    return v;
}

void GroundingModel::visit(const nn::ParamVisitor& v) {
    proj_.visit("encoder.proj", v);
    stem_conv1_.visit("encoder.conv1", v);
    stem_conv2_.visit("encoder.conv2", v);
    for (size_t i = 0; i < stem_blocks_.size(); ++i)
        stem_blocks_[i].visit("encoder.stem" + std::to_string(i), v);
    for (size_t i = 0; i < level_blocks_.size(); ++i)
        level_blocks_[i].visit("encoder.level" + std::to_string(i), v);
    for (size_t i = 0; i < downsamples_.size(); ++i)
        downsamples_[i].visit("encoder.down" + std::to_string(i), v);

    text_proj_.visit("text.proj", v);
    v("text.pos", text_pos_);
    for (size_t i = 0; i < text_blocks_.size(); ++i) text_blocks_[i].visit("text.block" + std::to_string(i), v);

    auto visit_fusion_block = [&](FusionBlock& b, const std::string& prefix) {
        b.ln_z.visit(prefix + ".ln_z", v);
        b.ln_e.visit(prefix + ".ln_e", v);
        if (has_mca()) b.mca.visit(prefix + ".mca", v);
    };
    if (cfg_.placement == FusionPlacement::Late) {
        for (size_t i = 0; i < fusion_.size(); ++i)
            visit_fusion_block(fusion_[i], "fusion.level" + std::to_string(i));
    } else {
        visit_fusion_block(early_fusion_, "fusion.early");
    }
    fuse_ln_.visit("fusion.ln", v);
    fuse_mlp_.visit("fusion.mlp", v);
    v("fusion.scale", fuse_scale_);

    cls1_.visit("heads.cls1", v);
    cls2_.visit("heads.cls2", v);
    cls3_.visit("heads.cls3", v);
    reg1_.visit("heads.reg1", v);
    reg2_.visit("heads.reg2", v);
    reg3_.visit("heads.reg3", v);
}

std::vector<std::pair<std::string, Tensor*>> GroundingModel::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

int64_t GroundingModel::parameter_count() {
    int64_t n = 0;
    visit([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
}

std::map<std::string, int64_t> GroundingModel::parameter_breakdown() {
    std::map<std::string, int64_t> out{{"encoder", 0}, {"text", 0}, {"fusion_heads", 0}};
    visit([&](const std::string& name, Tensor& t) {
        if (name.rfind("encoder.", 0) == 0) {
            out["encoder"] += t.size();
        } else if (name.rfind("text.", 0) == 0) {
            out["text"] += t.size();
        } else {
            out["fusion_heads"] += t.size();
        }
    });
    return out;
}

void GroundingModel::save(const std::string& path, const json& extra_meta) {
    json meta;
    meta["model"] = cfg_.to_json();
    if (!extra_meta.is_null() && !extra_meta.empty()) meta["run"] = extra_meta;
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    visit([&](const std::string& name, Tensor& t) { tensors.emplace_back(name, &t); });
    save_checkpoint(path, meta, tensors);
}

GroundingModel GroundingModel::load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    GroundingModel m(ModelConfig::from_json(ckpt.meta.at("model")), 0);
    m.load_parameters(ckpt.tensors);
    return m;
}

void GroundingModel::load_parameters(const std::map<std::string, Tensor>& tensors) {
    size_t used = 0;
    visit([&](const std::string& name, Tensor& t) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("checkpoint is missing parameter " + name);
        if (it->second.shape() != t.shape()) {
            throw IoError("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape()) +
                          ", model expects " + shape_str(t.shape()));
        }
        t = it->second;
        ++used;
    });
    if (used != tensors.size()) {
        throw IoError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model uses " +
                      std::to_string(used));
    }
}

}  // namespace snag::model
