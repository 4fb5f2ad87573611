#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "snag/model.hpp"
#include "support/model_check.hpp"

using namespace snag;
using namespace snag::model;

namespace {

ModelConfig tiny_cfg(int64_t d_v = 8, int64_t d_t = 6) {
    ModelConfig c = preset("tiny", d_v, d_t);
    c.d_model = 16;
    c.window = 5;
    return c;
}

Tensor rand_features(Rng& rng, int64_t t, int64_t d) { return rng.normal_tensor({t, d}, 1.0); }

void zero_params_matching(GroundingModel& m, const std::string& needle) {
    m.visit([&](const std::string& name, Tensor& t) {
        if (name.find(needle) != std::string::npos) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        }
    });
}

}  // namespace

TEST_CASE("pyramid level lengths follow the halving rule") {
    CHECK(level_lengths(16, 3) == std::vector<int64_t>{16, 8, 4});
    CHECK(level_lengths(23, 4) == std::vector<int64_t>{23, 12, 6, 3});

    GroundingModel m(tiny_cfg(), 1);
    Rng rng(2);
    Graph g;
    nn::Ctx c(g);
    const Pyramid p = m.encode_video(c, rand_features(rng, 16, 8));
    CHECK(p.lengths == std::vector<int64_t>{16, 8, 4});
    for (int l = 0; l < 3; ++l) {
        CHECK(g.value(p.levels[l]).dim(0) == p.lengths[l]);
        CHECK(g.value(p.levels[l]).dim(1) == 16);
    }
}

TEST_CASE("too-short snippets are rejected") {
    GroundingModel m(tiny_cfg(), 1);
    Rng rng(3);
    Graph g;
    nn::Ctx c(g);
    CHECK_THROWS_AS(m.encode_video(c, rand_features(rng, 3, 8)), ConfigError);
}

TEST_CASE("zeroed residual blocks reduce the pyramid to strided projections") {
    GroundingModel m(tiny_cfg(), 4);
    // Zero every residual branch: attention output and MLP second layer.
    zero_params_matching(m, ".attn.out");
    zero_params_matching(m, ".mlp.fc2");
    Rng rng(5);
    const Tensor feats = rand_features(rng, 16, 8);
    Graph g;
    nn::Ctx c(g);
    const Pyramid p = m.encode_video(c, feats);
    // Downsampling is center-tap depthwise at init, so level l+1 subsamples
    // level l at even indices.
    for (int l = 0; l + 1 < 3; ++l) {
        const Tensor& a = g.value(p.levels[l]);
        const Tensor& b = g.value(p.levels[l + 1]);
        for (int64_t t = 0; t < b.dim(0); ++t)
            for (int64_t d = 0; d < b.dim(1); ++d) CHECK(b.at(t, d) == a.at(2 * t, d));
    }
}

TEST_CASE("video encoding is query-independent and bitwise repeatable") {
    GroundingModel m(tiny_cfg(), 6);
    Rng rng(7);
    const Tensor feats = rand_features(rng, 16, 8);
    Graph g1, g2;
    nn::Ctx c1(g1), c2(g2);
    const Pyramid p1 = m.encode_video(c1, feats);
    const Pyramid p2 = m.encode_video(c2, feats);
    for (int l = 0; l < 3; ++l) {
        const Tensor& a = g1.value(p1.levels[l]);
        const Tensor& b = g2.value(p2.levels[l]);
        REQUIRE(a.shape() == b.shape());
        CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0);
    }
}

TEST_CASE("text encoder output shape and permutation property") {
    GroundingModel m(tiny_cfg(), 8);
    Rng rng(9);
    Graph g;
    nn::Ctx c(g);
    const NodeId e1 = m.encode_text(c, rng.normal_tensor({1, 6}, 1.0));
    CHECK(g.value(e1).shape() == Shape{1, 16});

    // With attention output and positional embeddings zeroed, the encoder is
    // position-wise, so permuting tokens permutes outputs identically.
    zero_params_matching(m, ".attn.out");
    zero_params_matching(m, "text.pos");
    const Tensor tokens = rng.normal_tensor({5, 6}, 1.0);
    Tensor permuted({5, 6});
    const int64_t perm[5] = {3, 0, 4, 2, 1};
    for (int64_t k = 0; k < 5; ++k)
        for (int64_t d = 0; d < 6; ++d) permuted.at(k, d) = tokens.at(perm[k], d);
    Graph ga, gb;
    nn::Ctx ca(ga), cb(gb);
    const Tensor ea = ga.value(m.encode_text(ca, tokens));
    const Tensor eb = gb.value(m.encode_text(cb, permuted));
    for (int64_t k = 0; k < 5; ++k)
        for (int64_t d = 0; d < 16; ++d) CHECK(eb.at(k, d) == ea.at(perm[k], d));
}

TEST_CASE("token count limits are enforced") {
    GroundingModel m(tiny_cfg(), 10);
    Rng rng(11);
    Graph g;
    nn::Ctx c(g);
    CHECK_THROWS_AS(m.encode_text(c, rng.normal_tensor({33, 6}, 1.0)), ConfigError);
    CHECK_THROWS_AS(m.encode_text(c, rng.normal_tensor({4, 7}, 1.0)), ShapeError);
}

TEST_CASE("affine fusion with forced identity transform passes Z through") {
    ModelConfig cfg = tiny_cfg();
    GroundingModel m(cfg, 12);
    // MCA output projection: weights 0, bias = [1..1, 0..0]; MLP branch 0.
    m.visit([&](const std::string& name, Tensor& t) {
        if (name.find(".mca.out.w") != std::string::npos) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        }
        if (name.find(".mca.out.b") != std::string::npos) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = i < cfg.d_model ? 1.0 : 0.0;
        }
    });
    zero_params_matching(m, "fusion.mlp.fc2");
    Rng rng(13);
    Graph g;
    nn::Ctx c(g);
    const Pyramid p = m.encode_video(c, rand_features(rng, 16, 8));
    const NodeId text = m.encode_text(c, rng.normal_tensor({4, 6}, 1.0));
    const Pyramid fused = m.fuse(c, p, text);
    for (int l = 0; l < 3; ++l) {
        const Tensor& z = g.value(p.levels[l]);
        const Tensor& x = g.value(fused.levels[l]);
        for (int64_t i = 0; i < z.size(); ++i) CHECK(x[i] == doctest::Approx(z[i]).epsilon(1e-12));
    }
}

TEST_CASE("all fusion variants preserve pyramid shapes") {
    for (const FusionVariant v : {FusionVariant::XAttnAffine, FusionVariant::XAttn, FusionVariant::Add}) {
        ModelConfig cfg = tiny_cfg();
        cfg.fusion = v;
        GroundingModel m(cfg, 14);
        Rng rng(15);
        Graph g;
        nn::Ctx c(g);
        const Pyramid p = m.encode_video(c, rand_features(rng, 16, 8));
        const NodeId text = m.encode_text(c, rng.normal_tensor({4, 6}, 1.0));
        const Pyramid fused = m.fuse(c, p, text);
        CAPTURE(to_string(v));
        for (int l = 0; l < 3; ++l) {
            CHECK(g.value(fused.levels[l]).shape() == g.value(p.levels[l]).shape());
        }
    }
}

TEST_CASE("heads: zero weights give prior-free p=0.5 and softplus(0) offsets") {
    GroundingModel m(tiny_cfg(), 16);
    zero_params_matching(m, "heads.");
    Rng rng(17);
    Graph g;
    nn::Ctx c(g);
    const Pyramid p = m.encode_video(c, rand_features(rng, 16, 8));
    const HeadOutputs out = m.heads(c, p);
    for (int l = 0; l < 3; ++l) {
        const Tensor& s = g.value(out.scores[l]);
        const Tensor& o = g.value(out.offsets[l]);
        CHECK(s.dim(0) == p.lengths[l]);
        CHECK(o.dim(0) == p.lengths[l]);
        CHECK(o.dim(1) == 2);
        for (int64_t i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(0.5).epsilon(1e-12));
        for (int64_t i = 0; i < o.size(); ++i)
            CHECK(o[i] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
}

TEST_CASE("head scores stay in (0,1), offsets stay nonnegative") {
    GroundingModel m(tiny_cfg(), 18);
    Rng rng(19);
    Graph g;
    nn::Ctx c(g);
    const HeadOutputs out = m.forward(c, rand_features(rng, 16, 8), rng.normal_tensor({5, 6}, 1.0));
    for (int l = 0; l < 3; ++l) {
        const Tensor& s = g.value(out.scores[l]);
        for (int64_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] > 0.0);
            CHECK(s[i] < 1.0);
        }
        const Tensor& o = g.value(out.offsets[l]);
        for (int64_t i = 0; i < o.size(); ++i) CHECK(o[i] >= 0.0);
    }
}

TEST_CASE("encoder gradients match finite differences") {
    GroundingModel m(tiny_cfg(), 20);
    snag::test::randomize_params(m, 20);
    Rng rng(21);
    const Tensor feats = rand_features(rng, 16, 8);
    auto res = snag::test::model_grad_check(
        m,
        [&](nn::Ctx& c) {
            const Pyramid p = m.encode_video(c, feats);
            model::HeadOutputs fake;
            fake.scores = p.levels;  // reuse the mixer over raw levels
            return snag::test::head_objective(c, fake);
        },
        3, 1);
    CHECK(res.components > 100);
    CHECK(res.rel_error < 1e-4);
}

TEST_CASE("text encoder gradients match finite differences") {
    GroundingModel m(tiny_cfg(), 22);
    snag::test::randomize_params(m, 22);
    Rng rng(23);
    const Tensor tokens = rng.normal_tensor({5, 6}, 1.0);
    auto res = snag::test::model_grad_check(
        m,
        [&](nn::Ctx& c) {
            model::HeadOutputs fake;
            fake.scores.push_back(m.encode_text(c, tokens));
            return snag::test::head_objective(c, fake);
        },
        4, 2);
    CHECK(res.rel_error < 1e-4);
}

TEST_CASE("fusion gradients match finite differences for every variant") {
    Rng rng(25);
    const Tensor feats = rand_features(rng, 16, 8);
    const Tensor tokens = rng.normal_tensor({4, 6}, 1.0);
    for (const FusionVariant v : {FusionVariant::XAttnAffine, FusionVariant::XAttn, FusionVariant::Add}) {
        ModelConfig cfg = tiny_cfg();
        cfg.fusion = v;
        GroundingModel m(cfg, 26);
        snag::test::randomize_params(m, 26);
        auto res = snag::test::model_grad_check(
            m, [&](nn::Ctx& c) { return snag::test::head_objective(c, m.forward(c, feats, tokens)); }, 2,
            3);
        CAPTURE(to_string(v));
        CHECK(res.rel_error < 1e-4);
    }
}

TEST_CASE("early-fusion ablation: shapes match and per-query cost exceeds late fusion") {
    ModelConfig late_cfg = tiny_cfg();
    GroundingModel late(late_cfg, 28);
    ModelConfig early_cfg = tiny_cfg();
    early_cfg.placement = FusionPlacement::Early;
    GroundingModel early(early_cfg, 28);
    Rng rng(29);
    const Tensor feats = rand_features(rng, 16, 8);
    const Tensor tokens = rng.normal_tensor({4, 6}, 1.0);

    Graph ge;
    nn::Ctx ce(ge);
    const HeadOutputs eo = early.forward_early(ce, feats, tokens);
    const int64_t early_macs = ge.macs();

    Graph gl;
    nn::Ctx cl(gl);
    const Pyramid p = late.encode_video(cl, feats);
    const int64_t encoder_macs = gl.macs();
    const NodeId text = late.encode_text(cl, tokens);
    const HeadOutputs lo = late.heads(cl, late.fuse(cl, p, text));
    const int64_t per_query_macs = gl.macs() - encoder_macs;  // text + fuse + heads

    for (int l = 0; l < 3; ++l) {
        CHECK(ge.value(eo.scores[l]).shape() == gl.value(lo.scores[l]).shape());
        CHECK(ge.value(eo.offsets[l]).shape() == gl.value(lo.offsets[l]).shape());
    }
    CHECK(early_macs > per_query_macs);

    snag::test::randomize_params(early, 29);
    auto res = snag::test::model_grad_check(
        early, [&](nn::Ctx& c) { return snag::test::head_objective(c, early.forward_early(c, feats, tokens)); },
        2, 4);
    CHECK(res.rel_error < 1e-4);
}

TEST_CASE("cached pyramids reproduce the direct pipeline bitwise") {
    GroundingModel m(tiny_cfg(), 30);
    Rng rng(31);
    const Tensor feats = rand_features(rng, 16, 8);
    const Tensor tokens = rng.normal_tensor({4, 6}, 1.0);

    Graph g1;
    nn::Ctx c1(g1);
    const HeadOutputs direct = m.forward(c1, feats, tokens);

    PyramidValues cache;
    {
        Graph ge;
        nn::Ctx ce(ge);
        cache = m.detach(ce, m.encode_video(ce, feats));
    }
    Graph g2;
    nn::Ctx c2(g2);
    const Pyramid wrapped = m.wrap_cached(c2, cache);
    const HeadOutputs cached = m.heads(c2, m.fuse(c2, wrapped, m.encode_text(c2, tokens)));

    for (int l = 0; l < 3; ++l) {
        const Tensor& a = g1.value(direct.scores[l]);
        const Tensor& b = g2.value(cached.scores[l]);
        REQUIRE(a.shape() == b.shape());
        CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0);
        const Tensor& ao = g1.value(direct.offsets[l]);
        const Tensor& bo = g2.value(cached.offsets[l]);
        CHECK(std::memcmp(ao.data(), bo.data(), sizeof(double) * static_cast<size_t>(ao.size())) == 0);
    }
}

TEST_CASE("checkpoint round-trip preserves parameters and forwards") {
    namespace fs = std::filesystem;
    GroundingModel m(tiny_cfg(), 32);
    Rng rng(33);
    const Tensor feats = rand_features(rng, 16, 8);
    const Tensor tokens = rng.normal_tensor({4, 6}, 1.0);
    const fs::path path = fs::temp_directory_path() / "snag_test_model.ckpt";
    m.save(path.string(), {{"note", "test"}});
    GroundingModel back = GroundingModel::load(path.string());
    fs::remove(path);

    auto pa = m.parameters();
    auto pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        REQUIRE(pa[i].second->shape() == pb[i].second->shape());
        CHECK(std::memcmp(pa[i].second->data(), pb[i].second->data(),
                          sizeof(double) * static_cast<size_t>(pa[i].second->size())) == 0);
    }

    Graph g1, g2;
    nn::Ctx c1(g1), c2(g2);
    const HeadOutputs o1 = m.forward(c1, feats, tokens);
    const HeadOutputs o2 = back.forward(c2, feats, tokens);
    const Tensor& s1 = g1.value(o1.scores[0]);
    const Tensor& s2 = g2.value(o2.scores[0]);
    CHECK(std::memcmp(s1.data(), s2.data(), sizeof(double) * static_cast<size_t>(s1.size())) == 0);
}

TEST_CASE("parameter breakdown covers every parameter") {
    GroundingModel m(tiny_cfg(), 34);
    auto breakdown = m.parameter_breakdown();
    CHECK(breakdown["encoder"] > 0);
    CHECK(breakdown["text"] > 0);
    CHECK(breakdown["fusion_heads"] > 0);
    CHECK(breakdown["encoder"] + breakdown["text"] + breakdown["fusion_heads"] == m.parameter_count());
}

TEST_CASE("presets match the published sizing table") {
    const ModelConfig tacos = preset("tacos", 100, 50);
    CHECK(tacos.d_model == 128);
    CHECK(tacos.window == 19);
    CHECK(tacos.stem_blocks + tacos.levels == 8);
    CHECK(tacos.text_layers == 5);
    const ModelConfig mad = preset("mad", 100, 50);
    CHECK(mad.d_model == 512);
    CHECK(mad.window == 17);
    CHECK(mad.stem_blocks + mad.levels == 9);
    CHECK(mad.text_layers == 1);
    const ModelConfig charades = preset("charades", 100, 50);
    CHECK(charades.d_model == 256);
    CHECK(charades.window == 5);
    CHECK(charades.stem_blocks + charades.levels == 7);
    const ModelConfig small = preset("tacos-small", 100, 50);
    CHECK(small.d_model == 32);
    CHECK(small.window == 19);
    CHECK_THROWS_AS(preset("nope", 1, 1), ConfigError);
}
