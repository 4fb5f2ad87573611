#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "snag/data.hpp"

using namespace snag;
using namespace snag::data;
namespace fs = std::filesystem;

namespace {

double tiou_ref(const MomentInterval& a, const MomentInterval& b) {
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
    return uni > 0.0 ? inter / uni : 0.0;
}

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("snag_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

bool same_corpus(const Corpus& a, const Corpus& b) {
    if (a.videos.size() != b.videos.size() || a.queries.size() != b.queries.size()) return false;
    for (size_t i = 0; i < a.videos.size(); ++i) {
        const auto& va = a.videos[i];
        const auto& vb = b.videos[i];
        if (va.video_id != vb.video_id || va.features.shape() != vb.features.shape()) return false;
        if (std::memcmp(va.features.data(), vb.features.data(),
                        sizeof(double) * static_cast<size_t>(va.features.size())) != 0)
            return false;
    }
    for (size_t i = 0; i < a.queries.size(); ++i) {
        const auto& qa = a.queries[i];
        const auto& qb = b.queries[i];
        if (qa.query_id != qb.query_id || qa.video_id != qb.video_id) return false;
        if (qa.target.start != qb.target.start || qa.target.end != qb.target.end) return false;
        if (qa.tokens.shape() != qb.tokens.shape()) return false;
        if (std::memcmp(qa.tokens.data(), qb.tokens.data(),
                        sizeof(double) * static_cast<size_t>(qa.tokens.size())) != 0)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("generator is deterministic under seed") {
    GenConfig cfg;
    cfg.seed = 0;
    cfg.n_videos = 4;
    const Corpus a = generate_synthetic_corpus(cfg);
    const Corpus b = generate_synthetic_corpus(cfg);
    CHECK(same_corpus(a, b));
    cfg.seed = 1;
    const Corpus c = generate_synthetic_corpus(cfg);
    CHECK_FALSE(same_corpus(a, c));
}

TEST_CASE("generator rejects degenerate ranges") {
    GenConfig cfg;
    cfg.t_min = 100;
    cfg.t_max = 50;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);
    GenConfig cfg2;
    cfg2.snr = 0.0;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg2), ConfigError);
    GenConfig cfg3;
    cfg3.queries_min = 3;
    cfg3.queries_max = 1;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg3), ConfigError);
}

TEST_CASE("zero queries per video yields an empty query set") {
    GenConfig cfg;
    cfg.queries_min = 0;
    cfg.queries_max = 0;
    cfg.n_videos = 3;
    const Corpus c = generate_synthetic_corpus(cfg);
    CHECK(c.queries.empty());
    for (const auto& v : c.videos) {
        for (const Snippet& s : enumerate_snippets(v, 32, 32)) {
            CHECK(valid_queries_for(s, c).empty());
        }
    }
}

TEST_CASE("high-snr corpus is solvable by brute-force template matching") {
    GenConfig cfg;
    cfg.seed = 3;
    cfg.n_videos = 1;
    cfg.t_min = cfg.t_max = 128;
    cfg.queries_min = cfg.queries_max = 3;
    cfg.snr = 1e6;
    cfg.d_v = 8;
    cfg.d_t = 16;
    cfg.len_min = 24.0;  // long enough that integer-grid planting keeps tIoU > 0.9
    cfg.len_max = 32.0;
    const Corpus c = generate_synthetic_corpus(cfg);
    REQUIRE(c.queries.size() == 3);
    const FeatureSequence& video = c.videos.front();
    const int64_t T = video.T();

    // Brute-force matched filter: the planted event is a unit vector over
    // the moment, so ||sum over window|| / sqrt(len) peaks exactly at the
    // planted window. Greedily keep the top-scoring disjoint windows.
    struct Cand {
        int64_t s, e;
        double score;
    };
    std::vector<Cand> cands;
    for (int64_t s = 0; s < T; ++s) {
        for (int64_t len = 2; len <= 40 && s + len <= T; ++len) {
            Tensor m({video.d_v()});
            for (int64_t t = s; t < s + len; ++t)
                for (int64_t d = 0; d < video.d_v(); ++d) m[d] += video.features.at(t, d);
            double n2 = 0.0;
            for (int64_t d = 0; d < video.d_v(); ++d) n2 += m[d] * m[d];
            cands.push_back({s, s + len, std::sqrt(n2 / static_cast<double>(len))});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    std::vector<Cand> picked;
    for (const Cand& c2 : cands) {
        bool overlaps = false;
        for (const Cand& p : picked)
            if (std::max(p.s, c2.s) < std::min(p.e, c2.e)) overlaps = true;
        if (!overlaps) picked.push_back(c2);
        if (picked.size() == c.queries.size()) break;
    }
    REQUIRE(picked.size() == c.queries.size());

    // Every planted moment is localized with tIoU > 0.9.
    for (const QueryTokens& q : c.queries) {
        double best = 0.0;
        for (const Cand& p : picked) {
            best = std::max(best, tiou_ref(q.target, MomentInterval{static_cast<double>(p.s),
                                                                    static_cast<double>(p.e)}));
        }
        CHECK(best > 0.9);
    }

    // The token side carries the association signal: tokens of one query
    // agree with each other far more than token means of different queries.
    auto token_mean = [](const QueryTokens& q) {
        Tensor m({q.tokens.dim(1)});
        for (int64_t k = 0; k < q.K(); ++k)
            for (int64_t d = 0; d < q.tokens.dim(1); ++d) m[d] += q.tokens.at(k, d) / double(q.K());
        return m;
    };
    for (size_t i = 0; i < c.queries.size(); ++i) {
        const Tensor mi = token_mean(c.queries[i]);
        for (size_t j = i + 1; j < c.queries.size(); ++j) {
            const Tensor mj = token_mean(c.queries[j]);
            double diff = 0.0;
            for (int64_t d = 0; d < mi.size(); ++d) diff += (mi[d] - mj[d]) * (mi[d] - mj[d]);
            CHECK(std::sqrt(diff) > 0.5);  // distinct events project apart
        }
        double spread = 0.0;
        for (int64_t k = 0; k < c.queries[i].K(); ++k)
            for (int64_t d = 0; d < mi.size(); ++d) {
                const double delta = c.queries[i].tokens.at(k, d) - mi[d];
                spread += delta * delta;
            }
        CHECK(std::sqrt(spread) < 1e-3);  // within-query tokens agree at high snr
    }
}

TEST_CASE("snippet enumeration matches the stated grids") {
    FeatureSequence v;
    v.video_id = "v0";

    v.features = Tensor({10, 2});
    auto s1 = enumerate_snippets(v, 10, 10);
    REQUIRE(s1.size() == 1);
    CHECK(s1[0].offset == 0);
    CHECK(s1[0].length == 10);

    v.features = Tensor({20, 2});
    auto s2 = enumerate_snippets(v, 10, 5);
    REQUIRE(s2.size() == 3);
    CHECK(s2[0].offset == 0);
    CHECK(s2[1].offset == 5);
    CHECK(s2[2].offset == 10);

    v.features = Tensor({23, 2});
    auto s3 = enumerate_snippets(v, 10, 10);
    REQUIRE(s3.size() == 3);
    CHECK(s3[0].offset == 0);
    CHECK(s3[1].offset == 10);
    CHECK(s3[2].offset == 13);
}

TEST_CASE("snippet enumeration covers every step, windows stay in range") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const int64_t T = 1 + rng.uniform_int(200);
        const int64_t tw = 1 + rng.uniform_int(64);
        const int64_t stride = 1 + rng.uniform_int(tw);
        FeatureSequence v;
        v.video_id = "v0";
        v.features = Tensor({T, 1});
        std::vector<int> covered(static_cast<size_t>(T), 0);
        for (const Snippet& s : enumerate_snippets(v, tw, stride)) {
            CHECK(s.offset >= 0);
            CHECK(s.offset + s.length <= T);
            CHECK(s.length >= 1);
            for (int64_t t = s.offset; t < s.offset + s.length; ++t) covered[static_cast<size_t>(t)]++;
        }
        for (int64_t t = 0; t < T; ++t) CHECK(covered[static_cast<size_t>(t)] > 0);
    }
}

TEST_CASE("valid queries require full containment") {
    Corpus c;
    FeatureSequence v;
    v.video_id = "v0";
    v.features = Tensor({20, 2});
    c.videos.push_back(std::move(v));
    QueryTokens inside;
    inside.query_id = "q0";
    inside.video_id = "v0";
    inside.tokens = Tensor({2, 3});
    inside.target = {2.0, 5.0};
    QueryTokens straddling = inside;
    straddling.query_id = "q1";
    straddling.target = {8.0, 12.0};
    c.queries.push_back(inside);
    c.queries.push_back(straddling);

    const Snippet s{"v0", 0, 10};
    auto valid = valid_queries_for(s, c);
    REQUIRE(valid.size() == 1);
    CHECK(valid[0]->query_id == "q0");

    // Monotone: enlarging the snippet never drops a valid query.
    const Snippet bigger{"v0", 0, 14};
    auto valid2 = valid_queries_for(bigger, c);
    CHECK(valid2.size() == 2);
}

TEST_CASE("per-snippet valid sets union to the brute-force triplet set") {
    GenConfig cfg;
    cfg.seed = 5;
    cfg.n_videos = 4;
    cfg.t_min = 40;
    cfg.t_max = 90;
    const Corpus c = generate_synthetic_corpus(cfg);
    const int64_t tw = 32, stride = 16;

    std::set<std::pair<std::string, std::string>> via_snippets;  // (snippet key, query)
    std::set<std::pair<std::string, std::string>> brute;
    for (const FeatureSequence& v : c.videos) {
        for (const Snippet& s : enumerate_snippets(v, tw, stride)) {
            const std::string key = v.video_id + "@" + std::to_string(s.offset);
            for (const QueryTokens* q : valid_queries_for(s, c)) via_snippets.insert({key, q->query_id});
            for (const QueryTokens& q : c.queries) {
                if (q.video_id == v.video_id && static_cast<double>(s.offset) <= q.target.start &&
                    q.target.end <= static_cast<double>(s.offset + s.length)) {
                    brute.insert({key, q.query_id});
                }
            }
        }
    }
    CHECK(via_snippets == brute);
}

TEST_CASE("corpus round-trips losslessly through disk") {
    GenConfig cfg;
    cfg.seed = 9;
    cfg.n_videos = 3;
    const Corpus c = generate_synthetic_corpus(cfg);
    const fs::path dir = temp_dir("roundtrip");
    save_corpus(c, dir.string());
    const Corpus back = load_corpus((dir / "manifest.json").string());
    CHECK(same_corpus(c, back));
    // And a second bounce stays identical.
    const fs::path dir2 = temp_dir("roundtrip2");
    save_corpus(back, dir2.string());
    CHECK(same_corpus(back, load_corpus((dir2 / "manifest.json").string())));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("loader errors name the offending record") {
    GenConfig cfg;
    cfg.seed = 11;
    cfg.n_videos = 2;
    const Corpus c = generate_synthetic_corpus(cfg);
    const fs::path dir = temp_dir("loaderr");
    save_corpus(c, dir.string());

    SUBCASE("missing feature file") {
        fs::remove(dir / "features/v1.f32");
        try {
            load_corpus((dir / "manifest.json").string());
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("v1") != std::string::npos);
        }
    }
    SUBCASE("shape mismatch against manifest") {
        std::ofstream os(dir / "features/v0.f32", std::ios::binary | std::ios::trunc);
        const float junk[3] = {1, 2, 3};
        os.write(reinterpret_cast<const char*>(junk), sizeof(junk));
        os.close();
        try {
            load_corpus((dir / "manifest.json").string());
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("v0") != std::string::npos);
        }
    }
    SUBCASE("NaN in features") {
        const auto path = dir / "features/v0.f32";
        std::fstream os(path, std::ios::binary | std::ios::in | std::ios::out);
        const float nan = std::nanf("");
        os.write(reinterpret_cast<const char*>(&nan), sizeof(nan));
        os.close();
        try {
            load_corpus((dir / "manifest.json").string());
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("v0") != std::string::npos);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("loader accepts tokens_path records") {
    const fs::path dir = temp_dir("tokpath");
    fs::create_directories(dir / "features");
    // Hand-written two-step corpus with external token file.
    const float feat[4] = {0.5f, -1.0f, 2.0f, 0.25f};
    {
        std::ofstream os(dir / "features/vid.f32", std::ios::binary);
        os.write(reinterpret_cast<const char*>(feat), sizeof(feat));
    }
    const float toks[6] = {1, 2, 3, 4, 5, 6};
    {
        std::ofstream os(dir / "q.tok", std::ios::binary);
        os.write(reinterpret_cast<const char*>(toks), sizeof(toks));
    }
    {
        std::ofstream os(dir / "manifest.json");
        os << R"({"videos":[{"id":"vid","path":"features/vid.f32","T":2,"D_v":2}],)"
           << R"("queries_path":"queries.jsonl","D_t":3})";
    }
    {
        std::ofstream os(dir / "queries.jsonl");
        os << R"({"query_id":"q0","video_id":"vid","tokens_path":"q.tok","start":0.0,"end":1.5})" << "\n";
    }
    const Corpus c = load_corpus((dir / "manifest.json").string());
    REQUIRE(c.queries.size() == 1);
    CHECK(c.queries[0].K() == 2);
    CHECK(c.queries[0].tokens.at(1, 2) == 6.0);
    CHECK(c.videos[0].features.at(1, 1) == 0.25);
    fs::remove_all(dir);
}

TEST_CASE("corpus stats agree with direct recounting") {
    GenConfig cfg;
    cfg.seed = 21;
    cfg.n_videos = 5;
    const Corpus c = generate_synthetic_corpus(cfg);
    const auto s = corpus_stats(c);
    CHECK(s["n_videos"].get<int64_t>() == 5);
    CHECK(s["n_queries"].get<size_t>() == c.queries.size());
    CHECK(s["queries_per_video"].get<double>() ==
          doctest::Approx(static_cast<double>(c.queries.size()) / 5.0));
}
