#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "snag/tensor.hpp"

namespace snag::data {

// A (start, end) pair in time-step units.
struct MomentInterval {
    double start = 0.0;
    double end = 0.0;

    double length() const { return end - start; }
    double center() const { return 0.5 * (start + end); }
};

// Pre-extracted clip features for one video: a (T x D_v) matrix, one row per
// time step.
struct FeatureSequence {
    std::string video_id;
    Tensor features;
    double fps_equivalent = 1.0;  // steps per unit time, for reporting only

    int64_t T() const { return features.dim(0); }
    int64_t d_v() const { return features.dim(1); }
};

// Token-embedding matrix (K x D_t) for one sentence query plus its target.
struct QueryTokens {
    std::string query_id;
    std::string video_id;
    Tensor tokens;
    MomentInterval target;

    int64_t K() const { return tokens.dim(0); }
};

// A window [offset, offset + length) cut from a video.
struct Snippet {
    std::string video_id;
    int64_t offset = 0;
    int64_t length = 0;

    bool covers(const MomentInterval& m) const {
        return static_cast<double>(offset) <= m.start && m.end <= static_cast<double>(offset + length);
    }
};

struct Corpus {
    std::vector<FeatureSequence> videos;
    std::vector<QueryTokens> queries;
    std::string split = "train";

    const FeatureSequence& video(const std::string& video_id) const;
    std::vector<const QueryTokens*> queries_of(const std::string& video_id) const;
    int64_t d_v() const { return videos.empty() ? 0 : videos.front().d_v(); }
    int64_t d_t() const { return queries.empty() ? 0 : queries.front().tokens.dim(1); }
};

// Synthetic corpus: every target moment is planted as an additive unit-norm
// event vector over its steps, and the query tokens are a noisy fixed linear
// projection of that event vector. snr scales the noise as 1/snr, so high
// snr makes the grounding task solvable by template matching.
struct GenConfig {
    uint64_t seed = 0;
    int64_t n_videos = 8;
    int64_t t_min = 64, t_max = 128;
    int64_t queries_min = 2, queries_max = 5;
    int64_t d_v = 16, d_t = 12;
    double snr = 8.0;
    int64_t k_min = 4, k_max = 8;          // tokens per query
    double len_min = 4.0, len_max = 32.0;  // moment length in steps
    std::string split = "train";

    void validate() const;
};

Corpus generate_synthetic_corpus(const GenConfig& cfg);

// Covers [0, T] with windows of length t_w at the given stride; the final
// window is clamped to end at T (shorter than t_w only when T < t_w).
std::vector<Snippet> enumerate_snippets(const FeatureSequence& video, int64_t t_w, int64_t stride);

// Queries whose target moment lies fully inside the snippet window.
std::vector<const QueryTokens*> valid_queries_for(const Snippet& snippet, const Corpus& corpus);

// The rows of a video's feature matrix covered by the snippet window.
Tensor snippet_features(const Corpus& corpus, const Snippet& snippet);

// On-disk layout under `dir`:
//   manifest.json   { "videos": [{"id","path","T","D_v","fps"}], "queries_path", "D_t", "split" }
//   queries.jsonl   one {"query_id","video_id","tokens" | "tokens_path","start","end"} per line
//   features/<id>.f32   raw little-endian float32, row-major, length T*D_v
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& manifest_path);

// Summary statistics (video lengths, queries per video, moment coverage).
nlohmann::json corpus_stats(const Corpus& corpus);

}  // namespace snag::data
