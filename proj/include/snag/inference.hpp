#pragma once

#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "snag/model.hpp"

namespace snag::eval {

// Temporal intersection over union; 0 when the union is empty.
double tiou(const data::MomentInterval& a, const data::MomentInterval& b);

struct ScoredMoment {
    data::MomentInterval interval;  // global video coordinates
    double score = 0.0;
    int level = 0;           // 1-based source level
    int snippet_index = -1;  // position in the video's snippet grid
};

struct DecodeConfig {
    int64_t top_n = 100;       // candidates kept per (snippet, query) before NMS
    double score_floor = 1e-3;
};

// All (t, l) with score >= floor, top_n by score (ties: lower level, then
// earlier step), decoded and shifted to global coordinates, clipped to the
// video bounds.
std::vector<ScoredMoment> decode_moments(const model::HeadValues& values, const data::Snippet& snippet,
                                         int64_t video_t, const DecodeConfig& cfg, int snippet_index = -1);

// Gaussian soft suppression: repeatedly pop the best survivor (ties: earlier
// start, then original input index), decay the rest by exp(-tiou^2 / sigma),
// drop anything below `floor`. Returned in pop order.
std::vector<ScoredMoment> soft_nms(std::vector<ScoredMoment> moments, double sigma, double floor);

struct EvalConfig {
    std::vector<int64_t> ks = {1, 5};
    std::vector<double> tious = {0.3, 0.5, 0.7};
    int64_t t_w = 128;
    int64_t stride = 0;  // 0 = t_w/2: overlapping windows recover boundary moments
    DecodeConfig decode;
    double nms_sigma = 0.9;
    double nms_floor = 1e-3;
    bool cached = true;
    int threads = 1;
    std::vector<double> coverage_bins = {0.02, 0.04, 0.08, 0.16};
    std::vector<double> duration_bins = {125.0, 250.0, 500.0, 750.0};

    int64_t eval_stride() const { return stride > 0 ? stride : std::max<int64_t>(1, t_w / 2); }
    int64_t k_max() const;
    void validate() const;
};

struct VideoCache {
    std::vector<data::Snippet> snippets;
    std::vector<model::PyramidValues> pyramids;
    int64_t video_t = 0;
};
using PyramidCache = std::map<std::string, VideoCache>;

// Encodes every snippet of every video once.
PyramidCache build_cache(const model::GroundingModel& m, const data::Corpus& corpus,
                         const EvalConfig& cfg, int64_t* macs_encoder = nullptr);

// Cached grounding of one query: text encoded once, then fuse + heads +
// decode per snippet, pooled and soft-suppressed.
std::vector<ScoredMoment> ground_query(const model::GroundingModel& m, const PyramidCache& cache,
                                       const data::QueryTokens& query, const EvalConfig& cfg,
                                       int64_t* macs_text = nullptr, int64_t* macs_fuse = nullptr);

// Per-pair pipeline with no sharing at all: video and text re-encoded for
// every (snippet, query) pair. Produces bitwise identical moments to the
// cached path; only the cost differs.
std::vector<ScoredMoment> ground_query_uncached(const model::GroundingModel& m,
                                                const data::Corpus& corpus,
                                                const data::QueryTokens& query, const EvalConfig& cfg,
                                                int64_t* macs_encoder = nullptr,
                                                int64_t* macs_text = nullptr,
                                                int64_t* macs_fuse = nullptr);

// recall[ki][ti] over (ks, tious): fraction of queries whose top-k
// predictions contain one with tiou strictly above the threshold.
std::vector<std::vector<double>> recall_matrix(const std::vector<std::vector<ScoredMoment>>& predictions,
                                               const std::vector<data::MomentInterval>& targets,
                                               const std::vector<int64_t>& ks,
                                               const std::vector<double>& tious);

struct BinnedRecall {
    std::vector<std::string> labels;  // XS, S, M, L, XL
    std::vector<int64_t> counts;
    std::vector<std::vector<std::vector<double>>> recall;  // [bin][ki][ti]
};

struct EvalReport {
    std::vector<int64_t> ks;
    std::vector<double> tious;
    std::vector<std::vector<double>> recall;  // [ki][ti]
    BinnedRecall coverage;
    BinnedRecall duration;
    int64_t n_queries = 0;
    bool cached = true;
    int64_t macs_encoder = 0, macs_text = 0, macs_fuse = 0;
    double wall_ms_total = 0.0, wall_ms_per_query = 0.0;

    nlohmann::json to_json() const;
    void write_csv(const std::string& path) const;  // one row per (k, tiou, bin)
};

EvalReport evaluate(const model::GroundingModel& m, const data::Corpus& corpus, const EvalConfig& cfg);

}  // namespace snag::eval
