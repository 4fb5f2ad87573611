#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "snag/inference.hpp"
#include "snag/training.hpp"

namespace snag::cost {

// Symbolic cost parameters: per-snippet video-encoder cost C_g, per-query
// text-encoder cost C_h, per-(snippet, query) fusion+decoding cost C_F,
// snippet count M, query count N and group size B_q. alpha = C_F/(C_g+C_h).
struct CostParams {
    double c_g = 0.0;
    double c_h = 0.0;
    double c_f = 0.0;
    int64_t m = 1;
    int64_t n = 1;
    int64_t b_q = 1;

    double alpha() const;
};

// Exact early/late inference cost ratio under the equal-cost convention
// C(F_E) = C(F_L) + C(g) + C(h):
//   M*N*(C_F + C_g + C_h) / (M*N*C_F + M*C_g + N*C_h)
double r_inf_exact(const CostParams& p);

// (1 + alpha) / (1/n + alpha); tends to n as alpha -> 0 and to 1 + 1/alpha
// as n grows.
double r_inf_approx(double alpha, double n);
double r_train_approx(double alpha, double b_q);

// Grouped-training speedup: the exact ratio specialized to one snippet and
// B_q queries per group.
double r_train_exact(const CostParams& p);

struct ComponentCosts {
    int64_t macs_encoder = 0;
    int64_t macs_text = 0;
    int64_t macs_fuse = 0;  // fusion + heads per (snippet, query)
    int64_t params_encoder = 0;
    int64_t params_text = 0;
    int64_t params_fusion_heads = 0;
    int64_t t_w = 0;
    int64_t k_tokens = 0;

    CostParams cost_params(int64_t m, int64_t n, int64_t b_q = 1) const;
    nlohmann::json to_json() const;
};

// Traced forward costs (and parameter counts) of each component at the
// given snippet length and token count.
ComponentCosts measure_components(model::GroundingModel& m, int64_t t_w, int64_t k_tokens,
                                  uint64_t seed = 0);

// Full forward cost of one (snippet, query) pair, honoring the model's
// fusion placement. For early fusion this is the only meaningful unit.
int64_t measure_pair_cost(model::GroundingModel& m, int64_t t_w, int64_t k_tokens, uint64_t seed = 0);

struct SweepRow {
    std::string mode;  // "inference" | "train" | "alpha0"
    int64_t m = 0, n = 0, b_q = 0, t_w = 0;
    int64_t macs_total = 0, macs_encoder = 0, macs_text = 0, macs_fuse = 0;
    double ratio_measured = 0.0;
    double ratio_predicted = 0.0;
};

struct CostReport {
    ComponentCosts components;
    std::vector<SweepRow> rows;
    double wall_ms_cached = 0.0, wall_ms_uncached = 0.0;

    nlohmann::json to_json() const;
    void write_csv(const std::string& path) const;
};

struct VerifyConfig {
    std::vector<int64_t> n_list = {1, 4, 16, 64};
    std::vector<int64_t> bq_list = {1, 2, 4, 8};
    std::vector<int64_t> tw_list = {64};
    int64_t min_snippets = 3;  // M grows with N to keep moments placeable
    int64_t batch_size = 8;
    int64_t k_tokens = 6;
    uint64_t seed = 0;
};

// Runs real cached/uncached inference and grouped/ungrouped training on
// synthetic corpora and compares measured MAC ratios to the closed forms.
CostReport verify_against_runtime(const model::ModelConfig& model_cfg, const VerifyConfig& cfg);

}  // namespace snag::cost
