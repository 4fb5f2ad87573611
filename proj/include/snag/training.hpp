#pragma once

#include <string>
#include <vector>

#include "snag/model.hpp"
#include "snag/sampling.hpp"

namespace snag::train {

struct AssignConfig {
    double radius = 1.5;      // center-sampling radius, in stride units
    double range_base = 8.0;  // level-1 regression range; doubles per level, last bucket open
};

// Per-level positive flags and normalized regression targets for one
// (snippet, moment) pair, in snippet-local coordinates.
struct LabelAssignment {
    std::vector<std::vector<uint8_t>> positive;  // per level, length T_l
    std::vector<Tensor> targets;                 // per level (T_l x 2): (d_s, d_e); zeros at negatives
    int64_t total_positives = 0;                 // C
    int level = 0;                               // 1-based chosen level
    double local_start = 0.0, local_end = 0.0;
};

// Level chosen by regression-range bucketing of the moment length; positive
// steps lie within `radius` strides of the moment center and inside the
// moment. A moment too short to contain any step at its level falls back to
// the single nearest step, with targets clamped to zero.
LabelAssignment assign_labels(const data::Snippet& snippet, const data::MomentInterval& target,
                              const std::vector<int64_t>& level_lengths, const AssignConfig& cfg);

struct LossConfig {
    double lambda_reg = 1.0;
    double gamma = 2.0;
    double alpha_f = 0.25;
};

struct LossNodes {
    NodeId total;  // (cls + lambda_reg * reg) / max(C, 1)
    NodeId cls;    // focal, summed over every step of every level
    NodeId reg;    // DIoU, summed over positive steps
    int64_t positives = 0;
};

LossNodes grounding_loss(nn::Ctx& c, const model::HeadOutputs& outputs,
                         const LabelAssignment& assignment, const LossConfig& cfg);

struct TrainingDiverged : std::runtime_error {
    int64_t step;
    explicit TrainingDiverged(int64_t step_)
        : std::runtime_error("loss diverged (non-finite) at step " + std::to_string(step_)), step(step_) {}
};

struct TrainConfig {
    LossConfig loss;
    AssignConfig assign;
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.05;
    double ema_momentum = 0.999;
    double clip_norm = 1.0;
    double warmup_frac = 0.05;  // linear warmup, then cosine decay
    int epochs = 50;
    int64_t batch_size = 16;
    int64_t b_q = 4;
    sampling::SamplerKind sampler = sampling::SamplerKind::VideoCentric;
    int64_t t_w = 128;
    int64_t stride = 0;  // 0 = t_w (non-overlapping training grid)
    uint64_t seed = 0;

    int64_t train_stride() const { return stride > 0 ? stride : t_w; }
    void validate() const;
};

struct MetricsRow {
    int64_t step = 0;
    int epoch = 0;
    double loss = 0.0, cls_loss = 0.0, reg_loss = 0.0;
    int64_t macs_encoder = 0;    // video-encoder MACs this step (per-pair cost for early fusion)
    int64_t macs_per_query = 0;  // macs_encoder amortized over the batch
    double wall_ms = 0.0;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    model::GroundingModel ema;  // EMA parameters, used for evaluation
    int64_t steps = 0;
};

// One encoding per group, reused across the group's queries; AdamW with
// global-norm clipping, linear warmup + cosine decay, and an EMA shadow.
TrainResult train(const data::Corpus& corpus, model::GroundingModel& m, const TrainConfig& cfg);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// Forward-only batch loss. share_encoding=true encodes each group's snippet
// once; false re-encodes per triplet. Values agree bitwise; only cost moves.
double batch_loss_value(const model::GroundingModel& m, const sampling::Batch& batch,
                        const data::Corpus& corpus, const LossConfig& loss_cfg,
                        const AssignConfig& assign_cfg, bool share_encoding,
                        int64_t* encoder_macs = nullptr, int64_t* total_macs = nullptr);

}  // namespace snag::train
