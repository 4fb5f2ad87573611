#include "snag/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <unordered_map>

namespace snag::train {

using model::GroundingModel;
using model::HeadOutputs;
using sampling::Batch;
using sampling::Group;

LabelAssignment assign_labels(const data::Snippet& snippet, const data::MomentInterval& target,
                              const std::vector<int64_t>& level_lengths, const AssignConfig& cfg) {
    if (!snippet.covers(target)) {
        throw ConfigError("assign_labels: target [" + std::to_string(target.start) + ", " +
                          std::to_string(target.end) + "] not inside snippet at offset " +
                          std::to_string(snippet.offset));
    }
    const int levels = static_cast<int>(level_lengths.size());
    LabelAssignment out;
    out.local_start = target.start - static_cast<double>(snippet.offset);
    out.local_end = target.end - static_cast<double>(snippet.offset);
    const double len = out.local_end - out.local_start;

    int level = 1;
    double hi = cfg.range_base;
    while (len > hi && level < levels) {
        ++level;
        hi *= 2.0;
    }
    out.level = level;

    out.positive.resize(static_cast<size_t>(levels));
    out.targets.reserve(static_cast<size_t>(levels));
    for (int l = 1; l <= levels; ++l) {
        const int64_t tl = level_lengths[static_cast<size_t>(l - 1)];
        out.positive[static_cast<size_t>(l - 1)].assign(static_cast<size_t>(tl), 0);
        out.targets.emplace_back(Shape{tl, 2});
    }

    const double stride = static_cast<double>(model::level_stride(level));
    const double center = 0.5 * (out.local_start + out.local_end);
    const int64_t tl = level_lengths[static_cast<size_t>(level - 1)];
    auto& flags = out.positive[static_cast<size_t>(level - 1)];
    Tensor& targets = out.targets[static_cast<size_t>(level - 1)];
    for (int64_t t = 0; t < tl; ++t) {
        const double pos = stride * static_cast<double>(t);
        if (std::abs(pos - center) <= cfg.radius * stride && pos >= out.local_start &&
            pos <= out.local_end) {
            flags[static_cast<size_t>(t)] = 1;
            targets.at(t, 0) = (pos - out.local_start) / stride;
            targets.at(t, 1) = (out.local_end - pos) / stride;
            ++out.total_positives;
        }
    }
    if (out.total_positives == 0 && tl > 0) {
        // Moment shorter than one stride at its level: nearest step becomes
        // the positive, distances clamped to keep them nonnegative.
        int64_t t = std::llround(center / stride);
        t = std::min(std::max<int64_t>(t, 0), tl - 1);
        const double pos = stride * static_cast<double>(t);
        flags[static_cast<size_t>(t)] = 1;
        targets.at(t, 0) = std::max(0.0, (pos - out.local_start) / stride);
        targets.at(t, 1) = std::max(0.0, (out.local_end - pos) / stride);
        out.total_positives = 1;
    }
    return out;
}

LossNodes grounding_loss(nn::Ctx& c, const HeadOutputs& outputs, const LabelAssignment& assignment,
                         const LossConfig& cfg) {
    Graph& g = c.g;
    const int levels = static_cast<int>(outputs.scores.size());
    if (static_cast<int>(assignment.positive.size()) != levels) {
        throw ShapeError("grounding_loss: assignment has " + std::to_string(assignment.positive.size()) +
                         " levels, outputs have " + std::to_string(levels));
    }

    NodeId cls_sum = g.constant(Tensor::scalar(0.0));
    NodeId reg_sum = g.constant(Tensor::scalar(0.0));
    for (int l = 0; l < levels; ++l) {
        const NodeId p = outputs.scores[static_cast<size_t>(l)];
        const int64_t tl = g.value(p).dim(0);
        const auto& flags = assignment.positive[static_cast<size_t>(l)];
        if (static_cast<int64_t>(flags.size()) != tl) {
            throw ShapeError("grounding_loss: level " + std::to_string(l + 1) + " has " +
                             std::to_string(tl) + " steps, assignment has " +
                             std::to_string(flags.size()));
        }

        // Focal term over every step.
        Tensor y({tl, 1});
        for (int64_t t = 0; t < tl; ++t) y[t] = flags[static_cast<size_t>(t)] ? 1.0 : 0.0;
        const NodeId yc = g.constant(y);
        const NodeId ones = g.constant(Tensor::full({tl, 1}, 1.0));
        const NodeId one_m_p = g.sub(ones, p);
        const NodeId pos_term =
            g.scale(g.mul(g.pow_const(one_m_p, cfg.gamma), g.log(p)), -cfg.alpha_f);
        const NodeId neg_term =
            g.scale(g.mul(g.pow_const(p, cfg.gamma), g.log(one_m_p)), -(1.0 - cfg.alpha_f));
        const NodeId focal = g.add(g.mul(yc, pos_term), g.mul(g.sub(ones, yc), neg_term));
        cls_sum = g.add(cls_sum, g.sum(focal));

        // DIoU over positive steps.
        std::vector<int64_t> idx;
        for (int64_t t = 0; t < tl; ++t) {
            if (flags[static_cast<size_t>(t)]) idx.push_back(t);
        }
        if (idx.empty()) continue;
        const int64_t np = static_cast<int64_t>(idx.size());
        const double stride = static_cast<double>(model::level_stride(l + 1));
        Tensor tpos({np, 1});
        for (int64_t i = 0; i < np; ++i) tpos[i] = stride * static_cast<double>(idx[static_cast<size_t>(i)]);
        const NodeId tc = g.constant(tpos);
        const NodeId d = g.gather_rows(outputs.offsets[static_cast<size_t>(l)], idx);
        const NodeId ds = g.slice_cols(d, 0, 1);
        const NodeId de = g.slice_cols(d, 1, 2);
        const NodeId ps = g.sub(tc, g.scale(ds, stride));
        const NodeId pe = g.add(tc, g.scale(de, stride));
        const NodeId gs = g.constant(Tensor::full({np, 1}, assignment.local_start));
        const NodeId ge = g.constant(Tensor::full({np, 1}, assignment.local_end));
        const NodeId tiny = g.constant(Tensor::full({np, 1}, 1e-12));

        const NodeId inter = g.relu(g.sub(g.minimum(pe, ge), g.maximum(ps, gs)));
        const NodeId uni = g.sub(g.add(g.sub(pe, ps), g.sub(ge, gs)), inter);
        const NodeId iou = g.div(inter, g.maximum(uni, tiny));
        const NodeId pc = g.scale(g.add(ps, pe), 0.5);
        const NodeId gc = g.scale(g.add(gs, ge), 0.5);
        const NodeId diff = g.sub(pc, gc);
        const NodeId enc = g.sub(g.maximum(pe, ge), g.minimum(ps, gs));
        const NodeId diou = g.add(g.sub(g.constant(Tensor::full({np, 1}, 1.0)), iou),
                                  g.div(g.mul(diff, diff), g.maximum(g.mul(enc, enc), tiny)));
        reg_sum = g.add(reg_sum, g.sum(diou));
    }

    LossNodes out;
    out.cls = cls_sum;
    out.reg = reg_sum;
    out.positives = assignment.total_positives;
    const double inv_c = 1.0 / static_cast<double>(std::max<int64_t>(assignment.total_positives, 1));
    out.total = g.scale(g.add(cls_sum, g.scale(reg_sum, cfg.lambda_reg)), inv_c);
    return out;
}

void TrainConfig::validate() const {
    if (!(loss.lambda_reg > 0.0)) throw ConfigError("lambda_reg must be > 0");
    if (loss.gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
    if (!(ema_momentum > 0.0) || !(ema_momentum < 1.0)) throw ConfigError("EMA momentum must be in (0,1)");
    if (epochs < 1 || batch_size < 1 || b_q < 1) throw ConfigError("bad epoch/batch sizes");
    if (batch_size % b_q != 0) {
        throw ConfigError("B_q=" + std::to_string(b_q) + " must divide batch size " +
                          std::to_string(batch_size));
    }
    if (t_w < 1) throw ConfigError("t_w must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
}

namespace {

// Per-triplet graph construction; returns the loss nodes for one pair.
LossNodes pair_loss(const GroundingModel& m, nn::Ctx& c, const model::Pyramid* shared_pyramid,
                    const data::Snippet& snippet, const Tensor& features, const data::QueryTokens& q,
                    const LossConfig& loss_cfg, const AssignConfig& assign_cfg) {
    HeadOutputs out;
    if (m.config().placement == model::FusionPlacement::Early) {
        out = m.forward_early(c, features, q.tokens);
    } else if (shared_pyramid) {
        out = m.heads(c, m.fuse(c, *shared_pyramid, m.encode_text(c, q.tokens)));
    } else {
        out = m.forward(c, features, q.tokens);
    }
    const auto lengths = model::level_lengths(snippet.length, m.config().levels);
    const LabelAssignment assignment = assign_labels(snippet, q.target, lengths, assign_cfg);
    return grounding_loss(c, out, assignment, loss_cfg);
}

double lr_at(const TrainConfig& cfg, int64_t step, int64_t total_steps) {
    const int64_t warmup = std::max<int64_t>(1, std::llround(cfg.warmup_frac * static_cast<double>(total_steps)));
    if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double progress =
        static_cast<double>(step - warmup) / std::max<double>(1.0, static_cast<double>(total_steps - warmup));
    return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace

double batch_loss_value(const GroundingModel& m, const Batch& batch, const data::Corpus& corpus,
                        const LossConfig& loss_cfg, const AssignConfig& assign_cfg, bool share_encoding,
                        int64_t* encoder_macs, int64_t* total_macs) {
    double sum = 0.0;
    int64_t n = 0;
    int64_t enc = 0;
    int64_t total = 0;
    for (const Group& group : batch.groups) {
        const Tensor features = data::snippet_features(corpus, group.snippet);
        if (share_encoding && m.config().placement == model::FusionPlacement::Late) {
            Graph g;
            nn::Ctx c(g);
            const model::Pyramid pyramid = m.encode_video(c, features);
            enc += g.macs();
            for (const data::QueryTokens* q : group.queries) {
                sum += g.value(
                    pair_loss(m, c, &pyramid, group.snippet, features, *q, loss_cfg, assign_cfg).total)[0];
                ++n;
            }
            total += g.macs();
        } else {
            for (const data::QueryTokens* q : group.queries) {
                Graph g;
                nn::Ctx c(g);
                const int64_t before = g.macs();
                const model::Pyramid pyramid = m.config().placement == model::FusionPlacement::Late
                                                   ? m.encode_video(c, features)
                                                   : model::Pyramid{};
                enc += g.macs() - before;
                const model::Pyramid* shared =
                    m.config().placement == model::FusionPlacement::Late ? &pyramid : nullptr;
                sum += g.value(
                    pair_loss(m, c, shared, group.snippet, features, *q, loss_cfg, assign_cfg).total)[0];
                ++n;
                total += g.macs();
            }
        }
    }
    if (encoder_macs) *encoder_macs = enc;
    if (total_macs) *total_macs = total;
    return sum / static_cast<double>(std::max<int64_t>(n, 1));
}

TrainResult train(const data::Corpus& corpus, GroundingModel& m, const TrainConfig& cfg) {
    cfg.validate();
    const sampling::SamplingIndex index = sampling::build_index(corpus, cfg.t_w, cfg.train_stride());

    m.visit([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
    auto params = m.parameters();
    std::unordered_map<const Tensor*, size_t> param_slot;
    for (size_t i = 0; i < params.size(); ++i) param_slot[params[i].second] = i;

    std::vector<Tensor> grad_acc, adam_m, adam_v;
    for (auto& [name, t] : params) {
        grad_acc.emplace_back(t->shape());
        adam_m.emplace_back(t->shape());
        adam_v.emplace_back(t->shape());
    }
    const int64_t steps_per_epoch =
        (index.total_triplets + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = steps_per_epoch * cfg.epochs;
    Rng rng(derive_seed(cfg.seed, 0x7a1d));

    TrainResult result{.metrics = {}, .ema = m, .steps = 0};
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const auto t0 = std::chrono::steady_clock::now();
            const Batch batch = cfg.sampler == sampling::SamplerKind::VideoCentric
                                    ? sample_video_centric(index, cfg.batch_size, cfg.b_q, rng)
                                    : sample_query_centric(index, cfg.batch_size, rng);

            for (Tensor& gacc : grad_acc)
                for (int64_t i = 0; i < gacc.size(); ++i) gacc[i] = 0.0;

            double loss_sum = 0.0, cls_sum = 0.0, reg_sum = 0.0;
            int64_t macs_encoder = 0;
            for (const Group& group : batch.groups) {
                Graph g;
                nn::Ctx c(g);
                const Tensor features = data::snippet_features(corpus, group.snippet);
                model::Pyramid pyramid;
                const bool late = m.config().placement == model::FusionPlacement::Late;
                if (late) {
                    pyramid = m.encode_video(c, features);
                    macs_encoder += g.macs();
                }
                NodeId group_total = c.g.constant(Tensor::scalar(0.0));
                for (const data::QueryTokens* q : group.queries) {
                    const int64_t before = late ? 0 : g.macs();
                    const LossNodes ln = pair_loss(m, c, late ? &pyramid : nullptr, group.snippet,
                                                   features, *q, cfg.loss, cfg.assign);
                    if (!late) macs_encoder += g.macs() - before;
                    const double inv_c =
                        1.0 / static_cast<double>(std::max<int64_t>(ln.positives, 1));
                    loss_sum += g.value(ln.total)[0];
                    cls_sum += g.value(ln.cls)[0] * inv_c;
                    reg_sum += g.value(ln.reg)[0] * inv_c * cfg.loss.lambda_reg;
                    group_total = g.add(group_total, ln.total);
                }
                g.backward(group_total);
                for (const auto& [tensor, node] : c.bound) {
                    const auto slot = param_slot.find(tensor);
                    if (slot == param_slot.end()) continue;
                    const Tensor& grad = g.grad(node);
                    Tensor& acc = grad_acc[slot->second];
                    for (int64_t i = 0; i < acc.size(); ++i) acc[i] += grad[i];
                }
            }

            const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
            const double loss = loss_sum * inv_b;
            if (!std::isfinite(loss)) throw TrainingDiverged(step);

            double norm2 = 0.0;
            for (Tensor& gacc : grad_acc) {
                for (int64_t i = 0; i < gacc.size(); ++i) {
                    gacc[i] *= inv_b;
                    norm2 += gacc[i] * gacc[i];
                }
            }
            const double norm = std::sqrt(norm2);
            const double clip_scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

            const double lr = lr_at(cfg, step, total_steps);
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
            for (size_t pi = 0; pi < params.size(); ++pi) {
                Tensor& p = *params[pi].second;
                // Norm gains, biases and other 1-d parameters skip decay.
                const double wd = p.ndim() > 1 ? cfg.weight_decay : 0.0;
                for (int64_t i = 0; i < p.size(); ++i) {
                    const double gi = grad_acc[pi][i] * clip_scale;
                    adam_m[pi][i] = cfg.beta1 * adam_m[pi][i] + (1.0 - cfg.beta1) * gi;
                    adam_v[pi][i] = cfg.beta2 * adam_v[pi][i] + (1.0 - cfg.beta2) * gi * gi;
                    const double mhat = adam_m[pi][i] / bc1;
                    const double vhat = adam_v[pi][i] / bc2;
                    p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + wd * p[i]);
                }
            }

            // EMA shadow. The decay warms up toward the configured momentum
            // so short runs are not frozen at initialization.
            {
                const double decay = std::min(
                    cfg.ema_momentum, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
                auto ema_params = result.ema.parameters();
                for (size_t pi = 0; pi < params.size(); ++pi) {
                    Tensor& e = *ema_params[pi].second;
                    const Tensor& p = *params[pi].second;
                    for (int64_t i = 0; i < e.size(); ++i) e[i] = decay * e[i] + (1.0 - decay) * p[i];
                }
            }

            const double wall_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            result.metrics.push_back(MetricsRow{step, epoch, loss, cls_sum * inv_b, reg_sum * inv_b,
                                                macs_encoder, macs_encoder / cfg.batch_size, wall_ms});
        }
    }
    result.steps = step;
    return result;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write metrics csv: " + path);
    os << "step,epoch,loss,cls_loss,reg_loss,macs_encoder,macs_per_query,wall_ms\n";
    for (const MetricsRow& r : rows) {
        os << r.step << "," << r.epoch << "," << r.loss << "," << r.cls_loss << "," << r.reg_loss << ","
           << r.macs_encoder << "," << r.macs_per_query << "," << r.wall_ms << "\n";
    }
}

}  // namespace snag::train
