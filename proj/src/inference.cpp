#include "snag/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

namespace snag::eval {

using model::GroundingModel;
using nlohmann::json;

double tiou(const data::MomentInterval& a, const data::MomentInterval& b) {
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
    return uni > 0.0 ? inter / uni : 0.0;
}

int64_t EvalConfig::k_max() const {
    int64_t k = 1;
    for (const int64_t v : ks) k = std::max(k, v);
    return k;
}

void EvalConfig::validate() const {
    if (ks.empty() || tious.empty()) throw ConfigError("eval needs at least one k and one tIoU");
    for (const int64_t k : ks)
        if (k < 1) throw ConfigError("recall k must be >= 1");
    if (t_w < 1) throw ConfigError("t_w must be >= 1");
    if (!(nms_sigma > 0.0)) throw ConfigError("soft-nms sigma must be > 0");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (coverage_bins.size() != 4 || duration_bins.size() != 4) {
        throw ConfigError("coverage/duration bins need exactly 4 boundaries (5 bins)");
    }
}

std::vector<ScoredMoment> decode_moments(const model::HeadValues& values, const data::Snippet& snippet,
                                         int64_t video_t, const DecodeConfig& cfg, int snippet_index) {
    struct Cand {
        double score;
        int level;
        int64_t t;
    };
    std::vector<Cand> cands;
    for (size_t l = 0; l < values.scores.size(); ++l) {
        const Tensor& s = values.scores[l];
        for (int64_t t = 0; t < s.dim(0); ++t) {
            const double p = s.at(t, 0);
            if (p >= cfg.score_floor) cands.push_back({p, static_cast<int>(l) + 1, t});
        }
    }
    auto better = [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.level != b.level) return a.level < b.level;
        return a.t < b.t;
    };
    if (static_cast<int64_t>(cands.size()) > cfg.top_n) {
        std::partial_sort(cands.begin(), cands.begin() + cfg.top_n, cands.end(), better);
        cands.resize(static_cast<size_t>(cfg.top_n));
    } else {
        std::sort(cands.begin(), cands.end(), better);
    }

    std::vector<ScoredMoment> out;
    out.reserve(cands.size());
    for (const Cand& c : cands) {
        const Tensor& off = values.offsets[static_cast<size_t>(c.level - 1)];
        data::MomentInterval local =
            model::decode_offsets(c.level, c.t, off.at(c.t, 0), off.at(c.t, 1));
        data::MomentInterval global{local.start + static_cast<double>(snippet.offset),
                                    local.end + static_cast<double>(snippet.offset)};
        global.start = std::min(std::max(global.start, 0.0), static_cast<double>(video_t));
        global.end = std::min(std::max(global.end, 0.0), static_cast<double>(video_t));
        out.push_back(ScoredMoment{global, c.score, c.level, snippet_index});
    }
    return out;
}

std::vector<ScoredMoment> soft_nms(std::vector<ScoredMoment> moments, double sigma, double floor) {
    if (!(sigma > 0.0)) throw ConfigError("soft-nms sigma must be > 0");
    struct Entry {
        ScoredMoment m;
        size_t original;
    };
    std::vector<Entry> pool;
    pool.reserve(moments.size());
    for (size_t i = 0; i < moments.size(); ++i) pool.push_back({moments[i], i});

    std::vector<ScoredMoment> out;
    out.reserve(pool.size());
    while (!pool.empty()) {
        size_t best = 0;
        for (size_t i = 1; i < pool.size(); ++i) {
            const Entry& a = pool[i];
            const Entry& b = pool[best];
            if (a.m.score > b.m.score ||
                (a.m.score == b.m.score &&
                 (a.m.interval.start < b.m.interval.start ||
                  (a.m.interval.start == b.m.interval.start && a.original < b.original)))) {
                best = i;
            }
        }
        const Entry top = pool[best];
        out.push_back(top.m);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
        std::vector<Entry> kept;
        kept.reserve(pool.size());
        for (Entry& e : pool) {
            const double o = tiou(e.m.interval, top.m.interval);
            e.m.score *= std::exp(-(o * o) / sigma);
            if (e.m.score >= floor) kept.push_back(e);
        }
        pool = std::move(kept);
    }
    return out;
}

PyramidCache build_cache(const GroundingModel& m, const data::Corpus& corpus, const EvalConfig& cfg,
                         int64_t* macs_encoder) {
    if (m.config().placement == model::FusionPlacement::Early) {
        throw ConfigError("early-fusion models fuse before the pyramid; encodings cannot be cached");
    }
    PyramidCache cache;
    int64_t macs = 0;
    for (const data::FeatureSequence& video : corpus.videos) {
        VideoCache vc;
        vc.video_t = video.T();
        for (const data::Snippet& s : data::enumerate_snippets(video, cfg.t_w, cfg.eval_stride())) {
            Graph g;
            nn::Ctx c(g);
            const model::Pyramid p = m.encode_video(c, data::snippet_features(corpus, s));
            macs += g.macs();
            vc.pyramids.push_back(m.detach(c, p));
            vc.snippets.push_back(s);
        }
        cache.emplace(video.video_id, std::move(vc));
    }
    if (macs_encoder) *macs_encoder = macs;
    return cache;
}

namespace {

std::vector<ScoredMoment> finish_query(std::vector<ScoredMoment> pooled, const EvalConfig& cfg) {
    std::vector<ScoredMoment> merged = soft_nms(std::move(pooled), cfg.nms_sigma, cfg.nms_floor);
    if (static_cast<int64_t>(merged.size()) > cfg.k_max())
        merged.resize(static_cast<size_t>(cfg.k_max()));
    return merged;
}

}  // namespace

std::vector<ScoredMoment> ground_query(const GroundingModel& m, const PyramidCache& cache,
                                       const data::QueryTokens& query, const EvalConfig& cfg,
                                       int64_t* macs_text, int64_t* macs_fuse) {
    const auto it = cache.find(query.video_id);
    if (it == cache.end()) {
        throw IoError("video " + query.video_id + " has no cached encoding (cache miss)");
    }
    const VideoCache& vc = it->second;

    Tensor text_value;
    {
        Graph g;
        nn::Ctx c(g);
        text_value = g.value(m.encode_text(c, query.tokens));
        if (macs_text) *macs_text += g.macs();
    }

    std::vector<ScoredMoment> pooled;
    for (size_t si = 0; si < vc.snippets.size(); ++si) {
        Graph g;
        nn::Ctx c(g);
        const model::Pyramid p = m.wrap_cached(c, vc.pyramids[si]);
        const model::HeadOutputs out = m.heads(c, m.fuse(c, p, g.constant(text_value)));
        if (macs_fuse) *macs_fuse += g.macs();
        const model::HeadValues hv = m.head_values(c, out);
        for (ScoredMoment& sm :
             decode_moments(hv, vc.snippets[si], vc.video_t, cfg.decode, static_cast<int>(si))) {
            pooled.push_back(sm);
        }
    }
    return finish_query(std::move(pooled), cfg);
}

std::vector<ScoredMoment> ground_query_uncached(const GroundingModel& m, const data::Corpus& corpus,
                                                const data::QueryTokens& query, const EvalConfig& cfg,
                                                int64_t* macs_encoder, int64_t* macs_text,
                                                int64_t* macs_fuse) {
    const data::FeatureSequence& video = corpus.video(query.video_id);
    const bool early = m.config().placement == model::FusionPlacement::Early;
    std::vector<ScoredMoment> pooled;
    int si = 0;
    for (const data::Snippet& s : data::enumerate_snippets(video, cfg.t_w, cfg.eval_stride())) {
        Graph g;
        nn::Ctx c(g);
        model::HeadOutputs out;
        if (early) {
            // No component split exists before the pyramid; the whole
            // per-pair cost lands on the encoder side.
            out = m.forward_early(c, data::snippet_features(corpus, s), query.tokens);
            if (macs_encoder) *macs_encoder += g.macs();
        } else {
            const model::Pyramid p = m.encode_video(c, data::snippet_features(corpus, s));
            const int64_t after_video = g.macs();
            if (macs_encoder) *macs_encoder += after_video;
            const NodeId text = m.encode_text(c, query.tokens);
            const int64_t after_text = g.macs();
            if (macs_text) *macs_text += after_text - after_video;
            out = m.heads(c, m.fuse(c, p, text));
            if (macs_fuse) *macs_fuse += g.macs() - after_text;
        }
        const model::HeadValues hv = m.head_values(c, out);
        for (ScoredMoment& sm : decode_moments(hv, s, video.T(), cfg.decode, si)) pooled.push_back(sm);
        ++si;
    }
    return finish_query(std::move(pooled), cfg);
}

std::vector<std::vector<double>> recall_matrix(const std::vector<std::vector<ScoredMoment>>& predictions,
                                               const std::vector<data::MomentInterval>& targets,
                                               const std::vector<int64_t>& ks,
                                               const std::vector<double>& tious) {
    if (predictions.size() != targets.size()) throw ShapeError("recall_matrix: size mismatch");
    std::vector<std::vector<double>> rec(ks.size(), std::vector<double>(tious.size(), 0.0));
    if (predictions.empty()) return rec;
    for (size_t qi = 0; qi < predictions.size(); ++qi) {
        for (size_t ki = 0; ki < ks.size(); ++ki) {
            const size_t k = static_cast<size_t>(ks[ki]);
            for (size_t ti = 0; ti < tious.size(); ++ti) {
                bool hit = false;
                for (size_t pi = 0; pi < predictions[qi].size() && pi < k && !hit; ++pi) {
                    hit = tiou(predictions[qi][pi].interval, targets[qi]) > tious[ti];
                }
                if (hit) rec[ki][ti] += 1.0;
            }
        }
    }
    const double n = static_cast<double>(predictions.size());
    for (auto& row : rec)
        for (double& v : row) v /= n;
    return rec;
}

namespace {

size_t bin_of(double value, const std::vector<double>& bounds) {
    size_t b = 0;
    while (b < bounds.size() && value > bounds[b]) ++b;
    return b;
}

BinnedRecall binned_recall(const std::vector<std::vector<ScoredMoment>>& preds,
                           const std::vector<data::MomentInterval>& targets,
                           const std::vector<size_t>& bins, const EvalConfig& cfg) {
    BinnedRecall out;
    out.labels = {"XS", "S", "M", "L", "XL"};
    out.counts.assign(5, 0);
    for (size_t b = 0; b < 5; ++b) {
        std::vector<std::vector<ScoredMoment>> p;
        std::vector<data::MomentInterval> t;
        for (size_t qi = 0; qi < preds.size(); ++qi) {
            if (bins[qi] == b) {
                p.push_back(preds[qi]);
                t.push_back(targets[qi]);
            }
        }
        out.counts[b] = static_cast<int64_t>(p.size());
        out.recall.push_back(recall_matrix(p, t, cfg.ks, cfg.tious));
    }
    return out;
}

}  // namespace

EvalReport evaluate(const GroundingModel& m, const data::Corpus& corpus, const EvalConfig& cfg) {
    cfg.validate();
    if (corpus.queries.empty()) throw ConfigError("evaluate: corpus has no queries");

    EvalReport report;
    report.ks = cfg.ks;
    report.tious = cfg.tious;
    report.cached = cfg.cached;
    report.n_queries = static_cast<int64_t>(corpus.queries.size());

    const auto t0 = std::chrono::steady_clock::now();
    PyramidCache cache;
    if (cfg.cached) cache = build_cache(m, corpus, cfg, &report.macs_encoder);

    const size_t nq = corpus.queries.size();
    std::vector<std::vector<ScoredMoment>> preds(nq);
    std::vector<int64_t> macs_enc(nq, 0), macs_text(nq, 0), macs_fuse(nq, 0);
    std::vector<double> wall(nq, 0.0);

    auto worker = [&](size_t begin, size_t end) {
        for (size_t qi = begin; qi < end; ++qi) {
            const auto q0 = std::chrono::steady_clock::now();
            const data::QueryTokens& q = corpus.queries[qi];
            preds[qi] = cfg.cached
                            ? ground_query(m, cache, q, cfg, &macs_text[qi], &macs_fuse[qi])
                            : ground_query_uncached(m, corpus, q, cfg, &macs_enc[qi], &macs_text[qi],
                                                    &macs_fuse[qi]);
            wall[qi] =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - q0).count();
        }
    };
    const int threads = std::min<int>(cfg.threads, static_cast<int>(nq));
    if (threads <= 1) {
        worker(0, nq);
    } else {
        // Queries are independent over read-only state; results land in
        // per-query slots, aggregation below stays serial.
        std::vector<std::thread> pool;
        const size_t chunk = (nq + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
        for (int ti = 0; ti < threads; ++ti) {
            const size_t b = static_cast<size_t>(ti) * chunk;
            const size_t e = std::min(nq, b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }

    for (size_t qi = 0; qi < nq; ++qi) {
        report.macs_encoder += macs_enc[qi];
        report.macs_text += macs_text[qi];
        report.macs_fuse += macs_fuse[qi];
        report.wall_ms_total += wall[qi];
    }
    report.wall_ms_per_query = report.wall_ms_total / static_cast<double>(nq);

    std::vector<data::MomentInterval> targets;
    std::vector<size_t> cov_bins, dur_bins;
    for (const data::QueryTokens& q : corpus.queries) {
        const data::FeatureSequence& v = corpus.video(q.video_id);
        targets.push_back(q.target);
        cov_bins.push_back(bin_of(q.target.length() / static_cast<double>(v.T()), cfg.coverage_bins));
        dur_bins.push_back(bin_of(static_cast<double>(v.T()) / v.fps_equivalent, cfg.duration_bins));
    }
    report.recall = recall_matrix(preds, targets, cfg.ks, cfg.tious);
    report.coverage = binned_recall(preds, targets, cov_bins, cfg);
    report.duration = binned_recall(preds, targets, dur_bins, cfg);
    report.wall_ms_total =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

json EvalReport::to_json() const {
    json j;
    j["n_queries"] = n_queries;
    j["cached"] = cached;
    j["ks"] = ks;
    j["tious"] = tious;
    j["recall"] = recall;
    auto bins_json = [&](const BinnedRecall& b) {
        json out;
        out["labels"] = b.labels;
        out["counts"] = b.counts;
        out["recall"] = b.recall;
        return out;
    };
    j["coverage_bins"] = bins_json(coverage);
    j["duration_bins"] = bins_json(duration);
    j["macs"] = {{"encoder", macs_encoder}, {"text", macs_text}, {"fuse_heads", macs_fuse}};
    j["wall_ms_total"] = wall_ms_total;
    j["wall_ms_per_query"] = wall_ms_per_query;
    return j;
}

void EvalReport::write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write eval csv: " + path);
    os << "k,tiou,bin_kind,bin,count,recall\n";
    for (size_t ki = 0; ki < ks.size(); ++ki) {
        for (size_t ti = 0; ti < tious.size(); ++ti) {
            os << ks[ki] << "," << tious[ti] << ",all,all," << n_queries << "," << recall[ki][ti]
               << "\n";
            for (size_t b = 0; b < coverage.labels.size(); ++b) {
                os << ks[ki] << "," << tious[ti] << ",coverage," << coverage.labels[b] << ","
                   << coverage.counts[b] << "," << coverage.recall[b][ki][ti] << "\n";
            }
            for (size_t b = 0; b < duration.labels.size(); ++b) {
                os << ks[ki] << "," << tious[ti] << ",duration," << duration.labels[b] << ","
                   << duration.counts[b] << "," << duration.recall[b][ki][ti] << "\n";
            }
        }
    }
}

}  // namespace snag::eval
