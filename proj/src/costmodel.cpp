#include "snag/costmodel.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

namespace snag::cost {

using nlohmann::json;

double CostParams::alpha() const {
    const double denom = c_g + c_h;
    if (!(denom > 0.0)) throw ConfigError("alpha undefined: C(g) + C(h) must be > 0");
    return c_f / denom;
}

double r_inf_exact(const CostParams& p) {
    const double m = static_cast<double>(p.m);
    const double n = static_cast<double>(p.n);
    const double num = m * n * (p.c_f + p.c_g + p.c_h);
    const double den = m * n * p.c_f + m * p.c_g + n * p.c_h;
    if (!(den > 0.0)) throw ConfigError("cost ratio undefined: zero late-fusion cost");
    return num / den;
}

double r_inf_approx(double alpha, double n) {
    if (n < 1.0) throw ConfigError("cost ratio needs n >= 1");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
    return (1.0 + alpha) / (1.0 / n + alpha);
}

double r_train_approx(double alpha, double b_q) { return r_inf_approx(alpha, b_q); }

double r_train_exact(const CostParams& p) {
    CostParams grouped = p;
    grouped.m = 1;
    grouped.n = p.b_q;
    return r_inf_exact(grouped);
}

CostParams ComponentCosts::cost_params(int64_t m, int64_t n, int64_t b_q) const {
    CostParams p;
    p.c_g = static_cast<double>(macs_encoder);
    p.c_h = static_cast<double>(macs_text);
    p.c_f = static_cast<double>(macs_fuse);
    p.m = m;
    p.n = n;
    p.b_q = b_q;
    return p;
}

json ComponentCosts::to_json() const {
    return json{{"t_w", t_w},
                {"k_tokens", k_tokens},
                {"macs", {{"encoder", macs_encoder}, {"text", macs_text}, {"fuse_heads", macs_fuse}}},
                {"params",
                 {{"encoder", params_encoder},
                  {"text", params_text},
                  {"fusion_heads", params_fusion_heads}}}};
}

ComponentCosts measure_components(model::GroundingModel& m, int64_t t_w, int64_t k_tokens,
                                  uint64_t seed) {
    ComponentCosts out;
    out.t_w = t_w;
    out.k_tokens = k_tokens;
    Rng rng(derive_seed(seed, 0xc057));
    const Tensor features = rng.normal_tensor({t_w, m.config().d_video_in}, 1.0);
    const Tensor tokens = rng.normal_tensor({k_tokens, m.config().d_text_in}, 1.0);

    model::PyramidValues cached;
    {
        Graph g;
        nn::Ctx c(g);
        cached = m.detach(c, m.encode_video(c, features));
        out.macs_encoder = g.macs();
    }
    Tensor text_value;
    {
        Graph g;
        nn::Ctx c(g);
        text_value = g.value(m.encode_text(c, tokens));
        out.macs_text = g.macs();
    }
    {
        Graph g;
        nn::Ctx c(g);
        const model::Pyramid p = m.wrap_cached(c, cached);
        m.heads(c, m.fuse(c, p, g.constant(text_value)));
        out.macs_fuse = g.macs();
    }

    const auto params = m.parameter_breakdown();
    out.params_encoder = params.at("encoder");
    out.params_text = params.at("text");
    out.params_fusion_heads = params.at("fusion_heads");
    return out;
}

int64_t measure_pair_cost(model::GroundingModel& m, int64_t t_w, int64_t k_tokens, uint64_t seed) {
    Rng rng(derive_seed(seed, 0xc057));
    const Tensor features = rng.normal_tensor({t_w, m.config().d_video_in}, 1.0);
    const Tensor tokens = rng.normal_tensor({k_tokens, m.config().d_text_in}, 1.0);
    Graph g;
    nn::Ctx c(g);
    if (m.config().placement == model::FusionPlacement::Early) {
        m.forward_early(c, features, tokens);
    } else {
        m.forward(c, features, tokens);
    }
    return g.macs();
}

namespace {

// One video whose window grid has exactly m full-length snippets, carrying n
// fixed-token-count queries.
data::Corpus sweep_corpus(int64_t t_w, int64_t stride, int64_t m, int64_t n, int64_t k_tokens,
                          const model::ModelConfig& mc, uint64_t seed) {
    data::GenConfig gc;
    gc.seed = seed;
    gc.n_videos = 1;
    gc.t_min = gc.t_max = t_w + stride * (m - 1);
    gc.queries_min = gc.queries_max = n;
    gc.d_v = mc.d_video_in;
    gc.d_t = mc.d_text_in;
    gc.k_min = gc.k_max = k_tokens;
    gc.len_min = 1.0;
    gc.len_max = 8.0;
    gc.snr = 8.0;
    return data::generate_synthetic_corpus(gc);
}

}  // namespace

CostReport verify_against_runtime(const model::ModelConfig& model_cfg, const VerifyConfig& cfg) {
    CostReport report;
    model::GroundingModel m(model_cfg, derive_seed(cfg.seed, 0xbe));

    for (const int64_t t_w : cfg.tw_list) {
        const int64_t stride = std::max<int64_t>(1, t_w / 2);
        const ComponentCosts comps = measure_components(m, t_w, cfg.k_tokens, cfg.seed);
        if (t_w == cfg.tw_list.front()) report.components = comps;

        // Inference: cached vs per-pair re-encoding across the query sweep.
        for (const int64_t n : cfg.n_list) {
            const int64_t m_snippets =
                std::max(cfg.min_snippets, (5 * n / 2 - t_w + stride - 1) / stride + 1);
            const data::Corpus corpus =
                sweep_corpus(t_w, stride, m_snippets, n, cfg.k_tokens, model_cfg, cfg.seed + n);

            eval::EvalConfig ec;
            ec.t_w = t_w;
            ec.stride = stride;
            ec.ks = {1};
            ec.tious = {0.5};

            ec.cached = true;
            const auto t0 = std::chrono::steady_clock::now();
            const eval::EvalReport cached = eval::evaluate(m, corpus, ec);
            report.wall_ms_cached +=
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

            ec.cached = false;
            const auto t1 = std::chrono::steady_clock::now();
            const eval::EvalReport uncached = eval::evaluate(m, corpus, ec);
            report.wall_ms_uncached +=
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();

            const int64_t cached_total = cached.macs_encoder + cached.macs_text + cached.macs_fuse;
            const int64_t uncached_total =
                uncached.macs_encoder + uncached.macs_text + uncached.macs_fuse;

            SweepRow row;
            row.mode = "inference";
            row.m = m_snippets;
            row.n = n;
            row.b_q = 1;
            row.t_w = t_w;
            row.macs_total = cached_total;
            row.macs_encoder = cached.macs_encoder;
            row.macs_text = cached.macs_text;
            row.macs_fuse = cached.macs_fuse;
            row.ratio_measured =
                static_cast<double>(uncached_total) / static_cast<double>(cached_total);
            row.ratio_predicted = r_inf_exact(comps.cost_params(m_snippets, n));
            report.rows.push_back(row);

            // The alpha -> 0 sanity row: with C_F = C_h = 0 the closed form
            // collapses to N exactly.
            CostParams limit = comps.cost_params(m_snippets, n);
            limit.c_f = 0.0;
            limit.c_h = 0.0;
            SweepRow lrow;
            lrow.mode = "alpha0";
            lrow.m = m_snippets;
            lrow.n = n;
            lrow.b_q = 1;
            lrow.t_w = t_w;
            lrow.ratio_measured = r_inf_exact(limit);
            lrow.ratio_predicted = static_cast<double>(n);
            report.rows.push_back(lrow);
        }

        // Training: grouped vs ungrouped compute on identical batches.
        for (const int64_t b_q : cfg.bq_list) {
            if (cfg.batch_size % b_q != 0) continue;
            const data::Corpus corpus = sweep_corpus(t_w, t_w, cfg.min_snippets,
                                                     std::max<int64_t>(4, b_q), cfg.k_tokens,
                                                     model_cfg, cfg.seed + 1000 + b_q);
            const auto index = sampling::build_index(corpus, t_w, t_w);
            Rng rng(derive_seed(cfg.seed, 0x5eed + static_cast<uint64_t>(b_q)));
            const sampling::Batch batch =
                sampling::sample_video_centric(index, cfg.batch_size, b_q, rng);

            int64_t shared_total = 0, shared_enc = 0, unshared_total = 0, unshared_enc = 0;
            train::batch_loss_value(m, batch, corpus, {}, {}, true, &shared_enc, &shared_total);
            train::batch_loss_value(m, batch, corpus, {}, {}, false, &unshared_enc, &unshared_total);

            SweepRow row;
            row.mode = "train";
            row.m = 1;
            row.n = cfg.batch_size;
            row.b_q = b_q;
            row.t_w = t_w;
            row.macs_total = shared_total;
            row.macs_encoder = shared_enc;
            row.macs_text = 0;
            row.macs_fuse = shared_total - shared_enc;
            row.ratio_measured =
                static_cast<double>(unshared_total) / static_cast<double>(shared_total);
            row.ratio_predicted = r_train_exact(comps.cost_params(1, 1, b_q));
            report.rows.push_back(row);
        }
    }
    return report;
}

json CostReport::to_json() const {
    json out_rows = json::array();
    for (const SweepRow& r : rows) {
        out_rows.push_back(json{{"mode", r.mode},
                                {"M", r.m},
                                {"N", r.n},
                                {"B_q", r.b_q},
                                {"T_w", r.t_w},
                                {"macs_total", r.macs_total},
                                {"macs_encoder", r.macs_encoder},
                                {"macs_text", r.macs_text},
                                {"macs_fuse", r.macs_fuse},
                                {"ratio_measured", r.ratio_measured},
                                {"ratio_predicted", r.ratio_predicted}});
    }
    return json{{"components", components.to_json()},
                {"rows", out_rows},
                {"wall_ms", {{"cached", wall_ms_cached}, {"uncached", wall_ms_uncached}}}};
}

void CostReport::write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write cost csv: " + path);
    os << "mode,M,N,B_q,T_w,macs_total,macs_encoder,macs_text,macs_fuse,ratio_measured,ratio_predicted\n";
    for (const SweepRow& r : rows) {
        os << r.mode << "," << r.m << "," << r.n << "," << r.b_q << "," << r.t_w << "," << r.macs_total
           << "," << r.macs_encoder << "," << r.macs_text << "," << r.macs_fuse << ","
           << r.ratio_measured << "," << r.ratio_predicted << "\n";
    }
}

}  // namespace snag::cost
