// Command-line driver for the grounding toolkit: corpus generation,
// training, evaluation, cost benchmarking and the fusion ablation.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "snag/costmodel.hpp"
#include "snag/data.hpp"
#include "snag/inference.hpp"
#include "snag/model.hpp"
#include "snag/sampling.hpp"
#include "snag/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace snag;

namespace {

// Values from --config <file.json> fill in any flag the user did not pass
// explicitly. The file holds either per-command sections or flat keys.
struct ConfigFile {
    json values;

    static ConfigFile load(const std::string& path, const std::string& command) {
        ConfigFile cf;
        if (path.empty()) return cf;
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config file: " + path);
        json j;
        try {
            is >> j;
        } catch (const json::exception& e) {
            throw IoError("bad config JSON in " + path + ": " + e.what());
        }
        cf.values = j.contains(command) ? j.at(command) : j;
        return cf;
    }

    template <class T>
    void apply(const CLI::App* cmd, const std::string& flag, T& value) const {
        if (!values.contains(flag)) return;
        const CLI::Option* opt = cmd->get_option("--" + flag);
        if (opt != nullptr && opt->count() > 0) return;  // explicit flag wins
        value = values.at(flag).get<T>();
    }
};

void write_resolved_config(const std::string& out_dir, const std::string& command, const json& resolved) {
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "config.json");
    if (!os) throw IoError("cannot write resolved config under " + out_dir);
    os << json{{"command", command}, {"config", resolved}}.dump(2) << "\n";
}

model::ModelConfig make_model_config(const std::string& preset_name, const std::string& fusion,
                                     const std::string& placement, int64_t d_v, int64_t d_t,
                                     int64_t max_tokens) {
    model::ModelConfig mc = model::preset(preset_name, d_v, d_t);
    mc.fusion = model::fusion_variant_from(fusion);
    mc.placement = model::fusion_placement_from(placement);
    mc.max_tokens = std::max(mc.max_tokens, max_tokens);
    return mc;
}

int64_t corpus_max_tokens(const data::Corpus& corpus) {
    int64_t k = 1;
    for (const auto& q : corpus.queries) k = std::max(k, q.K());
    return k;
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenArgs {
    std::string out, config;
    data::GenConfig g;
};

int run_gen(const GenArgs& a) {
    const data::Corpus corpus = data::generate_synthetic_corpus(a.g);
    data::save_corpus(corpus, a.out);
    const json stats = data::corpus_stats(corpus);
    {
        std::ofstream os(fs::path(a.out) / "stats.json");
        os << stats.dump(2) << "\n";
    }
    write_resolved_config(a.out, "gen",
                          json{{"seed", a.g.seed},
                               {"videos", a.g.n_videos},
                               {"t_min", a.g.t_min},
                               {"t_max", a.g.t_max},
                               {"queries_min", a.g.queries_min},
                               {"queries_max", a.g.queries_max},
                               {"dv", a.g.d_v},
                               {"dt", a.g.d_t},
                               {"snr", a.g.snr},
                               {"k_min", a.g.k_min},
                               {"k_max", a.g.k_max},
                               {"len_min", a.g.len_min},
                               {"len_max", a.g.len_max},
                               {"split", a.g.split}});
    std::cout << "wrote corpus to " << a.out << "\n" << stats.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string corpus, out, config;
    std::string preset = "tiny";
    std::string fusion = "xattn_affine";
    std::string placement = "late";
    std::string sampler = "video";
    train::TrainConfig t;
    uint64_t model_seed = 0;
};

int run_train(const TrainArgs& a) {
    const data::Corpus corpus = data::load_corpus(a.corpus);
    const model::ModelConfig mc = make_model_config(a.preset, a.fusion, a.placement, corpus.d_v(),
                                                    corpus.d_t(), corpus_max_tokens(corpus));
    model::GroundingModel m(mc, a.model_seed);

    train::TrainConfig cfg = a.t;
    cfg.sampler = sampling::sampler_kind_from(a.sampler);

    const json resolved{{"corpus", a.corpus},   {"preset", a.preset},
                        {"fusion", a.fusion},   {"placement", a.placement},
                        {"sampler", a.sampler}, {"bq", cfg.b_q},
                        {"batch", cfg.batch_size}, {"epochs", cfg.epochs},
                        {"lr", cfg.lr},         {"tw", cfg.t_w},
                        {"stride", cfg.train_stride()}, {"seed", cfg.seed},
                        {"model_seed", a.model_seed},   {"weight_decay", cfg.weight_decay},
                        {"ema", cfg.ema_momentum}};
    write_resolved_config(a.out, "train", resolved);

    train::TrainResult result = train::train(corpus, m, cfg);
    train::write_metrics_csv((fs::path(a.out) / "metrics.csv").string(), result.metrics);
    result.ema.save((fs::path(a.out) / "checkpoint.ckpt").string(), resolved);

    std::cout << "steps: " << result.steps << "\n";
    if (!result.metrics.empty()) {
        const auto& last = result.metrics.back();
        std::cout << "final loss: " << last.loss << " (cls " << last.cls_loss << ", reg "
                  << last.reg_loss << ")\n"
                  << "macs_encoder/step: " << last.macs_encoder
                  << "  macs_per_query: " << last.macs_per_query << "\n";
    }
    std::cout << "checkpoint: " << (fs::path(a.out) / "checkpoint.ckpt").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string corpus, checkpoint, out, config;
    std::string cached = "on";
    eval::EvalConfig e;
};

int run_eval(const EvalArgs& a) {
    if (a.cached != "on" && a.cached != "off") {
        throw ConfigError("--cached must be 'on' or 'off'");
    }
    const data::Corpus corpus = data::load_corpus(a.corpus);
    model::GroundingModel m = model::GroundingModel::load(a.checkpoint);

    eval::EvalConfig cfg = a.e;
    cfg.cached = a.cached == "on";

    write_resolved_config(a.out, "eval",
                          json{{"corpus", a.corpus},
                               {"checkpoint", a.checkpoint},
                               {"ks", cfg.ks},
                               {"tious", cfg.tious},
                               {"tw", cfg.t_w},
                               {"stride", cfg.eval_stride()},
                               {"cached", a.cached},
                               {"threads", cfg.threads},
                               {"topn", cfg.decode.top_n},
                               {"nms_sigma", cfg.nms_sigma}});

    const eval::EvalReport report = eval::evaluate(m, corpus, cfg);
    {
        std::ofstream os(fs::path(a.out) / "report.json");
        os << report.to_json().dump(2) << "\n";
    }
    report.write_csv((fs::path(a.out) / "report.csv").string());

    for (size_t ki = 0; ki < report.ks.size(); ++ki) {
        for (size_t ti = 0; ti < report.tious.size(); ++ti) {
            std::cout << "R@" << report.ks[ki] << ", tIoU=" << report.tious[ti] << ": "
                      << report.recall[ki][ti] << "\n";
        }
    }
    std::cout << "macs: encoder " << report.macs_encoder << ", text " << report.macs_text
              << ", fuse+heads " << report.macs_fuse << "\n"
              << "wall ms/query: " << report.wall_ms_per_query << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string out, config;
    std::string preset = "tacos-small";
    int64_t d_v = 16, d_t = 12;
    cost::VerifyConfig v;
};

int run_bench(const BenchArgs& a) {
    const model::ModelConfig mc = make_model_config(a.preset, "xattn_affine", "late", a.d_v, a.d_t, 32);
    write_resolved_config(a.out, "bench",
                          json{{"preset", a.preset},
                               {"dv", a.d_v},
                               {"dt", a.d_t},
                               {"n_list", a.v.n_list},
                               {"bq_list", a.v.bq_list},
                               {"tw_list", a.v.tw_list},
                               {"batch", a.v.batch_size},
                               {"k", a.v.k_tokens},
                               {"seed", a.v.seed}});
    const cost::CostReport report = cost::verify_against_runtime(mc, a.v);
    report.write_csv((fs::path(a.out) / "sweep.csv").string());
    {
        std::ofstream os(fs::path(a.out) / "cost_report.json");
        os << report.to_json().dump(2) << "\n";
    }
    std::cout << "components: " << report.components.to_json().dump() << "\n";
    for (const auto& row : report.rows) {
        std::cout << row.mode << " M=" << row.m << " N=" << row.n << " B_q=" << row.b_q
                  << " T_w=" << row.t_w << " measured=" << row.ratio_measured
                  << " predicted=" << row.ratio_predicted << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
    std::string corpus, out, config;
    int epochs = 20;
    int64_t batch = 8, bq = 4, t_w = 64;
    uint64_t seed = 0;
    std::vector<int64_t> ks = {1, 5};
    std::vector<double> tious = {0.5, 0.7};
};

struct AblateRow {
    std::string variant;
    int64_t params = 0;
    int64_t macs_pair = 0;       // full (snippet, query) forward
    int64_t macs_per_query = 0;  // text + fuse + heads for late fusion; = pair for early
    double final_loss = 0.0;
    std::vector<std::vector<double>> recall;
};

int run_ablate(const AblateArgs& a) {
    const data::Corpus corpus = data::load_corpus(a.corpus);
    write_resolved_config(a.out, "ablate",
                          json{{"corpus", a.corpus},
                               {"epochs", a.epochs},
                               {"batch", a.batch},
                               {"bq", a.bq},
                               {"tw", a.t_w},
                               {"seed", a.seed},
                               {"ks", a.ks},
                               {"tious", a.tious}});

    const int64_t k_probe = corpus_max_tokens(corpus);
    std::vector<AblateRow> rows;
    const std::vector<std::pair<std::string, std::pair<std::string, std::string>>> variants = {
        {"xattn_affine", {"xattn_affine", "late"}},
        {"xattn", {"xattn", "late"}},
        {"add", {"add", "late"}},
        {"snag_e", {"xattn_affine", "early"}},
    };
    for (const auto& [name, fp] : variants) {
        const model::ModelConfig mc = make_model_config("tiny", fp.first, fp.second, corpus.d_v(),
                                                        corpus.d_t(), corpus_max_tokens(corpus));
        model::GroundingModel m(mc, a.seed);

        train::TrainConfig tc;
        tc.epochs = a.epochs;
        tc.batch_size = a.batch;
        tc.b_q = a.bq;
        tc.t_w = a.t_w;
        tc.seed = a.seed;
        tc.sampler = sampling::SamplerKind::VideoCentric;
        train::TrainResult tr = train::train(corpus, m, tc);

        eval::EvalConfig ec;
        ec.ks = a.ks;
        ec.tious = a.tious;
        ec.t_w = a.t_w;
        ec.cached = fp.second != "early";
        const eval::EvalReport report = eval::evaluate(tr.ema, corpus, ec);

        AblateRow row;
        row.variant = name;
        row.params = tr.ema.parameter_count();
        row.macs_pair = cost::measure_pair_cost(tr.ema, a.t_w, k_probe, a.seed);
        if (fp.second == "early") {
            row.macs_per_query = row.macs_pair;
        } else {
            const cost::ComponentCosts c = cost::measure_components(tr.ema, a.t_w, k_probe, a.seed);
            row.macs_per_query = c.macs_text + c.macs_fuse;
        }
        row.final_loss = tr.metrics.empty() ? 0.0 : tr.metrics.back().loss;
        row.recall = report.recall;
        rows.push_back(std::move(row));
    }

    std::ofstream os(fs::path(a.out) / "ablate.csv");
    if (!os) throw IoError("cannot write ablate.csv under " + a.out);
    os << "variant,params,macs_pair,macs_per_query,final_loss";
    for (const int64_t k : a.ks)
        for (const double th : a.tious) os << ",r" << k << "_tiou" << th;
    os << "\n";
    for (const AblateRow& row : rows) {
        os << row.variant << "," << row.params << "," << row.macs_pair << "," << row.macs_per_query
           << "," << row.final_loss;
        for (size_t ki = 0; ki < a.ks.size(); ++ki)
            for (size_t ti = 0; ti < a.tious.size(); ++ti) os << "," << row.recall[ki][ti];
        os << "\n";
    }

    std::cout << "variant        params   macs/pair   macs/query  final_loss";
    for (const int64_t k : a.ks)
        for (const double th : a.tious) std::cout << "  R@" << k << ",tIoU=" << th;
    std::cout << "\n";
    for (const AblateRow& row : rows) {
        std::cout << row.variant << (row.variant.size() < 14 ? std::string(14 - row.variant.size(), ' ')
                                                             : " ")
                  << row.params << "  " << row.macs_pair << "  " << row.macs_per_query << "  "
                  << row.final_loss;
        for (size_t ki = 0; ki < a.ks.size(); ++ki)
            for (size_t ti = 0; ti < a.tious.size(); ++ti) std::cout << "  " << row.recall[ki][ti];
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"late-fusion temporal grounding toolkit"};
    app.require_subcommand(1);

    GenArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen", "generate a synthetic corpus");
    gen_cmd->add_option("--out", gen.out, "output corpus directory")->required();
    gen_cmd->add_option("--config", gen.config, "JSON config file");
    gen_cmd->add_option("--seed", gen.g.seed);
    gen_cmd->add_option("--videos", gen.g.n_videos);
    gen_cmd->add_option("--t-min", gen.g.t_min);
    gen_cmd->add_option("--t-max", gen.g.t_max);
    gen_cmd->add_option("--queries-min", gen.g.queries_min);
    gen_cmd->add_option("--queries-max", gen.g.queries_max);
    gen_cmd->add_option("--dv", gen.g.d_v);
    gen_cmd->add_option("--dt", gen.g.d_t);
    gen_cmd->add_option("--snr", gen.g.snr);
    gen_cmd->add_option("--k-min", gen.g.k_min);
    gen_cmd->add_option("--k-max", gen.g.k_max);
    gen_cmd->add_option("--len-min", gen.g.len_min);
    gen_cmd->add_option("--len-max", gen.g.len_max);
    gen_cmd->add_option("--split", gen.g.split);

    TrainArgs tr;
    CLI::App* train_cmd = app.add_subcommand("train", "train a grounding model");
    train_cmd->add_option("--corpus", tr.corpus, "path to manifest.json")->required();
    train_cmd->add_option("--out", tr.out, "output directory")->required();
    train_cmd->add_option("--config", tr.config, "JSON config file");
    train_cmd->add_option("--preset", tr.preset, "model preset (tiny, tacos, mad, charades, *-small)");
    train_cmd->add_option("--fusion", tr.fusion, "xattn_affine | xattn | add");
    train_cmd->add_option("--placement", tr.placement, "late | early");
    train_cmd->add_option("--sampler", tr.sampler, "video | query");
    train_cmd->add_option("--bq", tr.t.b_q, "queries per video group");
    train_cmd->add_option("--batch", tr.t.batch_size);
    train_cmd->add_option("--epochs", tr.t.epochs);
    train_cmd->add_option("--lr", tr.t.lr);
    train_cmd->add_option("--tw", tr.t.t_w, "training snippet length");
    train_cmd->add_option("--stride", tr.t.stride, "training snippet stride (default t_w)");
    train_cmd->add_option("--seed", tr.t.seed);
    train_cmd->add_option("--model-seed", tr.model_seed);
    train_cmd->add_option("--wd", tr.t.weight_decay);
    train_cmd->add_option("--ema", tr.t.ema_momentum);

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--corpus", ev.corpus, "path to manifest.json")->required();
    eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
    eval_cmd->add_option("--out", ev.out, "output directory")->required();
    eval_cmd->add_option("--config", ev.config, "JSON config file");
    eval_cmd->add_option("--ks", ev.e.ks, "recall cutoffs");
    eval_cmd->add_option("--tious", ev.e.tious, "tIoU thresholds");
    eval_cmd->add_option("--tw", ev.e.t_w, "inference snippet length");
    eval_cmd->add_option("--stride", ev.e.stride, "inference stride (default t_w/2)");
    eval_cmd->add_option("--cached", ev.cached, "on | off (share video encodings)");
    eval_cmd->add_option("--threads", ev.e.threads);
    eval_cmd->add_option("--topn", ev.e.decode.top_n);
    eval_cmd->add_option("--nms-sigma", ev.e.nms_sigma);

    BenchArgs be;
    CLI::App* bench_cmd = app.add_subcommand("bench", "cost-model verification sweep");
    bench_cmd->add_option("--out", be.out)->required();
    bench_cmd->add_option("--config", be.config, "JSON config file");
    bench_cmd->add_option("--preset", be.preset);
    bench_cmd->add_option("--dv", be.d_v);
    bench_cmd->add_option("--dt", be.d_t);
    bench_cmd->add_option("--n-list", be.v.n_list);
    bench_cmd->add_option("--bq-list", be.v.bq_list);
    bench_cmd->add_option("--tw-list", be.v.tw_list);
    bench_cmd->add_option("--batch", be.v.batch_size);
    bench_cmd->add_option("--k", be.v.k_tokens);
    bench_cmd->add_option("--seed", be.v.seed);

    AblateArgs ab;
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "fusion variant comparison");
    ablate_cmd->add_option("--corpus", ab.corpus)->required();
    ablate_cmd->add_option("--out", ab.out)->required();
    ablate_cmd->add_option("--config", ab.config, "JSON config file");
    ablate_cmd->add_option("--epochs", ab.epochs);
    ablate_cmd->add_option("--batch", ab.batch);
    ablate_cmd->add_option("--bq", ab.bq);
    ablate_cmd->add_option("--tw", ab.t_w);
    ablate_cmd->add_option("--seed", ab.seed);
    ablate_cmd->add_option("--ks", ab.ks);
    ablate_cmd->add_option("--tious", ab.tious);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen_cmd->parsed()) {
            const ConfigFile cf = ConfigFile::load(gen.config, "gen");
            cf.apply(gen_cmd, "seed", gen.g.seed);
            cf.apply(gen_cmd, "videos", gen.g.n_videos);
            cf.apply(gen_cmd, "t-min", gen.g.t_min);
            cf.apply(gen_cmd, "t-max", gen.g.t_max);
            cf.apply(gen_cmd, "queries-min", gen.g.queries_min);
            cf.apply(gen_cmd, "queries-max", gen.g.queries_max);
            cf.apply(gen_cmd, "dv", gen.g.d_v);
            cf.apply(gen_cmd, "dt", gen.g.d_t);
            cf.apply(gen_cmd, "snr", gen.g.snr);
            return run_gen(gen);
        }
        if (train_cmd->parsed()) {
            const ConfigFile cf = ConfigFile::load(tr.config, "train");
            cf.apply(train_cmd, "preset", tr.preset);
            cf.apply(train_cmd, "fusion", tr.fusion);
            cf.apply(train_cmd, "placement", tr.placement);
            cf.apply(train_cmd, "sampler", tr.sampler);
            cf.apply(train_cmd, "bq", tr.t.b_q);
            cf.apply(train_cmd, "batch", tr.t.batch_size);
            cf.apply(train_cmd, "epochs", tr.t.epochs);
            cf.apply(train_cmd, "lr", tr.t.lr);
            cf.apply(train_cmd, "tw", tr.t.t_w);
            cf.apply(train_cmd, "seed", tr.t.seed);
            return run_train(tr);
        }
        if (eval_cmd->parsed()) {
            const ConfigFile cf = ConfigFile::load(ev.config, "eval");
            cf.apply(eval_cmd, "ks", ev.e.ks);
            cf.apply(eval_cmd, "tious", ev.e.tious);
            cf.apply(eval_cmd, "tw", ev.e.t_w);
            cf.apply(eval_cmd, "cached", ev.cached);
            cf.apply(eval_cmd, "threads", ev.e.threads);
            return run_eval(ev);
        }
        if (bench_cmd->parsed()) {
            const ConfigFile cf = ConfigFile::load(be.config, "bench");
            cf.apply(bench_cmd, "preset", be.preset);
            cf.apply(bench_cmd, "n-list", be.v.n_list);
            cf.apply(bench_cmd, "bq-list", be.v.bq_list);
            cf.apply(bench_cmd, "tw-list", be.v.tw_list);
            return run_bench(be);
        }
        if (ablate_cmd->parsed()) {
            const ConfigFile cf = ConfigFile::load(ab.config, "ablate");
            cf.apply(ablate_cmd, "epochs", ab.epochs);
            cf.apply(ablate_cmd, "batch", ab.batch);
            cf.apply(ablate_cmd, "bq", ab.bq);
            cf.apply(ablate_cmd, "tw", ab.t_w);
            return run_ablate(ab);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
