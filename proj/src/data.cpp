#include "snag/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian float32; big-endian hosts are unsupported");

namespace snag::data {

namespace fs = std::filesystem;
using nlohmann::json;

const FeatureSequence& Corpus::video(const std::string& video_id) const {
    for (const FeatureSequence& v : videos) {
        if (v.video_id == video_id) return v;
    }
    throw IoError("unknown video_id: " + video_id);
}

std::vector<const QueryTokens*> Corpus::queries_of(const std::string& video_id) const {
    std::vector<const QueryTokens*> out;
    for (const QueryTokens& q : queries) {
        if (q.video_id == video_id) out.push_back(&q);
    }
    return out;
}

void GenConfig::validate() const {
    if (n_videos < 1) throw ConfigError("n_videos must be >= 1");
    if (t_min < 1 || t_min > t_max) throw ConfigError("degenerate T range");
    if (queries_min < 0 || queries_min > queries_max) throw ConfigError("degenerate queries range");
    if (d_v < 1 || d_t < 1) throw ConfigError("feature dims must be >= 1");
    if (!(snr > 0.0)) throw ConfigError("snr must be > 0");
    if (k_min < 1 || k_min > k_max) throw ConfigError("degenerate token-count range");
    if (!(len_min >= 1.0) || len_min > len_max) throw ConfigError("degenerate moment-length range");
}

namespace {

double snap_quarter(double x) { return std::floor(x * 4.0) / 4.0; }

double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

void quantize_tensor(Tensor& t) {
    for (int64_t i = 0; i < t.size(); ++i) t[i] = quantize_f32(t[i]);
}

}  // namespace

Corpus generate_synthetic_corpus(const GenConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const double noise_std = 1.0 / cfg.snr;

    // Fixed projection from event space to token space, shared by the corpus.
    Tensor proj = rng.normal_tensor({cfg.d_t, cfg.d_v}, 1.0);

    Corpus corpus;
    corpus.split = cfg.split;
    for (int64_t vi = 0; vi < cfg.n_videos; ++vi) {
        FeatureSequence video;
        video.video_id = "v" + std::to_string(vi);
        const int64_t T = cfg.t_min + rng.uniform_int(cfg.t_max - cfg.t_min + 1);
        video.features = rng.normal_tensor({T, cfg.d_v}, noise_std);

        const int64_t n_q = cfg.queries_min + rng.uniform_int(cfg.queries_max - cfg.queries_min + 1);
        if (n_q > 0) {
            const double seg = static_cast<double>(T) / static_cast<double>(n_q);
            if (seg < 2.0) {
                throw ConfigError("too many queries for video length (segment " + std::to_string(seg) +
                                  " steps)");
            }
            for (int64_t qi = 0; qi < n_q; ++qi) {
                const double seg_lo = seg * static_cast<double>(qi);
                const double seg_hi = seg * static_cast<double>(qi + 1);
                double len_hi = std::min(cfg.len_max, 0.8 * seg);
                double len_lo = std::min(cfg.len_min, len_hi);
                double len = snap_quarter(rng.uniform(len_lo, len_hi));
                len = std::max(1.0, len);
                double start = snap_quarter(rng.uniform(seg_lo, seg_hi - len));
                start = std::max(0.0, start);
                MomentInterval target{start, std::min(start + len, static_cast<double>(T))};

                // Plant the event: a unit-norm vector added over the moment.
                Tensor event({cfg.d_v});
                double norm = 0.0;
                for (int64_t d = 0; d < cfg.d_v; ++d) {
                    event[d] = rng.normal();
                    norm += event[d] * event[d];
                }
                norm = std::sqrt(std::max(norm, 1e-12));
                for (int64_t d = 0; d < cfg.d_v; ++d) event[d] /= norm;
                const int64_t step_lo = std::lround(target.start);
                const int64_t step_hi = std::min<int64_t>(std::lround(target.end), T);
                for (int64_t t = step_lo; t < step_hi; ++t) {
                    for (int64_t d = 0; d < cfg.d_v; ++d) video.features.at(t, d) += event[d];
                }

                QueryTokens q;
                q.query_id = video.video_id + "_q" + std::to_string(qi);
                q.video_id = video.video_id;
                q.target = target;
                const int64_t K = cfg.k_min + rng.uniform_int(cfg.k_max - cfg.k_min + 1);
                q.tokens = Tensor({K, cfg.d_t});
                for (int64_t k = 0; k < K; ++k) {
                    for (int64_t dt = 0; dt < cfg.d_t; ++dt) {
                        double base = 0.0;
                        for (int64_t dv = 0; dv < cfg.d_v; ++dv) base += proj.at(dt, dv) * event[dv];
                        q.tokens.at(k, dt) = base + rng.normal() * noise_std;
                    }
                }
                quantize_tensor(q.tokens);
                corpus.queries.push_back(std::move(q));
            }
        }
        // float32 quantization here makes save/load lossless.
        quantize_tensor(video.features);
        corpus.videos.push_back(std::move(video));
    }
    return corpus;
}

std::vector<Snippet> enumerate_snippets(const FeatureSequence& video, int64_t t_w, int64_t stride) {
    if (t_w < 1) throw ConfigError("snippet length must be >= 1");
    if (stride < 1) throw ConfigError("snippet stride must be >= 1");
    const int64_t T = video.T();
    std::vector<Snippet> out;
    for (int64_t off = 0; off + t_w < T; off += stride) {
        out.push_back(Snippet{video.video_id, off, t_w});
    }
    const int64_t final_off = std::max<int64_t>(T - t_w, 0);
    out.push_back(Snippet{video.video_id, final_off, std::min(t_w, T - final_off)});
    return out;
}

Tensor snippet_features(const Corpus& corpus, const Snippet& snippet) {
    const Tensor& full = corpus.video(snippet.video_id).features;
    const int64_t d = full.dim(1);
    Tensor out({snippet.length, d});
    for (int64_t t = 0; t < snippet.length; ++t)
        for (int64_t j = 0; j < d; ++j) out.at(t, j) = full.at(snippet.offset + t, j);
    return out;
}

std::vector<const QueryTokens*> valid_queries_for(const Snippet& snippet, const Corpus& corpus) {
    std::vector<const QueryTokens*> out;
    for (const QueryTokens& q : corpus.queries) {
        if (q.video_id == snippet.video_id && snippet.covers(q.target)) out.push_back(&q);
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

void write_f32_file(const fs::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    std::vector<float> buf(static_cast<size_t>(t.size()));
    for (int64_t i = 0; i < t.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!os) throw IoError("failed writing: " + path.string());
}

Tensor read_f32_file(const fs::path& path, int64_t rows, int64_t cols, const std::string& record) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("missing feature file for " + record + ": " + path.string());
    is.seekg(0, std::ios::end);
    const int64_t bytes = static_cast<int64_t>(is.tellg());
    if (bytes != rows * cols * static_cast<int64_t>(sizeof(float))) {
        throw IoError("feature file for " + record + " has " + std::to_string(bytes) +
                      " bytes, manifest expects " + std::to_string(rows * cols * 4));
    }
    is.seekg(0);
    std::vector<float> buf(static_cast<size_t>(rows * cols));
    is.read(reinterpret_cast<char*>(buf.data()), bytes);
    if (!is) throw IoError("failed reading: " + path.string());
    Tensor t({rows, cols});
    for (int64_t i = 0; i < t.size(); ++i) {
        const float v = buf[static_cast<size_t>(i)];
        if (!std::isfinite(v)) throw IoError("non-finite value in features of " + record);
        t[i] = static_cast<double>(v);
    }
    return t;
}

Tensor tokens_from_json(const json& arr, const std::string& record) {
    if (!arr.is_array() || arr.empty()) throw IoError("bad token matrix for " + record);
    const int64_t K = static_cast<int64_t>(arr.size());
    const int64_t D = static_cast<int64_t>(arr.front().size());
    Tensor t({K, D});
    for (int64_t k = 0; k < K; ++k) {
        const json& row = arr[static_cast<size_t>(k)];
        if (static_cast<int64_t>(row.size()) != D) throw IoError("ragged token matrix for " + record);
        for (int64_t d = 0; d < D; ++d) {
            const double v = row[static_cast<size_t>(d)].get<double>();
            if (!std::isfinite(v)) throw IoError("non-finite token value for " + record);
            t.at(k, d) = v;
        }
    }
    return t;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root / "features");

    json manifest;
    manifest["queries_path"] = "queries.jsonl";
    manifest["D_t"] = corpus.d_t();
    manifest["split"] = corpus.split;
    json videos = json::array();
    for (const FeatureSequence& v : corpus.videos) {
        const std::string rel = "features/" + v.video_id + ".f32";
        write_f32_file(root / rel, v.features);
        videos.push_back({{"id", v.video_id},
                          {"path", rel},
                          {"T", v.T()},
                          {"D_v", v.d_v()},
                          {"fps", v.fps_equivalent}});
    }
    manifest["videos"] = std::move(videos);
    {
        std::ofstream os(root / "manifest.json");
        if (!os) throw IoError("cannot write manifest under " + dir);
        os << manifest.dump(2) << "\n";
    }
    {
        std::ofstream os(root / "queries.jsonl");
        if (!os) throw IoError("cannot write queries under " + dir);
        for (const QueryTokens& q : corpus.queries) {
            json rec;
            rec["query_id"] = q.query_id;
            rec["video_id"] = q.video_id;
            rec["start"] = q.target.start;
            rec["end"] = q.target.end;
            json tokens = json::array();
            for (int64_t k = 0; k < q.K(); ++k) {
                json row = json::array();
                for (int64_t d = 0; d < q.tokens.dim(1); ++d) row.push_back(q.tokens.at(k, d));
                tokens.push_back(std::move(row));
            }
            rec["tokens"] = std::move(tokens);
            os << rec.dump() << "\n";
        }
    }
}

Corpus load_corpus(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw IoError("missing manifest: " + manifest_path);
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw IoError("bad manifest " + manifest_path + ": " + e.what());
    }
    const fs::path base = fs::path(manifest_path).parent_path();

    Corpus corpus;
    corpus.split = manifest.value("split", "train");
    const int64_t d_t = manifest.at("D_t").get<int64_t>();
    for (const json& vj : manifest.at("videos")) {
        FeatureSequence v;
        v.video_id = vj.at("id").get<std::string>();
        const int64_t T = vj.at("T").get<int64_t>();
        const int64_t d_v = vj.at("D_v").get<int64_t>();
        if (T < 1 || d_v < 1) throw IoError("bad dimensions for video " + v.video_id);
        v.fps_equivalent = vj.value("fps", 1.0);
        v.features = read_f32_file(base / vj.at("path").get<std::string>(), T, d_v, "video " + v.video_id);
        corpus.videos.push_back(std::move(v));
    }

    const fs::path qpath = base / manifest.at("queries_path").get<std::string>();
    std::ifstream qs(qpath);
    if (!qs) throw IoError("missing queries file: " + qpath.string());
    std::string line;
    while (std::getline(qs, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("bad query record in " + qpath.string() + ": " + e.what());
        }
        QueryTokens q;
        q.query_id = rec.at("query_id").get<std::string>();
        q.video_id = rec.at("video_id").get<std::string>();
        q.target.start = rec.at("start").get<double>();
        q.target.end = rec.at("end").get<double>();
        if (rec.contains("tokens")) {
            q.tokens = tokens_from_json(rec["tokens"], "query " + q.query_id);
        } else if (rec.contains("tokens_path")) {
            const fs::path tp = base / rec["tokens_path"].get<std::string>();
            std::ifstream ts(tp, std::ios::binary);
            if (!ts) throw IoError("missing token file for query " + q.query_id + ": " + tp.string());
            ts.seekg(0, std::ios::end);
            const int64_t bytes = static_cast<int64_t>(ts.tellg());
            if (bytes % (d_t * static_cast<int64_t>(sizeof(float))) != 0) {
                throw IoError("token file for query " + q.query_id + " is not a multiple of D_t rows");
            }
            const int64_t K = bytes / (d_t * static_cast<int64_t>(sizeof(float)));
            q.tokens = read_f32_file(tp, K, d_t, "query " + q.query_id);
        } else {
            throw IoError("query " + q.query_id + " has neither tokens nor tokens_path");
        }
        if (q.tokens.dim(1) != d_t) {
            throw IoError("query " + q.query_id + " token dim " + std::to_string(q.tokens.dim(1)) +
                          " != manifest D_t " + std::to_string(d_t));
        }
        if (q.K() < 1) throw IoError("query " + q.query_id + " has no tokens");
        // Target must resolve and lie within its video.
        const FeatureSequence* video = nullptr;
        for (const FeatureSequence& v : corpus.videos) {
            if (v.video_id == q.video_id) {
                video = &v;
                break;
            }
        }
        if (!video) throw IoError("query " + q.query_id + " references unknown video " + q.video_id);
        if (!(q.target.start >= 0.0) || !(q.target.start <= q.target.end) ||
            q.target.end > static_cast<double>(video->T())) {
            throw IoError("query " + q.query_id + " has target outside [0, T]");
        }
        corpus.queries.push_back(std::move(q));
    }
    return corpus;
}

nlohmann::json corpus_stats(const Corpus& corpus) {
    json s;
    s["n_videos"] = corpus.videos.size();
    s["n_queries"] = corpus.queries.size();
    s["split"] = corpus.split;
    if (!corpus.videos.empty()) {
        int64_t tmin = corpus.videos.front().T(), tmax = tmin;
        double tsum = 0.0;
        for (const FeatureSequence& v : corpus.videos) {
            tmin = std::min(tmin, v.T());
            tmax = std::max(tmax, v.T());
            tsum += static_cast<double>(v.T());
        }
        s["video_steps"] = {{"min", tmin},
                            {"max", tmax},
                            {"mean", tsum / static_cast<double>(corpus.videos.size())}};
        s["queries_per_video"] =
            static_cast<double>(corpus.queries.size()) / static_cast<double>(corpus.videos.size());
        s["D_v"] = corpus.d_v();
    }
    if (!corpus.queries.empty()) {
        double cmin = 1.0, cmax = 0.0, csum = 0.0;
        double lsum = 0.0;
        for (const QueryTokens& q : corpus.queries) {
            const double T = static_cast<double>(corpus.video(q.video_id).T());
            const double cov = q.target.length() / T;
            cmin = std::min(cmin, cov);
            cmax = std::max(cmax, cov);
            csum += cov;
            lsum += q.target.length();
        }
        const double nq = static_cast<double>(corpus.queries.size());
        s["moment_coverage"] = {{"min", cmin}, {"max", cmax}, {"mean", csum / nq}};
        s["moment_length_mean"] = lsum / nq;
        s["D_t"] = corpus.d_t();
    }
    return s;
}

}  // namespace snag::data
