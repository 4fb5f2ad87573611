#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#ifndef SNAG_BIN
#error "SNAG_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(SNAG_BIN) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    RunResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), buf.size(), pipe) != nullptr) res.output += buf.data();
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

fs::path fresh_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("snag_cli_" + tag);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

// Rows of a metrics.csv column.
std::vector<double> csv_column(const fs::path& p, const std::string& name) {
    std::ifstream is(p);
    REQUIRE(is.good());
    std::string header;
    std::getline(is, header);
    std::vector<std::string> cols;
    for (size_t pos = 0; pos <= header.size();) {
        const size_t comma = header.find(',', pos);
        cols.push_back(header.substr(pos, comma - pos));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    int64_t target = -1;
    for (size_t i = 0; i < cols.size(); ++i)
        if (cols[i] == name) target = static_cast<int64_t>(i);
    REQUIRE(target >= 0);
    std::vector<double> out;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        size_t pos = 0;
        for (int64_t i = 0; i < target; ++i) pos = line.find(',', pos) + 1;
        out.push_back(std::stod(line.substr(pos)));
    }
    return out;
}

std::string gen_corpus(const std::string& tag, const std::string& extra = "") {
    const fs::path dir = fresh_dir(tag);
    const auto res = run_cli("gen --out " + dir.string() +
                             " --seed 3 --videos 4 --t-min 48 --t-max 64 --dv 8 --dt 6 " + extra);
    REQUIRE(res.exit_code == 0);
    return (dir / "manifest.json").string();
}

}  // namespace

TEST_CASE("gen: identical seeds give identical directories") {
    const fs::path a = fresh_dir("gen_a");
    const fs::path b = fresh_dir("gen_b");
    const std::string flags = " --seed 0 --videos 8 --dv 8 --dt 6";
    REQUIRE(run_cli("gen --out " + a.string() + flags).exit_code == 0);
    REQUIRE(run_cli("gen --out " + b.string() + flags).exit_code == 0);
    for (const char* rel : {"manifest.json", "queries.jsonl", "stats.json", "features/v0.f32",
                            "features/v7.f32"}) {
        CHECK(slurp(a / rel) == slurp(b / rel));
    }
    // The resolved config is echoed into the output directory.
    CHECK(fs::exists(a / "config.json"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("gen: stats survive an independent recount of the written files") {
    const fs::path dir = fresh_dir("gen_recount");
    REQUIRE(run_cli("gen --out " + dir.string() + " --seed 9 --videos 5 --dv 8 --dt 6").exit_code == 0);
    const json stats = load_json(dir / "stats.json");
    const json manifest = load_json(dir / "manifest.json");

    // Recount videos and steps from the manifest.
    CHECK(stats.at("n_videos").get<int64_t>() == static_cast<int64_t>(manifest.at("videos").size()));
    int64_t tmin = INT64_MAX, tmax = 0;
    for (const auto& v : manifest.at("videos")) {
        tmin = std::min(tmin, v.at("T").get<int64_t>());
        tmax = std::max(tmax, v.at("T").get<int64_t>());
        const auto fsize = fs::file_size(dir / v.at("path").get<std::string>());
        CHECK(static_cast<int64_t>(fsize) ==
              v.at("T").get<int64_t>() * v.at("D_v").get<int64_t>() * 4);
    }
    CHECK(stats.at("video_steps").at("min").get<int64_t>() == tmin);
    CHECK(stats.at("video_steps").at("max").get<int64_t>() == tmax);

    // Recount queries from the JSONL.
    std::ifstream qs(dir / manifest.at("queries_path").get<std::string>());
    int64_t n_queries = 0;
    double coverage_sum = 0.0;
    std::map<std::string, int64_t> video_t;
    for (const auto& v : manifest.at("videos"))
        video_t[v.at("id").get<std::string>()] = v.at("T").get<int64_t>();
    for (std::string line; std::getline(qs, line);) {
        if (line.empty()) continue;
        const json q = json::parse(line);
        ++n_queries;
        coverage_sum += (q.at("end").get<double>() - q.at("start").get<double>()) /
                        static_cast<double>(video_t.at(q.at("video_id").get<std::string>()));
    }
    CHECK(stats.at("n_queries").get<int64_t>() == n_queries);
    CHECK(stats.at("queries_per_video").get<double>() ==
          doctest::Approx(static_cast<double>(n_queries) / 5.0).epsilon(1e-12));
    CHECK(stats.at("moment_coverage").at("mean").get<double>() ==
          doctest::Approx(coverage_sum / static_cast<double>(n_queries)).epsilon(1e-9));
    fs::remove_all(dir);
}

TEST_CASE("train: group size divides per-query encoder MACs; seeds fix checkpoints") {
    const std::string manifest = gen_corpus("train_corpus");
    const fs::path out1 = fresh_dir("train_bq8");
    const fs::path out2 = fresh_dir("train_bq1");
    const std::string common = " --corpus " + manifest + " --epochs 2 --batch 8 --tw 48 --seed 5";
    REQUIRE(run_cli("train --out " + out1.string() + common + " --sampler video --bq 8").exit_code == 0);
    REQUIRE(run_cli("train --out " + out2.string() + common + " --sampler video --bq 1").exit_code == 0);

    const auto mpq8 = csv_column(out1 / "metrics.csv", "macs_per_query");
    const auto mpq1 = csv_column(out2 / "metrics.csv", "macs_per_query");
    REQUIRE(mpq8.size() == mpq1.size());
    for (size_t i = 0; i < mpq8.size(); ++i) CHECK(mpq1[i] == 8.0 * mpq8[i]);

    // Same seed, same checkpoint bytes.
    const fs::path out3 = fresh_dir("train_repeat");
    REQUIRE(run_cli("train --out " + out3.string() + common + " --sampler video --bq 8").exit_code == 0);
    CHECK(slurp(out1 / "checkpoint.ckpt") == slurp(out3 / "checkpoint.ckpt"));

    // Query-centric sampler runs too.
    const fs::path out4 = fresh_dir("train_query");
    REQUIRE(run_cli("train --out " + out4.string() + common + " --sampler query").exit_code == 0);

    for (const auto& d : {out1, out2, out3, out4}) fs::remove_all(d);
}

TEST_CASE("train: usage errors exit with 2") {
    CHECK(run_cli("train --out /tmp/snag_nope").exit_code == 2);          // missing --corpus
    const std::string manifest = gen_corpus("train_usage");
    const auto res = run_cli("train --corpus " + manifest + " --out /tmp/snag_nope2 --bq 3 --batch 8");
    CHECK(res.exit_code == 2);  // B_q does not divide batch
    CHECK(res.output.find("divide") != std::string::npos);
}

TEST_CASE("eval: cached and uncached recall tables are identical") {
    const std::string manifest = gen_corpus("eval_corpus");
    const fs::path train_out = fresh_dir("eval_train");
    REQUIRE(run_cli("train --corpus " + manifest + " --out " + train_out.string() +
                    " --epochs 2 --batch 8 --bq 4 --tw 48")
                .exit_code == 0);

    const fs::path eo_on = fresh_dir("eval_on");
    const fs::path eo_off = fresh_dir("eval_off");
    const std::string common = " --corpus " + manifest + " --checkpoint " +
                               (train_out / "checkpoint.ckpt").string() +
                               " --tw 48 --ks 1 5 --tious 0.3 0.5";
    REQUIRE(run_cli("eval --out " + eo_on.string() + common + " --cached on").exit_code == 0);
    REQUIRE(run_cli("eval --out " + eo_off.string() + common + " --cached off").exit_code == 0);

    const json on = load_json(eo_on / "report.json");
    const json off = load_json(eo_off / "report.json");
    CHECK(on.at("recall") == off.at("recall"));
    CHECK(on.at("coverage_bins") == off.at("coverage_bins"));

    // R@5 >= R@1 in every emitted row.
    const auto recall = on.at("recall").get<std::vector<std::vector<double>>>();
    for (size_t ti = 0; ti < recall[0].size(); ++ti) CHECK(recall[1][ti] >= recall[0][ti]);

    for (const auto& d : {train_out, eo_on, eo_off}) fs::remove_all(d);
}

TEST_CASE("bench: grid size, alpha->0 sanity row, and 5% agreement") {
    const fs::path out = fresh_dir("bench_out");
    REQUIRE(run_cli("bench --out " + out.string() +
                    " --preset tiny --dv 8 --dt 6 --n-list 1 4 8 --bq-list 1 2 --tw-list 32")
                .exit_code == 0);
    std::ifstream is(out / "sweep.csv");
    std::string header;
    std::getline(is, header);
    int inference = 0, alpha0 = 0, train_rows = 0;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        for (size_t pos = 0; pos <= line.size();) {
            const size_t comma = line.find(',', pos);
            f.push_back(line.substr(pos, comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        const double measured = std::stod(f[9]);
        const double predicted = std::stod(f[10]);
        if (f[0] == "inference") {
            ++inference;
            CHECK(std::abs(measured - predicted) / predicted < 0.05);
        } else if (f[0] == "alpha0") {
            ++alpha0;
            CHECK(measured == std::stod(f[2]));  // exactly N
        } else if (f[0] == "train") {
            ++train_rows;
            CHECK(std::abs(measured - predicted) / predicted < 0.05);
        }
    }
    CHECK(inference == 3);  // one per N
    CHECK(alpha0 == 3);
    CHECK(train_rows == 2);  // one per B_q
    fs::remove_all(out);
}

TEST_CASE("config file fills defaults, flags override") {
    const fs::path dir = fresh_dir("cfgfile");
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "cfg.json");
        os << R"({"gen": {"videos": 3, "seed": 42}})";
    }
    const fs::path out = fresh_dir("cfg_out");
    // seed comes from the file, videos is overridden on the command line.
    REQUIRE(run_cli("gen --out " + out.string() + " --config " + (dir / "cfg.json").string() +
                    " --videos 2 --dv 8 --dt 6")
                .exit_code == 0);
    const json manifest = load_json(out / "manifest.json");
    CHECK(manifest.at("videos").size() == 2);
    const json resolved = load_json(out / "config.json");
    CHECK(resolved.at("config").at("seed").get<uint64_t>() == 42);
    fs::remove_all(dir);
    fs::remove_all(out);
}
