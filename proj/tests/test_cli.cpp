#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "mpgat/cli.hpp"
#include "mpgat/features.hpp"

using namespace mpgat;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

// In-process invocation with captured streams, so tests can assert on the
// echoed config and on error text without spawning processes.
CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
  CliResult r;
  r.code = run_cli(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int64_t count_lines(const std::string& text) {
  int64_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mpgat_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// One small synthetic dataset and one trained run, shared across test cases.
struct SharedRuns {
  fs::path synth_dir;
  fs::path train_dir;

  SharedRuns() {
    fs::path root = fresh_dir("shared");
    synth_dir = root / "synth";
    train_dir = root / "train";
    CliResult s = run({"synth", "--nodes", "3", "--days", "13", "--seed", "11",
                       "--out", synth_dir.string()});
    REQUIRE(s.code == 0);
    CliResult t = run({"train", "--data", (synth_dir / "data.csv").string(),
                       "--graph", (synth_dir / "graph.json").string(),
                       "--dlatent", "6", "--dresidual", "6", "--dskip", "8", "--dend", "8",
                       "--batch", "32", "--epochs", "2", "--patience", "2", "--seed", "3",
                       "--out", train_dir.string()});
    REQUIRE(t.code == 0);
  }
};

const SharedRuns& shared() {
  static SharedRuns runs;
  return runs;
}

void write_reports(const fs::path& path, const std::vector<std::vector<double>>& mapes,
                   uint64_t seed0) {
  std::ofstream out(path);
  for (size_t i = 0; i < mapes.size(); ++i) {
    out << "{\"seed\":" << seed0 + i << ",\"mape\":{\"h1\":" << mapes[i][0]
        << ",\"h3\":" << mapes[i][1] << "},\"epochs\":5,\"seconds\":1.0}\n";
  }
}

}  // namespace

TEST_CASE("synth writes the full grid and is byte-identical across reruns") {
  fs::path a = fresh_dir("synth_a");
  fs::path b = fresh_dir("synth_b");
  CliResult ra = run({"synth", "--nodes", "6", "--days", "14", "--seed", "7", "--out", a.string()});
  REQUIRE(ra.code == 0);
  const std::string csv = slurp((a / "data.csv").string());
  CHECK(count_lines(csv) == 6 * 14 * 288 + 1);  // header + one row per node-step

  CliResult rb = run({"synth", "--nodes", "6", "--days", "14", "--seed", "7", "--out", b.string()});
  REQUIRE(rb.code == 0);
  CHECK(slurp((b / "data.csv").string()) == csv);
  CHECK(slurp((b / "graph.json").string()) == slurp((a / "graph.json").string()));
  CHECK(slurp((b / "manifest.json").string()) == slurp((a / "manifest.json").string()));
}

TEST_CASE("synth defaults to the documented peak ratio") {
  fs::path dir = fresh_dir("synth_ratio");
  CliResult r = run({"synth", "--nodes", "2", "--days", "2", "--noise", "0", "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto manifest = nlohmann::json::parse(slurp((dir / "manifest.json").string()));
  CHECK(manifest.at("peak_ratio").get<double>() == 200.0);
  CHECK(r.out.find("peak-ratio=200") != std::string::npos);

  RawSeries s = ingest_csv((dir / "data.csv").string());
  double lo = 1e300, hi = 0;
  for (int64_t t = 0; t < s.t_total; ++t) {
    lo = std::min(lo, s.count(t, 0));
    hi = std::max(hi, s.count(t, 0));
  }
  CHECK(hi / lo == doctest::Approx(200.0).epsilon(0.02));
}

TEST_CASE("echoed config replays a run bit for bit") {
  fs::path a = fresh_dir("echo_a");
  fs::path b = fresh_dir("echo_b");
  CliResult ra = run({"synth", "--nodes", "4", "--days", "2", "--seed", "19", "--out", a.string()});
  REQUIRE(ra.code == 0);
  // The echoed file holds every resolved option; flags still override it.
  CliResult rb = run({"synth", "--config", (a / "config.txt").string(), "--out", b.string()});
  REQUIRE(rb.code == 0);
  CHECK(slurp((b / "data.csv").string()) == slurp((a / "data.csv").string()));
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == 2);                                   // no subcommand
  CHECK(run({"frobnicate"}).code == 2);                       // unknown subcommand
  CHECK(run({"synth", "--no-such-flag"}).code == 2);          // unknown flag
  CHECK(run({"prepare"}).code == 2);                          // missing required --data
  CHECK(run({"train"}).code == 2);                            // neither --data nor --cache
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"synth", "--help"}).code == 0);
}

TEST_CASE("validation failures exit with code 3") {
  fs::path dir = fresh_dir("validation");
  CHECK(run({"prepare", "--data", (dir / "missing.csv").string(), "--out", dir.string()}).code == 3);

  // Node-count conflict with the built-in default graph (6 nodes).
  const SharedRuns& sh = shared();
  CliResult r = run({"train", "--data", (sh.synth_dir / "data.csv").string(),
                     "--epochs", "1", "--patience", "1", "--out", (dir / "t").string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("6 nodes") != std::string::npos);

  // Invalid configuration is rejected before training starts.
  CHECK(run({"train", "--data", (sh.synth_dir / "data.csv").string(),
             "--graph", (sh.synth_dir / "graph.json").string(),
             "--patience", "200", "--epochs", "100", "--out", (dir / "t2").string()})
            .code == 3);
}

TEST_CASE("train produces checkpoint, history, and seed reports") {
  const SharedRuns& sh = shared();
  CHECK(fs::exists(sh.train_dir / "checkpoint.bin"));
  CHECK(fs::exists(sh.train_dir / "config.txt"));

  const auto history = nlohmann::json::parse(slurp((sh.train_dir / "history.json").string()));
  CHECK(history.at("train_loss").size() == 2);
  CHECK(history.at("best_epoch").get<int64_t>() >= 1);

  const std::string jsonl = slurp((sh.train_dir / "reports.jsonl").string());
  CHECK(count_lines(jsonl) == 1);
  const auto report = nlohmann::json::parse(jsonl);
  CHECK(report.at("seed").get<uint64_t>() == 3);
  CHECK(report.at("mape").contains("h1"));
  CHECK(report.at("mape").contains("h12"));
  CHECK(report.at("epochs").get<int64_t>() == 2);

  const auto persistence = nlohmann::json::parse(slurp((sh.train_dir / "persistence.json").string()));
  CHECK(persistence.at("mape").at("h1").get<double>() > 0.0);
}

TEST_CASE("multi-seed training reports every seed plus an aggregate") {
  const SharedRuns& sh = shared();
  fs::path dir = fresh_dir("multi");
  CliResult r = run({"train", "--data", (sh.synth_dir / "data.csv").string(),
                     "--graph", (sh.synth_dir / "graph.json").string(),
                     "--dlatent", "6", "--dresidual", "6", "--dskip", "8", "--dend", "8",
                     "--batch", "32", "--epochs", "1", "--patience", "1", "--seed", "5",
                     "--runs", "3", "--workers", "2", "--out", dir.string()});
  REQUIRE(r.code == 0);
  std::istringstream jsonl(slurp((dir / "reports.jsonl").string()));
  std::string line;
  std::vector<uint64_t> seeds;
  while (std::getline(jsonl, line))
    seeds.push_back(nlohmann::json::parse(line).at("seed").get<uint64_t>());
  CHECK(seeds == std::vector<uint64_t>{5, 6, 7});
  CHECK(r.out.find("aggregate over 3 seeds") != std::string::npos);

  // Two runs is below multi_run's own minimum; the single extra seed takes
  // the direct path.
  fs::path dir2 = fresh_dir("multi2");
  CliResult r2 = run({"train", "--data", (sh.synth_dir / "data.csv").string(),
                      "--graph", (sh.synth_dir / "graph.json").string(),
                      "--dlatent", "6", "--dresidual", "6", "--dskip", "8", "--dend", "8",
                      "--batch", "32", "--epochs", "1", "--patience", "1", "--seed", "5",
                      "--runs", "2", "--out", dir2.string()});
  REQUIRE(r2.code == 0);
  std::istringstream jsonl2(slurp((dir2 / "reports.jsonl").string()));
  std::vector<uint64_t> seeds2;
  while (std::getline(jsonl2, line))
    seeds2.push_back(nlohmann::json::parse(line).at("seed").get<uint64_t>());
  CHECK(seeds2 == std::vector<uint64_t>{5, 6});
  CHECK(r2.out.find("aggregate over 2 seeds") != std::string::npos);
}

TEST_CASE("eval reloads a checkpoint and reports both methods") {
  const SharedRuns& sh = shared();
  fs::path dir = fresh_dir("eval");
  CliResult r = run({"eval", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
                     "--data", (sh.synth_dir / "data.csv").string(), "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp((dir / "eval.json").string()));
  for (const char* h : {"h1", "h3", "h6", "h12"}) {
    CHECK(j.at("model").at(h).get<double>() >= 0.0);
    CHECK(j.at("persistence").at(h).get<double>() >= 0.0);
  }

  // The eval metrics match what training reported for the same seed.
  const auto report = nlohmann::json::parse(slurp((sh.train_dir / "reports.jsonl").string()));
  CHECK(j.at("model").at("h1").get<double>() ==
        doctest::Approx(report.at("mape").at("h1").get<double>()).epsilon(1e-12));
}

TEST_CASE("compare flags identical sets as no-call and separated sets as significant") {
  fs::path dir = fresh_dir("compare");
  write_reports(dir / "same_a.jsonl", {{0.10, 0.20}, {0.11, 0.21}, {0.12, 0.22}}, 1);
  write_reports(dir / "same_b.jsonl", {{0.10, 0.20}, {0.11, 0.21}, {0.12, 0.22}}, 9);
  CliResult same = run({"compare", "--a", (dir / "same_a.jsonl").string(),
                        "--b", (dir / "same_b.jsonl").string(), "--out", (dir / "same").string()});
  REQUIRE(same.code == 0);
  std::istringstream csv(slurp((dir / "same" / "compare.csv").string()));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "horizon_minutes,mean_a,std_a,mean_b,std_b,h,p_value");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    const size_t h_col = line.rfind(',', line.rfind(',') - 1);
    CHECK(line[h_col + 1] == '0');
  }
  CHECK(rows == 2);  // h1 and h3

  // Clearly separated sides: the first set is significantly smaller.
  write_reports(dir / "lo.jsonl", {{0.10, 0.10}, {0.11, 0.11}, {0.12, 0.12}, {0.10, 0.10}, {0.11, 0.11}}, 1);
  write_reports(dir / "hi.jsonl", {{0.50, 0.50}, {0.51, 0.51}, {0.52, 0.52}, {0.50, 0.50}, {0.51, 0.51}}, 9);
  CliResult sep = run({"compare", "--a", (dir / "lo.jsonl").string(),
                       "--b", (dir / "hi.jsonl").string(), "--out", (dir / "sep").string()});
  REQUIRE(sep.code == 0);
  std::istringstream sep_csv(slurp((dir / "sep" / "compare.csv").string()));
  std::getline(sep_csv, line);
  while (std::getline(sep_csv, line)) {
    const size_t h_col = line.rfind(',', line.rfind(',') - 1);
    CHECK(line[h_col + 1] == '1');
  }

  // Degenerate inputs are rejected.
  write_reports(dir / "single.jsonl", {{0.1, 0.2}}, 1);
  CHECK(run({"compare", "--a", (dir / "single.jsonl").string(),
             "--b", (dir / "hi.jsonl").string(), "--out", (dir / "bad1").string()}).code == 3);
  std::ofstream(dir / "other_horizons.jsonl")
      << "{\"seed\":1,\"mape\":{\"h1\":0.1},\"epochs\":1,\"seconds\":1.0}\n"
      << "{\"seed\":2,\"mape\":{\"h1\":0.1},\"epochs\":1,\"seconds\":1.0}\n";
  CHECK(run({"compare", "--a", (dir / "other_horizons.jsonl").string(),
             "--b", (dir / "hi.jsonl").string(), "--out", (dir / "bad2").string()}).code == 3);
}

TEST_CASE("predict emits one timestamped forecast per node and horizon") {
  const SharedRuns& sh = shared();
  fs::path dir = fresh_dir("predict");
  CliResult r = run({"predict", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
                     "--data", (sh.synth_dir / "data.csv").string(), "--out", dir.string()});
  REQUIRE(r.code == 0);
  const std::string csv = slurp((dir / "predictions.csv").string());
  CHECK(count_lines(csv) == 3 * 12 + 1);
  CHECK(csv.rfind("node_id,timestamp,prediction\n", 0) == 0);

  // Forecast timestamps continue the series grid past its end.
  RawSeries s = ingest_csv((sh.synth_dir / "data.csv").string());
  const int64_t start = parse_timestamp(s.start_timestamp);
  const std::string first_ts = format_timestamp(start + s.t_total * kStepSeconds);
  CHECK(csv.find("n0," + first_ts + ",") != std::string::npos);

  fs::path dir2 = fresh_dir("predict_again");
  CliResult r2 = run({"predict", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
                      "--data", (sh.synth_dir / "data.csv").string(), "--out", dir2.string()});
  REQUIRE(r2.code == 0);
  CHECK(slurp((dir2 / "predictions.csv").string()) == csv);

  // Explicit --at inside the valid range, on the grid.
  const std::string at = format_timestamp(start + 3200 * kStepSeconds);
  fs::path dir3 = fresh_dir("predict_at");
  CHECK(run({"predict", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
             "--data", (sh.synth_dir / "data.csv").string(), "--at", at,
             "--out", dir3.string()}).code == 0);

  // Too early: the daily-history requirement is named in the error.
  fs::path dir4 = fresh_dir("predict_early");
  CliResult early = run({"predict", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
                         "--data", (sh.synth_dir / "data.csv").string(),
                         "--at", s.start_timestamp, "--out", dir4.string()});
  CHECK(early.code == 3);
  CHECK(early.err.find("supported range") != std::string::npos);

  // Off-grid timestamps are rejected.
  fs::path dir5 = fresh_dir("predict_offgrid");
  CHECK(run({"predict", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
             "--data", (sh.synth_dir / "data.csv").string(),
             "--at", format_timestamp(start + 3200 * kStepSeconds + 60),
             "--out", dir5.string()}).code == 3);

  // --clamp-zero floors every forecast.
  fs::path dir6 = fresh_dir("predict_clamp");
  REQUIRE(run({"predict", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
               "--data", (sh.synth_dir / "data.csv").string(), "--clamp-zero",
               "--out", dir6.string()}).code == 0);
  std::istringstream rows(slurp((dir6 / "predictions.csv").string()));
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line)) {
    const double v = std::stod(line.substr(line.rfind(',') + 1));
    CHECK(v >= 0.0);
  }
}

TEST_CASE("export-plot emits loadable tidy series with a baseline method") {
  const SharedRuns& sh = shared();
  fs::path dir = fresh_dir("plot");
  CliResult r = run({"export-plot", "--checkpoint", (sh.train_dir / "checkpoint.bin").string(),
                     "--data", (sh.synth_dir / "data.csv").string(), "--out", dir.string()});
  REQUIRE(r.code == 0);

  std::istringstream curves(slurp((dir / "mape_by_horizon.csv").string()));
  std::string line;
  std::getline(curves, line);
  CHECK(line == "method,horizon_minutes,mape");
  std::vector<std::string> methods;
  std::vector<std::string> minutes;
  while (std::getline(curves, line)) {
    methods.push_back(line.substr(0, line.find(',')));
    const size_t a = line.find(',');
    minutes.push_back(line.substr(a + 1, line.rfind(',') - a - 1));
  }
  CHECK(methods == std::vector<std::string>{"model", "model", "model", "model", "persistence",
                                            "persistence", "persistence", "persistence"});
  CHECK(minutes == std::vector<std::string>{"5", "15", "30", "60", "5", "15", "30", "60"});

  const std::string overlay = slurp((dir / "prediction_vs_truth.csv").string());
  CHECK(overlay.rfind("node_id,timestamp,truth,prediction\n", 0) == 0);
  RawSeries s = ingest_csv((sh.synth_dir / "data.csv").string());
  PreparedDataset ds = prepare_dataset(s, 12, 12);
  CHECK(count_lines(overlay) == static_cast<int64_t>(ds.splits.test.size()) * 3 + 1);

  // Missing artifacts are a clean failure, not a crash.
  CHECK(run({"export-plot", "--checkpoint", (dir / "nope.bin").string(),
             "--data", (sh.synth_dir / "data.csv").string(),
             "--out", (dir / "x").string()}).code == 3);
}

TEST_CASE("prepare caches samples that train accepts") {
  const SharedRuns& sh = shared();
  fs::path dir = fresh_dir("prepare");
  CliResult p = run({"prepare", "--data", (sh.synth_dir / "data.csv").string(),
                     "--out", dir.string()});
  REQUIRE(p.code == 0);
  CHECK(p.out.find("samples: train=") != std::string::npos);
  const auto manifest = nlohmann::json::parse(slurp((dir / "manifest.json").string()));
  const int64_t total = manifest.at("split_sizes").at("train").get<int64_t>() +
                        manifest.at("split_sizes").at("val").get<int64_t>() +
                        manifest.at("split_sizes").at("test").get<int64_t>();
  CHECK(total > 0);

  fs::path tdir = fresh_dir("prepare_train");
  CliResult t = run({"train", "--cache", (dir / "cache.bin").string(),
                     "--graph", (sh.synth_dir / "graph.json").string(),
                     "--dlatent", "6", "--dresidual", "6", "--dskip", "8", "--dend", "8",
                     "--batch", "32", "--epochs", "1", "--patience", "1",
                     "--out", tdir.string()});
  REQUIRE(t.code == 0);

  // Window-length conflicts with the cache are caught before training.
  CHECK(run({"train", "--cache", (dir / "cache.bin").string(),
             "--graph", (sh.synth_dir / "graph.json").string(), "--tin", "6",
             "--out", (tdir / "bad").string()}).code == 3);
}
