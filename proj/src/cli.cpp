#include "mpgat/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mpgat/checkpoint.hpp"
#include "mpgat/errors.hpp"
#include "mpgat/features.hpp"
#include "mpgat/graph.hpp"
#include "mpgat/model.hpp"
#include "mpgat/ops.hpp"
#include "mpgat/stats.hpp"
#include "mpgat/tensor.hpp"
#include "mpgat/train.hpp"

namespace mpgat {
namespace {

using ordered_json = nlohmann::ordered_json;

// Output directories default under $MPGAT_OUT_ROOT when it is set.
std::string default_out(const char* cmd) {
  const char* root = std::getenv("MPGAT_OUT_ROOT");
  std::string dir = std::string(cmd) + "-run";
  if (root != nullptr && root[0] != '\0')
    return (std::filesystem::path(root) / dir).string();
  return dir;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir + ": " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_f(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string trimmed(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string unquoted(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\'')))
    return v.substr(1, v.size() - 2);
  return v;
}

// The resolved key=value view of one subcommand's options, printed to stdout
// and saved next to the outputs so the exact run can be replayed via --config.
void echo_config(CLI::App* sub, const std::string& out_dir) {
  std::string cfg;
  {
    std::istringstream lines(sub->config_to_str(true, false));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.rfind("config=", 0) == 0) continue;  // never replay the replay flag
      cfg += line;
      cfg += '\n';
    }
  }
  std::cout << "# resolved config [" << sub->get_name() << "]\n" << cfg << "# end config\n";
  std::ofstream out = open_out((std::filesystem::path(out_dir) / "config.txt").string());
  out << cfg;
}

// Replays key=value settings from --config <file>. Keys given explicitly on
// the command line win; the expansion appends the rest as --key=value tokens
// for the normal parser. Done by hand because the argument library applies
// config files to the top-level command only, not to subcommands.
std::vector<std::string> expand_config_args(std::vector<std::string> args) {
  std::string path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      path = args[i].substr(9);
  }
  if (path.empty()) return args;

  std::set<std::string> given;
  for (const std::string& arg : args) {
    if (arg.rfind("--", 0) != 0) continue;
    const size_t eq = arg.find('=');
    given.insert(eq == std::string::npos ? arg.substr(2) : arg.substr(2, eq - 2));
  }

  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trimmed(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) +
                            ": expected key=value, got: " + t);
    const std::string key = trimmed(t.substr(0, eq));
    const std::string value = unquoted(trimmed(t.substr(eq + 1)));
    if (key.empty())
      throw ValidationError(path + ":" + std::to_string(lineno) + ": empty key");
    if (key == "config" || given.count(key) > 0) continue;
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

void write_json(const std::string& path, const ordered_json& j) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << "\n";
}

IntersectionGraph resolve_graph(const std::string& path, int64_t n_nodes) {
  IntersectionGraph g = path.empty() ? default_six_node_graph() : load_graph(path);
  if (g.n != n_nodes) {
    std::string hint = path.empty() ? " (the built-in default graph covers 6 nodes; pass --graph)"
                                    : " (from " + path + ")";
    throw ValidationError("graph has " + std::to_string(g.n) + " nodes but the data has " +
                          std::to_string(n_nodes) + hint);
  }
  return g;
}

PreparedDataset load_data(const std::string& data, const std::string& cache, int64_t t_in,
                          int64_t t_out) {
  if (!cache.empty()) {
    PreparedDataset ds = load_cache(cache);
    if (ds.t_in != t_in || ds.t_out != t_out)
      throw ValidationError("cache " + cache + " was prepared with t_in=" +
                            std::to_string(ds.t_in) + ", t_out=" + std::to_string(ds.t_out) +
                            " but the run requests t_in=" + std::to_string(t_in) +
                            ", t_out=" + std::to_string(t_out));
    return ds;
  }
  return prepare_dataset(ingest_csv(data), t_in, t_out);
}

ordered_json mape_json(const std::map<int64_t, double>& by_horizon) {
  ordered_json m;
  for (const auto& [h, v] : by_horizon) m["h" + std::to_string(h)] = v;
  return m;
}

ordered_json report_json(const RunReport& r) {
  ordered_json j;
  j["seed"] = r.seed;
  j["mape"] = mape_json(r.mape_by_horizon);
  j["epochs"] = r.epochs;
  j["seconds"] = r.seconds;
  return j;
}

void write_reports_jsonl(const std::string& path, const std::vector<RunReport>& reports) {
  std::ofstream out = open_out(path);
  for (const RunReport& r : reports) out << report_json(r).dump() << "\n";
}

std::vector<RunReport> read_reports_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read reports file " + path);
  std::vector<RunReport> reports;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const ordered_json j = ordered_json::parse(line);
      RunReport r;
      r.seed = j.at("seed").get<uint64_t>();
      for (const auto& [key, val] : j.at("mape").items()) {
        if (key.empty() || key[0] != 'h')
          throw ValidationError("horizon key must look like h1, got " + key);
        r.mape_by_horizon[std::stoll(key.substr(1))] = val.get<double>();
      }
      r.epochs = j.at("epochs").get<int64_t>();
      r.seconds = j.at("seconds").get<double>();
      reports.push_back(std::move(r));
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": bad report line: " +
                            e.what());
    }
  }
  return reports;
}

std::set<int64_t> horizon_set(const std::vector<RunReport>& reports, const std::string& label) {
  std::set<int64_t> keys;
  for (const auto& [h, v] : reports.front().mape_by_horizon) keys.insert(h);
  for (const RunReport& r : reports) {
    std::set<int64_t> other;
    for (const auto& [h, v] : r.mape_by_horizon) other.insert(h);
    if (other != keys)
      throw ValidationError("compare: reports in " + label + " disagree on horizon sets");
  }
  return keys;
}

// Multivariate input block ending at t0, channels [recent, ma5, ma20, daily],
// for forecasting past the labeled sample range (no future truth required).
Tensor input_at(const RawSeries& s, int64_t t0, int64_t t_in) {
  const int64_t n = s.n_nodes;
  const std::vector<double> ma5 = moving_average(s, kMaShort);
  const std::vector<double> ma20 = moving_average(s, kMaLong);
  const std::vector<double> daily = daily_feature(s, t0, t_in);
  Tensor x({kNumFeatures, n, t_in});
  for (int64_t node = 0; node < n; ++node) {
    for (int64_t i = 0; i < t_in; ++i) {
      const int64_t t = t0 - t_in + 1 + i;
      x.at({0, node, i}) = s.count(t, node);
      x.at({1, node, i}) = ma5[static_cast<size_t>(t * n + node)];
      x.at({2, node, i}) = ma20[static_cast<size_t>(t * n + node)];
      x.at({3, node, i}) = daily[static_cast<size_t>(i * n + node)];
    }
  }
  return x;
}

int64_t earliest_input_t0(int64_t t_in, int64_t steps_per_day) {
  return std::max((t_in - 1) * steps_per_day, t_in - 1 + kMaLong - 1);
}

struct EvalPair {
  RunReport model;
  RunReport persistence;
};

EvalPair evaluate_both(const MpgatModel& model, const PreparedDataset& ds,
                       const Normalizer& norm) {
  EvalPair pair;
  pair.model = evaluate_model(model, ds.splits.test, norm);
  pair.persistence = evaluate_persistence(ds.splits.test, ds.t_out);
  return pair;
}

void print_eval_table(const EvalPair& pair) {
  std::cout << "horizon   model     persistence\n";
  for (const auto& [h, v] : pair.model.mape_by_horizon) {
    char line[128];
    std::snprintf(line, sizeof(line), "%3lldmin   %.6f  %.6f\n",
                  static_cast<long long>(h * 5), v, pair.persistence.mape_by_horizon.at(h));
    std::cout << line;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Spatial-temporal forecasting of per-intersection device counts"};
  app.require_subcommand(1);
  std::string config_path;  // consumed by expand_config_args before parsing

  // ---- synth ----------------------------------------------------------
  struct {
    int64_t nodes = 6;
    int64_t days = 14;
    double peak_ratio = 200.0;
    double noise = 0.1;
    uint64_t seed = 7;
    std::string out = default_out("synth");
  } sy;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic diurnal dataset");
  synth->add_option("--config", config_path, "Replay options from an echoed key=value file");
  synth->add_option("--nodes", sy.nodes, "Number of intersections")->capture_default_str();
  synth->add_option("--days", sy.days, "Number of generated days")->capture_default_str();
  synth->add_option("--peak-ratio", sy.peak_ratio, "Daily peak over trough count ratio")
      ->capture_default_str();
  synth->add_option("--noise", sy.noise, "Multiplicative noise level")->capture_default_str();
  synth->add_option("--seed", sy.seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", sy.out, "Output directory")->capture_default_str();
  synth->callback([&] {
    ensure_dir(sy.out);
    echo_config(synth, sy.out);
    const RawSeries s = synth_generate(sy.nodes, sy.days, sy.peak_ratio, sy.noise, sy.seed);
    const auto dir = std::filesystem::path(sy.out);
    write_series_csv(s, (dir / "data.csv").string());
    save_graph(path_graph(sy.nodes), (dir / "graph.json").string());
    ordered_json manifest;
    manifest["command"] = "synth";
    manifest["nodes"] = sy.nodes;
    manifest["days"] = sy.days;
    manifest["peak_ratio"] = sy.peak_ratio;
    manifest["noise"] = sy.noise;
    manifest["seed"] = sy.seed;
    manifest["rows"] = s.t_total * s.n_nodes;
    manifest["start_timestamp"] = s.start_timestamp;
    write_json((dir / "manifest.json").string(), manifest);
    std::cout << "wrote " << s.t_total * s.n_nodes << " rows to " << (dir / "data.csv").string()
              << " (graph.json, manifest.json alongside)\n";
  });

  // ---- prepare --------------------------------------------------------
  struct {
    std::string data;
    int64_t t_in = 12;
    int64_t t_out = 12;
    std::string out = default_out("prepare");
  } pr;
  CLI::App* prepare = app.add_subcommand("prepare", "Window a CSV series into cached samples");
  prepare->add_option("--config", config_path, "Replay options from an echoed key=value file");
  prepare->add_option("--data", pr.data, "Input CSV (timestamp,node_id,count)")->required();
  prepare->add_option("--tin", pr.t_in, "Input window length")->capture_default_str();
  prepare->add_option("--tout", pr.t_out, "Forecast horizon length")->capture_default_str();
  prepare->add_option("--out", pr.out, "Output directory")->capture_default_str();
  prepare->callback([&] {
    ensure_dir(pr.out);
    echo_config(prepare, pr.out);
    const PreparedDataset ds = prepare_dataset(ingest_csv(pr.data), pr.t_in, pr.t_out);
    const auto dir = std::filesystem::path(pr.out);
    save_cache(ds, (dir / "cache.bin").string());
    ordered_json manifest;
    manifest["command"] = "prepare";
    manifest["data"] = pr.data;
    manifest["t_in"] = pr.t_in;
    manifest["t_out"] = pr.t_out;
    manifest["n_nodes"] = ds.series.n_nodes;
    manifest["t_total"] = ds.series.t_total;
    manifest["split_sizes"] = {{"train", ds.splits.train.size()},
                               {"val", ds.splits.val.size()},
                               {"test", ds.splits.test.size()}};
    write_json((dir / "manifest.json").string(), manifest);
    std::cout << "samples: train=" << ds.splits.train.size() << " val=" << ds.splits.val.size()
              << " test=" << ds.splits.test.size() << "\n";
    std::cout << "wrote " << (dir / "cache.bin").string() << "\n";
  });

  // ---- train ----------------------------------------------------------
  struct {
    std::string data, cache, graph;
    int64_t t_in = 12, t_out = 12;
    int64_t features = 4;
    int64_t d_latent = 32, d_residual = 32, d_skip = 64, d_end = 128;
    int64_t blocks = 8, kernel = 2, prop_steps = 2;
    double beta = 0.05, leaky_slope = 0.2;
    double lr = 0.001, clip = 5.0;
    int64_t batch = 64, epochs = 100, patience = 15;
    uint64_t seed = 1;
    int64_t runs = 1, workers = 0;
    std::string out = default_out("train");
  } tr;
  CLI::App* train = app.add_subcommand("train", "Train a model and report test MAPE");
  train->add_option("--config", config_path, "Replay options from an echoed key=value file");
  train->add_option("--data", tr.data, "Input CSV (alternative to --cache)");
  train->add_option("--cache", tr.cache, "Prepared cache from the prepare command");
  train->add_option("--graph", tr.graph, "Graph JSON (defaults to the built-in 6-node grid)");
  train->add_option("--tin", tr.t_in, "Input window length")->capture_default_str();
  train->add_option("--tout", tr.t_out, "Forecast horizon length")->capture_default_str();
  train->add_option("--features", tr.features, "Input channels used, 1 = recent counts only")
      ->capture_default_str();
  train->add_option("--dlatent", tr.d_latent, "Feature-attention width")->capture_default_str();
  train->add_option("--dresidual", tr.d_residual, "Block channel width")->capture_default_str();
  train->add_option("--dskip", tr.d_skip, "Skip aggregation width")->capture_default_str();
  train->add_option("--dend", tr.d_end, "Head hidden width")->capture_default_str();
  train->add_option("--blocks", tr.blocks, "Number of temporal-spatial blocks")
      ->capture_default_str();
  train->add_option("--kernel", tr.kernel, "Convolution kernel size")->capture_default_str();
  train->add_option("--beta", tr.beta, "Neighbor share per propagation step")
      ->capture_default_str();
  train->add_option("--prop-steps", tr.prop_steps, "Propagation recursion depth")
      ->capture_default_str();
  train->add_option("--leaky-slope", tr.leaky_slope, "Negative slope in attention scores")
      ->capture_default_str();
  train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--batch", tr.batch, "Mini-batch size")->capture_default_str();
  train->add_option("--epochs", tr.epochs, "Maximum epochs")->capture_default_str();
  train->add_option("--patience", tr.patience, "Early-stopping patience in epochs")
      ->capture_default_str();
  train->add_option("--clip", tr.clip, "Gradient-norm clip threshold")->capture_default_str();
  train->add_option("--seed", tr.seed, "Base seed (model init and shuffling)")
      ->capture_default_str();
  train->add_option("--runs", tr.runs, "Independent seeded runs (seed, seed+1, ...)")
      ->capture_default_str();
  train->add_option("--workers", tr.workers, "Threads for extra runs, 0 = auto")
      ->capture_default_str();
  train->add_option("--out", tr.out, "Output directory")->capture_default_str();
  train->callback([&] {
    if (tr.data.empty() && tr.cache.empty())
      throw CLI::RequiredError("train: one of --data or --cache");
    ensure_dir(tr.out);
    echo_config(train, tr.out);

    const PreparedDataset ds = load_data(tr.data, tr.cache, tr.t_in, tr.t_out);
    ModelConfig mc;
    mc.n_nodes = ds.series.n_nodes;
    mc.n_features = tr.features;
    mc.t_in = tr.t_in;
    mc.t_out = tr.t_out;
    mc.d_latent = tr.d_latent;
    mc.d_residual = tr.d_residual;
    mc.d_skip = tr.d_skip;
    mc.d_end = tr.d_end;
    mc.n_blocks = tr.blocks;
    mc.kernel = tr.kernel;
    mc.beta = tr.beta;
    mc.prop_steps = tr.prop_steps;
    mc.leaky_slope = tr.leaky_slope;
    TrainConfig tc;
    tc.lr = tr.lr;
    tc.batch_size = tr.batch;
    tc.max_epochs = tr.epochs;
    tc.patience = tr.patience;
    tc.grad_clip_norm = tr.clip;
    tc.seed = tr.seed;
    mc.validate();
    tc.validate();
    if (tr.runs < 1) throw ValidationError("train: --runs must be at least 1");
    const IntersectionGraph graph = resolve_graph(tr.graph, mc.n_nodes);
    std::cout << "samples: train=" << ds.splits.train.size() << " val=" << ds.splits.val.size()
              << " test=" << ds.splits.test.size() << "\n";

    // The base seed trains in-process so its weights can be checkpointed;
    // additional seeds run through the parallel harness.
    const auto t_start = std::chrono::steady_clock::now();
    MpgatModel model(mc, graph, tc.seed);
    const TrainHistory history =
        train_model(model, ds.splits.train, ds.splits.val, ds.normalizer, tc);
    RunReport first = evaluate_model(model, ds.splits.test, ds.normalizer);
    first.seed = tc.seed;
    first.epochs = static_cast<int64_t>(history.train_loss.size());
    first.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    std::vector<RunReport> reports = {first};
    if (tr.runs == 2) {
      // multi_run requires >= 2 runs of its own; a single extra seed is just
      // one more run_single.
      TrainConfig one = tc;
      one.seed = tc.seed + 1;
      reports.push_back(run_single(mc, graph, ds.splits, ds.normalizer, one));
    } else if (tr.runs > 2) {
      TrainConfig base = tc;
      base.seed = tc.seed + 1;
      int64_t workers = tr.workers;
      if (workers <= 0)
        workers = std::min<int64_t>(tr.runs - 1,
                                    std::max(1u, std::thread::hardware_concurrency()));
      const MultiRunResult extra =
          multi_run(mc, graph, ds.splits, ds.normalizer, base, tr.runs - 1, workers);
      for (const std::string& w : extra.warnings) std::cerr << "warning: " << w << "\n";
      reports.insert(reports.end(), extra.reports.begin(), extra.reports.end());
    }

    const auto dir = std::filesystem::path(tr.out);
    save_checkpoint((dir / "checkpoint.bin").string(), model, ds.normalizer);
    ordered_json hist;
    hist["train_loss"] = history.train_loss;
    hist["val_mape"] = history.val_mape;
    hist["best_epoch"] = history.best_epoch;
    hist["best_val_mape"] = history.best_val_mape;
    write_json((dir / "history.json").string(), hist);
    write_reports_jsonl((dir / "reports.jsonl").string(), reports);
    const RunReport persistence = evaluate_persistence(ds.splits.test, tr.t_out);
    ordered_json pj;
    pj["mape"] = mape_json(persistence.mape_by_horizon);
    write_json((dir / "persistence.json").string(), pj);
    ordered_json manifest;
    manifest["command"] = "train";
    manifest["data"] = tr.data;
    manifest["cache"] = tr.cache;
    manifest["graph"] = tr.graph.empty() ? "builtin-6-node-grid" : tr.graph;
    manifest["runs"] = tr.runs;
    manifest["base_seed"] = tr.seed;
    manifest["split_sizes"] = {{"train", ds.splits.train.size()},
                               {"val", ds.splits.val.size()},
                               {"test", ds.splits.test.size()}};
    write_json((dir / "manifest.json").string(), manifest);

    for (const RunReport& r : reports) {
      std::cout << "seed " << r.seed << ":";
      for (const auto& [h, v] : r.mape_by_horizon)
        std::cout << " h" << h << "=" << fmt_f(v);
      std::cout << " (" << r.epochs << " epochs, " << fmt_f(r.seconds) << "s)\n";
    }
    if (reports.size() > 1) {
      const auto agg = aggregate_reports(reports);
      std::cout << "aggregate over " << reports.size() << " seeds:";
      for (const auto& [h, ms] : agg)
        std::cout << " h" << h << "=" << fmt_f(ms.first) << "±" << fmt_f(ms.second);
      std::cout << "\n";
    }
    std::cout << "persistence:";
    for (const auto& [h, v] : persistence.mape_by_horizon)
      std::cout << " h" << h << "=" << fmt_f(v);
    std::cout << "\nwrote checkpoint.bin, history.json, reports.jsonl, persistence.json in "
              << tr.out << "\n";
  });

  // ---- eval -----------------------------------------------------------
  struct {
    std::string checkpoint, data, cache;
    std::string out = default_out("eval");
  } ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  eval_cmd->add_option("--config", config_path, "Replay options from an echoed key=value file");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Input CSV (alternative to --cache)");
  eval_cmd->add_option("--cache", ev.cache, "Prepared cache");
  eval_cmd->add_option("--out", ev.out, "Output directory")->capture_default_str();
  eval_cmd->callback([&] {
    if (ev.data.empty() && ev.cache.empty())
      throw CLI::RequiredError("eval: one of --data or --cache");
    ensure_dir(ev.out);
    echo_config(eval_cmd, ev.out);
    Checkpoint ck = load_checkpoint(ev.checkpoint);
    const Normalizer norm = ck.normalizer;
    const PreparedDataset ds = load_data(ev.data, ev.cache, ck.config.t_in, ck.config.t_out);
    if (ds.series.n_nodes != ck.config.n_nodes)
      throw ValidationError("checkpoint covers " + std::to_string(ck.config.n_nodes) +
                            " nodes but the data has " + std::to_string(ds.series.n_nodes));
    const MpgatModel model = model_from_checkpoint(std::move(ck));
    const EvalPair pair = evaluate_both(model, ds, norm);
    print_eval_table(pair);
    ordered_json j;
    j["model"] = mape_json(pair.model.mape_by_horizon);
    j["persistence"] = mape_json(pair.persistence.mape_by_horizon);
    j["test_samples"] = ds.splits.test.size();
    write_json((std::filesystem::path(ev.out) / "eval.json").string(), j);
    std::cout << "wrote " << (std::filesystem::path(ev.out) / "eval.json").string() << "\n";
  });

  // ---- compare --------------------------------------------------------
  struct {
    std::string a, b;
    double alpha = 0.05;
    std::string out = default_out("compare");
  } cp;
  CLI::App* compare = app.add_subcommand(
      "compare", "Significance comparison of two multi-seed report sets");
  compare->add_option("--config", config_path, "Replay options from an echoed key=value file");
  compare->add_option("--a", cp.a, "First reports.jsonl (the candidate)")->required();
  compare->add_option("--b", cp.b, "Second reports.jsonl (the reference)")->required();
  compare->add_option("--alpha", cp.alpha, "Significance level")->capture_default_str();
  compare->add_option("--out", cp.out, "Output directory")->capture_default_str();
  compare->callback([&] {
    ensure_dir(cp.out);
    echo_config(compare, cp.out);
    const std::vector<RunReport> ra = read_reports_jsonl(cp.a);
    const std::vector<RunReport> rb = read_reports_jsonl(cp.b);
    if (ra.size() < 2 || rb.size() < 2)
      throw ValidationError("compare: need at least 2 reports per side, got " +
                            std::to_string(ra.size()) + " and " + std::to_string(rb.size()));
    const std::set<int64_t> ha = horizon_set(ra, cp.a);
    const std::set<int64_t> hb = horizon_set(rb, cp.b);
    if (ha != hb) throw ValidationError("compare: horizon sets of the two report files differ");
    const auto agg_a = aggregate_reports(ra);
    const auto agg_b = aggregate_reports(rb);

    std::ofstream csv = open_out((std::filesystem::path(cp.out) / "compare.csv").string());
    csv << "horizon_minutes,mean_a,std_a,mean_b,std_b,h,p_value\n";
    std::cout << "horizon   a (mean±std)         b (mean±std)         h    p\n";
    for (int64_t h : ha) {
      std::vector<double> va, vb;
      for (const RunReport& r : ra) va.push_back(r.mape_by_horizon.at(h));
      for (const RunReport& r : rb) vb.push_back(r.mape_by_horizon.at(h));
      const SignificanceResult sig = wilcoxon_rank_sum(va, vb, cp.alpha);
      const auto& [ma, sa] = agg_a.at(h);
      const auto& [mb, sb] = agg_b.at(h);
      char line[160];
      std::snprintf(line, sizeof(line), "%3lldmin   %.6f±%.6f   %.6f±%.6f   %+d   %.6f\n",
                    static_cast<long long>(h * 5), ma, sa, mb, sb, sig.h, sig.p_value);
      std::cout << line;
      csv << h * 5 << "," << fmt_g(ma) << "," << fmt_g(sa) << "," << fmt_g(mb) << ","
          << fmt_g(sb) << "," << sig.h << "," << fmt_g(sig.p_value) << "\n";
    }
    std::cout << "h=+1: first set significantly smaller at alpha=" << cp.alpha
              << "; h=-1: significantly larger; h=0: no call\n";
    std::cout << "wrote " << (std::filesystem::path(cp.out) / "compare.csv").string() << "\n";
  });

  // ---- predict --------------------------------------------------------
  struct {
    std::string checkpoint, data, at;
    bool clamp_zero = false;
    std::string out = default_out("predict");
  } pd;
  CLI::App* predict = app.add_subcommand("predict", "Forecast from the end of an observed window");
  predict->add_option("--config", config_path, "Replay options from an echoed key=value file");
  predict->add_option("--checkpoint", pd.checkpoint, "Trained checkpoint")->required();
  predict->add_option("--data", pd.data, "Input CSV")->required();
  predict->add_option("--at", pd.at,
                      "Timestamp of the last observed step (default: end of series)");
  predict->add_flag("--clamp-zero", pd.clamp_zero, "Floor forecasts at zero");
  predict->add_option("--out", pd.out, "Output directory")->capture_default_str();
  predict->callback([&] {
    ensure_dir(pd.out);
    echo_config(predict, pd.out);
    Checkpoint ck = load_checkpoint(pd.checkpoint);
    const Normalizer norm = ck.normalizer;
    const ModelConfig cfg = ck.config;
    const RawSeries s = ingest_csv(pd.data);
    if (s.n_nodes != cfg.n_nodes)
      throw ValidationError("checkpoint covers " + std::to_string(cfg.n_nodes) +
                            " nodes but the data has " + std::to_string(s.n_nodes));

    const int64_t start = parse_timestamp(s.start_timestamp);
    int64_t t0 = s.t_total - 1;
    if (!pd.at.empty()) {
      const int64_t at = parse_timestamp(pd.at);
      if (at < start || (at - start) % kStepSeconds != 0)
        throw ValidationError("predict: --at must land on the series' 5-minute grid starting " +
                              s.start_timestamp);
      t0 = (at - start) / kStepSeconds;
    }
    const int64_t lo = earliest_input_t0(cfg.t_in, s.steps_per_day);
    if (t0 < lo || t0 >= s.t_total)
      throw ValidationError(
          "predict: requested last observed step " + format_timestamp(start + t0 * kStepSeconds) +
          " lacks full input history; supported range is [" +
          format_timestamp(start + lo * kStepSeconds) + ", " +
          format_timestamp(start + (s.t_total - 1) * kStepSeconds) + "]");

    const Tensor features = input_at(s, t0, cfg.t_in);
    Tensor x({1, cfg.n_features, cfg.n_nodes, cfg.t_in});
    std::copy_n(features.data(), x.numel(), x.data());
    NoTapeScope guard;
    const MpgatModel model = model_from_checkpoint(std::move(ck));
    const Tensor yhat = norm.denormalize_y(model.forward(norm.normalize_x(x)));

    const std::string path = (std::filesystem::path(pd.out) / "predictions.csv").string();
    std::ofstream csv = open_out(path);
    csv << "node_id,timestamp,prediction\n";
    for (int64_t n = 0; n < cfg.n_nodes; ++n) {
      for (int64_t h = 0; h < cfg.t_out; ++h) {
        double v = yhat.at({0, n, h});
        if (pd.clamp_zero) v = std::max(0.0, v);
        csv << "n" << n << "," << format_timestamp(start + (t0 + 1 + h) * kStepSeconds) << ","
            << fmt_g(v) << "\n";
      }
    }
    std::cout << "wrote " << cfg.n_nodes * cfg.t_out << " forecasts to " << path << "\n";
  });

  // ---- export-plot ----------------------------------------------------
  struct {
    std::string checkpoint, data, cache;
    std::string out = default_out("plot");
  } xp;
  CLI::App* export_plot = app.add_subcommand(
      "export-plot", "Emit tidy CSVs: MAPE per horizon and prediction-vs-truth series");
  export_plot->add_option("--config", config_path, "Replay options from an echoed key=value file");
  export_plot->add_option("--checkpoint", xp.checkpoint, "Trained checkpoint")->required();
  export_plot->add_option("--data", xp.data, "Input CSV (alternative to --cache)");
  export_plot->add_option("--cache", xp.cache, "Prepared cache");
  export_plot->add_option("--out", xp.out, "Output directory")->capture_default_str();
  export_plot->callback([&] {
    if (xp.data.empty() && xp.cache.empty())
      throw CLI::RequiredError("export-plot: one of --data or --cache");
    ensure_dir(xp.out);
    echo_config(export_plot, xp.out);
    Checkpoint ck = load_checkpoint(xp.checkpoint);
    const Normalizer norm = ck.normalizer;
    const ModelConfig cfg = ck.config;
    const PreparedDataset ds = load_data(xp.data, xp.cache, cfg.t_in, cfg.t_out);
    if (ds.series.n_nodes != cfg.n_nodes)
      throw ValidationError("checkpoint covers " + std::to_string(cfg.n_nodes) +
                            " nodes but the data has " + std::to_string(ds.series.n_nodes));
    const MpgatModel model = model_from_checkpoint(std::move(ck));
    const EvalPair pair = evaluate_both(model, ds, norm);

    const auto dir = std::filesystem::path(xp.out);
    std::ofstream curves = open_out((dir / "mape_by_horizon.csv").string());
    curves << "method,horizon_minutes,mape\n";
    for (const auto& [h, v] : pair.model.mape_by_horizon)
      curves << "model," << h * 5 << "," << fmt_g(v) << "\n";
    for (const auto& [h, v] : pair.persistence.mape_by_horizon)
      curves << "persistence," << h * 5 << "," << fmt_g(v) << "\n";

    // Horizon-1 overlay across the test split: one row per node per sample.
    const int64_t series_start = parse_timestamp(ds.series.start_timestamp);
    std::ofstream overlay = open_out((dir / "prediction_vs_truth.csv").string());
    overlay << "node_id,timestamp,truth,prediction\n";
    const std::vector<MultivariateSample>& test = ds.splits.test;
    std::vector<size_t> order(test.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    NoTapeScope guard;
    for (size_t at = 0; at < order.size(); at += 64) {
      const size_t hi = std::min(order.size(), at + 64);
      const auto [x, y] = make_batch(test, order, at, hi, norm, cfg.n_features);
      const Tensor yhat = norm.denormalize_y(model.forward(x));
      for (size_t i = at; i < hi; ++i) {
        const std::string ts =
            format_timestamp(series_start + (test[i].t0 + 1) * kStepSeconds);
        for (int64_t n = 0; n < cfg.n_nodes; ++n) {
          overlay << "n" << n << "," << ts << "," << fmt_g(test[i].y.at({n, 0})) << ","
                  << fmt_g(yhat.at({static_cast<int64_t>(i - at), n, 0})) << "\n";
        }
      }
    }
    std::cout << "wrote mape_by_horizon.csv and prediction_vs_truth.csv in " << xp.out << "\n";
  });

  try {
    const std::vector<std::string> expanded = expand_config_args(args);
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}

}  // namespace mpgat
