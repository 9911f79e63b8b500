#include "mpgat/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

#include "mpgat/adam.hpp"
#include "mpgat/errors.hpp"
#include "mpgat/ops.hpp"

namespace mpgat {

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("train config: lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
  if (patience < 1 || patience > max_epochs)
    throw std::invalid_argument("train config: patience must lie in [1, max_epochs]");
  if (grad_clip_norm <= 0.0)
    throw std::invalid_argument("train config: grad_clip_norm must be positive");
}

Tensor mae_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("mae_loss: shapes " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  return mean_all(abs_t(sub(pred, target)));
}

double mape(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("mape: length mismatch");
  double sum = 0.0;
  int64_t kept = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] <= 0.0) continue;  // zero-count steps carry no percentage error
    sum += std::abs(truth[i] - pred[i]) / truth[i];
    ++kept;
  }
  if (kept == 0) throw ValidationError("mape: every target is zero, metric undefined");
  return sum / static_cast<double>(kept);
}

double mape(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) throw std::invalid_argument("mape: shape mismatch");
  return mape(pred.values(), truth.values());
}

Tensor persistence_baseline(const MultivariateSample& sample, int64_t t_out) {
  const Shape& xs = sample.x.shape();  // [F, N, T_in]
  const int64_t n = xs[1], t_in = xs[2];
  Tensor out({n, t_out});
  for (int64_t node = 0; node < n; ++node) {
    const double last = sample.x.at({0, node, t_in - 1});
    for (int64_t h = 0; h < t_out; ++h) out.at({node, h}) = last;
  }
  return out;
}

std::pair<Tensor, Tensor> make_batch(const std::vector<MultivariateSample>& samples,
                                     const std::vector<size_t>& order, size_t begin, size_t end,
                                     const Normalizer& norm, int64_t n_features) {
  if (begin >= end || end > order.size()) throw std::invalid_argument("make_batch: bad range");
  const Shape& xs = samples[order[begin]].x.shape();  // [F, N, T_in]
  const Shape& ys = samples[order[begin]].y.shape();  // [N, T_out]
  if (n_features < 1 || n_features > xs[0])
    throw std::invalid_argument("make_batch: n_features out of range");
  const int64_t b = static_cast<int64_t>(end - begin);
  Tensor x({b, n_features, xs[1], xs[2]});
  Tensor y({b, ys[0], ys[1]});
  const int64_t x_stride = n_features * xs[1] * xs[2];
  const int64_t y_stride = ys[0] * ys[1];
  for (int64_t i = 0; i < b; ++i) {
    const MultivariateSample& s = samples[order[begin + static_cast<size_t>(i)]];
    std::copy_n(s.x.data(), x_stride, x.data() + i * x_stride);
    std::copy_n(s.y.data(), y_stride, y.data() + i * y_stride);
  }
  return {norm.normalize_x(x), norm.normalize_y(y)};
}

namespace {

// Pooled MAPE of denormalized predictions over a whole split, all horizons.
double split_mape(const MpgatModel& model, const std::vector<MultivariateSample>& split,
                  const Normalizer& norm) {
  NoTapeScope guard;
  const int64_t chunk = 64;
  std::vector<double> pred, truth;
  std::vector<size_t> order(split.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t at = 0; at < split.size(); at += chunk) {
    const size_t hi = std::min(split.size(), at + static_cast<size_t>(chunk));
    auto [x, y] = make_batch(split, order, at, hi, norm, model.config().n_features);
    Tensor yhat = norm.denormalize_y(model.forward(x));
    for (size_t i = at; i < hi; ++i) {
      const std::vector<double>& t = split[i].y.values();
      const double* p = yhat.data() + (i - at) * t.size();
      pred.insert(pred.end(), p, p + t.size());
      truth.insert(truth.end(), t.begin(), t.end());
    }
  }
  return mape(pred, truth);
}

std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(p.values());
  return out;
}

void restore_values(std::vector<Tensor>& params, const std::vector<std::vector<double>>& snap) {
  for (size_t i = 0; i < params.size(); ++i) params[i].values() = snap[i];
}

}  // namespace

TrainHistory train_model(MpgatModel& model, const std::vector<MultivariateSample>& train_split,
                         const std::vector<MultivariateSample>& val_split,
                         const Normalizer& norm, const TrainConfig& cfg) {
  cfg.validate();
  if (train_split.empty() || val_split.empty())
    throw ValidationError("train: empty train or validation split");

  std::vector<Tensor> params = model.parameters();
  AdamState opt(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 gen(cfg.seed);

  std::vector<size_t> order(train_split.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainHistory history;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_snapshot;
  const int64_t n_features = model.config().n_features;

  for (int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), gen);
    double loss_sum = 0.0;
    int64_t n_batches = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
      auto [x, y] = make_batch(train_split, order, at, hi, norm, n_features);
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = mae_loss(model.forward(x), y);
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(n_batches));
      opt.zero_grads();
      tape.backward(loss);
      opt.clip_grad_norm(cfg.grad_clip_norm);
      opt.step();
      loss_sum += lv;
      ++n_batches;
    }
    history.train_loss.push_back(loss_sum / static_cast<double>(n_batches));

    const double vm = split_mape(model, val_split, norm);
    history.val_mape.push_back(vm);
    if (vm < best) {
      best = vm;
      history.best_epoch = epoch;
      best_snapshot = snapshot_values(params);
    }
    if (epoch - history.best_epoch >= cfg.patience) break;
  }

  restore_values(params, best_snapshot);
  history.best_val_mape = best;
  return history;
}

RunReport evaluate_model(const MpgatModel& model, const std::vector<MultivariateSample>& test_split,
                         const Normalizer& norm) {
  if (test_split.empty()) throw ValidationError("evaluate: empty test split");
  NoTapeScope guard;
  RunReport report;
  const int64_t t_out = model.config().t_out;
  std::map<int64_t, std::pair<std::vector<double>, std::vector<double>>> by_h;
  for (int64_t h : report_horizons())
    if (h <= t_out) by_h[h] = {};

  const int64_t chunk = 64;
  std::vector<size_t> order(test_split.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t at = 0; at < test_split.size(); at += chunk) {
    const size_t hi = std::min(test_split.size(), at + static_cast<size_t>(chunk));
    auto [x, y] = make_batch(test_split, order, at, hi, norm, model.config().n_features);
    Tensor yhat = norm.denormalize_y(model.forward(x));  // [b, N, t_out]
    const int64_t n = yhat.shape()[1];
    for (size_t i = at; i < hi; ++i) {
      const Tensor& truth = test_split[i].y;  // [N, t_out] raw
      for (auto& [h, cols] : by_h)
        for (int64_t node = 0; node < n; ++node) {
          cols.first.push_back(yhat.at({static_cast<int64_t>(i - at), node, h - 1}));
          cols.second.push_back(truth.at({node, h - 1}));
        }
    }
  }
  for (auto& [h, cols] : by_h) report.mape_by_horizon[h] = mape(cols.first, cols.second);
  return report;
}

RunReport evaluate_persistence(const std::vector<MultivariateSample>& test_split, int64_t t_out) {
  if (test_split.empty()) throw ValidationError("evaluate: empty test split");
  RunReport report;
  std::map<int64_t, std::pair<std::vector<double>, std::vector<double>>> by_h;
  for (int64_t h : report_horizons())
    if (h <= t_out) by_h[h] = {};
  for (const MultivariateSample& s : test_split) {
    Tensor yhat = persistence_baseline(s, t_out);
    const int64_t n = yhat.shape()[0];
    for (auto& [h, cols] : by_h)
      for (int64_t node = 0; node < n; ++node) {
        cols.first.push_back(yhat.at({node, h - 1}));
        cols.second.push_back(s.y.at({node, h - 1}));
      }
  }
  for (auto& [h, cols] : by_h) report.mape_by_horizon[h] = mape(cols.first, cols.second);
  return report;
}

RunReport run_single(const ModelConfig& mc, const IntersectionGraph& graph,
                     const SplitResult& splits, const Normalizer& norm, TrainConfig tc) {
  const auto start = std::chrono::steady_clock::now();
  MpgatModel model(mc, graph, tc.seed);
  TrainHistory history = train_model(model, splits.train, splits.val, norm, tc);
  RunReport report = evaluate_model(model, splits.test, norm);
  report.seed = tc.seed;
  report.epochs = static_cast<int64_t>(history.train_loss.size());
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

MultiRunResult multi_run(const ModelConfig& mc, const IntersectionGraph& graph,
                         const SplitResult& splits, const Normalizer& norm,
                         const TrainConfig& base, int64_t n_runs, int64_t n_workers) {
  if (n_runs < 2) throw std::invalid_argument("multi_run: need at least 2 runs");
  if (n_workers < 1) throw std::invalid_argument("multi_run: need at least 1 worker");

  MultiRunResult result;
  std::mutex merge;
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n_runs) return;
      TrainConfig tc = base;
      tc.seed = base.seed + static_cast<uint64_t>(i);
      try {
        RunReport r = run_single(mc, graph, splits, norm, tc);
        std::lock_guard<std::mutex> lock(merge);
        result.reports.push_back(std::move(r));
      } catch (const std::runtime_error& e) {
        std::lock_guard<std::mutex> lock(merge);
        result.warnings.push_back("seed " + std::to_string(tc.seed) + " excluded: " + e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  const int64_t spawn = std::min<int64_t>(n_workers, n_runs);
  pool.reserve(static_cast<size_t>(spawn));
  for (int64_t i = 0; i < spawn; ++i) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::sort(result.reports.begin(), result.reports.end(),
            [](const RunReport& a, const RunReport& b) { return a.seed < b.seed; });
  const int64_t min_completed = std::max<int64_t>(2, n_runs * 5 / 6);
  if (static_cast<int64_t>(result.reports.size()) < min_completed) {
    std::string msg = "multi_run: only " + std::to_string(result.reports.size()) + " of " +
                      std::to_string(n_runs) + " runs completed (minimum " +
                      std::to_string(min_completed) + ")";
    for (const std::string& w : result.warnings) msg += "; " + w;
    throw std::runtime_error(msg);
  }
  return result;
}

std::map<int64_t, std::pair<double, double>> aggregate_reports(
    const std::vector<RunReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate: no reports");
  std::map<int64_t, std::pair<double, double>> out;
  for (const auto& [h, v] : reports[0].mape_by_horizon) {
    double mean = 0.0;
    int64_t n = 0;
    for (const RunReport& r : reports) {
      mean += r.mape_by_horizon.at(h);
      ++n;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const RunReport& r : reports) {
      const double d = r.mape_by_horizon.at(h) - mean;
      var += d * d;
    }
    const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    out[h] = {mean, sd};
  }
  return out;
}

}  // namespace mpgat
