#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mpgat/features.hpp"
#include "mpgat/model.hpp"
#include "mpgat/tensor.hpp"

// Training loop (mini-batch Adam on mean absolute error, early stopping on
// validation MAPE), the evaluation harness with fixed reporting horizons, the
// persistence baseline, and the multi-seed run driver.

namespace mpgat {

struct TrainConfig {
  double lr = 0.001;
  int64_t batch_size = 64;
  int64_t max_epochs = 100;
  int64_t patience = 15;
  double grad_clip_norm = 5.0;
  uint64_t seed = 0;

  void validate() const;
};

// Horizons are reported at steps {1, 3, 6, 12} = 5/15/30/60 minutes; horizons
// beyond the model's t_out are omitted (all present at the default t_out=12).
inline const std::vector<int64_t>& report_horizons() {
  static const std::vector<int64_t> h = {1, 3, 6, 12};
  return h;
}

struct RunReport {
  uint64_t seed = 0;
  std::map<int64_t, double> mape_by_horizon;
  int64_t epochs = 0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<double> train_loss;  // per epoch, mean over batches
  std::vector<double> val_mape;    // per epoch, pooled over all horizons
  int64_t best_epoch = 0;          // 1-based epoch whose parameters were kept
  double best_val_mape = 0.0;
};

// Mean absolute error over every element, in normalized units.
Tensor mae_loss(const Tensor& pred, const Tensor& target);

// Mean over elements with truth > 0 of |truth - pred| / truth. Elements with
// zero truth are excluded; throws ValidationError if nothing remains.
double mape(const std::vector<double>& pred, const std::vector<double>& truth);
double mape(const Tensor& pred, const Tensor& truth);

// Repeats the last observed raw count at every horizon: [N x t_out].
Tensor persistence_baseline(const MultivariateSample& sample, int64_t t_out);

// Assembles normalized batch tensors x [B x F x N x T_in], y [B x N x T_out]
// from samples order[begin, end). n_features <= the stored channel count
// selects a channel prefix (1 = recent-counts-only ablation).
std::pair<Tensor, Tensor> make_batch(const std::vector<MultivariateSample>& samples,
                                     const std::vector<size_t>& order, size_t begin, size_t end,
                                     const Normalizer& norm, int64_t n_features);

// Mini-batch Adam with per-epoch reshuffling, gradient-norm clipping, and
// early stopping; the model is left holding the best-validation parameters.
// Non-finite loss aborts with the epoch and batch in the message.
TrainHistory train_model(MpgatModel& model, const std::vector<MultivariateSample>& train_split,
                         const std::vector<MultivariateSample>& val_split,
                         const Normalizer& norm, const TrainConfig& cfg);

// Per-horizon MAPE of denormalized predictions over the test split. Fills
// only mape_by_horizon; seed/epochs/seconds belong to the caller.
RunReport evaluate_model(const MpgatModel& model, const std::vector<MultivariateSample>& test_split,
                         const Normalizer& norm);

// Per-horizon MAPE of the persistence baseline over the same split.
RunReport evaluate_persistence(const std::vector<MultivariateSample>& test_split, int64_t t_out);

// One full train + evaluate with the given seed (model init and shuffling).
RunReport run_single(const ModelConfig& mc, const IntersectionGraph& graph,
                     const SplitResult& splits, const Normalizer& norm, TrainConfig tc);

struct MultiRunResult {
  std::vector<RunReport> reports;      // completed runs, ordered by seed
  std::vector<std::string> warnings;   // one entry per excluded (diverged) run
};

// Independent runs with seeds base_seed .. base_seed + n_runs - 1, spread over
// n_workers threads. Diverged runs are excluded with a warning; fewer than
// max(2, floor(n_runs * 5 / 6)) completed runs is an error.
MultiRunResult multi_run(const ModelConfig& mc, const IntersectionGraph& graph,
                         const SplitResult& splits, const Normalizer& norm,
                         const TrainConfig& base, int64_t n_runs, int64_t n_workers);

// mean and sample standard deviation of MAPE per horizon across runs.
std::map<int64_t, std::pair<double, double>> aggregate_reports(
    const std::vector<RunReport>& reports);

}  // namespace mpgat
