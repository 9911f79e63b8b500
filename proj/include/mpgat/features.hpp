#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpgat/tensor.hpp"

namespace mpgat {

constexpr int64_t kStepsPerDay = 288;   // 5-minute resolution
constexpr int64_t kStepSeconds = 300;
constexpr int64_t kNumFeatures = 4;     // [X_q, X_ma5, X_ma20, X_d]
constexpr int64_t kMaShort = 5;
constexpr int64_t kMaLong = 20;

struct RawSeries {
  int64_t n_nodes = 0;
  int64_t steps_per_day = kStepsPerDay;
  std::string start_timestamp;  // ISO-8601 of step 0
  int64_t t_total = 0;
  std::vector<double> counts;  // row-major T_total x N

  double count(int64_t t, int64_t node) const { return counts[static_cast<size_t>(t * n_nodes + node)]; }
  double& count(int64_t t, int64_t node) { return counts[static_cast<size_t>(t * n_nodes + node)]; }
};

struct MultivariateSample {
  Tensor x;    // F x N x T_in, raw units
  Tensor y;    // N x T_out, raw units
  int64_t t0;  // absolute index of the last observed input step
};

struct Normalizer {
  std::vector<double> mean;  // per node
  std::vector<double> std;   // per node, > 0

  double normalize_value(int64_t node, double v) const;
  double denormalize_value(int64_t node, double v) const;
  // x layouts: [F x N x T] or [B x F x N x T]; y layouts: [N x T] or [B x N x T].
  Tensor normalize_x(const Tensor& x) const;
  Tensor normalize_y(const Tensor& y) const;
  Tensor denormalize_y(const Tensor& y) const;
};

struct SplitResult {
  std::vector<MultivariateSample> train, val, test;
};

// CSV with header timestamp,node_id,count on a contiguous 5-minute grid.
RawSeries ingest_csv(const std::string& path);

// out[t*N+n] = mean of counts over [t-t_m+1, t]; entries with t < t_m-1 are
// present but must not be consumed (build_samples skips them).
std::vector<double> moving_average(const RawSeries& series, int64_t t_m);

// T_in x N block of same-time-of-day values on consecutive days ending at t0.
std::vector<double> daily_feature(const RawSeries& series, int64_t t0, int64_t t_in);

std::vector<MultivariateSample> build_samples(const RawSeries& series, int64_t t_in,
                                              int64_t t_out);

// Chronological split; sizes floored, remainder assigned to test.
SplitResult split_samples(std::vector<MultivariateSample> samples, double r_train, double r_val,
                          double r_test);

// Per-node z-score statistics over raw counts up to and including the last
// training sample's t0.
Normalizer fit_normalizer(const RawSeries& series, const std::vector<MultivariateSample>& train);

// Diurnal synthetic series: per-node smooth daily profile with max/min ratio
// equal to peak_ratio, lagged coupling along the path graph 0->1->...,
// multiplicative noise. Deterministic under seed.
RawSeries synth_generate(int64_t n_nodes, int64_t days, double peak_ratio, double noise_level,
                         uint64_t seed);

void write_series_csv(const RawSeries& series, const std::string& path);

struct PreparedDataset {
  RawSeries series;
  int64_t t_in = 0;
  int64_t t_out = 0;
  SplitResult splits;
  Normalizer normalizer;
};

PreparedDataset prepare_dataset(const RawSeries& series, int64_t t_in, int64_t t_out);
void save_cache(const PreparedDataset& ds, const std::string& path);
PreparedDataset load_cache(const std::string& path);

// ISO-8601 helpers for the 5-minute grid ("YYYY-MM-DDTHH:MM:SS", UTC).
int64_t parse_timestamp(const std::string& iso);
std::string format_timestamp(int64_t epoch_seconds);

}  // namespace mpgat
