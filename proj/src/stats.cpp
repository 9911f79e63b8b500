#include "mpgat/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>

namespace mpgat {

namespace {

void check_sizes(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("wilcoxon_rank_sum: each sample needs at least 2 values");
}

double rank_sum_of_a(const std::vector<double>& a, const std::vector<double>& b,
                     std::vector<double>& ranks_out) {
  ranks_out = pooled_midranks(a, b);
  double w = 0;
  for (size_t i = 0; i < a.size(); ++i) w += ranks_out[i];
  return w;
}

}  // namespace

std::vector<double> pooled_midranks(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const size_t n = pooled.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&pooled](size_t i, size_t j) { return pooled[i] < pooled[j]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

double wilcoxon_exact_p(const std::vector<double>& a, const std::vector<double>& b) {
  check_sizes(a, b);
  std::vector<double> ranks;
  const double w = rank_sum_of_a(a, b, ranks);
  const size_t n = a.size();
  const size_t total = ranks.size();

  // Doubled midranks are integers, so the subset-sum distribution of the
  // rank sum is countable exactly.
  std::vector<int64_t> dr(total);
  int64_t max_sum = 0;
  for (size_t i = 0; i < total; ++i) {
    dr[i] = std::llround(2.0 * ranks[i]);
    max_sum += dr[i];
  }
  // count[k][s] = number of k-subsets of the pooled ranks with doubled sum s.
  std::vector<std::vector<double>> count(n + 1, std::vector<double>(max_sum + 1, 0.0));
  count[0][0] = 1.0;
  for (size_t i = 0; i < total; ++i) {
    const size_t kmax = std::min(i + 1, n);
    for (size_t k = kmax; k >= 1; --k) {
      const auto& prev = count[k - 1];
      auto& cur = count[k];
      for (int64_t s = max_sum - dr[i]; s >= 0; --s)
        if (prev[s] != 0.0) cur[s + dr[i]] += prev[s];
    }
  }
  const int64_t wd = std::llround(2.0 * w);
  double le = 0, ge = 0, tot = 0;
  for (int64_t s = 0; s <= max_sum; ++s) {
    const double c = count[n][s];
    tot += c;
    if (s <= wd) le += c;
    if (s >= wd) ge += c;
  }
  const double p = 2.0 * std::min(le, ge) / tot;
  return std::min(1.0, p);
}

double wilcoxon_normal_p(const std::vector<double>& a, const std::vector<double>& b) {
  check_sizes(a, b);
  std::vector<double> ranks;
  const double w = rank_sum_of_a(a, b, ranks);
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  const double big_n = n + m;

  // Tie correction: subtract sum(t^3 - t) over tie groups.
  std::vector<double> sorted(ranks);
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0;
  size_t i = 0;
  while (i < sorted.size()) {
    size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  const double mean = n * (big_n + 1.0) / 2.0;
  const double var =
      n * m * (big_n + 1.0) / 12.0 - n * m * tie_term / (12.0 * big_n * (big_n - 1.0));
  if (var <= 0.0) return 1.0;  // all values tied: the test carries no information
  double d = w - mean;
  if (d > 0.5)
    d -= 0.5;  // continuity correction toward the mean
  else if (d < -0.5)
    d += 0.5;
  else
    d = 0.0;
  const double z = d / std::sqrt(var);
  return std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
}

SignificanceResult wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b,
                                     double alpha) {
  check_sizes(a, b);
  if (alpha <= 0.0 || alpha >= 1.0)
    throw std::invalid_argument("wilcoxon_rank_sum: alpha must lie in (0,1)");
  SignificanceResult res;
  std::vector<double> ranks;
  res.rank_sum = rank_sum_of_a(a, b, ranks);
  const bool exact = a.size() <= 12 && b.size() <= 12;
  res.p_value = exact ? wilcoxon_exact_p(a, b) : wilcoxon_normal_p(a, b);
  if (res.p_value < alpha) {
    const double mean_a = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    const double mean_b = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
    if (mean_a < mean_b)
      res.h = +1;
    else if (mean_a > mean_b)
      res.h = -1;
  }
  return res;
}

}  // namespace mpgat
