#pragma once

#include <vector>

namespace mpgat {

struct SignificanceResult {
  int h = 0;            // +1: a significantly smaller, -1: a significantly larger, 0: no call
  double p_value = 1.0;
  double rank_sum = 0;  // rank sum of sample a under pooled midranks
};

// Two-sided Wilcoxon rank-sum test with midrank tie handling.
// Exact distribution (subset-sum enumeration) when both samples have at most
// 12 elements; otherwise normal approximation with tie correction and
// continuity correction. h is directed by comparing sample means: smaller
// mean of a with p < alpha gives +1.
SignificanceResult wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b,
                                     double alpha = 0.05);

// The two p-value routes, exposed for cross-validation against each other.
double wilcoxon_exact_p(const std::vector<double>& a, const std::vector<double>& b);
double wilcoxon_normal_p(const std::vector<double>& a, const std::vector<double>& b);

// Pooled midranks of (a ++ b), in that order. Ties share the average rank.
std::vector<double> pooled_midranks(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace mpgat
