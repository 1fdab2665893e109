#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "changedet/core_data.hpp"

namespace changedet {

// Paired comparison of two models scored on the same samples.
struct PairedComparison {
  std::vector<BinaryLabel> labels;
  std::vector<double> scores_a;
  std::vector<double> scores_b;
  int n_permutations = 10000;
  double alpha = 0.05;
  std::uint64_t seed = 0;
};

struct PermutationTestResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double observed_delta = 0.0;  // auc_a - auc_b
  double p_value = 1.0;
  int n_permutations = 0;
  std::uint64_t seed = 0;
  bool significant = false;  // p_value < alpha
};

// Two-sided paired permutation test with the AUC difference as statistic.
// Each permutation swaps (score_a[i], score_b[i]) independently per sample
// with probability 1/2; p = (1 + #{|delta*| >= |delta_obs|}) / (1 + n),
// so p is never 0. Deterministic given the seed.
PermutationTestResult paired_auc_permutation_test(const PairedComparison& cmp);

void write_comparison_report(const PermutationTestResult& result, const std::string& name_a,
                             const std::string& name_b, const std::string& path);

}  // namespace changedet
