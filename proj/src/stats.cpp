#include "changedet/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "changedet/errors.hpp"
#include "changedet/rng.hpp"
#include "changedet/text.hpp"

namespace changedet {

namespace {

// Rank-based Mann-Whitney AUC with midranks for ties; identical in value to
// the pooled trapezoidal ROC area and cheap enough for the permutation loop.
double auc_of(const std::vector<bool>& positive, const std::vector<double>& scores,
              std::vector<std::size_t>& order_scratch) {
  const std::size_t n = scores.size();
  auto& order = order_scratch;
  order.resize(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (positive[order[k]]) {
        rank_sum_pos += midrank;
        ++n_pos;
      }
    }
    i = j + 1;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw undefined_metric_error("AUC undefined: single-class labels");
  return (rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace

PermutationTestResult paired_auc_permutation_test(const PairedComparison& cmp) {
  const std::size_t n = cmp.labels.size();
  if (n == 0 || cmp.scores_a.size() != n || cmp.scores_b.size() != n)
    throw validation_error("paired test needs equal-length, nonempty label/score lists");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(cmp.scores_a[i] >= 0.0 && cmp.scores_a[i] <= 1.0) ||
        !(cmp.scores_b[i] >= 0.0 && cmp.scores_b[i] <= 1.0))
      throw validation_error("scores must lie in [0,1]");
  }
  if (cmp.n_permutations < 1) throw validation_error("n_permutations must be >= 1");

  std::vector<bool> positive(n);
  for (std::size_t i = 0; i < n; ++i) positive[i] = cmp.labels[i] == BinaryLabel::unstable;

  std::vector<std::size_t> scratch;
  PermutationTestResult result;
  result.auc_a = auc_of(positive, cmp.scores_a, scratch);
  result.auc_b = auc_of(positive, cmp.scores_b, scratch);
  result.observed_delta = result.auc_a - result.auc_b;
  result.n_permutations = cmp.n_permutations;
  result.seed = cmp.seed;

  const double abs_obs = std::abs(result.observed_delta);
  // Small slack so permutations that reproduce |delta_obs| exactly are not
  // lost to floating-point rounding; errs toward a larger (conservative) p.
  const double tie_eps = 1e-12;

  Rng rng(derive_seed(cmp.seed, "auc_permutation"));
  std::vector<double> pa(cmp.scores_a), pb(cmp.scores_b);
  std::int64_t count = 0;
  for (int perm = 0; perm < cmp.n_permutations; ++perm) {
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.bernoulli(0.5)) {
        pa[i] = cmp.scores_b[i];
        pb[i] = cmp.scores_a[i];
      } else {
        pa[i] = cmp.scores_a[i];
        pb[i] = cmp.scores_b[i];
      }
    }
    const double delta = auc_of(positive, pa, scratch) - auc_of(positive, pb, scratch);
    if (std::abs(delta) >= abs_obs - tie_eps) ++count;
  }
  result.p_value = static_cast<double>(1 + count) / static_cast<double>(1 + cmp.n_permutations);
  result.significant = result.p_value < cmp.alpha;
  return result;
}

void write_comparison_report(const PermutationTestResult& r, const std::string& name_a,
                             const std::string& name_b, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open comparison report for writing: " + path);
  out << "MODEL_A " << name_a << "\n"
      << "MODEL_B " << name_b << "\n"
      << "AUC_A " << format_fixed(r.auc_a, 6) << "\n"
      << "AUC_B " << format_fixed(r.auc_b, 6) << "\n"
      << "DELTA " << format_fixed(r.observed_delta, 6) << "\n"
      << "P_VALUE " << format_fixed(r.p_value, 6) << "\n"
      << "N_PERMUTATIONS " << r.n_permutations << "\n"
      << "SEED " << r.seed << "\n"
      << "SIGNIFICANT " << (r.significant ? "yes" : "no") << "\n";
  if (!out) throw io_error("failed writing comparison report: " + path);
}

}  // namespace changedet
