#pragma once

#include <optional>
#include <string>
#include <vector>

#include "changedet/core_data.hpp"

namespace changedet {

// Per-sample prediction; the unit all metrics and statistics consume.
struct PredictionEntry {
  std::string map_id;
  std::string subject_id;
  int fold_id = 0;
  double probability = 0.0;
  BinaryLabel label = BinaryLabel::stable;
};

struct PredictionSet {
  std::vector<PredictionEntry> entries;

  // Finite probabilities in [0,1], unique map ids.
  void validate() const;
  std::size_t size() const { return entries.size(); }
};

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// Undefined metrics stay nullopt (zero denominator / single class); they are
// reported as "undefined", never silently 0.
struct MetricsReport {
  std::int64_t n = 0;
  ConfusionCounts counts;
  std::optional<double> accuracy, sensitivity, specificity, f1, auc, aupr;
};

// Confusion-matrix metrics with unstable as the positive class.
// A sample is predicted positive iff probability >= threshold.
MetricsReport binary_metrics(const PredictionSet& preds, double threshold = 0.5);

struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;  // ROC: FPR, PR: recall
  double y = 0.0;  // ROC: TPR, PR: precision
};

struct RocResult {
  std::vector<CurvePoint> points;
  double auc = 0.0;
};

// Trapezoidal AUC over all distinct thresholds; tied scores earn half
// credit, so the value equals the Mann-Whitney pair statistic.
RocResult roc_auc(const PredictionSet& preds);

struct PrResult {
  std::vector<CurvePoint> points;
  double aupr = 0.0;
};

// Step-wise area (precision held right-constant between recall levels).
PrResult pr_aupr(const PredictionSet& preds);

// Concatenates per-fold test predictions; duplicate map ids across folds
// mean a record was tested twice and are rejected.
PredictionSet pool_fold_predictions(const std::vector<PredictionSet>& per_fold);

// Chance-corrected inter-rater agreement over a shared category set.
double cohens_kappa(const std::vector<std::string>& ratings_a,
                    const std::vector<std::string>& ratings_b);

// Convenience wrapper filling every MetricsReport field that is defined.
MetricsReport full_metrics(const PredictionSet& preds, double threshold = 0.5);

// Report file with Table-style key names (ACC SENS SPEC F1 AUC AUPR), fixed
// 6-decimal formatting so reruns are byte-identical. `seed` is recorded for
// provenance.
void write_metrics_report(const MetricsReport& report, const std::string& path,
                          std::uint64_t seed);

// Curve CSV: threshold,x,y
void write_curve_csv(const std::vector<CurvePoint>& points, const std::string& path);

// Pooled predictions CSV: map_id,subject_id,fold_id,probability,vote,true_label
void write_predictions_csv(const PredictionSet& preds, const std::string& path,
                           double vote_threshold = 0.5);
PredictionSet read_predictions_csv(const std::string& path);

}  // namespace changedet
