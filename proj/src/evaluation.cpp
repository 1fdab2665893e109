#include "changedet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "changedet/text.hpp"

namespace changedet {

void PredictionSet::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (!std::isfinite(e.probability) || e.probability < 0.0 || e.probability > 1.0)
      throw validation_error("prediction for '" + e.map_id + "' outside [0,1]");
    if (!ids.insert(e.map_id).second)
      throw validation_error("duplicate map_id '" + e.map_id + "' in prediction set");
  }
}

MetricsReport binary_metrics(const PredictionSet& preds, double threshold) {
  if (preds.entries.empty()) throw validation_error("binary_metrics: empty prediction set");
  preds.validate();
  MetricsReport r;
  r.n = static_cast<std::int64_t>(preds.entries.size());
  for (const auto& e : preds.entries) {
    const bool predicted_positive = e.probability >= threshold;
    const bool actual_positive = e.label == BinaryLabel::unstable;
    if (predicted_positive && actual_positive) ++r.counts.tp;
    else if (predicted_positive && !actual_positive) ++r.counts.fp;
    else if (!predicted_positive && !actual_positive) ++r.counts.tn;
    else ++r.counts.fn;
  }
  const auto& c = r.counts;
  r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(r.n);
  if (c.tp + c.fn > 0)
    r.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0)
    r.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  if (2 * c.tp + c.fp + c.fn > 0)
    r.f1 = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  return r;
}

namespace {

// Sorted, deduplicated threshold groups: (score, #positives, #negatives).
struct ScoreGroup {
  double score;
  std::int64_t pos;
  std::int64_t neg;
};

std::vector<ScoreGroup> grouped_scores(const PredictionSet& preds, std::int64_t& total_pos,
                                       std::int64_t& total_neg) {
  std::vector<std::pair<double, bool>> scored;
  scored.reserve(preds.entries.size());
  total_pos = total_neg = 0;
  for (const auto& e : preds.entries) {
    const bool positive = e.label == BinaryLabel::unstable;
    scored.emplace_back(e.probability, positive);
    (positive ? total_pos : total_neg) += 1;
  }
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<ScoreGroup> groups;
  for (const auto& [score, positive] : scored) {
    if (groups.empty() || groups.back().score != score) groups.push_back({score, 0, 0});
    (positive ? groups.back().pos : groups.back().neg) += 1;
  }
  return groups;
}

}  // namespace

RocResult roc_auc(const PredictionSet& preds) {
  if (preds.entries.empty()) throw validation_error("roc_auc: empty prediction set");
  preds.validate();
  std::int64_t P = 0, N = 0;
  const auto groups = grouped_scores(preds, P, N);
  if (P == 0 || N == 0)
    throw undefined_metric_error("ROC AUC undefined: prediction set contains a single class");

  RocResult out;
  out.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::int64_t tp = 0, fp = 0;
  double auc = 0.0;
  double prev_fpr = 0.0, prev_tpr = 0.0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double tpr = static_cast<double>(tp) / static_cast<double>(P);
    const double fpr = static_cast<double>(fp) / static_cast<double>(N);
    auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;  // ties walk a diagonal: half credit
    out.points.push_back({g.score, fpr, tpr});
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  out.auc = auc;
  return out;
}

PrResult pr_aupr(const PredictionSet& preds) {
  if (preds.entries.empty()) throw validation_error("pr_aupr: empty prediction set");
  preds.validate();
  std::int64_t P = 0, N = 0;
  const auto groups = grouped_scores(preds, P, N);
  if (P == 0) throw undefined_metric_error("AUPR undefined: no positive samples");

  PrResult out;
  std::int64_t tp = 0, fp = 0;
  double aupr = 0.0;
  double prev_recall = 0.0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double recall = static_cast<double>(tp) / static_cast<double>(P);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    aupr += (recall - prev_recall) * precision;
    out.points.push_back({g.score, recall, precision});
    prev_recall = recall;
  }
  out.aupr = aupr;
  return out;
}

PredictionSet pool_fold_predictions(const std::vector<PredictionSet>& per_fold) {
  PredictionSet pooled;
  for (const auto& part : per_fold)
    pooled.entries.insert(pooled.entries.end(), part.entries.begin(), part.entries.end());
  std::set<std::string> ids;
  for (const auto& e : pooled.entries)
    if (!ids.insert(e.map_id).second)
      throw validation_error("record '" + e.map_id + "' appears in more than one fold");
  return pooled;
}

double cohens_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() || a.size() != b.size())
    throw validation_error("kappa needs two equal-length, nonempty rating lists");
  std::map<std::string, std::map<std::string, std::int64_t>> table;
  std::map<std::string, std::int64_t> marg_a, marg_b;
  std::int64_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++table[a[i]][b[i]];
    ++marg_a[a[i]];
    ++marg_b[b[i]];
    if (a[i] == b[i]) ++agree;
  }
  const double n = static_cast<double>(a.size());
  const double po = static_cast<double>(agree) / n;
  double pe = 0.0;
  for (const auto& [cat, count_a] : marg_a) {
    const auto it = marg_b.find(cat);
    if (it != marg_b.end())
      pe += (static_cast<double>(count_a) / n) * (static_cast<double>(it->second) / n);
  }
  if (marg_a.size() == 1 && marg_b.size() == 1 && marg_a.begin()->first == marg_b.begin()->first)
    throw undefined_metric_error("kappa undefined: both raters constant and identical (p_e = 1)");
  return (po - pe) / (1.0 - pe);
}

MetricsReport full_metrics(const PredictionSet& preds, double threshold) {
  MetricsReport r = binary_metrics(preds, threshold);
  try {
    r.auc = roc_auc(preds).auc;
  } catch (const undefined_metric_error&) {
  }
  try {
    r.aupr = pr_aupr(preds).aupr;
  } catch (const undefined_metric_error&) {
  }
  return r;
}

namespace {
std::string metric_field(const std::optional<double>& v) {
  return v ? format_fixed(*v, 6) : "undefined";
}
}  // namespace

void write_metrics_report(const MetricsReport& report, const std::string& path,
                          std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open metrics report for writing: " + path);
  out << "N " << report.n << "\n"
      << "TP " << report.counts.tp << "\n"
      << "FP " << report.counts.fp << "\n"
      << "TN " << report.counts.tn << "\n"
      << "FN " << report.counts.fn << "\n"
      << "ACC " << metric_field(report.accuracy) << "\n"
      << "SENS " << metric_field(report.sensitivity) << "\n"
      << "SPEC " << metric_field(report.specificity) << "\n"
      << "F1 " << metric_field(report.f1) << "\n"
      << "AUC " << metric_field(report.auc) << "\n"
      << "AUPR " << metric_field(report.aupr) << "\n"
      << "SEED " << seed << "\n";
  if (!out) throw io_error("failed writing metrics report: " + path);
}

void write_curve_csv(const std::vector<CurvePoint>& points, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open curve file for writing: " + path);
  out << "threshold,x,y\n";
  for (const auto& p : points)
    out << format_compact(p.threshold) << ',' << format_compact(p.x) << ','
        << format_compact(p.y) << "\n";
}

void write_predictions_csv(const PredictionSet& preds, const std::string& path,
                           double vote_threshold) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open predictions file for writing: " + path);
  out << "map_id,subject_id,fold_id,probability,vote,true_label\n";
  for (const auto& e : preds.entries) {
    const BinaryLabel vote =
        e.probability >= vote_threshold ? BinaryLabel::unstable : BinaryLabel::stable;
    out << e.map_id << ',' << e.subject_id << ',' << e.fold_id << ','
        << format_compact(e.probability) << ',' << to_string(vote) << ','
        << to_string(e.label) << "\n";
  }
  if (!out) throw io_error("failed writing predictions file: " + path);
}

PredictionSet read_predictions_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open predictions file: " + path);
  std::string line;
  if (!std::getline(in, line) ||
      trim(line) != "map_id,subject_id,fold_id,probability,vote,true_label")
    throw validation_error("predictions file '" + path + "' has unexpected header");
  PredictionSet preds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto f = split(t, ',');
    if (f.size() != 6)
      throw validation_error("predictions file '" + path + "' line " + std::to_string(lineno) +
                             ": expected 6 fields");
    PredictionEntry e;
    e.map_id = f[0];
    e.subject_id = f[1];
    e.fold_id = std::stoi(f[2]);
    e.probability = std::stod(f[3]);
    e.label = binary_from_string(f[5]);
    preds.entries.push_back(std::move(e));
  }
  preds.validate();
  return preds;
}

}  // namespace changedet
