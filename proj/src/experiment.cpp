#include "changedet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "changedet/text.hpp"

namespace changedet {

void CVPlan::validate() const {
  if (k < 2) throw validation_error("cross-validation needs k >= 2");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw validation_error("val_fraction must lie in (0,1)");
}

std::vector<SubjectLabel> subject_labels(const CohortManifest& manifest) {
  std::map<std::string, std::pair<int, int>> counts;  // stable, unstable
  for (const auto& r : manifest.records) {
    auto& c = counts[r.subject_id];
    (r.label == BinaryLabel::stable ? c.first : c.second) += 1;
  }
  std::vector<SubjectLabel> out;
  out.reserve(counts.size());
  for (const auto& [id, c] : counts)
    out.push_back({id, c.second >= c.first ? BinaryLabel::unstable : BinaryLabel::stable});
  return out;  // std::map iteration is already id-sorted
}

void FoldAssignment::validate() const {
  std::set<std::string> seen;
  for (const auto* set : {&train_subjects, &val_subjects, &test_subjects})
    for (const auto& s : *set)
      if (!seen.insert(s).second)
        throw validation_error("subject '" + s + "' assigned twice within fold " +
                               std::to_string(fold_id));
}

std::vector<FoldAssignment> make_subject_folds(const std::vector<SubjectLabel>& subjects,
                                               const CVPlan& plan) {
  plan.validate();
  if (subjects.size() < static_cast<std::size_t>(plan.k))
    throw validation_error("fewer subjects (" + std::to_string(subjects.size()) +
                           ") than folds (" + std::to_string(plan.k) + ")");
  {
    std::set<std::string> ids;
    for (const auto& s : subjects)
      if (!ids.insert(s.id).second)
        throw validation_error("duplicate subject id '" + s.id + "'");
  }

  // Sort, then shuffle within label strata and deal round-robin; the fold
  // cursor carries over between strata so test sizes differ by at most 1.
  std::vector<SubjectLabel> sorted = subjects;
  std::sort(sorted.begin(), sorted.end(),
            [](const SubjectLabel& a, const SubjectLabel& b) { return a.id < b.id; });
  std::vector<std::string> stable_pool, unstable_pool;
  for (const auto& s : sorted)
    (s.majority == BinaryLabel::unstable ? unstable_pool : stable_pool).push_back(s.id);
  if (!plan.stratified) {
    stable_pool.insert(stable_pool.end(), unstable_pool.begin(), unstable_pool.end());
    std::sort(stable_pool.begin(), stable_pool.end());
    unstable_pool.clear();
  }

  Rng rng(derive_seed(plan.seed, "folds"));
  rng.shuffle(stable_pool);
  rng.shuffle(unstable_pool);

  std::vector<std::vector<std::string>> test_sets(static_cast<std::size_t>(plan.k));
  std::size_t cursor = 0;
  for (const auto* pool : {&unstable_pool, &stable_pool})
    for (const auto& id : *pool) {
      test_sets[cursor % static_cast<std::size_t>(plan.k)].push_back(id);
      ++cursor;
    }

  std::map<std::string, BinaryLabel> label_of;
  for (const auto& s : subjects) label_of[s.id] = s.majority;

  std::vector<FoldAssignment> folds;
  for (int f = 0; f < plan.k; ++f) {
    FoldAssignment fold;
    fold.fold_id = f;
    fold.test_subjects = test_sets[static_cast<std::size_t>(f)];
    const std::set<std::string> test_set(fold.test_subjects.begin(), fold.test_subjects.end());

    std::vector<std::string> rem_stable, rem_unstable;
    for (const auto& s : sorted) {
      if (test_set.count(s.id)) continue;
      (label_of[s.id] == BinaryLabel::unstable ? rem_unstable : rem_stable).push_back(s.id);
    }
    const std::size_t n_remaining = rem_stable.size() + rem_unstable.size();
    const std::size_t n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(plan.val_fraction *
                                               static_cast<double>(n_remaining))));

    Rng fold_rng(derive_seed(plan.seed, "val_split", static_cast<std::uint64_t>(f)));
    fold_rng.shuffle(rem_stable);
    fold_rng.shuffle(rem_unstable);

    // Proportional validation allocation across strata.
    std::size_t n_val_unstable = std::min(
        rem_unstable.size(),
        static_cast<std::size_t>(std::llround(plan.val_fraction *
                                              static_cast<double>(rem_unstable.size()))));
    if (n_val_unstable > n_val) n_val_unstable = n_val;
    std::size_t n_val_stable = std::min(rem_stable.size(), n_val - n_val_unstable);
    // Top up from the other stratum if rounding left a shortfall.
    while (n_val_stable + n_val_unstable < n_val && n_val_unstable < rem_unstable.size())
      ++n_val_unstable;

    for (std::size_t i = 0; i < rem_unstable.size(); ++i)
      (i < n_val_unstable ? fold.val_subjects : fold.train_subjects).push_back(rem_unstable[i]);
    for (std::size_t i = 0; i < rem_stable.size(); ++i)
      (i < n_val_stable ? fold.val_subjects : fold.train_subjects).push_back(rem_stable[i]);

    std::sort(fold.train_subjects.begin(), fold.train_subjects.end());
    std::sort(fold.val_subjects.begin(), fold.val_subjects.end());
    std::sort(fold.test_subjects.begin(), fold.test_subjects.end());
    fold.validate();
    folds.push_back(std::move(fold));
  }
  return folds;
}

CohortManifest filter_wad_for_fold(const CohortManifest& wad, const FoldAssignment& fold) {
  std::set<std::string> excluded(fold.test_subjects.begin(), fold.test_subjects.end());
  excluded.insert(fold.val_subjects.begin(), fold.val_subjects.end());
  CohortManifest out;
  out.name = wad.name;
  for (const auto& r : wad.records)
    if (!excluded.count(r.subject_id)) out.records.push_back(r);
  out.rebuild_index();
  return out;
}

std::string to_string(ExperimentKind k) {
  return k == ExperimentKind::baseline ? "baseline" : "tl";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  if (s == "baseline") return ExperimentKind::baseline;
  if (s == "tl") return ExperimentKind::tl;
  throw validation_error("unknown experiment kind '" + s + "'");
}

void ExperimentSpec::validate() const {
  arch.validate();
  cv.validate();
  space.validate();
  budget.validate();
  train.validate();
  if (kind == ExperimentKind::tl) {
    if (!space.tl_active)
      throw validation_error("TL experiment requires tl_active in the search space");
    if (!wad || wad->records.empty())
      throw validation_error("TL experiment requires a nonempty WAD cohort");
  } else {
    if (space.tl_active)
      throw validation_error("baseline experiment must not use a TL search space");
  }
  if (output_dir.empty()) throw validation_error("experiment needs an output directory");
  if (parallelism < 1) throw validation_error("parallelism must be >= 1");
}

namespace {

struct FoldSamples {
  std::vector<Sample> train, val, test;
};

FoldSamples fold_samples(const std::vector<Sample>& all, const FoldAssignment& fold) {
  const std::set<std::string> train_set(fold.train_subjects.begin(), fold.train_subjects.end());
  const std::set<std::string> val_set(fold.val_subjects.begin(), fold.val_subjects.end());
  const std::set<std::string> test_set(fold.test_subjects.begin(), fold.test_subjects.end());
  FoldSamples out;
  for (const auto& s : all) {
    if (train_set.count(s.subject_id)) out.train.push_back(s);
    else if (val_set.count(s.subject_id)) out.val.push_back(s);
    else if (test_set.count(s.subject_id)) out.test.push_back(s);
    else throw std::logic_error("sample subject '" + s.subject_id + "' missing from fold");
  }
  return out;
}

std::string fold_dir_path(const std::string& output_dir, int fold_id) {
  return (std::filesystem::path(output_dir) / ("fold_" + std::to_string(fold_id))).string();
}

std::string trial_tag(int trial_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "trial_%03d", trial_id);
  return buf;
}

struct FoldContext {
  const ExperimentSpec* spec;
  const std::vector<Sample>* had_samples;
  const std::map<std::string, Sample>* wad_by_id;
  FoldAssignment fold;
  FoldOutcome outcome;
  std::vector<std::string> wad_access;
};

void run_fold(FoldContext& ctx) {
  const ExperimentSpec& spec = *ctx.spec;
  const FoldAssignment& fold = ctx.fold;
  const std::string fold_dir = fold_dir_path(spec.output_dir, fold.fold_id);
  std::filesystem::create_directories(fold_dir);

  FoldSamples samples = fold_samples(*ctx.had_samples, fold);
  if (samples.val.empty() || samples.test.empty())
    throw validation_error("fold " + std::to_string(fold.fold_id) + " has an empty val or test set");

  // Tuning must never touch the test subjects.
  const std::set<std::string> test_set(fold.test_subjects.begin(), fold.test_subjects.end());
  for (const auto& s : samples.train)
    if (test_set.count(s.subject_id)) throw std::logic_error("test subject leaked into training");

  // Per-trial WAD slices (thresholded by the trial's fraction, then fold
  // filtered) are resolved against the preloaded sample table.
  auto wad_samples_for = [&](double fraction) {
    CohortManifest sliced = threshold_manifest(*spec.wad, fraction);
    CohortManifest filtered = filter_wad_for_fold(sliced, fold);
    std::vector<Sample> out;
    out.reserve(filtered.records.size());
    for (const auto& r : filtered.records) {
      const auto it = ctx.wad_by_id->find(r.map_id);
      if (it == ctx.wad_by_id->end())
        throw std::logic_error("WAD record '" + r.map_id + "' missing from sample table");
      if (test_set.count(it->second.subject_id))
        throw std::logic_error("WAD record of a test subject leaked into training");
      out.push_back(it->second);
    }
    return out;
  };

  StudyOptions study_options;
  study_options.sampler = spec.sampler;
  study_options.pruner = spec.pruner;
  study_options.budget = spec.budget;
  study_options.tpe = spec.tpe;
  study_options.seed = derive_seed(spec.seed, "study", static_cast<std::uint64_t>(fold.fold_id));
  study_options.log_path = (std::filesystem::path(fold_dir) / "study_log.jsonl").string();

  Objective objective = [&](const TrialConfig& trial, TrialProgress& progress) -> double {
    TrainConfig tc = spec.train;
    tc.learning_rate = trial.learning_rate;
    tc.weight_decay = trial.weight_decay;
    tc.seed = derive_seed(spec.seed, "train", static_cast<std::uint64_t>(fold.fold_id),
                          static_cast<std::uint64_t>(trial.trial_id));
    const std::uint64_t build_seed =
        derive_seed(spec.seed, "model", static_cast<std::uint64_t>(fold.fold_id),
                    static_cast<std::uint64_t>(trial.trial_id));

    TrainHooks hooks;
    hooks.checkpoint_path =
        (std::filesystem::path(fold_dir) / (trial_tag(trial.trial_id) + ".ckpt")).string();
    hooks.on_epoch = [&](const EpochStats& e) { progress.report(e.epoch, e.val_auc); };

    TrainResult result;
    if (spec.kind == ExperimentKind::baseline) {
      ModelHandle model = build_model(spec.arch, build_seed);
      result = train_model(*model, samples.train, samples.val, tc, spec.augmentation, hooks);
    } else {
      const TLChoice& tl = *trial.tl;
      const std::vector<Sample> wad = wad_samples_for(tl.fraction_of_wad);
      ctx.wad_access.push_back("fold" + std::to_string(fold.fold_id) + "/" +
                               trial_tag(trial.trial_id) + ": WAD " +
                               std::to_string(wad.size()) + " records (fraction " +
                               format_compact(tl.fraction_of_wad) + ")");
      const TLStrategyKind strategy = tl.mixed_training ? TLStrategyKind::mixed_training
                                      : *tl.feature_extraction
                                          ? TLStrategyKind::feature_extraction
                                          : TLStrategyKind::fine_tuning;
      auto [model, tl_result] =
          apply_tl_strategy(strategy, spec.arch, wad, samples.train, samples.val, tc,
                            spec.augmentation, build_seed, hooks);
      result = tl_result.final;
    }
    write_epoch_log(result, (std::filesystem::path(fold_dir) /
                             (trial_tag(trial.trial_id) + "_epochs.csv"))
                                .string());
    return result.best_val_auc;
  };

  ctx.outcome.fold = fold;
  ctx.outcome.study = run_study(objective, spec.space, study_options);
  const TrialRecord* best = ctx.outcome.study.best();
  if (!best)
    throw validation_error("fold " + std::to_string(fold.fold_id) +
                           ": no completed trial (budget too small or all trials failed)");
  ctx.outcome.best_config = best->config;

  // The tuned checkpoint is reused directly as the fold's final model.
  const std::string best_ckpt =
      (std::filesystem::path(fold_dir) / (trial_tag(best->config.trial_id) + ".ckpt")).string();
  const std::string final_ckpt = (std::filesystem::path(fold_dir) / "final.ckpt").string();
  std::filesystem::copy_file(best_ckpt, final_ckpt,
                             std::filesystem::copy_options::overwrite_existing);
  ctx.outcome.final_checkpoint = final_ckpt;

  ModelHandle model = load_checkpoint(final_ckpt);
  std::vector<const Sample*> batch;
  auto flush = [&]() {
    if (batch.empty()) return;
    nn::Tensor x({static_cast<std::int64_t>(batch.size()), 1, spec.arch.input_shape[2],
                  spec.arch.input_shape[1], spec.arch.input_shape[0]});
    const std::size_t voxels = batch.front()->volume->voxels.size();
    for (std::size_t i = 0; i < batch.size(); ++i)
      std::copy(batch[i]->volume->voxels.begin(), batch[i]->volume->voxels.end(),
                x.data.begin() + static_cast<std::ptrdiff_t>(i * voxels));
    const auto probs = predict_batch(*model, x);
    for (std::size_t i = 0; i < batch.size(); ++i)
      ctx.outcome.test_predictions.entries.push_back({batch[i]->map_id, batch[i]->subject_id,
                                                      fold.fold_id, probs[i],
                                                      batch[i]->label});
    batch.clear();
  };
  for (const auto& s : samples.test) {
    batch.push_back(&s);
    if (batch.size() == 8) flush();
  }
  flush();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  spec.had.validate();
  if (spec.wad) spec.wad->validate();
  std::filesystem::create_directories(spec.output_dir);

  // Fold assignments depend only on HAD and the cv seed, so baseline and TL
  // runs with the same seed share identical splits.
  const auto folds = make_subject_folds(subject_labels(spec.had), spec.cv);

  SampleLoader loader(spec.arch.input_shape);
  const std::vector<Sample> had_samples = loader.load_all(spec.had);
  std::map<std::string, Sample> wad_by_id;
  if (spec.kind == ExperimentKind::tl) {
    for (const auto& s : loader.load_all(*spec.wad)) wad_by_id.emplace(s.map_id, s);
  }

  std::vector<FoldContext> contexts(folds.size());
  for (std::size_t i = 0; i < folds.size(); ++i) {
    contexts[i].spec = &spec;
    contexts[i].had_samples = &had_samples;
    contexts[i].wad_by_id = &wad_by_id;
    contexts[i].fold = folds[i];
  }

  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&](FoldContext& ctx) {
    try {
      run_fold(ctx);
    } catch (...) {
      const std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (spec.parallelism <= 1) {
    for (auto& ctx : contexts) worker(ctx);
  } else {
    std::vector<std::thread> threads;
    std::size_t next = 0;
    std::mutex next_mutex;
    for (int t = 0; t < std::min<int>(spec.parallelism, static_cast<int>(contexts.size())); ++t) {
      threads.emplace_back([&]() {
        while (true) {
          std::size_t i;
          {
            const std::lock_guard<std::mutex> lock(next_mutex);
            if (next >= contexts.size()) return;
            i = next++;
          }
          worker(contexts[i]);
        }
      });
    }
    for (auto& th : threads) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  ExperimentResult result;
  std::vector<PredictionSet> per_fold;
  for (auto& ctx : contexts) {
    per_fold.push_back(ctx.outcome.test_predictions);
    result.wad_access_log.insert(result.wad_access_log.end(), ctx.wad_access.begin(),
                                 ctx.wad_access.end());
    result.folds.push_back(std::move(ctx.outcome));
  }
  result.pooled = pool_fold_predictions(per_fold);
  if (result.pooled.size() != spec.had.records.size())
    throw std::logic_error("pooled predictions do not cover HAD exactly once");
  result.metrics = full_metrics(result.pooled);

  result.pooled_predictions_path =
      (std::filesystem::path(spec.output_dir) / "pooled_predictions.csv").string();
  write_predictions_csv(result.pooled, result.pooled_predictions_path);
  result.metrics_report_path =
      (std::filesystem::path(spec.output_dir) / "metrics_report.txt").string();
  write_metrics_report(result.metrics, result.metrics_report_path, spec.seed);
  try {
    write_curve_csv(roc_auc(result.pooled).points,
                    (std::filesystem::path(spec.output_dir) / "roc_curve.csv").string());
    write_curve_csv(pr_aupr(result.pooled).points,
                    (std::filesystem::path(spec.output_dir) / "pr_curve.csv").string());
  } catch (const undefined_metric_error&) {
    // Single-class pooled predictions have no curves; metrics file says so.
  }
  return result;
}

ExternalInferenceResult run_external_inference(const std::vector<std::string>& checkpoint_paths,
                                               const CohortManifest& external) {
  if (checkpoint_paths.size() != 5)
    throw validation_error("majority-vote inference needs exactly 5 fold models, got " +
                           std::to_string(checkpoint_paths.size()));
  external.validate();

  std::vector<ModelHandle> models;
  for (const auto& p : checkpoint_paths) models.push_back(load_checkpoint(p));
  const auto grid = models.front()->spec().input_shape;
  for (const auto& m : models)
    if (m->spec().input_shape != grid)
      throw validation_error("fold models disagree on the input grid");

  SampleLoader loader(grid);
  ExternalInferenceResult out;
  for (const auto& record : external.records) {
    const Sample s = loader.load(record);
    nn::Tensor x({1, 1, grid[2], grid[1], grid[0]});
    std::copy(s.volume->voxels.begin(), s.volume->voxels.end(), x.data.begin());
    int votes_unstable = 0;
    double prob_sum = 0.0;
    for (auto& m : models) {
      const double p = predict_batch(*m, x)[0];
      prob_sum += p;
      if (p >= 0.5) ++votes_unstable;
    }
    out.predictions.entries.push_back(
        {record.map_id, record.subject_id, -1, prob_sum / 5.0, record.label});
    out.votes.push_back(votes_unstable >= 3 ? BinaryLabel::unstable : BinaryLabel::stable);
  }

  // Threshold metrics from the votes; ranking metrics from the mean
  // probability.
  MetricsReport r;
  r.n = static_cast<std::int64_t>(out.predictions.entries.size());
  for (std::size_t i = 0; i < out.votes.size(); ++i) {
    const bool predicted = out.votes[i] == BinaryLabel::unstable;
    const bool actual = out.predictions.entries[i].label == BinaryLabel::unstable;
    if (predicted && actual) ++r.counts.tp;
    else if (predicted && !actual) ++r.counts.fp;
    else if (!predicted && !actual) ++r.counts.tn;
    else ++r.counts.fn;
  }
  if (r.n > 0) r.accuracy = static_cast<double>(r.counts.tp + r.counts.tn) / static_cast<double>(r.n);
  if (r.counts.tp + r.counts.fn > 0)
    r.sensitivity = static_cast<double>(r.counts.tp) / static_cast<double>(r.counts.tp + r.counts.fn);
  if (r.counts.tn + r.counts.fp > 0)
    r.specificity = static_cast<double>(r.counts.tn) / static_cast<double>(r.counts.tn + r.counts.fp);
  if (2 * r.counts.tp + r.counts.fp + r.counts.fn > 0)
    r.f1 = static_cast<double>(2 * r.counts.tp) /
           static_cast<double>(2 * r.counts.tp + r.counts.fp + r.counts.fn);
  try {
    r.auc = roc_auc(out.predictions).auc;
    r.aupr = pr_aupr(out.predictions).aupr;
  } catch (const undefined_metric_error&) {
  }
  out.metrics = r;
  return out;
}

void write_external_predictions_csv(const ExternalInferenceResult& result,
                                    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open predictions file for writing: " + path);
  out << "map_id,subject_id,fold_id,probability,vote,true_label\n";
  for (std::size_t i = 0; i < result.predictions.entries.size(); ++i) {
    const auto& e = result.predictions.entries[i];
    out << e.map_id << ',' << e.subject_id << ',' << e.fold_id << ','
        << format_compact(e.probability) << ',' << to_string(result.votes[i]) << ','
        << to_string(e.label) << "\n";
  }
}

}  // namespace changedet
