#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "changedet/core_data.hpp"
#include "changedet/evaluation.hpp"
#include "changedet/hpo.hpp"
#include "changedet/models.hpp"
#include "changedet/training.hpp"

namespace changedet {

struct CVPlan {
  int k = 5;
  double val_fraction = 0.25;  // of each fold's training subjects, rounded down, >= 1
  std::uint64_t seed = 0;
  // Folds are stratified by subject majority label; toggleable.
  bool stratified = true;

  void validate() const;
};

struct SubjectLabel {
  std::string id;
  BinaryLabel majority = BinaryLabel::stable;  // ties count as unstable
};

// Majority label per subject, sorted by id.
std::vector<SubjectLabel> subject_labels(const CohortManifest& manifest);

struct FoldAssignment {
  int fold_id = 0;
  std::vector<std::string> train_subjects;
  std::vector<std::string> val_subjects;
  std::vector<std::string> test_subjects;

  // Pairwise disjointness.
  void validate() const;
};

// Partitions subjects into k test folds of near-equal size (difference <= 1),
// then splits each fold's remaining subjects into train/validation.
// Deterministic given plan.seed.
std::vector<FoldAssignment> make_subject_folds(const std::vector<SubjectLabel>& subjects,
                                               const CVPlan& plan);

// Removes every WAD record whose subject sits in the fold's test or
// validation set; records of training subjects and of subjects absent from
// HAD pass through.
CohortManifest filter_wad_for_fold(const CohortManifest& wad, const FoldAssignment& fold);

enum class ExperimentKind { baseline, tl };

std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);

struct ExperimentSpec {
  ArchitectureSpec arch;
  ExperimentKind kind = ExperimentKind::baseline;
  CVPlan cv;
  SearchSpace space;
  SamplerKind sampler = SamplerKind::grid;
  PrunerConfig pruner;
  Budget budget;
  TpeOptions tpe;
  TrainConfig train;
  AugmentationPolicy augmentation;
  CohortManifest had;
  std::optional<CohortManifest> wad;  // baseline experiments never read it
  std::string output_dir;
  std::uint64_t seed = 0;
  int parallelism = 1;

  void validate() const;
};

struct FoldOutcome {
  FoldAssignment fold;
  StudyRecord study;
  TrialConfig best_config;
  PredictionSet test_predictions;
  std::string final_checkpoint;
};

struct ExperimentResult {
  std::vector<FoldOutcome> folds;
  PredictionSet pooled;
  MetricsReport metrics;
  // One entry per cohort materialized into a training set ("fold0: WAD 120
  // records"); empty for baseline runs regardless of a supplied WAD.
  std::vector<std::string> wad_access_log;
  std::string metrics_report_path;
  std::string pooled_predictions_path;
};

// Runs the per-fold tuning studies, evaluates each fold's selected model
// once on its untouched test subjects and pools the test predictions.
// Identical HAD splits for baseline and TL given the same seed.
ExperimentResult run_experiment(const ExperimentSpec& spec);

struct ExternalInferenceResult {
  PredictionSet predictions;            // probability = mean over the 5 models
  std::vector<BinaryLabel> votes;       // majority vote, aligned with predictions
  MetricsReport metrics;                // threshold metrics from votes, AUC from mean prob
};

// Majority-vote inference with the 5 fold models (odd count: no ties).
// Each model votes at threshold 0.5 on its own probability.
ExternalInferenceResult run_external_inference(const std::vector<std::string>& checkpoint_paths,
                                               const CohortManifest& external);

void write_external_predictions_csv(const ExternalInferenceResult& result,
                                    const std::string& path);

}  // namespace changedet
