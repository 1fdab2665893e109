#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "changedet/errors.hpp"
#include "changedet/rng.hpp"

namespace changedet {

// Conditional hyperparameter tree. When tl_active, each point carries a
// transfer-learning branch: mixed_training = true uses fraction_of_WAD only;
// mixed_training = false additionally assigns feature_extraction. No valid
// point has mixed_training = true together with a feature_extraction value.
struct SearchSpace {
  std::vector<double> learning_rates{1e-4, 1e-5, 1e-6};
  std::vector<double> weight_decays{0.0, 0.01};
  bool tl_active = false;
  std::vector<double> wad_fractions{0.75, 0.95};

  void validate() const;
};

struct TLChoice {
  bool mixed_training = true;
  std::optional<bool> feature_extraction;  // assigned iff !mixed_training
  double fraction_of_wad = 0.75;

  // 0 = mixed, 1 = fine-tuning, 2 = feature extraction.
  int branch() const {
    if (mixed_training) return 0;
    return *feature_extraction ? 2 : 1;
  }
};

struct TrialConfig {
  int trial_id = 0;
  std::uint64_t seed = 0;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  std::optional<TLChoice> tl;
  bool sampled_as_random = false;  // set when TPE fell back to random sampling

  // Equality over the hyperparameter assignment (id/seed/metadata excluded).
  bool same_point(const TrialConfig& other) const;
  void check_valid(const SearchSpace& space) const;
};

// Exhaustive, duplicate-free enumeration in documented order: learning rate
// (declared order) x weight decay x TL leaf, with TL leaves ordered
// mixed_training, fine_tuning, feature_extraction, each over the declared
// fraction list.
std::vector<TrialConfig> enumerate_grid(const SearchSpace& space);

enum class SamplerKind { grid, random, tpe };

std::string to_string(SamplerKind s);
SamplerKind sampler_from_string(const std::string& s);

enum class TrialStatus { completed, pruned, failed };

std::string to_string(TrialStatus s);
TrialStatus trial_status_from_string(const std::string& s);

struct TrialRecord {
  TrialConfig config;
  TrialStatus status = TrialStatus::failed;
  std::optional<double> objective;  // validation AUC; set when completed
  std::vector<std::pair<int, double>> intermediates;
  std::string error;
};

struct StudyRecord {
  std::vector<TrialRecord> trials;
  std::optional<std::size_t> best_trial;  // index into trials; argmax over completed

  const TrialRecord* best() const {
    return best_trial ? &trials[*best_trial] : nullptr;
  }
};

struct TpeOptions {
  int startup_trials = 10;   // random until this many trials finished
  double gamma = 0.25;       // good/bad split quantile
  int n_candidates = 24;
};

// Draws the next trial: grid walks the enumeration order and returns nullopt
// once exhausted; random samples uniformly over valid leaves; tpe scores
// candidates by the good/bad density ratio (branch variables sampled first)
// and falls back to random below `startup_trials`.
std::optional<TrialConfig> sample_next_trial(const SearchSpace& space, SamplerKind sampler,
                                             const StudyRecord& history, Rng& rng,
                                             const TpeOptions& tpe = {});

// Median pruning rule: prune iff step >= warmup_steps, at least min_trials
// completed trials reported a value at this step, and the intermediate value
// is strictly below their median.
bool should_prune_median(int step, double intermediate,
                         const std::vector<double>& completed_values_at_step, int min_trials,
                         int warmup_steps);

struct PrunerConfig {
  bool enabled = true;
  int min_trials = 5;
  int warmup_steps = 5;
};

struct Budget {
  std::optional<int> max_trials;
  std::optional<double> max_seconds;  // enforced between trials, never mid-trial

  void validate() const;
};

// Thrown by TrialProgress::report when the pruner fires; run_study records
// the trial as pruned.
struct trial_pruned {};

class TrialProgress {
 public:
  TrialProgress(const StudyRecord& study, const PrunerConfig& pruner)
      : study_(study), pruner_(pruner) {}

  // Records an intermediate objective value; throws trial_pruned when the
  // median rule fires.
  void report(int step, double value);

  const std::vector<std::pair<int, double>>& intermediates() const { return intermediates_; }

 private:
  const StudyRecord& study_;
  const PrunerConfig& pruner_;
  std::vector<std::pair<int, double>> intermediates_;
};

using Objective = std::function<double(const TrialConfig&, TrialProgress&)>;

struct StudyOptions {
  SamplerKind sampler = SamplerKind::grid;
  PrunerConfig pruner;
  Budget budget;
  std::uint64_t seed = 0;
  TpeOptions tpe;
  // Append-only JSONL log; when the file already exists the study resumes
  // from it (previously run points are skipped by the grid sampler and count
  // against the budget).
  std::string log_path;
};

// Runs trials until the budget or the grid is exhausted. A throwing
// objective marks its trial failed and the study continues; pruned trials
// never become best.
StudyRecord run_study(const Objective& objective, const SearchSpace& space,
                      const StudyOptions& options);

}  // namespace changedet
