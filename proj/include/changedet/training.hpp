#pragma once

#include <array>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "changedet/core_data.hpp"
#include "changedet/models.hpp"
#include "changedet/rng.hpp"
#include "changedet/volume.hpp"

namespace changedet {

// One training/evaluation sample: a difference map at the model input grid.
struct Sample {
  std::string map_id;
  std::string subject_id;
  BinaryLabel label = BinaryLabel::stable;
  std::shared_ptr<const Volume3D> volume;
};

// Loads manifest records, resampling each volume to the grid. Volumes are
// cached by path, so folds sharing records load each file once.
class SampleLoader {
 public:
  explicit SampleLoader(std::array<std::int64_t, 3> grid) : grid_(grid) {}

  Sample load(const DifferenceMapRecord& record);
  std::vector<Sample> load_all(const CohortManifest& manifest);

 private:
  std::array<std::int64_t, 3> grid_;
  std::map<std::string, std::shared_ptr<const Volume3D>> cache_;
};

// Online augmentation; each transform fires independently with its
// probability and the output always keeps the input grid.
struct AugmentationPolicy {
  double flip_prob = 0.2;
  double noise_prob = 0.2;
  double noise_sigma = 0.1;  // post-z-score intensity units
  double zoom_prob = 0.2;
  double zoom_min = 0.7;
  double zoom_max = 1.3;
  double elastic_prob = 0.2;
  int elastic_grid_spacing = 8;     // voxels between displacement control points
  double elastic_magnitude = 1.5;   // stddev of control-point displacement, voxels

  static AugmentationPolicy disabled() {
    AugmentationPolicy p;
    p.flip_prob = p.noise_prob = p.zoom_prob = p.elastic_prob = 0.0;
    return p;
  }
};

// Individual transforms, exposed for direct use and testing.
Volume3D flip_volume(const Volume3D& v, int axis);
Volume3D add_gaussian_noise(const Volume3D& v, double sigma, Rng& rng);
// Zooms about the volume center by `factor` (>1 magnifies, <1 shrinks with
// zero padding); the grid shape is preserved.
Volume3D zoom_volume(const Volume3D& v, double factor);
Volume3D elastic_deform(const Volume3D& v, int grid_spacing, double magnitude, Rng& rng);

Volume3D augment_volume(const Volume3D& volume, const AugmentationPolicy& policy, Rng& rng);

struct TrainConfig {
  double learning_rate = 1e-4;   // paper grid: {1e-4, 1e-5, 1e-6}
  double weight_decay = 0.0;     // paper grid: {0, 0.01}
  int batch_size = 4;
  int max_epochs = 60;
  int early_stop_patience = 10;  // epochs without validation-AUC improvement
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_auc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_auc = 0.0;
  double wall_seconds = 0.0;
  std::size_t n_train_samples = 0;
  std::string checkpoint_path;  // set when a checkpoint directory was given
};

// Early-stopping bookkeeping: stop after `patience` consecutive epochs
// without strict improvement; `best_epoch` is the first epoch achieving the
// maximum value.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  // Returns true when training should stop after this epoch.
  bool observe(int epoch, double value);

  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_value_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  double best_value_ = -std::numeric_limits<double>::infinity();
  int epochs_since_improvement_ = 0;
};

struct TrainHooks {
  // Called after each epoch; used by the tuning loop for pruning. Throwing
  // propagates out of train_model.
  std::function<void(const EpochStats&)> on_epoch;
  // Test seam: replaces the validation-AUC computation when set.
  std::function<double(Model&, int epoch)> val_metric_override;
  // When nonempty, the best-epoch checkpoint is written here.
  std::string checkpoint_path;
};

// Trains with Adam on BCE, evaluating validation AUC each epoch; the
// best-epoch state is restored into `model` on return. Train and val must
// be subject-disjoint. A single-class validation set scores 0.5.
TrainResult train_model(Model& model, const std::vector<Sample>& train,
                        const std::vector<Sample>& val, const TrainConfig& config,
                        const AugmentationPolicy& policy, const TrainHooks& hooks = {});

enum class TLStrategyKind { mixed_training, fine_tuning, feature_extraction };

std::string to_string(TLStrategyKind k);

struct TLResult {
  std::optional<TrainResult> pretrain;  // absent for mixed_training
  // Full model state right after WAD pretraining; lets callers verify the
  // freeze contract against the final state.
  std::vector<double> pretrained_state;
  TrainResult final;
};

// The three transfer-learning strategies:
//   mixed_training     one run on shuffled(WAD + HAD train), validated on HAD val
//   fine_tuning        pretrain on WAD (10% subject holdout for early stop),
//                      then retrain all weights on HAD train
//   feature_extraction same pretrain, then freeze the convolutional backbone
//                      and train only the FC head on HAD train
// `wad` must already be filtered against the fold's val/test subjects.
std::pair<ModelHandle, TLResult> apply_tl_strategy(
    TLStrategyKind strategy, const ArchitectureSpec& model_spec, const std::vector<Sample>& wad,
    const std::vector<Sample>& had_train, const std::vector<Sample>& had_val,
    const TrainConfig& config, const AugmentationPolicy& policy, std::uint64_t build_seed,
    const TrainHooks& final_phase_hooks = {}, const TrainConfig* pretrain_override = nullptr);

// Per-epoch metrics log (CSV: epoch, train_loss, val_auc, seconds).
void write_epoch_log(const TrainResult& result, const std::string& path);

}  // namespace changedet
