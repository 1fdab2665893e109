#include "changedet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "changedet/evaluation.hpp"
#include "changedet/nn/adam.hpp"
#include "changedet/preprocess.hpp"
#include "changedet/text.hpp"

namespace changedet {

// ---- samples ---------------------------------------------------------------

Sample SampleLoader::load(const DifferenceMapRecord& record) {
  Sample s;
  s.map_id = record.map_id;
  s.subject_id = record.subject_id;
  s.label = record.label;
  auto it = cache_.find(record.volume_path);
  if (it == cache_.end()) {
    Volume3D v = load_volume(record.volume_path);
    if (v.shape != grid_) v = resample_to_grid(v, grid_);
    it = cache_.emplace(record.volume_path, std::make_shared<const Volume3D>(std::move(v))).first;
  }
  s.volume = it->second;
  return s;
}

std::vector<Sample> SampleLoader::load_all(const CohortManifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) out.push_back(load(r));
  return out;
}

// ---- augmentation ------------------------------------------------------------

Volume3D flip_volume(const Volume3D& v, int axis) {
  if (axis < 0 || axis > 2) throw validation_error("flip axis must be 0, 1 or 2");
  Volume3D out = v;
  for (std::int64_t z = 0; z < v.nz(); ++z)
    for (std::int64_t y = 0; y < v.ny(); ++y)
      for (std::int64_t x = 0; x < v.nx(); ++x) {
        const std::int64_t sx = axis == 0 ? v.nx() - 1 - x : x;
        const std::int64_t sy = axis == 1 ? v.ny() - 1 - y : y;
        const std::int64_t sz = axis == 2 ? v.nz() - 1 - z : z;
        out.at(x, y, z) = v.at(sx, sy, sz);
      }
  return out;
}

Volume3D add_gaussian_noise(const Volume3D& v, double sigma, Rng& rng) {
  Volume3D out = v;
  for (auto& x : out.voxels) x += rng.normal(0.0, sigma);
  return out;
}

namespace {

double sample_trilinear(const Volume3D& v, double x, double y, double z) {
  if (x < 0 || y < 0 || z < 0 || x > static_cast<double>(v.nx() - 1) ||
      y > static_cast<double>(v.ny() - 1) || z > static_cast<double>(v.nz() - 1))
    return 0.0;
  const auto x0 = static_cast<std::int64_t>(x), y0 = static_cast<std::int64_t>(y),
             z0 = static_cast<std::int64_t>(z);
  const std::int64_t x1 = std::min(x0 + 1, v.nx() - 1);
  const std::int64_t y1 = std::min(y0 + 1, v.ny() - 1);
  const std::int64_t z1 = std::min(z0 + 1, v.nz() - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double fz = z - static_cast<double>(z0);
  const double c00 = v.at(x0, y0, z0) * (1 - fx) + v.at(x1, y0, z0) * fx;
  const double c10 = v.at(x0, y1, z0) * (1 - fx) + v.at(x1, y1, z0) * fx;
  const double c01 = v.at(x0, y0, z1) * (1 - fx) + v.at(x1, y0, z1) * fx;
  const double c11 = v.at(x0, y1, z1) * (1 - fx) + v.at(x1, y1, z1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

}  // namespace

Volume3D zoom_volume(const Volume3D& v, double factor) {
  if (!(factor > 0.0)) throw validation_error("zoom factor must be > 0");
  if (factor == 1.0) return v;
  Volume3D out = v;
  const double cx = static_cast<double>(v.nx() - 1) / 2.0;
  const double cy = static_cast<double>(v.ny() - 1) / 2.0;
  const double cz = static_cast<double>(v.nz() - 1) / 2.0;
  for (std::int64_t z = 0; z < v.nz(); ++z)
    for (std::int64_t y = 0; y < v.ny(); ++y)
      for (std::int64_t x = 0; x < v.nx(); ++x) {
        const double sx = cx + (static_cast<double>(x) - cx) / factor;
        const double sy = cy + (static_cast<double>(y) - cy) / factor;
        const double sz = cz + (static_cast<double>(z) - cz) / factor;
        out.at(x, y, z) = sample_trilinear(v, sx, sy, sz);
      }
  return out;
}

Volume3D elastic_deform(const Volume3D& v, int grid_spacing, double magnitude, Rng& rng) {
  if (grid_spacing < 2) throw validation_error("elastic grid spacing must be >= 2");
  // Coarse displacement control grid, trilinearly upsampled to a dense field.
  const std::int64_t gx = v.nx() / grid_spacing + 2;
  const std::int64_t gy = v.ny() / grid_spacing + 2;
  const std::int64_t gz = v.nz() / grid_spacing + 2;
  std::vector<std::array<double, 3>> control(static_cast<std::size_t>(gx * gy * gz));
  for (auto& c : control)
    c = {rng.normal(0.0, magnitude), rng.normal(0.0, magnitude), rng.normal(0.0, magnitude)};

  auto control_at = [&](std::int64_t i, std::int64_t j, std::int64_t k, int d) {
    i = std::clamp<std::int64_t>(i, 0, gx - 1);
    j = std::clamp<std::int64_t>(j, 0, gy - 1);
    k = std::clamp<std::int64_t>(k, 0, gz - 1);
    return control[static_cast<std::size_t>(i + gx * (j + gy * k))][d];
  };

  Volume3D out = v;
  const double inv = 1.0 / static_cast<double>(grid_spacing);
  for (std::int64_t z = 0; z < v.nz(); ++z)
    for (std::int64_t y = 0; y < v.ny(); ++y)
      for (std::int64_t x = 0; x < v.nx(); ++x) {
        const double u = static_cast<double>(x) * inv;
        const double w = static_cast<double>(y) * inv;
        const double q = static_cast<double>(z) * inv;
        const auto i0 = static_cast<std::int64_t>(u), j0 = static_cast<std::int64_t>(w),
                   k0 = static_cast<std::int64_t>(q);
        const double fu = u - static_cast<double>(i0);
        const double fw = w - static_cast<double>(j0);
        const double fq = q - static_cast<double>(k0);
        double disp[3];
        for (int d = 0; d < 3; ++d) {
          const double c00 = control_at(i0, j0, k0, d) * (1 - fu) + control_at(i0 + 1, j0, k0, d) * fu;
          const double c10 = control_at(i0, j0 + 1, k0, d) * (1 - fu) + control_at(i0 + 1, j0 + 1, k0, d) * fu;
          const double c01 = control_at(i0, j0, k0 + 1, d) * (1 - fu) + control_at(i0 + 1, j0, k0 + 1, d) * fu;
          const double c11 = control_at(i0, j0 + 1, k0 + 1, d) * (1 - fu) + control_at(i0 + 1, j0 + 1, k0 + 1, d) * fu;
          const double c0 = c00 * (1 - fw) + c10 * fw;
          const double c1 = c01 * (1 - fw) + c11 * fw;
          disp[d] = c0 * (1 - fq) + c1 * fq;
        }
        out.at(x, y, z) = sample_trilinear(v, static_cast<double>(x) + disp[0],
                                           static_cast<double>(y) + disp[1],
                                           static_cast<double>(z) + disp[2]);
      }
  return out;
}

Volume3D augment_volume(const Volume3D& volume, const AugmentationPolicy& policy, Rng& rng) {
  Volume3D out = volume;
  if (rng.bernoulli(policy.flip_prob)) {
    const int axis = static_cast<int>(rng.uniform_int(3));
    out = flip_volume(out, axis);
  }
  if (rng.bernoulli(policy.noise_prob)) out = add_gaussian_noise(out, policy.noise_sigma, rng);
  if (rng.bernoulli(policy.zoom_prob))
    out = zoom_volume(out, rng.uniform(policy.zoom_min, policy.zoom_max));
  if (rng.bernoulli(policy.elastic_prob))
    out = elastic_deform(out, policy.elastic_grid_spacing, policy.elastic_magnitude, rng);
  return out;
}

// ---- training loop -------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw validation_error("learning_rate must be > 0");
  if (weight_decay < 0.0) throw validation_error("weight_decay must be >= 0");
  if (batch_size < 1) throw validation_error("batch_size must be >= 1");
  if (max_epochs < 0) throw validation_error("max_epochs must be >= 0");
  if (early_stop_patience < 1) throw validation_error("early_stop_patience must be >= 1");
}

bool EarlyStopper::observe(int epoch, double value) {
  if (value > best_value_) {
    best_value_ = value;
    best_epoch_ = epoch;
    epochs_since_improvement_ = 0;
    return false;
  }
  ++epochs_since_improvement_;
  return epochs_since_improvement_ >= patience_;
}

namespace {

nn::Tensor batch_tensor(const std::vector<const Sample*>& samples) {
  const auto& shape = samples.front()->volume->shape;  // (nx, ny, nz)
  nn::Tensor t({static_cast<std::int64_t>(samples.size()), 1, shape[2], shape[1], shape[0]});
  const std::size_t voxels = samples.front()->volume->voxels.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->volume->shape != shape)
      throw validation_error("batch mixes volumes of different shapes");
    std::copy(samples[i]->volume->voxels.begin(), samples[i]->volume->voxels.end(),
              t.data.begin() + static_cast<std::ptrdiff_t>(i * voxels));
  }
  return t;
}

double validation_auc(Model& model, const std::vector<Sample>& val, int batch_size) {
  PredictionSet preds;
  std::vector<const Sample*> batch;
  auto flush = [&]() {
    if (batch.empty()) return;
    const auto probs = predict_batch(model, batch_tensor(batch));
    for (std::size_t i = 0; i < batch.size(); ++i)
      preds.entries.push_back(
          {batch[i]->map_id, batch[i]->subject_id, 0, probs[i], batch[i]->label});
    batch.clear();
  };
  for (const auto& s : val) {
    batch.push_back(&s);
    if (batch.size() == static_cast<std::size_t>(batch_size)) flush();
  }
  flush();
  try {
    return roc_auc(preds).auc;
  } catch (const undefined_metric_error&) {
    return 0.5;  // single-class validation split carries no ranking signal
  }
}

void check_subject_disjoint(const std::vector<Sample>& train, const std::vector<Sample>& val) {
  std::set<std::string> train_subjects;
  for (const auto& s : train) train_subjects.insert(s.subject_id);
  for (const auto& s : val)
    if (train_subjects.count(s.subject_id))
      throw validation_error("subject '" + s.subject_id + "' appears in both train and val");
}

}  // namespace

TrainResult train_model(Model& model, const std::vector<Sample>& train,
                        const std::vector<Sample>& val, const TrainConfig& config,
                        const AugmentationPolicy& policy, const TrainHooks& hooks) {
  config.validate();
  if (train.empty()) throw validation_error("training set is empty");
  if (val.empty()) throw validation_error("validation set is empty");
  check_subject_disjoint(train, val);

  const auto t_start = std::chrono::steady_clock::now();
  TrainResult result;
  result.n_train_samples = train.size();
  if (config.max_epochs == 0) return result;  // no-op phase; model untouched

  nn::Adam optimizer(model.params(), config.learning_rate, config.weight_decay);
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng augment_rng(derive_seed(config.seed, "augment"));
  EarlyStopper stopper(config.early_stop_patience);

  std::vector<double> best_state;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batch_count = 0;
    std::vector<Sample> augmented;
    augmented.reserve(static_cast<std::size_t>(config.batch_size));  // keeps batch pointers stable
    std::vector<const Sample*> batch;
    auto run_batch = [&]() {
      if (batch.empty()) return;
      nn::Tensor x = batch_tensor(batch);
      std::vector<double> targets(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i)
        targets[i] = batch[i]->label == BinaryLabel::unstable ? 1.0 : 0.0;
      optimizer.zero_grad();
      nn::Tensor logits = model.forward(x, /*train=*/true);
      nn::Tensor grad;
      const double loss = nn::bce_with_logits(logits, targets, grad);
      if (!std::isfinite(loss))
        throw training_divergence_error(epoch, "non-finite training loss");
      model.backward(grad);
      optimizer.step();
      loss_sum += loss;
      ++batch_count;
      batch.clear();
      augmented.clear();
    };

    for (const std::size_t idx : order) {
      const Sample& s = train[idx];
      Sample aug = s;
      aug.volume = std::make_shared<const Volume3D>(augment_volume(*s.volume, policy, augment_rng));
      augmented.push_back(std::move(aug));
      batch.push_back(&augmented.back());
      if (batch.size() == static_cast<std::size_t>(config.batch_size)) run_batch();
    }
    run_batch();

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = batch_count > 0 ? loss_sum / static_cast<double>(batch_count) : 0.0;
    stats.val_auc = hooks.val_metric_override ? hooks.val_metric_override(model, epoch)
                                              : validation_auc(model, val, config.batch_size);
    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    result.epochs.push_back(stats);

    const bool improved = stats.val_auc > stopper.best_value();
    const bool stop = stopper.observe(epoch, stats.val_auc);
    if (improved) best_state = model.save_state();
    if (hooks.on_epoch) hooks.on_epoch(stats);
    if (stop) break;
  }

  result.best_epoch = stopper.best_epoch();
  result.best_val_auc = stopper.best_value();
  if (!best_state.empty()) model.load_state(best_state);
  if (!hooks.checkpoint_path.empty()) {
    save_checkpoint(hooks.checkpoint_path, model, result.best_epoch, result.best_val_auc);
    result.checkpoint_path = hooks.checkpoint_path;
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

// ---- transfer-learning strategies ------------------------------------------------

std::string to_string(TLStrategyKind k) {
  switch (k) {
    case TLStrategyKind::mixed_training: return "mixed_training";
    case TLStrategyKind::fine_tuning: return "fine_tuning";
    case TLStrategyKind::feature_extraction: return "feature_extraction";
  }
  throw validation_error("unreachable TL strategy");
}

namespace {

// Subject-level 90/10 split of WAD for pretrain early stopping, stratified
// by each subject's majority label.
void split_wad_for_pretrain(const std::vector<Sample>& wad, std::uint64_t seed,
                            std::vector<Sample>& pre_train, std::vector<Sample>& pre_val) {
  std::map<std::string, std::pair<int, int>> subject_counts;  // stable, unstable
  for (const auto& s : wad) {
    auto& c = subject_counts[s.subject_id];
    (s.label == BinaryLabel::stable ? c.first : c.second) += 1;
  }
  std::vector<std::string> stable_subjects, unstable_subjects;
  for (const auto& [id, c] : subject_counts)
    (c.second > c.first ? unstable_subjects : stable_subjects).push_back(id);

  Rng rng(derive_seed(seed, "wad_pretrain_split"));
  rng.shuffle(stable_subjects);
  rng.shuffle(unstable_subjects);

  std::set<std::string> val_subjects;
  auto take = [&](std::vector<std::string>& pool) {
    const std::size_t n_val = std::max<std::size_t>(pool.empty() ? 0 : 1, pool.size() / 10);
    for (std::size_t i = 0; i < n_val && i < pool.size(); ++i) val_subjects.insert(pool[i]);
  };
  take(stable_subjects);
  take(unstable_subjects);

  for (const auto& s : wad)
    (val_subjects.count(s.subject_id) ? pre_val : pre_train).push_back(s);
}

}  // namespace

std::pair<ModelHandle, TLResult> apply_tl_strategy(
    TLStrategyKind strategy, const ArchitectureSpec& model_spec, const std::vector<Sample>& wad,
    const std::vector<Sample>& had_train, const std::vector<Sample>& had_val,
    const TrainConfig& config, const AugmentationPolicy& policy, std::uint64_t build_seed,
    const TrainHooks& final_phase_hooks, const TrainConfig* pretrain_override) {
  if (wad.empty())
    throw validation_error("transfer learning requires a nonempty WAD cohort");

  TLResult tl;
  ModelHandle model = build_model(model_spec, build_seed);

  if (strategy == TLStrategyKind::mixed_training) {
    std::vector<Sample> mixed = wad;
    mixed.insert(mixed.end(), had_train.begin(), had_train.end());
    // train_model shuffles every epoch; no extra shuffle needed here.
    tl.final = train_model(*model, mixed, had_val, config, policy, final_phase_hooks);
    return {std::move(model), std::move(tl)};
  }

  std::vector<Sample> pre_train, pre_val;
  split_wad_for_pretrain(wad, config.seed, pre_train, pre_val);
  if (pre_train.empty() || pre_val.empty())
    throw validation_error("WAD too small to split for pretraining");

  TrainConfig pre_config = pretrain_override ? *pretrain_override : config;
  pre_config.seed = derive_seed(config.seed, "wad_pretrain");
  tl.pretrain = train_model(*model, pre_train, pre_val, pre_config, policy);
  tl.pretrained_state = model->save_state();

  if (strategy == TLStrategyKind::feature_extraction) model->set_backbone_trainable(false);
  tl.final = train_model(*model, had_train, had_val, config, policy, final_phase_hooks);
  return {std::move(model), std::move(tl)};
}

void write_epoch_log(const TrainResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open epoch log for writing: " + path);
  out << "epoch,train_loss,val_auc,seconds\n";
  for (const auto& e : result.epochs)
    out << e.epoch << ',' << format_compact(e.train_loss) << ',' << format_compact(e.val_auc)
        << ',' << format_compact(e.seconds) << "\n";
}

}  // namespace changedet
