#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "changedet/models.hpp"
#include "changedet/synthgen.hpp"
#include "changedet/training.hpp"
#include "doctest.h"

using namespace changedet;

namespace {

ArchitectureSpec small_vgg(std::array<std::int64_t, 3> input = {16, 16, 16}) {
  ArchitectureSpec s;
  s.family = ModelFamily::vgg3d;
  s.input_shape = input;
  s.conv_block_channels = {4, 8, 8, 8};
  s.fc_widths = {32, 16, 8, 1};
  return s;
}

Volume3D random_volume(std::array<std::int64_t, 3> shape, std::uint64_t seed) {
  Volume3D v(shape[0], shape[1], shape[2]);
  Rng rng(seed);
  for (auto& x : v.voxels) x = rng.normal(0.0, 1.0);
  return v;
}

// Separable toy samples: unstable maps carry a bright central block.
std::vector<Sample> toy_samples(int n, const std::string& subject_prefix, std::uint64_t seed,
                                std::array<std::int64_t, 3> shape = {16, 16, 16}) {
  std::vector<Sample> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Volume3D v(shape[0], shape[1], shape[2]);
    for (auto& x : v.voxels) x = rng.normal(0.0, 0.3);
    const bool unstable = i % 2 == 0;
    if (unstable) {
      for (std::int64_t z = shape[2] / 4; z < 3 * shape[2] / 4; ++z)
        for (std::int64_t y = shape[1] / 4; y < 3 * shape[1] / 4; ++y)
          for (std::int64_t x = shape[0] / 4; x < 3 * shape[0] / 4; ++x)
            v.at(x, y, z) += 2.0;
    }
    Sample s;
    s.map_id = subject_prefix + "_m" + std::to_string(i);
    s.subject_id = subject_prefix + std::to_string(i);  // one subject per sample
    s.label = unstable ? BinaryLabel::unstable : BinaryLabel::stable;
    s.volume = std::make_shared<const Volume3D>(std::move(v));
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig fast_config(int max_epochs, double lr = 1e-3) {
  TrainConfig c;
  c.learning_rate = lr;
  c.max_epochs = max_epochs;
  c.early_stop_patience = std::max(3, max_epochs);
  c.seed = 99;
  return c;
}

}  // namespace

TEST_CASE("identity augmentation policy returns the input unchanged") {
  const Volume3D v = random_volume({12, 10, 8}, 1);
  Rng rng(2);
  const auto out = augment_volume(v, AugmentationPolicy::disabled(), rng);
  CHECK(out.voxels == v.voxels);
}

TEST_CASE("flip is an involution along each axis") {
  const Volume3D v = random_volume({9, 8, 7}, 3);
  for (int axis = 0; axis < 3; ++axis)
    CHECK(flip_volume(flip_volume(v, axis), axis).voxels == v.voxels);
  CHECK_THROWS_AS(flip_volume(v, 3), validation_error);
}

TEST_CASE("zoom with factor 1 is the identity") {
  const Volume3D v = random_volume({10, 10, 10}, 4);
  const auto z = zoom_volume(v, 1.0);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    CHECK(std::abs(z.voxels[i] - v.voxels[i]) < 1e-6);
}

TEST_CASE("augmentation transforms preserve the grid shape") {
  const Volume3D v = random_volume({11, 9, 13}, 5);
  Rng rng(6);
  CHECK(zoom_volume(v, 0.7).shape == v.shape);
  CHECK(zoom_volume(v, 1.3).shape == v.shape);
  CHECK(add_gaussian_noise(v, 0.1, rng).shape == v.shape);
  CHECK(elastic_deform(v, 4, 1.5, rng).shape == v.shape);
  CHECK(flip_volume(v, 1).shape == v.shape);

  AugmentationPolicy heavy;
  heavy.flip_prob = heavy.noise_prob = heavy.zoom_prob = heavy.elastic_prob = 1.0;
  for (int i = 0; i < 10; ++i) CHECK(augment_volume(v, heavy, rng).shape == v.shape);
}

TEST_CASE("gaussian noise perturbs with roughly the configured sigma") {
  Volume3D v(16, 16, 16, 0.0);
  Rng rng(7);
  const auto noisy = add_gaussian_noise(v, 0.25, rng);
  double ss = 0.0;
  for (const double x : noisy.voxels) ss += x * x;
  CHECK(std::sqrt(ss / static_cast<double>(noisy.voxels.size())) ==
        doctest::Approx(0.25).epsilon(0.1));
}

TEST_CASE("early stopper: flat sequence stops after patience, best stays first") {
  EarlyStopper stopper(3);
  CHECK_FALSE(stopper.observe(1, 0.6));
  CHECK_FALSE(stopper.observe(2, 0.6));
  CHECK_FALSE(stopper.observe(3, 0.6));
  CHECK(stopper.observe(4, 0.6));  // patience 3 exhausted at epoch 4
  CHECK(stopper.best_epoch() == 1);
  CHECK(stopper.best_value() == doctest::Approx(0.6));
}

TEST_CASE("early stopper: improvement resets patience") {
  EarlyStopper stopper(2);
  CHECK_FALSE(stopper.observe(1, 0.5));
  CHECK_FALSE(stopper.observe(2, 0.4));
  CHECK_FALSE(stopper.observe(3, 0.7));  // reset
  CHECK_FALSE(stopper.observe(4, 0.6));
  CHECK(stopper.observe(5, 0.6));
  CHECK(stopper.best_epoch() == 3);
}

TEST_CASE("train_model validates inputs") {
  auto model = build_model(small_vgg(), 1);
  const auto train = toy_samples(4, "tr", 10);
  const auto val = toy_samples(2, "va", 11);
  CHECK_THROWS_AS(train_model(*model, {}, val, fast_config(1), AugmentationPolicy::disabled()),
                  validation_error);
  CHECK_THROWS_AS(train_model(*model, train, {}, fast_config(1), AugmentationPolicy::disabled()),
                  validation_error);
  // Subject overlap between train and val is rejected.
  CHECK_THROWS_AS(train_model(*model, train, train, fast_config(1),
                              AugmentationPolicy::disabled()),
                  validation_error);
}

TEST_CASE("max_epochs bounds the loop exactly") {
  auto model = build_model(small_vgg(), 2);
  const auto train = toy_samples(6, "tr", 20);
  const auto val = toy_samples(4, "va", 21);
  const auto result =
      train_model(*model, train, val, fast_config(1), AugmentationPolicy::disabled());
  CHECK(result.epochs.size() == 1);
  CHECK(result.n_train_samples == 6);
}

TEST_CASE("stubbed validation sequence stops after epoch 4 with best_epoch 1") {
  auto model = build_model(small_vgg(), 3);
  const auto train = toy_samples(4, "tr", 30);
  const auto val = toy_samples(2, "va", 31);
  TrainConfig config = fast_config(10);
  config.early_stop_patience = 3;
  TrainHooks hooks;
  hooks.val_metric_override = [](Model&, int) { return 0.6; };
  const auto result = train_model(*model, train, val, config, AugmentationPolicy::disabled(), hooks);
  CHECK(result.epochs.size() == 4);
  CHECK(result.best_epoch == 1);
  CHECK(result.best_val_auc == doctest::Approx(0.6));
}

TEST_CASE("two runs with identical seeds produce identical loss sequences") {
  const auto train = toy_samples(8, "tr", 40);
  const auto val = toy_samples(4, "va", 41);
  AugmentationPolicy policy;  // stochastic augmentation included on purpose
  policy.elastic_prob = 0.2;

  auto run = [&]() {
    auto model = build_model(small_vgg(), 4);
    return train_model(*model, train, val, fast_config(3), policy);
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    CHECK(a.epochs[i].train_loss == b.epochs[i].train_loss);
    CHECK(a.epochs[i].val_auc == b.epochs[i].val_auc);
  }
}

TEST_CASE("overfit sanity: one memorizable batch collapses the loss") {
  // Batch of 4 with the paper's base learning rate; 200 optimizer steps
  // arrive as 200 single-batch epochs.
  auto model = build_model(small_vgg(), 5);
  const auto train = toy_samples(4, "tr", 50);
  const auto val = toy_samples(2, "va", 51);
  TrainConfig config;
  config.learning_rate = 1e-4;
  config.max_epochs = 200;
  config.early_stop_patience = 200;
  config.seed = 1;
  TrainHooks hooks;
  hooks.val_metric_override = [](Model&, int) { return 0.5; };  // keep all 200 epochs
  const auto result =
      train_model(*model, train, val, config, AugmentationPolicy::disabled(), hooks);
  REQUIRE(result.epochs.size() == 200);
  double best_loss = 1e9;
  for (const auto& e : result.epochs) best_loss = std::min(best_loss, e.train_loss);
  CHECK(best_loss < 0.05);
}

TEST_CASE("best-epoch checkpoint is written and reloadable") {
  const auto dir = std::filesystem::temp_directory_path() / "changedet_train_ckpt";
  std::filesystem::create_directories(dir);
  auto model = build_model(small_vgg(), 6);
  const auto train = toy_samples(8, "tr", 60);
  const auto val = toy_samples(4, "va", 61);
  TrainHooks hooks;
  hooks.checkpoint_path = (dir / "best.ckpt").string();
  const auto result =
      train_model(*model, train, val, fast_config(3), AugmentationPolicy::disabled(), hooks);
  REQUIRE(!result.checkpoint_path.empty());
  CheckpointMeta meta;
  auto restored = load_checkpoint(result.checkpoint_path, &meta);
  CHECK(meta.epoch == result.best_epoch);
  // The returned model carries the best-epoch state; the checkpoint must too.
  CHECK(restored->save_state() == model->save_state());
  write_epoch_log(result, (dir / "epochs.csv").string());
  CHECK(std::filesystem::exists(dir / "epochs.csv"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("TL strategies") {
  const auto wad = toy_samples(24, "w", 70);
  const auto had_train = toy_samples(8, "h", 71);
  const auto had_val = toy_samples(4, "v", 72);
  const auto arch = small_vgg();

  SUBCASE("empty WAD is rejected") {
    CHECK_THROWS_AS(apply_tl_strategy(TLStrategyKind::fine_tuning, arch, {}, had_train, had_val,
                                      fast_config(1), AugmentationPolicy::disabled(), 1),
                    validation_error);
  }

  SUBCASE("mixed training trains once on the union") {
    auto [model, tl] =
        apply_tl_strategy(TLStrategyKind::mixed_training, arch, wad, had_train, had_val,
                          fast_config(2), AugmentationPolicy::disabled(), 2);
    CHECK(!tl.pretrain.has_value());
    CHECK(tl.final.n_train_samples == 32);  // 24 + 8
  }

  SUBCASE("fine-tuning with a zero-epoch final phase returns the pretrained model") {
    TrainConfig pretrain = fast_config(2);
    TrainConfig final_phase = fast_config(0);
    auto [model, tl] =
        apply_tl_strategy(TLStrategyKind::fine_tuning, arch, wad, had_train, had_val,
                          final_phase, AugmentationPolicy::disabled(), 3, {}, &pretrain);
    REQUIRE(tl.pretrain.has_value());
    CHECK(tl.pretrain->epochs.size() == 2);
    CHECK(tl.final.epochs.empty());
    CHECK(model->save_state() == tl.pretrained_state);
  }

  SUBCASE("feature extraction freezes the backbone bit-exactly") {
    auto [model, tl] =
        apply_tl_strategy(TLStrategyKind::feature_extraction, arch, wad, had_train, had_val,
                          fast_config(2), AugmentationPolicy::disabled(), 4);
    REQUIRE(tl.pretrain.has_value());
    // Trainable set is exactly the FC head.
    const auto counts = count_parameters(*model);
    std::int64_t head = 0;
    for (const auto* p : model->params())
      if (model->is_head_param(*p)) head += p->value.numel();
    CHECK(counts.trainable == head);

    // Backbone parameters identical before/after the HAD phase; head moved.
    std::size_t pos = 0;
    bool head_changed = false;
    const auto after = model->save_state();
    for (const auto* p : model->params()) {
      for (std::size_t i = 0; i < p->value.data.size(); ++i, ++pos) {
        if (model->is_head_param(*p)) {
          if (after[pos] != tl.pretrained_state[pos]) head_changed = true;
        } else {
          CHECK(after[pos] == tl.pretrained_state[pos]);
        }
      }
    }
    CHECK(head_changed);
  }

  SUBCASE("fine-tuning trains the whole network on HAD") {
    auto [model, tl] =
        apply_tl_strategy(TLStrategyKind::fine_tuning, arch, wad, had_train, had_val,
                          fast_config(2), AugmentationPolicy::disabled(), 5);
    REQUIRE(tl.pretrain.has_value());
    CHECK(model->save_state() != tl.pretrained_state);
    CHECK(count_parameters(*model).trainable == count_parameters(*model).total);
  }
}

TEST_CASE("sample loader resamples to the grid and caches by path") {
  const auto dir = std::filesystem::temp_directory_path() / "changedet_loader_test";
  std::filesystem::remove_all(dir);
  SynthCohortSpec spec;
  spec.n_had_subjects = 2;
  spec.volume_shape = {20, 20, 20};
  spec.seed = 1;
  const auto bundle = materialize_cohort(spec, dir.string());

  SampleLoader loader({12, 12, 12});
  const auto samples = loader.load_all(bundle.had);
  REQUIRE(!samples.empty());
  for (const auto& s : samples)
    CHECK(s.volume->shape == std::array<std::int64_t, 3>{12, 12, 12});

  const auto again = loader.load(bundle.had.records[0]);
  CHECK(again.volume.get() == samples[0].volume.get());  // cache hit
  std::filesystem::remove_all(dir);
}
