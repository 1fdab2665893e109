#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "changedet/models.hpp"
#include "changedet/nn/adam.hpp"
#include "doctest.h"

using namespace changedet;

namespace {

ArchitectureSpec tiny_vgg() {
  ArchitectureSpec s;
  s.family = ModelFamily::vgg3d;
  s.input_shape = {16, 16, 16};
  s.conv_block_channels = {2, 2, 2, 2};
  s.fc_widths = {4, 4, 2, 1};
  return s;
}

ArchitectureSpec tiny_seresnext() {
  ArchitectureSpec s;
  s.family = ModelFamily::seresnext3d;
  s.input_shape = {16, 16, 16};
  s.cardinality = 2;
  s.se_reduction = 4;
  s.stage_depths = {1, 1, 1, 1};
  s.stem_width = 4;
  s.stage_widths = {8, 8, 8, 8};
  return s;
}

nn::Tensor random_batch(const ArchitectureSpec& spec, std::int64_t n, std::uint64_t seed) {
  nn::Tensor x({n, 1, spec.input_shape[2], spec.input_shape[1], spec.input_shape[0]});
  Rng rng(seed);
  for (auto& v : x.data) v = rng.normal(0.0, 1.0);
  return x;
}

// Central-difference gradient check on the BCE loss wrt every parameter.
double gradcheck_relative_error(Model& model, const nn::Tensor& x, double target) {
  const std::vector<double> targets{target};
  auto loss_of = [&]() {
    nn::Tensor logits = model.forward(x, /*train=*/true);
    nn::Tensor grad;
    return nn::bce_with_logits(logits, targets, grad);
  };

  for (auto* p : model.params()) p->grad.fill(0.0);
  nn::Tensor logits = model.forward(x, true);
  nn::Tensor dlogits;
  nn::bce_with_logits(logits, targets, dlogits);
  model.backward(dlogits);

  std::vector<double> analytic, numeric;
  const double eps = 1e-5;
  for (auto* p : model.params()) {
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      analytic.push_back(p->grad.data[i]);
      const double saved = p->value.data[i];
      p->value.data[i] = saved + eps;
      const double up = loss_of();
      p->value.data[i] = saved - eps;
      const double down = loss_of();
      p->value.data[i] = saved;
      numeric.push_back((up - down) / (2.0 * eps));
    }
  }
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff2 += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    a2 += analytic[i] * analytic[i];
    n2 += numeric[i] * numeric[i];
  }
  return std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2) + 1e-300);
}

}  // namespace

TEST_CASE("default parameter budgets") {
  {
    const auto vgg = build_model(default_vgg3d(), 1);
    const auto count = count_parameters(*vgg);
    CHECK(count.trainable == 7373789);  // ~7.4M, inside the 7.0M..8.0M budget
    CHECK(count.trainable >= 7000000);
    CHECK(count.trainable <= 8000000);
    CHECK(count.total == count.trainable);
  }
  {
    const auto sr = build_model(default_seresnext3d(), 1);
    const auto count = count_parameters(*sr);
    CHECK(count.trainable == 19487425);  // ~19.5M, inside 18.5M..20.5M
    CHECK(count.trainable >= 18500000);
    CHECK(count.trainable <= 20500000);
  }
}

TEST_CASE("tiny vgg parameter count matches the hand-derived closed form") {
  // conv blocks: 27*cin*cout + bias + 2 batch-norm terms per channel
  //   60 + 114 + 114 + 114 = 402
  // fc head on a 2-wide flatten: 12 + 20 + 10 + 3 = 45
  const auto model = build_model(tiny_vgg(), 3);
  CHECK(count_parameters(*model).trainable == 447);
}

TEST_CASE("parameter counts are invariant to the seed") {
  for (const auto& spec : {tiny_vgg(), tiny_seresnext()}) {
    const auto a = build_model(spec, 11);
    const auto b = build_model(spec, 999);
    CHECK(count_parameters(*a).trainable == count_parameters(*b).trainable);
    CHECK(count_parameters(*a).total == count_parameters(*b).total);
  }
}

TEST_CASE("same seed gives identical initial parameters") {
  const auto a = build_model(tiny_seresnext(), 42);
  const auto b = build_model(tiny_seresnext(), 42);
  CHECK(a->save_state() == b->save_state());
  const auto c = build_model(tiny_seresnext(), 43);
  CHECK(a->save_state() != c->save_state());
}

TEST_CASE("single linear map 3->2 with bias has 8 parameters") {
  Rng rng(0);
  nn::Linear lin("lin", 3, 2, rng);
  std::vector<nn::Param*> params;
  lin.collect_params(params);
  std::int64_t n = 0;
  for (const auto* p : params) n += p->value.numel();
  CHECK(n == 8);
}

TEST_CASE("freezing the backbone leaves only the fc head trainable") {
  const auto model = build_model(tiny_vgg(), 5);
  const auto before = count_parameters(*model);
  model->set_backbone_trainable(false);
  const auto after = count_parameters(*model);
  CHECK(after.trainable == 45);  // fc head of the tiny vgg
  CHECK(after.total == before.total);
  model->set_backbone_trainable(true);
  CHECK(count_parameters(*model).trainable == before.trainable);
}

TEST_CASE("predict_batch contract") {
  for (const auto& spec : {tiny_vgg(), tiny_seresnext()}) {
    auto model = build_model(spec, 7);
    for (const std::int64_t n : {1, 3, 5}) {
      const auto probs = predict_batch(*model, random_batch(spec, n, 100 + n));
      REQUIRE(probs.size() == static_cast<std::size_t>(n));
      for (const double p : probs) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
      }
    }
    // Deterministic inference.
    const auto x = random_batch(spec, 4, 55);
    CHECK(predict_batch(*model, x) == predict_batch(*model, x));

    // All-zero batch stays finite.
    nn::Tensor zeros({2, 1, spec.input_shape[2], spec.input_shape[1], spec.input_shape[0]});
    for (const double p : predict_batch(*model, zeros)) CHECK(std::isfinite(p));

    // Shape mismatch rejected.
    nn::Tensor bad({1, 1, 4, 4, 4});
    CHECK_THROWS_AS(predict_batch(*model, bad), validation_error);
  }
}

TEST_CASE("too-small inputs name the failing stage") {
  auto spec = tiny_vgg();
  spec.input_shape = {8, 8, 4};  // z collapses after two pools
  try {
    build_model(spec, 1);
    FAIL("expected validation_error");
  } catch (const validation_error& e) {
    CHECK(std::string(e.what()).find("conv block 3") != std::string::npos);
  }
}

TEST_CASE("gradient check: tiny vgg") {
  auto model = build_model(tiny_vgg(), 17);
  Rng rng(3);
  for (int i = 0; i < 5; ++i) {
    const auto x = random_batch(tiny_vgg(), 1, rng.next_u64());
    const double target = rng.bernoulli(0.5) ? 1.0 : 0.0;
    CHECK(gradcheck_relative_error(*model, x, target) < 1e-4);
  }
}

TEST_CASE("gradient check: tiny seresnext (grouped conv, SE, residual)") {
  // Batch of 2: with a single sample the deepest stage normalizes over one
  // element, pinning its output to beta = 0 exactly on the residual ReLU
  // kink where two-sided differences are meaningless.
  auto model = build_model(tiny_seresnext(), 19);
  Rng rng(4);
  for (int i = 0; i < 3; ++i) {
    const auto x = random_batch(tiny_seresnext(), 2, rng.next_u64());
    nn::Tensor logits = model->forward(x, true);
    nn::Tensor grad;
    const std::vector<double> targets{1.0, 0.0};
    for (auto* p : model->params()) p->grad.fill(0.0);
    const double base = nn::bce_with_logits(logits, targets, grad);
    CHECK(std::isfinite(base));
    model->backward(grad);

    std::vector<double> analytic, numeric;
    const double eps = 1e-5;
    auto loss_of = [&]() {
      nn::Tensor l = model->forward(x, true);
      nn::Tensor g;
      return nn::bce_with_logits(l, targets, g);
    };
    for (auto* p : model->params()) {
      for (std::size_t k = 0; k < p->value.data.size(); ++k) {
        analytic.push_back(p->grad.data[k]);
        const double saved = p->value.data[k];
        p->value.data[k] = saved + eps;
        const double up = loss_of();
        p->value.data[k] = saved - eps;
        const double down = loss_of();
        p->value.data[k] = saved;
        numeric.push_back((up - down) / (2.0 * eps));
      }
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      diff2 += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      a2 += analytic[k] * analytic[k];
      n2 += numeric[k] * numeric[k];
    }
    CHECK(std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2) + 1e-300) < 1e-4);
  }
}

TEST_CASE("checkpoints round-trip weights, spec and metadata") {
  const auto dir = std::filesystem::temp_directory_path() / "changedet_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "model.ckpt").string();

  auto model = build_model(tiny_seresnext(), 23);
  const auto x = random_batch(tiny_seresnext(), 2, 9);
  const auto before = predict_batch(*model, x);
  save_checkpoint(path, *model, 12, 0.87);

  CheckpointMeta meta;
  auto loaded = load_checkpoint(path, &meta);
  CHECK(meta.epoch == 12);
  CHECK(meta.val_auc == doctest::Approx(0.87));
  CHECK(meta.spec.family == ModelFamily::seresnext3d);
  CHECK(predict_batch(*loaded, x) == before);

  std::ofstream bad((dir / "bad.ckpt").string(), std::ios::binary);
  bad << "not a checkpoint";
  bad.close();
  CHECK_THROWS_AS(load_checkpoint((dir / "bad.ckpt").string()), io_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("adam updates only trainable parameters") {
  auto model = build_model(tiny_vgg(), 31);
  model->set_backbone_trainable(false);
  const auto frozen_before = model->save_state();

  nn::Adam opt(model->params(), 1e-2);
  const auto x = random_batch(tiny_vgg(), 2, 77);
  const std::vector<double> targets{1.0, 0.0};
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    nn::Tensor logits = model->forward(x, true);
    nn::Tensor grad;
    nn::bce_with_logits(logits, targets, grad);
    model->backward(grad);
    opt.step();
  }
  // Backbone parameter tensors are bit-identical; head weights moved.
  std::size_t pos = 0;
  bool head_changed = false;
  const auto after = model->save_state();
  for (const auto* p : model->params()) {
    for (std::size_t i = 0; i < p->value.data.size(); ++i, ++pos) {
      if (model->is_head_param(*p)) {
        if (after[pos] != frozen_before[pos]) head_changed = true;
      } else {
        CHECK(after[pos] == frozen_before[pos]);
      }
    }
  }
  CHECK(head_changed);
}
