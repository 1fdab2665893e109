#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "changedet/nn/tensor.hpp"
#include "changedet/rng.hpp"

namespace changedet::nn {

// A trainable tensor. `trainable == false` (frozen) excludes it from both
// optimizer updates and the trainable-parameter count; it still serializes.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

// Layers cache what their backward pass needs during forward. One layer
// instance therefore belongs to exactly one execution stream.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_params(std::vector<Param*>& out) {}
};

// 5-D activations are [N, C, Z, Y, X].
class Conv3d : public Layer {
 public:
  Conv3d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding,
         int groups, bool bias, Rng& init_rng);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  static std::int64_t out_size(std::int64_t in, int kernel, int stride, int padding) {
    return (in + 2 * padding - kernel) / stride + 1;
  }

  Param weight;  // [out_c, in_c/groups, k, k, k]
  Param bias_param;
  bool has_bias;
  int in_c, out_c, k, stride, pad, groups;

 private:
  Tensor input_;
};

class BatchNorm3d : public Layer {
 public:
  BatchNorm3d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  Param gamma, beta;
  // Running statistics are buffers, not parameters: they keep updating in
  // train mode even when the layer is frozen.
  std::vector<double> running_mean, running_var;
  double momentum, eps;
  int channels;

 private:
  Tensor xhat_;
  std::vector<double> inv_std_;
  std::vector<std::int64_t> in_shape_;
  std::int64_t per_channel_ = 0;
  bool last_forward_train_ = false;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<bool> mask_;
  std::vector<std::int64_t> in_shape_;
};

class MaxPool3d : public Layer {
 public:
  MaxPool3d(int kernel, int stride, int padding = 0) : k(kernel), stride(stride), pad(padding) {}

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

  int k, stride, pad;

 private:
  std::vector<std::int64_t> argmax_;
  std::vector<std::int64_t> in_shape_;
};

// [N, C, Z, Y, X] -> [N, C]
class GlobalAvgPool3d : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<std::int64_t> in_shape_;
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<std::int64_t> in_shape_;
};

class Linear : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features, Rng& init_rng);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  Param weight;  // [out, in]
  Param bias;
  int in_f, out_f;

 private:
  Tensor input_;
};

// Inverted dropout; identity in eval mode.
class Dropout : public Layer {
 public:
  Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {}

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  double rate_;
  Rng rng_;
  std::vector<double> scale_;
};

class Sigmoid : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Tensor output_;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// Mean binary cross-entropy on logits; returns the loss and writes
// d(loss)/d(logits) into grad (same shape as logits [N]).
double bce_with_logits(const Tensor& logits, const std::vector<double>& targets, Tensor& grad);

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace changedet::nn
