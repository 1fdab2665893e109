#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "changedet/nn/layers.hpp"

namespace changedet {

enum class ModelFamily { vgg3d, seresnext3d };

std::string to_string(ModelFamily f);
ModelFamily family_from_string(const std::string& s);

// One spec covers both families; family-irrelevant fields are ignored.
struct ArchitectureSpec {
  ModelFamily family = ModelFamily::vgg3d;
  std::array<std::int64_t, 3> input_shape{96, 96, 64};  // nx, ny, nz

  // vgg3d: 4 conv blocks (conv3 + BN + ReLU + maxpool2) and 4 FC blocks.
  // Defaults land the trainable-parameter count at ~7.4M.
  std::array<int, 4> conv_block_channels{32, 64, 128, 256};
  std::array<int, 4> fc_widths{168, 84, 32, 1};

  // seresnext3d: grouped residual bottlenecks with squeeze-and-excitation.
  // Bottleneck width is stage_width/2. Defaults (depths {2,3,4,2}) land at
  // ~19.5M.
  int cardinality = 32;
  int se_reduction = 16;
  std::array<int, 4> stage_depths{2, 3, 4, 2};
  int stem_width = 64;
  std::array<int, 4> stage_widths{256, 512, 1024, 2048};

  double dropout = 0.0;

  void validate() const;
};

ArchitectureSpec default_vgg3d();
ArchitectureSpec default_seresnext3d();

struct ParameterCount {
  std::int64_t trainable = 0;
  std::int64_t total = 0;
};

// A built network. Forward input is [N, 1, nz, ny, nx]; a volume's x-fastest
// memory layout maps onto this directly. Output is one logit per sample.
// Handles are confined to one execution stream while training;
// inference-mode use is read-only.
class Model {
 public:
  virtual ~Model() = default;
  virtual nn::Tensor forward(const nn::Tensor& x, bool train) = 0;
  virtual nn::Tensor backward(const nn::Tensor& grad_logits) = 0;
  virtual bool is_head_param(const nn::Param& p) const = 0;

  const ArchitectureSpec& spec() const { return spec_; }
  std::vector<nn::Param*>& params() { return params_; }
  const std::vector<nn::Param*>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::vector<double>*>>& buffers() const {
    return buffers_;
  }

  // Feature-extraction support: freezes/unfreezes everything that is not
  // part of the fully-connected head.
  void set_backbone_trainable(bool trainable);

  ParameterCount parameter_count() const;

  // Flat snapshot/restore of parameters plus buffers (batch-norm running
  // statistics), in registration order.
  std::vector<double> save_state() const;
  void load_state(const std::vector<double>& flat);

 protected:
  explicit Model(ArchitectureSpec spec) : spec_(std::move(spec)) {}
  void register_params(nn::Layer& root);
  void register_buffer(std::string name, std::vector<double>* buf);

  ArchitectureSpec spec_;
  std::vector<nn::Param*> params_;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers_;
};

using ModelHandle = std::unique_ptr<Model>;

// Builds an initialized model; identical seeds give identical parameters.
ModelHandle build_model(const ArchitectureSpec& spec, std::uint64_t seed);

ParameterCount count_parameters(const Model& model);

// Deterministic inference: batch-norm uses running statistics, no
// augmentation, sigmoid applied to the logit. Batch is [N, 1, nz, ny, nx].
std::vector<double> predict_batch(Model& model, const nn::Tensor& batch);

// Checkpoint container: JSON header (spec, epoch, validation AUC, tensor
// table) followed by raw little-endian doubles.
struct CheckpointMeta {
  ArchitectureSpec spec;
  int epoch = 0;
  double val_auc = 0.0;
};

void save_checkpoint(const std::string& path, const Model& model, int epoch, double val_auc);
ModelHandle load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace changedet
