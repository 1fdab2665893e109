#include "changedet/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace changedet {

using nn::Tensor;

std::string to_string(ModelFamily f) {
  return f == ModelFamily::vgg3d ? "vgg3d" : "seresnext3d";
}

ModelFamily family_from_string(const std::string& s) {
  if (s == "vgg3d") return ModelFamily::vgg3d;
  if (s == "seresnext3d") return ModelFamily::seresnext3d;
  throw validation_error("unknown model family '" + s + "'");
}

void ArchitectureSpec::validate() const {
  for (const auto d : input_shape)
    if (d < 1) throw validation_error("model input shape components must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw validation_error("dropout rate must lie in [0,1)");
  if (family == ModelFamily::vgg3d) {
    for (const auto c : conv_block_channels)
      if (c < 1) throw validation_error("vgg3d conv channels must be >= 1");
    for (const auto f : fc_widths)
      if (f < 1) throw validation_error("vgg3d fc widths must be >= 1");
    if (fc_widths[3] != 1)
      throw validation_error("vgg3d final fc width must be 1 (single sigmoid output)");
  } else {
    if (cardinality < 1) throw validation_error("cardinality must be >= 1");
    if (se_reduction < 1) throw validation_error("se_reduction must be >= 1");
    if (stem_width < 1) throw validation_error("stem width must be >= 1");
    for (int i = 0; i < 4; ++i) {
      if (stage_depths[i] < 1) throw validation_error("stage depths must be >= 1");
      if (stage_widths[i] % 2 != 0)
        throw validation_error("stage widths must be even (bottleneck width is half)");
      if ((stage_widths[i] / 2) % cardinality != 0)
        throw validation_error("bottleneck width must be divisible by cardinality");
      if (stage_widths[i] < se_reduction)
        throw validation_error("stage width smaller than se_reduction");
    }
  }
}

ArchitectureSpec default_vgg3d() {
  ArchitectureSpec s;
  s.family = ModelFamily::vgg3d;
  return s;
}

ArchitectureSpec default_seresnext3d() {
  ArchitectureSpec s;
  s.family = ModelFamily::seresnext3d;
  return s;
}

// ---- Model base ---------------------------------------------------------------

void Model::register_params(nn::Layer& root) {
  root.collect_params(params_);
  std::set<std::string> names;
  for (const auto* p : params_)
    if (!names.insert(p->name).second)
      throw validation_error("duplicate parameter name '" + p->name + "'");
}

void Model::register_buffer(std::string name, std::vector<double>* buf) {
  buffers_.emplace_back(std::move(name), buf);
}

void Model::set_backbone_trainable(bool trainable) {
  for (auto* p : params_)
    if (!is_head_param(*p)) p->trainable = trainable;
}

ParameterCount Model::parameter_count() const {
  ParameterCount c;
  for (const auto* p : params_) {
    c.total += p->value.numel();
    if (p->trainable) c.trainable += p->value.numel();
  }
  return c;
}

std::vector<double> Model::save_state() const {
  std::vector<double> flat;
  for (const auto* p : params_)
    flat.insert(flat.end(), p->value.data.begin(), p->value.data.end());
  for (const auto& [name, buf] : buffers_) flat.insert(flat.end(), buf->begin(), buf->end());
  return flat;
}

void Model::load_state(const std::vector<double>& flat) {
  std::size_t pos = 0;
  for (auto* p : params_) {
    if (pos + p->value.data.size() > flat.size())
      throw validation_error("model state blob too small");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + p->value.data.size()),
              p->value.data.begin());
    pos += p->value.data.size();
  }
  for (auto& [name, buf] : buffers_) {
    if (pos + buf->size() > flat.size()) throw validation_error("model state blob too small");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + buf->size()), buf->begin());
    pos += buf->size();
  }
  if (pos != flat.size()) throw validation_error("model state blob has trailing data");
}

// ---- VGG3d ----------------------------------------------------------------------

namespace {

class Vgg3d final : public Model {
 public:
  Vgg3d(ArchitectureSpec spec, std::uint64_t seed) : Model(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);

    // Walk the downsampling chain first so a too-small input names the stage.
    std::int64_t dz = spec_.input_shape[2], dy = spec_.input_shape[1], dx = spec_.input_shape[0];
    for (int b = 0; b < 4; ++b) {
      if (dz < 2 || dy < 2 || dx < 2)
        throw validation_error("input too small for conv block " + std::to_string(b + 1) +
                               " maxpool (needs every dimension >= 2, has " + std::to_string(dx) +
                               "x" + std::to_string(dy) + "x" + std::to_string(dz) + ")");
      dz /= 2;
      dy /= 2;
      dx /= 2;
    }

    int cin = 1;
    for (int b = 0; b < 4; ++b) {
      const int cout = spec_.conv_block_channels[static_cast<std::size_t>(b)];
      const std::string base = "conv" + std::to_string(b + 1);
      net_.add(std::make_unique<nn::Conv3d>(base, cin, cout, 3, 1, 1, 1, true, rng));
      auto bn = std::make_unique<nn::BatchNorm3d>(base + ".bn", cout);
      register_buffer(base + ".bn.running_mean", &bn->running_mean);
      register_buffer(base + ".bn.running_var", &bn->running_var);
      net_.add(std::move(bn));
      net_.add(std::make_unique<nn::ReLU>());
      net_.add(std::make_unique<nn::MaxPool3d>(2, 2, 0));
      cin = cout;
    }
    net_.add(std::make_unique<nn::Flatten>());
    std::int64_t flat = static_cast<std::int64_t>(cin) * dz * dy * dx;
    for (int b = 0; b < 4; ++b) {
      const int width = spec_.fc_widths[static_cast<std::size_t>(b)];
      const std::string base = "fc" + std::to_string(b + 1);
      net_.add(std::make_unique<nn::Linear>(base, static_cast<int>(flat), width, rng));
      if (b < 3) {
        net_.add(std::make_unique<nn::ReLU>());
        if (spec_.dropout > 0.0)
          net_.add(std::make_unique<nn::Dropout>(spec_.dropout,
                                                 derive_seed(seed, "dropout",
                                                             static_cast<std::uint64_t>(b))));
      }
      flat = width;
    }
    register_params(net_);
  }

  Tensor forward(const Tensor& x, bool train) override {
    Tensor logits = net_.forward(x, train);
    logits.shape = {logits.shape[0]};  // [N,1] -> [N]
    return logits;
  }

  Tensor backward(const Tensor& grad_logits) override {
    Tensor g = grad_logits;
    g.shape = {grad_logits.shape[0], 1};
    return net_.backward(g);
  }

  bool is_head_param(const nn::Param& p) const override {
    return p.name.rfind("fc", 0) == 0;
  }

 private:
  nn::Sequential net_;
};

// ---- SEResNeXt3d -----------------------------------------------------------------

class SEBlock final : public nn::Layer {
 public:
  SEBlock(const std::string& name, int channels, int reduction, Rng& rng)
      : fc1_(name + ".se.fc1", channels, std::max(1, channels / reduction), rng),
        fc2_(name + ".se.fc2", std::max(1, channels / reduction), channels, rng) {}

  Tensor forward(const Tensor& x, bool train) override {
    input_ = x;
    Tensor p = pool_.forward(x, train);
    Tensor h = relu_.forward(fc1_.forward(p, train), train);
    scale_ = sig_.forward(fc2_.forward(h, train), train);  // [N, C]
    const std::int64_t N = x.shape[0], C = x.shape[1];
    const std::int64_t spatial = x.shape[2] * x.shape[3] * x.shape[4];
    Tensor y(x.shape);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const double s = scale_.data[static_cast<std::size_t>(n * C + c)];
        const double* xb = x.data.data() + (n * C + c) * spatial;
        double* yb = y.data.data() + (n * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) yb[i] = xb[i] * s;
      }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const std::int64_t N = input_.shape[0], C = input_.shape[1];
    const std::int64_t spatial = input_.shape[2] * input_.shape[3] * input_.shape[4];
    Tensor gscale({N, C});
    Tensor gx(input_.shape);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const double s = scale_.data[static_cast<std::size_t>(n * C + c)];
        const double* xb = input_.data.data() + (n * C + c) * spatial;
        const double* gyb = gy.data.data() + (n * C + c) * spatial;
        double* gxb = gx.data.data() + (n * C + c) * spatial;
        double acc = 0.0;
        for (std::int64_t i = 0; i < spatial; ++i) {
          acc += gyb[i] * xb[i];
          gxb[i] = gyb[i] * s;
        }
        gscale.data[static_cast<std::size_t>(n * C + c)] = acc;
      }
    Tensor gp = fc1_.backward(relu_.backward(fc2_.backward(sig_.backward(gscale))));
    Tensor gpool = pool_.backward(gp);
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += gpool.data[i];
    return gx;
  }

  void collect_params(std::vector<nn::Param*>& out) override {
    fc1_.collect_params(out);
    fc2_.collect_params(out);
  }

 private:
  nn::GlobalAvgPool3d pool_;
  nn::Linear fc1_, fc2_;
  nn::ReLU relu_;
  nn::Sigmoid sig_;
  Tensor input_, scale_;
};

class SEResNeXtBlock final : public nn::Layer {
 public:
  SEResNeXtBlock(const std::string& name, int in_c, int out_c, int width, int cardinality,
                 int reduction, int stride, Model* owner, Rng& rng)
      : conv1_(name + ".conv1", in_c, width, 1, 1, 0, 1, false, rng),
        bn1_(name + ".bn1", width),
        conv2_(name + ".conv2", width, width, 3, stride, 1, cardinality, false, rng),
        bn2_(name + ".bn2", width),
        conv3_(name + ".conv3", width, out_c, 1, 1, 0, 1, false, rng),
        bn3_(name + ".bn3", out_c),
        se_(name, out_c, reduction, rng) {
    owner_register(owner, name + ".bn1", bn1_);
    owner_register(owner, name + ".bn2", bn2_);
    owner_register(owner, name + ".bn3", bn3_);
    if (stride != 1 || in_c != out_c) {
      proj_conv_ = std::make_unique<nn::Conv3d>(name + ".proj", in_c, out_c, 1, stride, 0, 1,
                                                false, rng);
      proj_bn_ = std::make_unique<nn::BatchNorm3d>(name + ".proj.bn", out_c);
      owner_register(owner, name + ".proj.bn", *proj_bn_);
    }
  }

  Tensor forward(const Tensor& x, bool train) override {
    Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
    h = relu2_.forward(bn2_.forward(conv2_.forward(h, train), train), train);
    h = se_.forward(bn3_.forward(conv3_.forward(h, train), train), train);
    Tensor shortcut = proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x, train), train) : x;
    if (h.shape != shortcut.shape)
      throw validation_error("residual branch shape mismatch");
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += shortcut.data[i];
    return relu_out_.forward(h, train);
  }

  Tensor backward(const Tensor& gy) override {
    Tensor g = relu_out_.backward(gy);
    Tensor gmain = conv1_.backward(
        bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(relu2_.backward(
            conv3_.backward(bn3_.backward(se_.backward(g)))))))));
    Tensor gshort = proj_conv_ ? proj_conv_->backward(proj_bn_->backward(g)) : g;
    for (std::size_t i = 0; i < gmain.data.size(); ++i) gmain.data[i] += gshort.data[i];
    return gmain;
  }

  void collect_params(std::vector<nn::Param*>& out) override {
    conv1_.collect_params(out);
    bn1_.collect_params(out);
    conv2_.collect_params(out);
    bn2_.collect_params(out);
    conv3_.collect_params(out);
    bn3_.collect_params(out);
    se_.collect_params(out);
    if (proj_conv_) {
      proj_conv_->collect_params(out);
      proj_bn_->collect_params(out);
    }
  }

 private:
  static void owner_register(Model* owner, const std::string& name, nn::BatchNorm3d& bn);

  nn::Conv3d conv1_;
  nn::BatchNorm3d bn1_;
  nn::ReLU relu1_;
  nn::Conv3d conv2_;
  nn::BatchNorm3d bn2_;
  nn::ReLU relu2_;
  nn::Conv3d conv3_;
  nn::BatchNorm3d bn3_;
  SEBlock se_;
  std::unique_ptr<nn::Conv3d> proj_conv_;
  std::unique_ptr<nn::BatchNorm3d> proj_bn_;
  nn::ReLU relu_out_;
};

class SEResNeXt3d final : public Model {
 public:
  friend class SEResNeXtBlock;

  SEResNeXt3d(ArchitectureSpec spec, std::uint64_t seed) : Model(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);

    stem_.add(std::make_unique<nn::Conv3d>("stem", 1, spec_.stem_width, 7, 2, 3, 1, false, rng));
    auto bn = std::make_unique<nn::BatchNorm3d>("stem.bn", spec_.stem_width);
    register_buffer("stem.bn.running_mean", &bn->running_mean);
    register_buffer("stem.bn.running_var", &bn->running_var);
    stem_.add(std::move(bn));
    stem_.add(std::make_unique<nn::ReLU>());
    stem_.add(std::make_unique<nn::MaxPool3d>(3, 2, 1));

    int cin = spec_.stem_width;
    for (int s = 0; s < 4; ++s) {
      const int out = spec_.stage_widths[static_cast<std::size_t>(s)];
      const int width = out / 2;
      const int stride = s == 0 ? 1 : 2;
      for (int b = 0; b < spec_.stage_depths[static_cast<std::size_t>(s)]; ++b) {
        const std::string name =
            "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        stages_.add(std::make_unique<SEResNeXtBlock>(name, cin, out, width, spec_.cardinality,
                                                     spec_.se_reduction, b == 0 ? stride : 1,
                                                     this, rng));
        cin = out;
      }
    }

    head_.add(std::make_unique<nn::GlobalAvgPool3d>());
    if (spec_.dropout > 0.0)
      head_.add(std::make_unique<nn::Dropout>(spec_.dropout, derive_seed(seed, "dropout")));
    head_.add(std::make_unique<nn::Linear>("head.fc", cin, 1, rng));

    register_params(stem_);
    register_params(stages_);
    register_params(head_);
  }

  Tensor forward(const Tensor& x, bool train) override {
    Tensor h = stem_.forward(x, train);
    h = stages_.forward(h, train);
    Tensor logits = head_.forward(h, train);
    logits.shape = {logits.shape[0]};
    return logits;
  }

  Tensor backward(const Tensor& grad_logits) override {
    Tensor g = grad_logits;
    g.shape = {grad_logits.shape[0], 1};
    return stem_.backward(stages_.backward(head_.backward(g)));
  }

  bool is_head_param(const nn::Param& p) const override {
    return p.name.rfind("head.", 0) == 0;
  }

 private:
  nn::Sequential stem_, stages_, head_;
};

void SEResNeXtBlock::owner_register(Model* owner, const std::string& name, nn::BatchNorm3d& bn) {
  auto* net = static_cast<SEResNeXt3d*>(owner);
  net->register_buffer(name + ".running_mean", &bn.running_mean);
  net->register_buffer(name + ".running_var", &bn.running_var);
}

}  // namespace

// ---- factory / ops -----------------------------------------------------------------

ModelHandle build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.family == ModelFamily::vgg3d) return std::make_unique<Vgg3d>(spec, seed);
  return std::make_unique<SEResNeXt3d>(spec, seed);
}

ParameterCount count_parameters(const Model& model) { return model.parameter_count(); }

std::vector<double> predict_batch(Model& model, const Tensor& batch) {
  if (batch.shape.size() != 5 || batch.shape[1] != 1)
    throw validation_error("batch must be [N,1,Z,Y,X]");
  const auto& in = model.spec().input_shape;
  if (batch.shape[2] != in[2] || batch.shape[3] != in[1] || batch.shape[4] != in[0])
    throw validation_error("batch grid does not match model input shape");
  for (const double v : batch.data)
    if (!std::isfinite(v)) throw validation_error("batch contains non-finite values");
  Tensor logits = model.forward(batch, /*train=*/false);
  std::vector<double> probs(logits.data.size());
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = nn::sigmoid(logits.data[i]);
  return probs;
}

// ---- spec/checkpoint serialization ----------------------------------------------------

namespace {

nlohmann::json spec_to_json(const ArchitectureSpec& s) {
  return nlohmann::json{{"family", to_string(s.family)},
                        {"input_shape", s.input_shape},
                        {"conv_block_channels", s.conv_block_channels},
                        {"fc_widths", s.fc_widths},
                        {"cardinality", s.cardinality},
                        {"se_reduction", s.se_reduction},
                        {"stage_depths", s.stage_depths},
                        {"stem_width", s.stem_width},
                        {"stage_widths", s.stage_widths},
                        {"dropout", s.dropout}};
}

ArchitectureSpec spec_from_json(const nlohmann::json& j) {
  ArchitectureSpec s;
  s.family = family_from_string(j.at("family").get<std::string>());
  j.at("input_shape").get_to(s.input_shape);
  j.at("conv_block_channels").get_to(s.conv_block_channels);
  j.at("fc_widths").get_to(s.fc_widths);
  s.cardinality = j.at("cardinality").get<int>();
  s.se_reduction = j.at("se_reduction").get<int>();
  j.at("stage_depths").get_to(s.stage_depths);
  s.stem_width = j.value("stem_width", 64);
  if (j.contains("stage_widths")) j.at("stage_widths").get_to(s.stage_widths);
  s.dropout = j.at("dropout").get<double>();
  return s;
}

constexpr char kCheckpointMagic[8] = {'C', 'D', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, int epoch, double val_auc) {
  nlohmann::json header;
  header["spec"] = spec_to_json(model.spec());
  header["epoch"] = epoch;
  header["val_auc"] = val_auc;
  nlohmann::json tensors = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto* p : model.params()) {
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape}, {"offset", offset}});
    offset += p->value.numel();
  }
  for (const auto& [name, buf] : model.buffers()) {
    tensors.push_back({{"name", name},
                       {"shape", {static_cast<std::int64_t>(buf->size())}},
                       {"offset", offset}});
    offset += static_cast<std::int64_t>(buf->size());
  }
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  const std::vector<double> state = model.save_state();
  out.write(reinterpret_cast<const char*>(state.data()),
            static_cast<std::streamsize>(state.size() * sizeof(double)));
  if (!out) throw io_error("failed writing checkpoint: " + path);
}

ModelHandle load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw io_error("not a checkpoint file: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw io_error("truncated checkpoint header: " + path);
  const nlohmann::json header = nlohmann::json::parse(hs);

  const ArchitectureSpec spec = spec_from_json(header.at("spec"));
  ModelHandle model = build_model(spec, /*seed=*/0);

  std::int64_t total = 0;
  for (const auto* p : model->params()) total += p->value.numel();
  for (const auto& [name, buf] : model->buffers()) total += static_cast<std::int64_t>(buf->size());
  if (header.at("tensors").size() != model->params().size() + model->buffers().size())
    throw io_error("checkpoint tensor table does not match architecture: " + path);

  std::vector<double> state(static_cast<std::size_t>(total));
  in.read(reinterpret_cast<char*>(state.data()),
          static_cast<std::streamsize>(state.size() * sizeof(double)));
  if (!in) throw io_error("truncated checkpoint payload: " + path);
  model->load_state(state);

  if (meta) {
    meta->spec = spec;
    meta->epoch = header.at("epoch").get<int>();
    meta->val_auc = header.at("val_auc").get<double>();
  }
  return model;
}

}  // namespace changedet
