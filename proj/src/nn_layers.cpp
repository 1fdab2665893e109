#include "changedet/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace changedet::nn {

namespace {

void he_normal_init(Tensor& t, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
}

// Slightly positive so narrow ReLU layers cannot start fully dead.
constexpr double kBiasInit = 0.01;

}  // namespace

// ---- Conv3d -----------------------------------------------------------------

Conv3d::Conv3d(std::string name, int in_channels, int out_channels, int kernel, int stride,
               int padding, int groups, bool bias, Rng& init_rng)
    : has_bias(bias),
      in_c(in_channels),
      out_c(out_channels),
      k(kernel),
      stride(stride),
      pad(padding),
      groups(groups) {
  if (in_c % groups != 0 || out_c % groups != 0)
    throw validation_error("conv '" + name + "': channels not divisible by groups");
  const int icg = in_c / groups;
  weight.name = name + ".weight";
  weight.value = Tensor({out_c, icg, k, k, k});
  weight.grad = Tensor({out_c, icg, k, k, k});
  he_normal_init(weight.value, static_cast<std::int64_t>(icg) * k * k * k, init_rng);
  if (has_bias) {
    bias_param.name = name + ".bias";
    bias_param.value = Tensor({out_c});
    bias_param.value.fill(kBiasInit);
    bias_param.grad = Tensor({out_c});
  }
}

void Conv3d::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias_param);
}

Tensor Conv3d::forward(const Tensor& x, bool) {
  if (x.shape.size() != 5 || x.shape[1] != in_c)
    throw validation_error("conv input must be [N," + std::to_string(in_c) + ",Z,Y,X]");
  input_ = x;
  const std::int64_t N = x.shape[0], Z = x.shape[2], Y = x.shape[3], X = x.shape[4];
  const std::int64_t OZ = out_size(Z, k, stride, pad);
  const std::int64_t OY = out_size(Y, k, stride, pad);
  const std::int64_t OX = out_size(X, k, stride, pad);
  if (OZ < 1 || OY < 1 || OX < 1)
    throw validation_error("conv input too small for kernel " + std::to_string(k));

  Tensor y({N, out_c, OZ, OY, OX});
  const int icg = in_c / groups;
  const int ocg = out_c / groups;
  const double* w = weight.value.data.data();
  const double* in = x.data.data();
  double* out = y.data.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t oc = 0; oc < out_c; ++oc) {
      const std::int64_t g = oc / ocg;
      const double b = has_bias ? bias_param.value.data[static_cast<std::size_t>(oc)] : 0.0;
      for (std::int64_t oz = 0; oz < OZ; ++oz) {
        for (std::int64_t oy = 0; oy < OY; ++oy) {
          for (std::int64_t ox = 0; ox < OX; ++ox) {
            double acc = b;
            for (std::int64_t ci = 0; ci < icg; ++ci) {
              const std::int64_t ic = g * icg + ci;
              const double* wbase =
                  w + ((oc * icg + ci) * static_cast<std::int64_t>(k)) * k * k;
              const double* ibase = in + ((n * in_c + ic) * Z) * Y * X;
              for (int kz = 0; kz < k; ++kz) {
                const std::int64_t iz = oz * stride - pad + kz;
                if (iz < 0 || iz >= Z) continue;
                for (int ky = 0; ky < k; ++ky) {
                  const std::int64_t iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= Y) continue;
                  const double* irow = ibase + (iz * Y + iy) * X;
                  const double* wrow = wbase + (kz * k + ky) * k;
                  for (int kx = 0; kx < k; ++kx) {
                    const std::int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= X) continue;
                    acc += wrow[kx] * irow[ix];
                  }
                }
              }
            }
            out[(((n * out_c + oc) * OZ + oz) * OY + oy) * OX + ox] = acc;
          }
        }
      }
    }
  }
  return y;
}

Tensor Conv3d::backward(const Tensor& gy) {
  const std::int64_t N = input_.shape[0], Z = input_.shape[2], Y = input_.shape[3],
                     X = input_.shape[4];
  const std::int64_t OZ = gy.shape[2], OY = gy.shape[3], OX = gy.shape[4];
  const int icg = in_c / groups;
  const int ocg = out_c / groups;
  const double* in = input_.data.data();
  const double* g = gy.data.data();
  const double* w = weight.value.data.data();

  // Weight/bias gradients: each oc owns a disjoint slice, so the parallel
  // loop is race-free and the accumulation order per element is fixed.
#pragma omp parallel for schedule(static)
  for (std::int64_t oc = 0; oc < out_c; ++oc) {
    const std::int64_t grp = oc / ocg;
    double bias_acc = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t oz = 0; oz < OZ; ++oz) {
        for (std::int64_t oy = 0; oy < OY; ++oy) {
          for (std::int64_t ox = 0; ox < OX; ++ox) {
            const double gv = g[(((n * out_c + oc) * OZ + oz) * OY + oy) * OX + ox];
            if (gv == 0.0) continue;
            bias_acc += gv;
            for (std::int64_t ci = 0; ci < icg; ++ci) {
              const std::int64_t ic = grp * icg + ci;
              double* wg = weight.grad.data.data() +
                           ((oc * icg + ci) * static_cast<std::int64_t>(k)) * k * k;
              const double* ibase = in + ((n * in_c + ic) * Z) * Y * X;
              for (int kz = 0; kz < k; ++kz) {
                const std::int64_t iz = oz * stride - pad + kz;
                if (iz < 0 || iz >= Z) continue;
                for (int ky = 0; ky < k; ++ky) {
                  const std::int64_t iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= Y) continue;
                  const double* irow = ibase + (iz * Y + iy) * X;
                  double* wrow = wg + (kz * k + ky) * k;
                  for (int kx = 0; kx < k; ++kx) {
                    const std::int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= X) continue;
                    wrow[kx] += gv * irow[ix];
                  }
                }
              }
            }
          }
        }
      }
    }
    if (has_bias) bias_param.grad.data[static_cast<std::size_t>(oc)] += bias_acc;
  }

  Tensor gx(input_.shape);
  double* gxd = gx.data.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t oc = 0; oc < out_c; ++oc) {
      const std::int64_t grp = oc / ocg;
      for (std::int64_t oz = 0; oz < OZ; ++oz) {
        for (std::int64_t oy = 0; oy < OY; ++oy) {
          for (std::int64_t ox = 0; ox < OX; ++ox) {
            const double gv = g[(((n * out_c + oc) * OZ + oz) * OY + oy) * OX + ox];
            if (gv == 0.0) continue;
            for (std::int64_t ci = 0; ci < icg; ++ci) {
              const std::int64_t ic = grp * icg + ci;
              const double* wbase =
                  w + ((oc * icg + ci) * static_cast<std::int64_t>(k)) * k * k;
              double* gbase = gxd + ((n * in_c + ic) * Z) * Y * X;
              for (int kz = 0; kz < k; ++kz) {
                const std::int64_t iz = oz * stride - pad + kz;
                if (iz < 0 || iz >= Z) continue;
                for (int ky = 0; ky < k; ++ky) {
                  const std::int64_t iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= Y) continue;
                  double* grow = gbase + (iz * Y + iy) * X;
                  const double* wrow = wbase + (kz * k + ky) * k;
                  for (int kx = 0; kx < k; ++kx) {
                    const std::int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= X) continue;
                    grow[ix] += gv * wrow[kx];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return gx;
}

// ---- BatchNorm3d ------------------------------------------------------------

BatchNorm3d::BatchNorm3d(std::string name, int channels, double momentum, double eps)
    : running_mean(static_cast<std::size_t>(channels), 0.0),
      running_var(static_cast<std::size_t>(channels), 1.0),
      momentum(momentum),
      eps(eps),
      channels(channels) {
  gamma.name = name + ".gamma";
  gamma.value = Tensor({channels});
  gamma.value.fill(1.0);
  gamma.grad = Tensor({channels});
  beta.name = name + ".beta";
  beta.value = Tensor({channels});
  beta.grad = Tensor({channels});
}

void BatchNorm3d::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor BatchNorm3d::forward(const Tensor& x, bool train) {
  if (x.shape.size() != 5 || x.shape[1] != channels)
    throw validation_error("batchnorm input must be [N," + std::to_string(channels) + ",Z,Y,X]");
  in_shape_ = x.shape;
  last_forward_train_ = train;
  const std::int64_t N = x.shape[0];
  const std::int64_t spatial = x.shape[2] * x.shape[3] * x.shape[4];
  per_channel_ = N * spatial;

  Tensor y(x.shape);
  xhat_ = Tensor(x.shape);
  inv_std_.assign(static_cast<std::size_t>(channels), 0.0);

  for (std::int64_t c = 0; c < channels; ++c) {
    double mean, var;
    if (train) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const double* base = x.data.data() + (n * channels + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) sum += base[i];
      }
      mean = sum / static_cast<double>(per_channel_);
      double ss = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const double* base = x.data.data() + (n * channels + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double d = base[i] - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(per_channel_);  // biased, used for normalization
      const double unbiased =
          per_channel_ > 1 ? ss / static_cast<double>(per_channel_ - 1) : var;
      running_mean[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_mean[static_cast<std::size_t>(c)] + momentum * mean;
      running_var[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_var[static_cast<std::size_t>(c)] + momentum * unbiased;
    } else {
      mean = running_mean[static_cast<std::size_t>(c)];
      var = running_var[static_cast<std::size_t>(c)];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std_[static_cast<std::size_t>(c)] = istd;
    const double gc = gamma.value.data[static_cast<std::size_t>(c)];
    const double bc = beta.value.data[static_cast<std::size_t>(c)];
    for (std::int64_t n = 0; n < N; ++n) {
      const double* base = x.data.data() + (n * channels + c) * spatial;
      double* xh = xhat_.data.data() + (n * channels + c) * spatial;
      double* yb = y.data.data() + (n * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        xh[i] = (base[i] - mean) * istd;
        yb[i] = gc * xh[i] + bc;
      }
    }
  }
  return y;
}

Tensor BatchNorm3d::backward(const Tensor& gy) {
  const std::int64_t N = in_shape_[0];
  const std::int64_t spatial = in_shape_[2] * in_shape_[3] * in_shape_[4];
  const double m = static_cast<double>(per_channel_);
  Tensor gx(in_shape_);

  for (std::int64_t c = 0; c < channels; ++c) {
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const double* gyb = gy.data.data() + (n * channels + c) * spatial;
      const double* xh = xhat_.data.data() + (n * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        sum_gy += gyb[i];
        sum_gy_xhat += gyb[i] * xh[i];
      }
    }
    gamma.grad.data[static_cast<std::size_t>(c)] += sum_gy_xhat;
    beta.grad.data[static_cast<std::size_t>(c)] += sum_gy;

    const double gc = gamma.value.data[static_cast<std::size_t>(c)];
    const double istd = inv_std_[static_cast<std::size_t>(c)];
    for (std::int64_t n = 0; n < N; ++n) {
      const double* gyb = gy.data.data() + (n * channels + c) * spatial;
      const double* xh = xhat_.data.data() + (n * channels + c) * spatial;
      double* gxb = gx.data.data() + (n * channels + c) * spatial;
      if (last_forward_train_) {
        for (std::int64_t i = 0; i < spatial; ++i)
          gxb[i] = gc * istd * (gyb[i] - sum_gy / m - xh[i] * sum_gy_xhat / m);
      } else {
        // Running statistics are constants in eval mode.
        for (std::int64_t i = 0; i < spatial; ++i) gxb[i] = gc * istd * gyb[i];
      }
    }
  }
  return gx;
}

// ---- ReLU -------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool) {
  in_shape_ = x.shape;
  mask_.assign(x.data.size(), false);
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    if (x.data[i] > 0.0) {
      y.data[i] = x.data[i];
      mask_[i] = true;
    }
  }
  return y;
}

Tensor ReLU::backward(const Tensor& gy) {
  Tensor gx(in_shape_);
  for (std::size_t i = 0; i < gy.data.size(); ++i)
    if (mask_[i]) gx.data[i] = gy.data[i];
  return gx;
}

// ---- MaxPool3d ---------------------------------------------------------------

Tensor MaxPool3d::forward(const Tensor& x, bool) {
  in_shape_ = x.shape;
  const std::int64_t N = x.shape[0], C = x.shape[1], Z = x.shape[2], Y = x.shape[3],
                     X = x.shape[4];
  const std::int64_t OZ = Conv3d::out_size(Z, k, stride, pad);
  const std::int64_t OY = Conv3d::out_size(Y, k, stride, pad);
  const std::int64_t OX = Conv3d::out_size(X, k, stride, pad);
  if (OZ < 1 || OY < 1 || OX < 1)
    throw validation_error("maxpool input too small for kernel " + std::to_string(k));
  Tensor y({N, C, OZ, OY, OX});
  argmax_.assign(y.data.size(), -1);

  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* base = x.data.data() + (n * C + c) * Z * Y * X;
      for (std::int64_t oz = 0; oz < OZ; ++oz) {
        for (std::int64_t oy = 0; oy < OY; ++oy) {
          for (std::int64_t ox = 0; ox < OX; ++ox) {
            double best = -std::numeric_limits<double>::infinity();
            std::int64_t best_idx = -1;
            for (int kz = 0; kz < k; ++kz) {
              const std::int64_t iz = oz * stride - pad + kz;
              if (iz < 0 || iz >= Z) continue;
              for (int ky = 0; ky < k; ++ky) {
                const std::int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= Y) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const std::int64_t ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= X) continue;
                  const std::int64_t idx = (iz * Y + iy) * X + ix;
                  if (base[idx] > best) {
                    best = base[idx];
                    best_idx = idx;
                  }
                }
              }
            }
            const std::int64_t out_idx = (((n * C + c) * OZ + oz) * OY + oy) * OX + ox;
            y.data[static_cast<std::size_t>(out_idx)] = best;
            argmax_[static_cast<std::size_t>(out_idx)] = (n * C + c) * Z * Y * X + best_idx;
          }
        }
      }
    }
  }
  return y;
}

Tensor MaxPool3d::backward(const Tensor& gy) {
  Tensor gx(in_shape_);
  for (std::size_t i = 0; i < gy.data.size(); ++i)
    gx.data[static_cast<std::size_t>(argmax_[i])] += gy.data[i];
  return gx;
}

// ---- GlobalAvgPool3d ----------------------------------------------------------

Tensor GlobalAvgPool3d::forward(const Tensor& x, bool) {
  in_shape_ = x.shape;
  const std::int64_t N = x.shape[0], C = x.shape[1];
  const std::int64_t spatial = x.shape[2] * x.shape[3] * x.shape[4];
  Tensor y({N, C});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* base = x.data.data() + (n * C + c) * spatial;
      double sum = 0.0;
      for (std::int64_t i = 0; i < spatial; ++i) sum += base[i];
      y.data[static_cast<std::size_t>(n * C + c)] = sum / static_cast<double>(spatial);
    }
  }
  return y;
}

Tensor GlobalAvgPool3d::backward(const Tensor& gy) {
  Tensor gx(in_shape_);
  const std::int64_t N = in_shape_[0], C = in_shape_[1];
  const std::int64_t spatial = in_shape_[2] * in_shape_[3] * in_shape_[4];
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double g = gy.data[static_cast<std::size_t>(n * C + c)] / static_cast<double>(spatial);
      double* base = gx.data.data() + (n * C + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) base[i] = g;
    }
  }
  return gx;
}

// ---- Flatten ------------------------------------------------------------------

Tensor Flatten::forward(const Tensor& x, bool) {
  in_shape_ = x.shape;
  Tensor y = x;
  std::int64_t rest = 1;
  for (std::size_t i = 1; i < x.shape.size(); ++i) rest *= x.shape[i];
  y.shape = {x.shape[0], rest};
  return y;
}

Tensor Flatten::backward(const Tensor& gy) {
  Tensor gx = gy;
  gx.shape = in_shape_;
  return gx;
}

// ---- Linear -------------------------------------------------------------------

Linear::Linear(std::string name, int in_features, int out_features, Rng& init_rng)
    : in_f(in_features), out_f(out_features) {
  weight.name = name + ".weight";
  weight.value = Tensor({out_f, in_f});
  weight.grad = Tensor({out_f, in_f});
  he_normal_init(weight.value, in_f, init_rng);
  bias.name = name + ".bias";
  bias.value = Tensor({out_f});
  bias.value.fill(kBiasInit);
  bias.grad = Tensor({out_f});
}

void Linear::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Tensor Linear::forward(const Tensor& x, bool) {
  if (x.shape.size() != 2 || x.shape[1] != in_f)
    throw validation_error("linear input must be [N," + std::to_string(in_f) + "]");
  input_ = x;
  const std::int64_t N = x.shape[0];
  Tensor y({N, out_f});
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < N; ++n) {
    const double* xb = x.data.data() + n * in_f;
    for (std::int64_t o = 0; o < out_f; ++o) {
      const double* wb = weight.value.data.data() + o * in_f;
      double acc = bias.value.data[static_cast<std::size_t>(o)];
      for (std::int64_t i = 0; i < in_f; ++i) acc += wb[i] * xb[i];
      y.data[static_cast<std::size_t>(n * out_f + o)] = acc;
    }
  }
  return y;
}

Tensor Linear::backward(const Tensor& gy) {
  const std::int64_t N = input_.shape[0];
  for (std::int64_t o = 0; o < out_f; ++o) {
    double* wg = weight.grad.data.data() + o * in_f;
    double bacc = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const double g = gy.data[static_cast<std::size_t>(n * out_f + o)];
      if (g == 0.0) continue;
      bacc += g;
      const double* xb = input_.data.data() + n * in_f;
      for (std::int64_t i = 0; i < in_f; ++i) wg[i] += g * xb[i];
    }
    bias.grad.data[static_cast<std::size_t>(o)] += bacc;
  }
  Tensor gx({N, in_f});
  for (std::int64_t n = 0; n < N; ++n) {
    double* gxb = gx.data.data() + n * in_f;
    for (std::int64_t o = 0; o < out_f; ++o) {
      const double g = gy.data[static_cast<std::size_t>(n * out_f + o)];
      if (g == 0.0) continue;
      const double* wb = weight.value.data.data() + o * in_f;
      for (std::int64_t i = 0; i < in_f; ++i) gxb[i] += g * wb[i];
    }
  }
  return gx;
}

// ---- Dropout ------------------------------------------------------------------

Tensor Dropout::forward(const Tensor& x, bool train) {
  if (!train || rate_ <= 0.0) {
    scale_.clear();
    return x;
  }
  const double keep = 1.0 - rate_;
  scale_.assign(x.data.size(), 0.0);
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    if (rng_.bernoulli(keep)) {
      scale_[i] = 1.0 / keep;
      y.data[i] = x.data[i] * scale_[i];
    }
  }
  return y;
}

Tensor Dropout::backward(const Tensor& gy) {
  if (scale_.empty()) return gy;
  Tensor gx(gy.shape);
  for (std::size_t i = 0; i < gy.data.size(); ++i) gx.data[i] = gy.data[i] * scale_[i];
  return gx;
}

// ---- Sigmoid ------------------------------------------------------------------

Tensor Sigmoid::forward(const Tensor& x, bool) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = sigmoid(x.data[i]);
  output_ = y;
  return y;
}

Tensor Sigmoid::backward(const Tensor& gy) {
  Tensor gx(gy.shape);
  for (std::size_t i = 0; i < gy.data.size(); ++i) {
    const double s = output_.data[i];
    gx.data[i] = gy.data[i] * s * (1.0 - s);
  }
  return gx;
}

// ---- Sequential ----------------------------------------------------------------

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (auto& layer : layers_) h = layer->forward(h, train);
  return h;
}

Tensor Sequential::backward(const Tensor& gy) {
  Tensor g = gy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_params(std::vector<Param*>& out) {
  for (auto& layer : layers_) layer->collect_params(out);
}

// ---- loss ----------------------------------------------------------------------

double bce_with_logits(const Tensor& logits, const std::vector<double>& targets, Tensor& grad) {
  if (logits.data.size() != targets.size())
    throw validation_error("loss: logit/target count mismatch");
  if (logits.data.empty()) throw validation_error("loss: empty batch");
  const double n = static_cast<double>(targets.size());
  grad = Tensor(logits.shape);
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = logits.data[i];
    const double y = targets[i];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    grad.data[i] = (sigmoid(z) - y) / n;
  }
  return loss / n;
}

}  // namespace changedet::nn
