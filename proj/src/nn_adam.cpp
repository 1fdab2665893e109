#include "changedet/nn/adam.hpp"

#include <cmath>

namespace changedet::nn {

Adam::Adam(std::vector<Param*> params, double lr, double weight_decay, double beta1, double beta2,
           double eps)
    : params_(std::move(params)),
      lr_(lr),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i]->value.data.size(), 0.0);
    v_[i].assign(params_[i]->value.data.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->grad.fill(0.0);
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    if (!p.trainable) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.value.data.size(); ++j) {
      double g = p.grad.data[j];
      if (weight_decay_ != 0.0) g += weight_decay_ * p.value.data[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace changedet::nn
