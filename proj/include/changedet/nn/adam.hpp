#pragma once

#include <vector>

#include "changedet/nn/layers.hpp"

namespace changedet::nn {

// Adam with L2 regularization folded into the gradient (the usual
// `weight_decay` behavior of the optimizer this mirrors). Frozen parameters
// are skipped entirely: no state, no update.
class Adam {
 public:
  Adam(std::vector<Param*> params, double lr, double weight_decay = 0.0, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  void step();

  double learning_rate() const { return lr_; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace changedet::nn
