#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "changedet/errors.hpp"

namespace changedet::nn {

// Dense row-major tensor of doubles. Training runs entirely in double so
// analytic gradients can be checked against central differences tightly.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (const auto d : s) {
      if (d < 0) throw validation_error("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape[i]; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  void require_shape(const std::vector<std::int64_t>& expected, const std::string& what) const {
    if (shape != expected) {
      auto fmt = [](const std::vector<std::int64_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i)
          out += (i ? "," : "") + std::to_string(s[i]);
        return out + "]";
      };
      throw validation_error(what + ": expected shape " + fmt(expected) + ", got " + fmt(shape));
    }
  }
};

}  // namespace changedet::nn
