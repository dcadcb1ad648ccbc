#pragma once

#include <cmath>
#include <vector>

#include "extendova/errors.hpp"
#include "extendova/numerics/tensor.hpp"

namespace extendova::num {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adaptive-moment optimizer over a fixed list of parameter tensors, each with
/// its own learning rate.
class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : s_(settings) {}

  std::size_t add(Tensor* param, double lr) {
    slots_.push_back(Slot{param, lr, Tensor(param->shape()), Tensor(param->shape())});
    return slots_.size() - 1;
  }

  [[nodiscard]] std::size_t size() const noexcept { return slots_.size(); }

  /// One update; `grads[i]` pairs with the i-th registered parameter. An empty
  /// gradient leaves that parameter untouched.
  void step(const std::vector<Tensor>& grads) {
    if (grads.size() != slots_.size()) throw InvalidArgument("adam: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < slots_.size(); ++k) {
      const Tensor& g = grads[k];
      if (g.empty()) continue;
      Slot& sl = slots_[k];
      if (g.size() != sl.param->size()) throw InvalidArgument("adam: gradient shape mismatch");
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i] + s_.weight_decay * (*sl.param)[i];
        sl.m[i] = s_.beta1 * sl.m[i] + (1.0 - s_.beta1) * gi;
        sl.v[i] = s_.beta2 * sl.v[i] + (1.0 - s_.beta2) * gi * gi;
        const double mh = sl.m[i] / c1;
        const double vh = sl.v[i] / c2;
        (*sl.param)[i] -= sl.lr * mh / (std::sqrt(vh) + s_.eps);
      }
    }
  }

 private:
  struct Slot {
    Tensor* param;
    double lr;
    Tensor m;
    Tensor v;
  };
  AdamSettings s_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace extendova::num
