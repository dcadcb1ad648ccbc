#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "extendova/errors.hpp"
#include "extendova/numerics/autodiff.hpp"

namespace extendova::num {

/// Scalar function recorded on a fresh graph; receives the parameter leaf.
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& fn, const Tensor& params, double eps = 1e-5) {
  if (!(eps > 0.0) || eps > 1e-3) throw InvalidArgument("grad_check: eps must lie in (0, 1e-3]");
  Tensor analytic;
  {
    Graph g;
    Var p = g.parameter(params);
    Var loss = fn(g, p);
    if (!std::isfinite(g.scalar(loss))) throw NumericalFailure("grad_check: non-finite loss");
    g.backward(loss);
    analytic = g.grad(p);
  }
  auto eval = [&](const Tensor& at) {
    Graph g;
    Var p = g.constant(at);
    const double v = g.scalar(fn(g, p));
    if (!std::isfinite(v)) throw NumericalFailure("grad_check: non-finite loss");
    return v;
  };
  double worst = 0.0;
  Tensor probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace extendova::num
