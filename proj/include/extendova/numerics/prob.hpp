#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "extendova/errors.hpp"
#include "extendova/numerics/rng.hpp"
#include "extendova/numerics/tensor.hpp"

namespace extendova::num {

/// Lower clamp applied to the second distribution before taking its log.
inline constexpr double kKlFloor = 1e-12;

inline Tensor softmax(const Tensor& logits) {
  if (logits.empty()) throw InvalidArgument("softmax: empty input");
  if (!logits.all_finite()) throw InvalidArgument("softmax: non-finite input");
  Tensor out = logits;
  double m = out[0];
  for (double v : out.data()) m = v > m ? v : m;
  double s = 0.0;
  for (double& v : out.data()) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : out.data()) v /= s;
  return out;
}

/// KL(p || q) = sum p log(p / q), with q clamped to kKlFloor and 0 log 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double qi = q[i] > kKlFloor ? q[i] : kKlFloor;
    s += p[i] * (std::log(p[i]) - std::log(qi));
  }
  return s < 0.0 ? 0.0 : s;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("cosine_similarity: length mismatch");
  const double na = norm(a), nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateInput("cosine_similarity: zero vector");
  const double c = dot(a, b) / (na * nb);
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

/// mean + sqrt(var) * z with z standard normal, diagonal covariance.
inline Tensor gaussian_sample(const Tensor& mean, const Tensor& var, Rng& rng) {
  if (mean.size() != var.size()) throw InvalidArgument("gaussian_sample: length mismatch");
  Tensor out = mean;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (var[i] < 0.0) throw InvalidArgument("gaussian_sample: negative variance");
    const double z = rng.normal();
    if (var[i] > 0.0) out[i] += std::sqrt(var[i]) * z;
  }
  return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace extendova::num
