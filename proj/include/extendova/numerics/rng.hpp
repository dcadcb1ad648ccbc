#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "extendova/errors.hpp"
#include "extendova/numerics/tensor.hpp"

namespace extendova::num {

/// Seeded generator with named, independent sub-streams. Two generators
/// built from the same seed and driven by the same call sequence produce
/// identical output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

  /// Independent stream keyed by `tag`; does not advance this generator.
  [[nodiscard]] Rng split(std::string_view tag) const {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    return Rng(mix(seed_ ^ mix(h)));
  }

  [[nodiscard]] Rng split(std::uint64_t index) const { return Rng(mix(seed_ + mix(index + 0x9e37ULL))); }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw InvalidArgument("rng: empty range");
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  Tensor normal_tensor(std::vector<std::size_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = stddev * normal();
    return t;
  }

  /// First `k` entries of a uniformly random permutation of [0, n).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw InvalidArgument("rng: sample larger than population");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + index(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace extendova::num
