#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "extendova/errors.hpp"
#include "extendova/numerics/autodiff.hpp"
#include "extendova/numerics/prob.hpp"
#include "extendova/numerics/rng.hpp"
#include "extendova/numerics/tensor.hpp"

namespace extendova::model {

using num::Graph;
using num::Rng;
using num::Tensor;
using num::Var;

enum class Mode { train, infer };

struct EncoderShape {
  std::size_t d_in = 64;
  std::size_t hidden = 64;
  std::size_t d_out = 32;
};

/// d_in -> hidden (ReLU) -> d_out -> batchnorm -> L2 normalization.
struct Encoder {
  Tensor w1, b1, w2;       // backbone
  Tensor gamma, beta;      // terminal batchnorm affine
  Tensor running_mean, running_var;
  double running_norm = 1.0;  // mean row norm of the batchnorm output
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  static Encoder create(const EncoderShape& s, Rng& rng) {
    Encoder e;
    e.w1 = rng.normal_tensor({s.d_in, s.hidden}, std::sqrt(2.0 / static_cast<double>(s.d_in)));
    e.b1 = Tensor({s.hidden});
    e.w2 = rng.normal_tensor({s.hidden, s.d_out}, std::sqrt(2.0 / static_cast<double>(s.hidden)));
    e.gamma = Tensor({s.d_out}, 1.0);
    e.beta = Tensor({s.d_out});
    e.running_mean = Tensor({s.d_out});
    e.running_var = Tensor({s.d_out}, 1.0);
    e.running_norm = std::sqrt(static_cast<double>(s.d_out));
    return e;
  }

  [[nodiscard]] std::size_t d_in() const noexcept { return w1.rows(); }
  [[nodiscard]] std::size_t d_out() const noexcept { return w2.cols(); }

  /// Trainable tensors in a fixed order (backbone first).
  std::vector<Tensor*> parameters() { return {&w1, &b1, &w2, &gamma, &beta}; }
  [[nodiscard]] std::vector<const Tensor*> parameters() const {
    return {&w1, &b1, &w2, &gamma, &beta};
  }
  static constexpr std::size_t kBackboneParams = 3;
};

/// Graph leaves for the encoder parameters.
struct EncoderBinding {
  Var w1, b1, w2, gamma, beta;

  [[nodiscard]] std::vector<Var> vars() const { return {w1, b1, w2, gamma, beta}; }
};

inline EncoderBinding bind(Graph& g, const Encoder& e, bool trainable) {
  auto leaf = [&](const Tensor& t) { return trainable ? g.parameter(t) : g.constant(t); };
  return {leaf(e.w1), leaf(e.b1), leaf(e.w2), leaf(e.gamma), leaf(e.beta)};
}

struct EncoderOutput {
  Var bn;       // batchnorm output, pre-normalization
  Var feature;  // unit-norm feature
};

/// Records the encoder on `g`. In train mode, batch statistics normalize the
/// batch and the running statistics of `enc` are updated.
inline EncoderOutput forward(Graph& g, Encoder& enc, const EncoderBinding& p, Var x, Mode mode) {
  Var h = g.relu(g.add_row(g.matmul(x, p.w1), p.b1));
  Var pre = g.matmul(h, p.w2);
  Var bn;
  if (mode == Mode::train) {
    num::BatchStats stats;
    bn = g.batchnorm(pre, p.gamma, p.beta, enc.bn_eps, &stats);
    const double m = enc.bn_momentum;
    const double rows = static_cast<double>(g.value(pre).rows());
    for (std::size_t j = 0; j < enc.d_out(); ++j) {
      enc.running_mean[j] = (1.0 - m) * enc.running_mean[j] + m * stats.mean[j];
      const double unbiased = stats.var[j] * rows / (rows - 1.0);
      enc.running_var[j] = (1.0 - m) * enc.running_var[j] + m * unbiased;
    }
    const Tensor& out = g.value(bn);
    double mean_norm = 0.0;
    for (std::size_t i = 0; i < out.rows(); ++i) mean_norm += num::norm(out.row(i));
    mean_norm /= rows;
    enc.running_norm = (1.0 - m) * enc.running_norm + m * mean_norm;
  } else {
    bn = g.batchnorm_fixed(pre, p.gamma, p.beta, enc.running_mean, enc.running_var, enc.bn_eps);
  }
  return {bn, g.l2_normalize(bn)};
}

/// Inference-mode features for every row of `x`, without a graph.
inline Tensor embed(const Encoder& enc, const Tensor& x, Tensor* bn_out = nullptr) {
  if (x.cols() != enc.d_in()) throw InvalidArgument("embed: input width mismatch");
  if (!x.all_finite()) throw InvalidArgument("embed: non-finite input");
  Tensor h = num::matmul(x, enc.w1);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto r = h.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double v = r[j] + enc.b1[j];
      r[j] = v > 0.0 ? v : 0.0;
    }
  }
  Tensor f = num::matmul(h, enc.w2);
  for (std::size_t i = 0; i < f.rows(); ++i) {
    auto r = f.row(i);
    for (std::size_t j = 0; j < r.size(); ++j)
      r[j] = enc.gamma[j] * (r[j] - enc.running_mean[j]) / std::sqrt(enc.running_var[j] + enc.bn_eps) +
             enc.beta[j];
  }
  if (bn_out) *bn_out = f;
  return num::normalize_rows(std::move(f));
}

/// Unit-norm features of a batch; train mode updates running statistics.
inline Tensor encode(Encoder& enc, const Tensor& x, Mode mode) {
  if (mode == Mode::infer) return embed(enc, x);
  Graph g;
  const EncoderBinding p = bind(g, enc, false);
  return g.value(forward(g, enc, p, g.constant(x), mode).feature);
}

// ---------------------------------------------------------------------------

enum class Origin { initial, extended };

struct ClassMeta {
  int created_at_step = 1;
  Origin origin = Origin::initial;
  bool active = true;
};

/// Prototype memory bank; one unit-norm row per global class. Rows are never
/// erased, so class indices stay stable after removals.
class MemoryBank {
 public:
  MemoryBank() = default;
  explicit MemoryBank(std::size_t dim) : dim_(dim), w_(Tensor::matrix(0, dim)) {}

  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] std::size_t size() const noexcept { return meta_.size(); }
  [[nodiscard]] std::size_t active_count() const {
    return static_cast<std::size_t>(
        std::count_if(meta_.begin(), meta_.end(), [](const ClassMeta& m) { return m.active; }));
  }
  [[nodiscard]] const Tensor& prototypes() const noexcept { return w_; }
  [[nodiscard]] std::span<const double> prototype(std::size_t k) const { return w_.row(k); }
  [[nodiscard]] const ClassMeta& meta(std::size_t k) const { return meta_.at(k); }
  [[nodiscard]] const std::vector<ClassMeta>& metadata() const noexcept { return meta_; }
  [[nodiscard]] bool active(std::size_t k) const { return k < meta_.size() && meta_[k].active; }

  /// Appends normalized rows of `init` (one per new class); returns the index
  /// of the first new class.
  std::size_t extend(const Tensor& init, int step, Origin origin = Origin::extended) {
    const std::size_t first = size();
    if (init.size() == 0) return first;
    if (init.cols() != dim_) throw InvalidArgument("extend: feature dimension mismatch");
    Tensor rows = num::normalize_rows(init);
    std::vector<double> data = w_.data();
    data.insert(data.end(), rows.data().begin(), rows.data().end());
    w_ = Tensor::matrix(first + rows.rows(), dim_, std::move(data));
    for (std::size_t i = 0; i < rows.rows(); ++i) meta_.push_back({step, origin, true});
    return first;
  }

  /// W_k <- normalize(m W_k + (1 - m) mean).
  void update(std::size_t k, std::span<const double> batch_mean, double momentum) {
    if (!active(k)) throw StateError("update_prototype: class is not active");
    if (momentum < 0.0 || momentum > 1.0) throw InvalidArgument("update_prototype: momentum outside [0, 1]");
    if (batch_mean.size() != dim_) throw InvalidArgument("update_prototype: dimension mismatch");
    if (momentum == 1.0) return;
    auto r = w_.row(k);
    for (std::size_t j = 0; j < dim_; ++j) r[j] = momentum * r[j] + (1.0 - momentum) * batch_mean[j];
    const double n = num::norm(r);
    if (!(n > 0.0)) throw DegenerateInput("update_prototype: zero-norm result");
    for (double& v : r) v /= n;
  }

  /// Deactivates classes created at `step` by extension. Anything else is an
  /// invariant violation.
  void remove(std::span<const std::size_t> ids, int step) {
    for (std::size_t k : ids) {
      if (k >= size()) throw InvariantViolation("remove_prototypes: unknown class");
      const ClassMeta& m = meta_[k];
      if (m.origin != Origin::extended || m.created_at_step != step)
        throw InvariantViolation("remove_prototypes: only same-step extended classes can be removed");
      if (!m.active) throw InvariantViolation("remove_prototypes: class already removed");
    }
    for (std::size_t k : ids) meta_[k].active = false;
  }

  /// Best active class in [begin, end) by dot product; ties to the lowest index.
  [[nodiscard]] std::pair<std::size_t, double> nearest(std::span<const double> f,
                                                       std::size_t begin, std::size_t end) const {
    end = std::min(end, size());
    std::optional<std::size_t> best;
    double best_score = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
      if (!meta_[k].active) continue;
      const double s = num::dot(w_.row(k), f);
      if (!best || s > best_score) {
        best = k;
        best_score = s;
      }
    }
    if (!best) throw StateError("nearest_prototype: no active class in range");
    return {*best, best_score};
  }

  [[nodiscard]] std::pair<std::size_t, double> nearest(std::span<const double> f) const {
    return nearest(f, 0, size());
  }

  /// Active class ids in [begin, end).
  [[nodiscard]] std::vector<std::size_t> active_ids(std::size_t begin = 0,
                                                    std::size_t end = SIZE_MAX) const {
    std::vector<std::size_t> out;
    for (std::size_t k = begin; k < std::min(end, size()); ++k)
      if (meta_[k].active) out.push_back(k);
    return out;
  }

  /// Restores a bank from serialized parts.
  static MemoryBank from_parts(Tensor w, std::vector<ClassMeta> meta) {
    if (w.rows() != meta.size()) throw InvalidArgument("memory bank: metadata count mismatch");
    MemoryBank b(w.cols());
    b.w_ = std::move(w);
    b.meta_ = std::move(meta);
    return b;
  }

 private:
  std::size_t dim_ = 0;
  Tensor w_;
  std::vector<ClassMeta> meta_;
};

// ---------------------------------------------------------------------------

/// Bank of per-class two-logit heads; p(y^c | f) is the positive entry of the
/// two-way softmax of head c.
class OvaDetector {
 public:
  OvaDetector() = default;
  explicit OvaDetector(std::size_t dim) : dim_(dim) {
    weights_ = Tensor::matrix(dim, 0);
    bias_ = Tensor({0});
  }

  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] std::size_t size() const noexcept { return trained_.size(); }
  [[nodiscard]] bool trained(std::size_t k) const { return k < size() && trained_[k]; }
  [[nodiscard]] bool frozen(std::size_t k) const { return k < size() && frozen_[k]; }
  Tensor& weights() noexcept { return weights_; }  // dim x 2C, column 2c positive, 2c+1 negative
  Tensor& bias() noexcept { return bias_; }
  [[nodiscard]] const Tensor& weights() const noexcept { return weights_; }
  [[nodiscard]] const Tensor& bias() const noexcept { return bias_; }

  /// Grows the detector to `count` heads with small random weights.
  void resize(std::size_t count, Rng& rng) {
    const std::size_t old = size();
    if (count <= old) return;
    Tensor w = Tensor::matrix(dim_, 2 * count);
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < 2 * count; ++j)
        w.at(i, j) = j < 2 * old ? weights_.at(i, j) : 0.01 * rng.normal();
    Tensor b({2 * count});
    for (std::size_t j = 0; j < 2 * old; ++j) b[j] = bias_[j];
    weights_ = std::move(w);
    bias_ = std::move(b);
    trained_.resize(count, false);
    frozen_.resize(count, false);
  }

  void mark_trained(std::size_t k) { trained_.at(k) = true; }
  void freeze(std::size_t k) { frozen_.at(k) = true; }
  void freeze_all_trained() {
    for (std::size_t k = 0; k < size(); ++k)
      if (trained_[k]) frozen_[k] = true;
  }

  [[nodiscard]] std::pair<double, double> logits(std::span<const double> f, std::size_t k) const {
    double pos = bias_[2 * k], neg = bias_[2 * k + 1];
    for (std::size_t i = 0; i < dim_; ++i) {
      pos += f[i] * weights_.at(i, 2 * k);
      neg += f[i] * weights_.at(i, 2 * k + 1);
    }
    return {pos, neg};
  }

  /// p(y^k | f); requires head k to be trained.
  [[nodiscard]] double score(std::span<const double> f, std::size_t k) const {
    if (!trained(k)) throw StateError("ova_score: head is not trained");
    const auto [pos, neg] = logits(f, k);
    return 1.0 / (1.0 + std::exp(neg - pos));
  }

  static OvaDetector from_parts(Tensor w, Tensor b, std::vector<bool> trained, std::vector<bool> frozen) {
    OvaDetector d(w.rows());
    if (w.cols() != 2 * trained.size() || b.size() != w.cols() || frozen.size() != trained.size())
      throw InvalidArgument("ova detector: inconsistent parts");
    d.weights_ = std::move(w);
    d.bias_ = std::move(b);
    d.trained_ = std::move(trained);
    d.frozen_ = std::move(frozen);
    return d;
  }

  [[nodiscard]] const std::vector<bool>& trained_flags() const noexcept { return trained_; }
  [[nodiscard]] const std::vector<bool>& frozen_flags() const noexcept { return frozen_; }

 private:
  std::size_t dim_ = 0;
  Tensor weights_;
  Tensor bias_;
  std::vector<bool> trained_;
  std::vector<bool> frozen_;
};

/// Parametric classifier of the threshold baseline: logits = f * phi.
struct BaselineClassifier {
  Tensor phi;  // d x N

  [[nodiscard]] std::size_t classes() const noexcept { return phi.cols(); }

  /// Appends one column per row of `init`.
  void extend(const Tensor& init) {
    if (init.size() == 0) return;
    const std::size_t d = phi.rows() ? phi.rows() : init.cols();
    if (init.cols() != d) throw InvalidArgument("classifier extend: dimension mismatch");
    const std::size_t n_old = phi.rows() ? phi.cols() : 0;
    Tensor next = Tensor::matrix(d, n_old + init.rows());
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < n_old; ++j) next.at(i, j) = phi.at(i, j);
      for (std::size_t j = 0; j < init.rows(); ++j) next.at(i, n_old + j) = init.at(j, i);
    }
    phi = std::move(next);
  }
};

/// Online (gradient-trained) encoder and its exponentially smoothed copy.
struct ModelPair {
  Encoder online;
  Encoder ema;
};

/// ema <- alpha * ema + (1 - alpha) * online for every trainable tensor;
/// normalization statistics are copied.
inline void ema_update(ModelPair& pair, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw InvalidArgument("ema_update: alpha outside [0, 1]");
  auto on = pair.online.parameters();
  auto em = pair.ema.parameters();
  for (std::size_t k = 0; k < on.size(); ++k) {
    if (!on[k]->same_shape(*em[k])) throw InvariantViolation("ema_update: shape mismatch");
    for (std::size_t i = 0; i < on[k]->size(); ++i)
      (*em[k])[i] = alpha * (*em[k])[i] + (1.0 - alpha) * (*on[k])[i];
  }
  pair.ema.running_mean = pair.online.running_mean;
  pair.ema.running_var = pair.online.running_var;
  pair.ema.running_norm = pair.online.running_norm;
}

}  // namespace extendova::model
