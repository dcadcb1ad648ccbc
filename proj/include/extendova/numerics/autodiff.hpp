#pragma once

// Tape-based reverse-mode differentiation over a closed set of row-wise
// matrix operations. Nodes are recorded in creation order, which is a valid
// topological order, so backward() is a single reverse sweep.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "extendova/errors.hpp"
#include "extendova/numerics/tensor.hpp"

namespace extendova::num {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  [[nodiscard]] bool valid() const noexcept {
    return id != std::numeric_limits<std::size_t>::max();
  }
};

/// Per-feature statistics of the batch seen by a training-mode batchnorm.
struct BatchStats {
  Tensor mean;
  Tensor var;  // biased
};

class Graph {
 public:
  Graph() { nodes_.reserve(64); }

  Var constant(Tensor t) { return push(std::move(t), false, {}); }
  Var parameter(Tensor t) { return push(std::move(t), true, {}); }

  [[nodiscard]] const Tensor& value(Var v) const { return node(v).value; }
  [[nodiscard]] double scalar(Var v) const {
    const Tensor& t = node(v).value;
    if (t.size() != 1) throw InvalidArgument("graph: value is not a scalar");
    return t[0];
  }
  [[nodiscard]] bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Adjoint of `v` after backward(); zeros if `v` was not reached.
  [[nodiscard]] Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  void backward(Var loss) {
    Node& root = node(loss);
    if (root.value.size() != 1) throw InvalidArgument("backward: loss must be scalar");
    if (!std::isfinite(root.value[0])) throw NumericalFailure("backward: non-finite loss");
    for (Node& n : nodes_) n.grad = Tensor();
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.back) continue;
      n.back(i);
    }
  }

  // ---- linear algebra -----------------------------------------------------

  Var matmul(Var a, Var b) {
    Tensor out = num::matmul(value(a), value(b));
    return push(std::move(out), any_grad({a, b}), [this, a, b](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      if (requires_grad(a)) accumulate(a, num::matmul_nt(g, value(b)));
      if (requires_grad(b)) accumulate(b, num::matmul_tn(value(a), g));
    });
  }

  /// a * b^T; avoids materializing the transpose for prototype logits.
  Var matmul_nt(Var a, Var b) {
    Tensor out = num::matmul_nt(value(a), value(b));
    return push(std::move(out), any_grad({a, b}), [this, a, b](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      if (requires_grad(a)) accumulate(a, num::matmul(g, value(b)));
      if (requires_grad(b)) accumulate(b, num::matmul_tn(g, value(a)));
    });
  }

  Var transpose(Var a) {
    return push(num::transpose(value(a)), any_grad({a}), [this, a](std::size_t self) {
      accumulate(a, num::transpose(nodes_[self].grad));
    });
  }

  Var reshape(Var a, std::vector<std::size_t> shape) {
    Tensor out = value(a).reshaped(std::move(shape));
    return push(std::move(out), any_grad({a}), [this, a](std::size_t self) {
      accumulate(a, nodes_[self].grad.reshaped(value(a).shape()));
    });
  }

  // ---- elementwise ----------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(std::move(out), any_grad({a, b}), [this, a, b](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      if (requires_grad(a)) accumulate(a, g);
      if (requires_grad(b)) accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(std::move(out), any_grad({a, b}), [this, a, b](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      if (requires_grad(a)) accumulate(a, g);
      if (requires_grad(b)) {
        Tensor neg = g;
        for (double& v : neg.data()) v = -v;
        accumulate(b, neg);
      }
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(std::move(out), any_grad({a, b}), [this, a, b](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      if (requires_grad(a)) {
        Tensor d = g;
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= vb[i];
        accumulate(a, d);
      }
      if (requires_grad(b)) {
        Tensor d = g;
        const Tensor& va = value(a);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= va[i];
        accumulate(b, d);
      }
    });
  }

  /// Broadcasts the vector `row` over every row of `a`.
  Var add_row(Var a, Var row) {
    const Tensor& va = value(a);
    const Tensor& vr = value(row);
    if (vr.size() != va.cols()) throw InvalidArgument("add_row: width mismatch");
    Tensor out = va;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += vr[j];
    }
    return push(std::move(out), any_grad({a, row}), [this, a, row](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      if (requires_grad(a)) accumulate(a, g);
      if (requires_grad(row)) {
        Tensor d(value(row).shape());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          auto gr = g.row(i);
          for (std::size_t j = 0; j < gr.size(); ++j) d[j] += gr[j];
        }
        accumulate(row, d);
      }
    });
  }

  Var scale(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data()) v *= s;
    return push(std::move(out), any_grad({a}), [this, a, s](std::size_t self) {
      Tensor d = nodes_[self].grad;
      for (double& v : d.data()) v *= s;
      accumulate(a, d);
    });
  }

  Var add_scalar(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data()) v += s;
    return push(std::move(out), any_grad({a}),
                [this, a](std::size_t self) { accumulate(a, nodes_[self].grad); });
  }

  Var relu(Var a) {
    Tensor out = value(a);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), any_grad({a}), [this, a](std::size_t self) {
      Tensor d = nodes_[self].grad;
      const Tensor& va = value(a);
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!(va[i] > 0.0)) d[i] = 0.0;
      accumulate(a, d);
    });
  }

  Var sqrt(Var a) {
    Tensor out = value(a);
    for (double& v : out.data()) {
      if (v < 0.0) throw NumericalFailure("sqrt: negative input");
      v = std::sqrt(v);
    }
    return push(std::move(out), any_grad({a}), [this, a](std::size_t self) {
      Tensor d = nodes_[self].grad;
      const Tensor& y = nodes_[self].value;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = y[i] > 0.0 ? d[i] / (2.0 * y[i]) : 0.0;
      accumulate(a, d);
    });
  }

  /// log(max(x, floor)); the derivative is zero wherever the floor is active.
  Var log(Var a, double floor = 0.0) {
    Tensor out = value(a);
    for (double& v : out.data()) {
      const double x = v > floor ? v : floor;
      if (!(x > 0.0)) throw NumericalFailure("log: non-positive input");
      v = std::log(x);
    }
    return push(std::move(out), any_grad({a}), [this, a, floor](std::size_t self) {
      Tensor d = nodes_[self].grad;
      const Tensor& va = value(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = va[i] > floor ? d[i] / va[i] : 0.0;
      accumulate(a, d);
    });
  }

  // ---- row-wise -------------------------------------------------------------

  Var softmax(Var a) {
    Tensor out = value(a);
    if (out.cols() == 0) throw InvalidArgument("softmax: empty input");
    for (std::size_t i = 0; i < out.rows(); ++i) softmax_row(out.row(i));
    return push(std::move(out), any_grad({a}), [this, a](std::size_t self) {
      const Tensor& y = nodes_[self].value;
      Tensor d = nodes_[self].grad;
      for (std::size_t i = 0; i < d.rows(); ++i) {
        auto dr = d.row(i);
        auto yr = y.row(i);
        const double s = dot(dr, yr);
        for (std::size_t j = 0; j < dr.size(); ++j) dr[j] = yr[j] * (dr[j] - s);
      }
      accumulate(a, d);
    });
  }

  Var log_softmax(Var a) {
    Tensor out = value(a);
    if (out.cols() == 0) throw InvalidArgument("log_softmax: empty input");
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      double m = r[0];
      for (double v : r) m = v > m ? v : m;
      double s = 0.0;
      for (double v : r) s += std::exp(v - m);
      const double lse = m + std::log(s);
      for (double& v : r) v -= lse;
    }
    return push(std::move(out), any_grad({a}), [this, a](std::size_t self) {
      const Tensor& y = nodes_[self].value;
      Tensor d = nodes_[self].grad;
      for (std::size_t i = 0; i < d.rows(); ++i) {
        auto dr = d.row(i);
        auto yr = y.row(i);
        double s = 0.0;
        for (double v : dr) s += v;
        for (std::size_t j = 0; j < dr.size(); ++j) dr[j] -= std::exp(yr[j]) * s;
      }
      accumulate(a, d);
    });
  }

  Var l2_normalize(Var a) {
    Tensor out = value(a);
    std::vector<double> norms(out.rows());
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      const double n = norm(r);
      if (!(n > 0.0)) throw DegenerateInput("l2_normalize: zero-norm row");
      norms[i] = n;
      for (double& v : r) v /= n;
    }
    return push(std::move(out), any_grad({a}), [this, a, norms](std::size_t self) {
      const Tensor& y = nodes_[self].value;
      Tensor d = nodes_[self].grad;
      for (std::size_t i = 0; i < d.rows(); ++i) {
        auto dr = d.row(i);
        auto yr = y.row(i);
        const double s = dot(dr, yr);
        for (std::size_t j = 0; j < dr.size(); ++j) dr[j] = (dr[j] - yr[j] * s) / norms[i];
      }
      accumulate(a, d);
    });
  }

  Var row_sum(Var a) {
    const Tensor& va = value(a);
    Tensor out({va.rows()});
    for (std::size_t i = 0; i < va.rows(); ++i) {
      double s = 0.0;
      for (double v : va.row(i)) s += v;
      out[i] = s;
    }
    return push(std::move(out), any_grad({a}), [this, a](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      Tensor d(value(a).shape());
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (double& v : d.row(i)) v = g[i];
      accumulate(a, d);
    });
  }

  /// Training-mode batch normalization over rows; per-column statistics.
  Var batchnorm(Var x, Var gamma, Var beta, double eps, BatchStats* stats = nullptr) {
    const Tensor& vx = value(x);
    const std::size_t m = vx.rows(), n = vx.cols();
    if (m < 2) throw InvalidArgument("batchnorm: training mode needs at least two rows");
    Tensor mean({n}), var({n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) mean[j] += vx.at(i, j);
    for (double& v : mean.data()) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double c = vx.at(i, j) - mean[j];
        var[j] += c * c;
      }
    for (double& v : var.data()) v /= static_cast<double>(m);
    std::vector<double> inv_std(n);
    for (std::size_t j = 0; j < n; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
    Tensor xhat = vx;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) xhat.at(i, j) = (vx.at(i, j) - mean[j]) * inv_std[j];
    const Tensor& g = value(gamma);
    const Tensor& b = value(beta);
    Tensor out = xhat;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = g[j] * xhat.at(i, j) + b[j];
    if (stats) *stats = BatchStats{mean, var};
    return push(std::move(out), any_grad({x, gamma, beta}),
                [this, x, gamma, beta, xhat = std::move(xhat), inv_std](std::size_t self) {
                  const Tensor& dy = nodes_[self].grad;
                  const std::size_t m = dy.rows(), n = dy.cols();
                  const Tensor& g = value(gamma);
                  Tensor dgamma({n}), dbeta({n});
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                      dgamma[j] += dy.at(i, j) * xhat.at(i, j);
                      dbeta[j] += dy.at(i, j);
                    }
                  if (requires_grad(x)) {
                    Tensor dx({m, n});
                    const double md = static_cast<double>(m);
                    for (std::size_t j = 0; j < n; ++j) {
                      // sum(dxhat) = g*dbeta, sum(dxhat*xhat) = g*dgamma
                      const double s1 = g[j] * dbeta[j];
                      const double s2 = g[j] * dgamma[j];
                      for (std::size_t i = 0; i < m; ++i) {
                        const double dxh = dy.at(i, j) * g[j];
                        dx.at(i, j) = inv_std[j] / md * (md * dxh - s1 - xhat.at(i, j) * s2);
                      }
                    }
                    accumulate(x, dx);
                  }
                  if (requires_grad(gamma)) accumulate(gamma, dgamma);
                  if (requires_grad(beta)) accumulate(beta, dbeta);
                });
  }

  /// Inference-mode batch normalization with fixed statistics.
  Var batchnorm_fixed(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var,
                      double eps) {
    const Tensor& vx = value(x);
    const std::size_t m = vx.rows(), n = vx.cols();
    std::vector<double> inv_std(n);
    for (std::size_t j = 0; j < n; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
    Tensor xhat = vx;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) xhat.at(i, j) = (vx.at(i, j) - mean[j]) * inv_std[j];
    const Tensor& g = value(gamma);
    const Tensor& b = value(beta);
    Tensor out = xhat;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = g[j] * xhat.at(i, j) + b[j];
    return push(std::move(out), any_grad({x, gamma, beta}),
                [this, x, gamma, beta, xhat = std::move(xhat), inv_std](std::size_t self) {
                  const Tensor& dy = nodes_[self].grad;
                  const std::size_t m = dy.rows(), n = dy.cols();
                  const Tensor& g = value(gamma);
                  if (requires_grad(x)) {
                    Tensor dx = dy;
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) dx.at(i, j) *= g[j] * inv_std[j];
                    accumulate(x, dx);
                  }
                  if (requires_grad(gamma) || requires_grad(beta)) {
                    Tensor dgamma({n}), dbeta({n});
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        dgamma[j] += dy.at(i, j) * xhat.at(i, j);
                        dbeta[j] += dy.at(i, j);
                      }
                    if (requires_grad(gamma)) accumulate(gamma, dgamma);
                    if (requires_grad(beta)) accumulate(beta, dbeta);
                  }
                });
  }

  // ---- selection and reduction ---------------------------------------------

  /// 1-D tensor of the entries of `a` at the given flat positions.
  Var gather(Var a, std::vector<std::size_t> flat) {
    const Tensor& va = value(a);
    Tensor out({flat.size()});
    for (std::size_t i = 0; i < flat.size(); ++i) {
      if (flat[i] >= va.size()) throw InvalidArgument("gather: index out of range");
      out[i] = va[flat[i]];
    }
    return push(std::move(out), any_grad({a}), [this, a, flat = std::move(flat)](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      Tensor d(value(a).shape());
      for (std::size_t i = 0; i < flat.size(); ++i) d[flat[i]] += g[i];
      accumulate(a, d);
    });
  }

  Var gather_rows(Var a, std::vector<std::size_t> rows) {
    const Tensor& va = value(a);
    for (std::size_t r : rows)
      if (r >= va.rows()) throw InvalidArgument("gather_rows: index out of range");
    Tensor out = va.select_rows(rows);
    return push(std::move(out), any_grad({a}), [this, a, rows = std::move(rows)](std::size_t self) {
      const Tensor& g = nodes_[self].grad;
      Tensor d(value(a).shape());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = g.row(i);
        auto dst = d.row(rows[i]);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      accumulate(a, d);
    });
  }

  Var sum(Var a) {
    double s = 0.0;
    for (double v : value(a).data()) s += v;
    return push(Tensor({1}, s), any_grad({a}), [this, a](std::size_t self) {
      accumulate(a, Tensor(value(a).shape(), nodes_[self].grad[0]));
    });
  }

  Var mean(Var a) {
    const std::size_t n = value(a).size();
    if (n == 0) throw InvalidArgument("mean: empty input");
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  static void softmax_row(std::span<double> r) {
    double m = r[0];
    for (double v : r) m = v > m ? v : m;
    double s = 0.0;
    for (double& v : r) {
      v = std::exp(v - m);
      s += v;
    }
    for (double& v : r) v /= s;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(std::size_t)> back;
  };

  Var push(Tensor value, bool rg, std::function<void(std::size_t)> back) {
    nodes_.push_back(Node{std::move(value), Tensor(), rg, rg ? std::move(back) : nullptr});
    return Var{nodes_.size() - 1};
  }

  [[nodiscard]] const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw InvalidArgument("graph: unknown variable");
    return nodes_[v.id];
  }
  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw InvalidArgument("graph: unknown variable");
    return nodes_[v.id];
  }

  [[nodiscard]] bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (node(v).requires_grad) return true;
    return false;
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      throw InvalidArgument(std::string(op) + ": shape mismatch");
  }

  void accumulate(Var v, const Tensor& d) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = d.same_shape(n.value) ? d : d.reshaped(n.value.shape());
      return;
    }
    for (std::size_t i = 0; i < d.size(); ++i) n.grad[i] += d[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace extendova::num
