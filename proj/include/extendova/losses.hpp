#pragma once

// Training objectives, recorded on a num::Graph so that every loss is
// differentiated by the same reverse sweep.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "extendova/errors.hpp"
#include "extendova/model.hpp"
#include "extendova/numerics/autodiff.hpp"
#include "extendova/numerics/prob.hpp"

namespace extendova::loss {

using num::Graph;
using num::Tensor;
using num::Var;

struct LossWeights {
  double lambda_kd = 1.0;    // baseline distillation weight
  double lambda_aux = 0.9;   // early-regularization weight
  double lambda_cd = 0.6;    // cross-camera distillation weight
  double margin = 0.3;       // triplet margin
  double tau = 0.05;         // prototype softmax temperature

  void validate() const {
    if (lambda_kd < 0 || lambda_aux < 0 || lambda_cd < 0 || margin < 0 || !(tau > 0))
      throw ConfigError("loss weights: all weights must be non-negative and tau positive");
  }
};

/// Active prototype rows of a bank restricted to [begin, end), plus the map
/// from class id to row position.
struct PrototypeView {
  Tensor rows;
  std::vector<std::size_t> ids;
  std::vector<long> position;  // class id -> row, or -1

  static PrototypeView of(const model::MemoryBank& bank, std::size_t begin = 0,
                          std::size_t end = SIZE_MAX) {
    PrototypeView v;
    v.ids = bank.active_ids(begin, end);
    v.position.assign(bank.size(), -1);
    v.rows = bank.prototypes().select_rows(v.ids);
    for (std::size_t r = 0; r < v.ids.size(); ++r) v.position[v.ids[r]] = static_cast<long>(r);
    return v;
  }

  [[nodiscard]] std::size_t row_of(std::size_t k) const {
    if (k >= position.size() || position[k] < 0) throw StateError("prototype view: inactive label");
    return static_cast<std::size_t>(position[k]);
  }
};

namespace detail {

/// Mean over rows of -log_softmax(logits)[i, target_i].
inline Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> targets) {
  const std::size_t n = g.value(logits).rows();
  const std::size_t c = g.value(logits).cols();
  Var lp = g.log_softmax(logits);
  std::vector<std::size_t> flat(n);
  for (std::size_t i = 0; i < n; ++i) flat[i] = i * c + targets[i];
  return g.scale(g.sum(g.gather(lp, std::move(flat))), -1.0 / static_cast<double>(n));
}

}  // namespace detail

/// One-vs-all loss with the hardest negative head per sample, averaged over
/// the batch. `head_logits` is [B x 2C] (positive, negative per class) and
/// `labels` index the C classes.
inline Var ova(Graph& g, Var head_logits, std::span<const std::size_t> labels) {
  const Tensor& v = g.value(head_logits);
  const std::size_t b = v.rows();
  const std::size_t c = v.cols() / 2;
  if (c < 2) throw InvalidArgument("loss_ova: needs at least two classes");
  if (labels.size() != b) throw InvalidArgument("loss_ova: label count mismatch");
  Var pairs = g.reshape(head_logits, {b * c, 2});
  Var lp = g.log_softmax(pairs);
  const Tensor& lpv = g.value(lp);
  std::vector<std::size_t> flat;
  flat.reserve(2 * b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t y = labels[i];
    if (y >= c) throw InvalidArgument("loss_ova: label outside class set");
    std::size_t hardest = y == 0 ? 1 : 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (k == y) continue;
      // largest p(y^k | x) <=> largest positive log-probability
      if (lpv.at(i * c + k, 0) > lpv.at(i * c + hardest, 0)) hardest = k;
    }
    flat.push_back((i * c + y) * 2);
    flat.push_back((i * c + hardest) * 2 + 1);
  }
  return g.scale(g.sum(g.gather(lp, std::move(flat))), -1.0 / static_cast<double>(b));
}

/// Softmax over all active prototypes (scaled by 1/tau) against the pseudo
/// labels. Prototypes enter as constants.
inline Var id_star(Graph& g, Var features, std::span<const std::size_t> targets,
                   const PrototypeView& view, double tau) {
  if (targets.size() != g.value(features).rows()) throw InvalidArgument("loss_id_star: label count mismatch");
  std::vector<std::size_t> rows(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) rows[i] = view.row_of(targets[i]);
  Var logits = g.scale(g.matmul_nt(features, g.constant(view.rows)), 1.0 / tau);
  return detail::cross_entropy(g, logits, rows);
}

/// Old-class-only softmax for samples currently labeled as new classes. The
/// target of a class is the most frequent nearest old prototype among its
/// samples in the batch (ties to the lowest id). Returns std::nullopt when no
/// sample carries a new-class label.
inline std::optional<Var> aux(Graph& g, Var features, std::span<const std::size_t> pseudo,
                              const model::MemoryBank& bank, std::size_t old_count, double tau) {
  const Tensor& fv = g.value(features);
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < pseudo.size(); ++i)
    if (pseudo[i] >= old_count) picked.push_back(i);
  if (picked.empty()) return std::nullopt;
  const PrototypeView old = PrototypeView::of(bank, 0, old_count);
  if (old.ids.empty()) throw StateError("loss_aux: no old classes");
  std::map<std::size_t, std::map<std::size_t, std::size_t>> votes;  // label -> old class -> count
  for (std::size_t i : picked) ++votes[pseudo[i]][bank.nearest(fv.row(i), 0, old_count).first];
  std::map<std::size_t, std::size_t> elected;
  for (const auto& [label, tally] : votes) {
    std::size_t best = 0, n = 0;
    for (const auto& [k, c] : tally)
      if (c > n) {
        best = k;
        n = c;
      }
    elected[label] = old.row_of(best);
  }
  std::vector<std::size_t> targets(picked.size());
  for (std::size_t r = 0; r < picked.size(); ++r) targets[r] = elected.at(pseudo[picked[r]]);
  Var sub = g.gather_rows(features, picked);
  Var logits = g.scale(g.matmul_nt(sub, g.constant(old.rows)), 1.0 / tau);
  return detail::cross_entropy(g, logits, targets);
}

struct TripletInfo {
  std::size_t valid_anchors = 0;
  bool all_skipped = false;
};

/// Batch-hard triplet loss: for every anchor the farthest positive and the
/// closest negative, hinge with `margin`, averaged over valid anchors.
inline Var triplet(Graph& g, Var features, std::span<const int> labels, double margin,
                   TripletInfo* info = nullptr) {
  const Tensor& f = g.value(features);
  const std::size_t b = f.rows();
  if (labels.size() != b) throw InvalidArgument("loss_triplet: label count mismatch");
  auto dist2 = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    auto a = f.row(i);
    auto c = f.row(j);
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - c[k]) * (a[k] - c[k]);
    return s;
  };
  std::vector<std::size_t> anchors, pos, neg;
  for (std::size_t i = 0; i < b; ++i) {
    long p = -1, n = -1;
    double dp = 0.0, dn = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const double d = dist2(i, j);
      if (labels[j] == labels[i]) {
        if (p < 0 || d > dp) {
          p = static_cast<long>(j);
          dp = d;
        }
      } else if (n < 0 || d < dn) {
        n = static_cast<long>(j);
        dn = d;
      }
    }
    if (p < 0 || n < 0) continue;
    anchors.push_back(i);
    pos.push_back(static_cast<std::size_t>(p));
    neg.push_back(static_cast<std::size_t>(n));
  }
  if (info) *info = TripletInfo{anchors.size(), anchors.empty()};
  if (anchors.empty()) return g.constant(Tensor({1}, 0.0));
  auto distance = [&](const std::vector<std::size_t>& partner) {
    Var diff = g.sub(g.gather_rows(features, anchors), g.gather_rows(features, partner));
    return g.sqrt(g.add_scalar(g.row_sum(g.mul(diff, diff)), 1e-12));
  };
  Var hinge = g.relu(g.add_scalar(g.sub(distance(pos), distance(neg)), margin));
  return g.mean(hinge);
}

/// Sum over the batch of KL(softmax(new) || softmax(old)). `old_logits` is a
/// constant from the frozen model.
inline Var kd(Graph& g, Var new_logits, const Tensor& old_logits) {
  if (!g.value(new_logits).same_shape(old_logits)) throw InvalidArgument("loss_kd: shape mismatch");
  Tensor log_old = old_logits;
  for (std::size_t i = 0; i < log_old.rows(); ++i) {
    auto r = log_old.row(i);
    Graph::softmax_row(r);
    for (double& v : r) v = std::log(v > num::kKlFloor ? v : num::kKlFloor);
  }
  Var ln = g.log_softmax(new_logits);
  Var pn = g.softmax(new_logits);
  return g.sum(g.mul(pn, g.sub(ln, g.constant(std::move(log_old)))));
}

enum class CdPairing { paired, all_pairs };

/// Squared L2 norm of the change in cosine similarity between batch features
/// and surrogate features, new encoder versus frozen old encoder. With
/// all_pairs the B x B squared norm is divided by B.
inline Var cd(Graph& g, Var new_features, const Tensor& old_features, const Tensor& surrogates,
              CdPairing pairing = CdPairing::paired) {
  const Tensor& nf = g.value(new_features);
  if (nf.rows() != surrogates.rows() || !nf.same_shape(old_features) ||
      nf.cols() != surrogates.cols())
    throw InvalidArgument("loss_cd: batch and surrogate shapes differ");
  const Tensor s = num::normalize_rows(surrogates);
  const Tensor o = num::normalize_rows(old_features);
  Var n = g.l2_normalize(new_features);
  Var diff;
  if (pairing == CdPairing::paired) {
    Tensor cos_old({o.rows()});
    for (std::size_t i = 0; i < o.rows(); ++i) cos_old[i] = num::dot(o.row(i), s.row(i));
    Var cos_new = g.row_sum(g.mul(n, g.constant(s)));
    diff = g.sub(cos_new, g.constant(std::move(cos_old)));
  } else {
    Var cos_new = g.matmul_nt(n, g.constant(s));
    diff = g.sub(cos_new, g.constant(num::matmul_nt(o, s)));
  }
  Var sq = g.sum(g.mul(diff, diff));
  if (pairing == CdPairing::all_pairs) sq = g.scale(sq, 1.0 / static_cast<double>(nf.rows()));
  return sq;
}

/// L_ID + L_Triplet + lambda_kd * L_KD.
inline Var baseline_total(Graph& g, Var id, Var trip, std::optional<Var> kd_term,
                          const LossWeights& w) {
  Var total = g.add(id, trip);
  if (kd_term) total = g.add(total, g.scale(*kd_term, w.lambda_kd));
  return total;
}

/// L_Triplet + L_ID* + lambda_aux * L_Aux + lambda_cd * L_CD; the auxiliary
/// term only while `aux_active`.
inline Var extendova_total(Graph& g, Var trip, Var id, std::optional<Var> aux_term,
                           std::optional<Var> cd_term, const LossWeights& w, bool aux_active) {
  Var total = g.add(trip, id);
  if (aux_active && aux_term) total = g.add(total, g.scale(*aux_term, w.lambda_aux));
  if (cd_term) total = g.add(total, g.scale(*cd_term, w.lambda_cd));
  return total;
}

}  // namespace extendova::loss
