#pragma once

// Incremental training protocol. Every function here consumes TrainSplit
// (observations and intra-camera labels); none of them can see global ids.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extendova/errors.hpp"
#include "extendova/losses.hpp"
#include "extendova/model.hpp"
#include "extendova/numerics/adam.hpp"
#include "extendova/numerics/autodiff.hpp"
#include "extendova/numerics/prob.hpp"
#include "extendova/numerics/rng.hpp"
#include "extendova/synthstream.hpp"

namespace extendova::pipeline {

using model::Encoder;
using model::MemoryBank;
using model::ModelPair;
using model::OvaDetector;
using num::Graph;
using num::Rng;
using num::Tensor;
using num::Var;
using stream::TrainSplit;

enum class Method { extendova, baseline, finetune, lwf, joint };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::extendova: return "extendova";
    case Method::baseline: return "baseline";
    case Method::finetune: return "finetune";
    case Method::lwf: return "lwf";
    case Method::joint: return "joint";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::extendova, Method::baseline, Method::finetune, Method::lwf, Method::joint})
    if (s == to_string(m)) return m;
  throw ConfigError("method: unknown method '" + s + "'");
}

struct StepPlan {
  Method method = Method::extendova;
  int epochs = 40;
  int early_reg_epochs = 10;
  double lr = 3e-3;
  double backbone_lr_factor = 0.5;  // backbone lr multiplier at incremental steps
  std::size_t P = 16;
  std::size_t K = 4;
  loss::LossWeights weights;
  double prototype_momentum = 0.9;
  double ema_alpha = 0.99;
  double ova_threshold = 0.5;
  double baseline_threshold = 0.5;
  bool use_aux = true;
  bool use_refinement = true;
  bool use_cd = true;
  bool cd_whole_step = true;  // false: L_CD only after refinement
  loss::CdPairing cd_pairing = loss::CdPairing::paired;
  int ova_epochs = 30;
  double ova_lr = 1e-2;

  void validate() const {
    if (epochs < 1) throw ConfigError("plan.epochs: must be at least 1");
    if (early_reg_epochs < 0 || early_reg_epochs > epochs)
      throw ConfigError("plan.early_reg_epochs: must lie in [0, epochs]");
    if (!(lr > 0)) throw ConfigError("plan.lr: must be positive");
    if (!(backbone_lr_factor >= 0)) throw ConfigError("plan.backbone_lr_factor: must be non-negative");
    if (P < 2 || K < 2) throw ConfigError("plan.P/plan.K: both must be at least 2");
    if (prototype_momentum < 0 || prototype_momentum > 1)
      throw ConfigError("plan.prototype_momentum: must lie in [0, 1]");
    if (ema_alpha < 0 || ema_alpha > 1) throw ConfigError("plan.ema_alpha: must lie in [0, 1]");
    if (ova_threshold <= 0 || ova_threshold >= 1) throw ConfigError("plan.ova_threshold: must lie in (0, 1)");
    if (baseline_threshold < 0 || baseline_threshold > 1)
      throw ConfigError("plan.baseline_threshold: must lie in [0, 1]");
    if (ova_epochs < 1 || !(ova_lr > 0)) throw ConfigError("plan.ova_epochs/plan.ova_lr: must be positive");
    weights.validate();
  }
};

/// Everything a method carries from one step to the next.
struct LearnerState {
  int step = 0;
  ModelPair models;
  MemoryBank bank;                      // prototype path
  OvaDetector detector;                 // extendova
  model::BaselineClassifier classifier;  // classifier path
};

// ---------------------------------------------------------------------------
// Seen-class identification and the selection criterion

struct Identification {
  Tensor features;                  // ema features of the train split
  std::vector<std::size_t> votes;   // nearest old class per sample
  std::vector<double> scores;       // ova score of that class
  std::vector<bool> flags;          // score > threshold
};

/// One pass over the split with frozen models; no weights change.
inline Identification identify_seen_samples(const TrainSplit& train, const Encoder& ema, const MemoryBank& bank,
                                            const OvaDetector& detector, std::size_t old_count,
                                            double threshold = 0.5) {
  Identification id;
  id.features = model::embed(ema, train.x);
  const std::size_t n = train.size();
  id.votes.resize(n);
  id.scores.resize(n);
  id.flags.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = id.features.row(i);
    const std::size_t k = bank.nearest(f, 0, old_count).first;
    id.votes[i] = k;
    id.scores[i] = detector.score(f, k);
    id.flags[i] = id.scores[i] > threshold;
  }
  return id;
}

struct ClassDecision {
  bool seen = false;
  std::size_t elected = 0;  // most frequent vote
  std::size_t support = 0;  // samples voting for `elected`
  std::size_t samples = 0;
  std::size_t flagged = 0;
};

/// A class is seen iff every one of its samples is flagged; it elects its most
/// frequent vote (ties to the lowest class id). When several seen classes
/// elect the same old class, the largest support keeps it (ties to the lower
/// local label) and the others become unseen.
inline std::vector<ClassDecision> apply_criterion(std::span<const int> local_labels, int num_classes,
                                                  const std::vector<bool>& flags,
                                                  std::span<const std::size_t> votes) {
  if (flags.size() != local_labels.size() || votes.size() != local_labels.size())
    throw InvalidArgument("criterion: per-sample inputs differ in length");
  const std::size_t c = static_cast<std::size_t>(num_classes);
  std::vector<ClassDecision> out(c);
  std::vector<std::map<std::size_t, std::size_t>> tally(c);
  for (std::size_t i = 0; i < local_labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(local_labels[i]);
    if (y >= c) throw InvalidArgument("criterion: label outside the class range");
    ++out[y].samples;
    if (flags[i]) ++out[y].flagged;
    ++tally[y][votes[i]];
  }
  for (std::size_t y = 0; y < c; ++y) {
    ClassDecision& d = out[y];
    for (const auto& [k, count] : tally[y])  // ascending k, so ties keep the lowest id
      if (count > d.support) {
        d.elected = k;
        d.support = count;
      }
    d.seen = d.samples > 0 && d.flagged == d.samples;
  }
  std::map<std::size_t, std::size_t> owner;  // old class -> winning local class
  for (std::size_t y = 0; y < c; ++y) {
    if (!out[y].seen) continue;
    auto it = owner.find(out[y].elected);
    if (it == owner.end()) {
      owner.emplace(out[y].elected, y);
    } else if (out[y].support > out[it->second].support) {
      out[it->second].seen = false;
      it->second = y;
    } else {
      out[y].seen = false;
    }
  }
  return out;
}

struct LocalClassState {
  bool seen = false;
  std::size_t label = 0;  // pseudo-global class id
};

struct PseudoLabelState {
  int step = 1;
  std::size_t old_count = 0;  // bank size before the step
  std::vector<LocalClassState> classes;  // indexed by local label
  std::vector<std::size_t> created;      // prototypes created at this step
  std::vector<std::size_t> removed;      // created prototypes removed by refinement
  std::size_t flips = 0;

  [[nodiscard]] std::vector<std::size_t> seen_classes() const {
    std::vector<std::size_t> out;
    for (std::size_t y = 0; y < classes.size(); ++y)
      if (classes[y].seen) out.push_back(y);
    return out;
  }
  [[nodiscard]] std::vector<std::size_t> unseen_classes() const {
    std::vector<std::size_t> out;
    for (std::size_t y = 0; y < classes.size(); ++y)
      if (!classes[y].seen) out.push_back(y);
    return out;
  }
  [[nodiscard]] std::vector<std::size_t> sample_labels(const TrainSplit& train) const {
    std::vector<std::size_t> out(train.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = classes.at(static_cast<std::size_t>(train.local_label[i])).label;
    return out;
  }
};

namespace detail {

/// Mean feature of each listed group of rows.
inline Tensor group_means(const Tensor& features, const std::vector<std::vector<std::size_t>>& groups) {
  Tensor out = Tensor::matrix(groups.size(), features.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw InvalidArgument("group_means: empty group");
    auto r = out.row(g);
    for (std::size_t i : groups[g]) {
      auto f = features.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += f[j];
    }
    for (double& v : r) v /= static_cast<double>(groups[g].size());
  }
  return out;
}

}  // namespace detail

/// Applies the criterion and extends the bank by one prototype per unseen class,
/// initialized at the class mean of the identification features.
inline PseudoLabelState generate_pseudo_labels(const TrainSplit& train, const Identification& id, MemoryBank& bank,
                                               int step) {
  PseudoLabelState st;
  st.step = step;
  st.old_count = bank.size();
  const auto decisions = apply_criterion(train.local_label, train.num_classes, id.flags, id.votes);
  st.classes.resize(decisions.size());
  const auto members = train.class_members();
  std::vector<std::vector<std::size_t>> unseen_members;
  for (std::size_t y = 0; y < decisions.size(); ++y) {
    if (decisions[y].seen) {
      st.classes[y] = {true, decisions[y].elected};
    } else {
      st.classes[y] = {false, st.old_count + unseen_members.size()};
      st.created.push_back(st.classes[y].label);
      unseen_members.push_back(members[y]);
    }
  }
  bank.extend(detail::group_means(id.features, unseen_members), step);
  return st;
}

/// Re-runs identification and the criterion with the current models. Unseen
/// classes that now qualify take their elected old class when no seen class
/// holds it already (largest support first); their prototypes are removed.
inline PseudoLabelState refine_pseudo_labels(const TrainSplit& train, const PseudoLabelState& state,
                                             const Identification& id, MemoryBank& bank) {
  PseudoLabelState out = state;
  const auto decisions = apply_criterion(train.local_label, train.num_classes, id.flags, id.votes);
  std::set<std::size_t> claimed;
  for (const auto& c : state.classes)
    if (c.seen) claimed.insert(c.label);
  std::vector<std::size_t> candidates;
  for (std::size_t y = 0; y < decisions.size(); ++y)
    if (!state.classes[y].seen && decisions[y].seen) candidates.push_back(y);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return decisions[a].support > decisions[b].support; });
  std::vector<std::size_t> removed;
  for (std::size_t y : candidates) {
    const std::size_t e = decisions[y].elected;
    if (claimed.count(e)) continue;
    claimed.insert(e);
    removed.push_back(out.classes[y].label);
    out.classes[y] = {true, e};
  }
  bank.remove(removed, state.step);
  out.removed.insert(out.removed.end(), removed.begin(), removed.end());
  out.flips += removed.size();
  return out;
}

// ---------------------------------------------------------------------------
// Surrogate features

struct SurrogateBatch {
  Tensor features;                   // B x d, unit rows
  std::vector<std::size_t> classes;  // source class per row
};

/// W_k * s + sqrt(running_var) * z with s the running feature norm of `old`.
inline Tensor draw_surrogate_raw(const MemoryBank& bank, std::size_t k, const Encoder& old, Rng& rng) {
  if (!bank.active(k)) throw StateError("sample_surrogates: inactive class");
  Tensor mean({bank.dim()});
  auto w = bank.prototype(k);
  for (std::size_t j = 0; j < mean.size(); ++j) mean[j] = w[j] * old.running_norm;
  return num::gaussian_sample(mean, old.running_var, rng);
}

inline SurrogateBatch sample_surrogates(const MemoryBank& bank, std::size_t old_count, const Encoder& old,
                                        std::size_t B, Rng& rng) {
  if (B == 0) throw InvalidArgument("sample_surrogates: batch size must be positive");
  const auto ids = bank.active_ids(0, old_count);
  if (ids.empty()) throw StateError("sample_surrogates: no old classes");
  SurrogateBatch out;
  out.features = Tensor::matrix(B, bank.dim());
  out.classes.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t k = ids[rng.index(ids.size())];
    out.classes[b] = k;
    Tensor raw = draw_surrogate_raw(bank, k, old, rng);
    const double n = num::norm(raw.data());
    if (!(n > 0)) throw DegenerateInput("sample_surrogates: zero-norm draw");
    auto r = out.features.row(b);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = raw[j] / n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traces, hooks, event log

struct EpochTrace {
  int epoch = 0;
  double total = 0, triplet = 0, id = 0, aux = 0, cd = 0, kd = 0;
  std::size_t iterations = 0;
};

struct EpochEvent {
  Method method;
  int step;
  int epoch;
  const LearnerState& state;
  const PseudoLabelState* labels;  // null outside extendova steps
  const EpochTrace& trace;
};

using EpochObserver = std::function<void(const EpochEvent&)>;

/// One JSON object per line: method, step, epoch, loss components, label-state
/// digest and wall time in milliseconds.
class EventLog {
 public:
  EventLog() = default;
  explicit EventLog(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw Error("cannot open event log " + path);
  }
  void write(const nlohmann::json& record) {
    if (out_.is_open()) out_ << record.dump() << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

struct Hooks {
  EpochObserver on_epoch;
  EventLog* log = nullptr;
};

namespace detail {

inline void emit(const Hooks& hooks, Method method, int step, const LearnerState& state,
                 const PseudoLabelState* labels, const EpochTrace& tr,
                 std::chrono::steady_clock::time_point start) {
  if (hooks.log) {
    nlohmann::json rec = {{"method", to_string(method)}, {"step", step}, {"epoch", tr.epoch},
                          {"loss", {{"total", tr.total}, {"triplet", tr.triplet}, {"id", tr.id},
                                    {"aux", tr.aux}, {"cd", tr.cd}, {"kd", tr.kd}}}};
    if (labels)
      rec["labels"] = {{"c_sc", labels->seen_classes().size()},
                       {"c_uc", labels->unseen_classes().size()},
                       {"flips", labels->flips}};
    rec["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    hooks.log->write(rec);
  }
  if (hooks.on_epoch) hooks.on_epoch(EpochEvent{method, step, tr.epoch, state, labels, tr});
}

inline std::size_t iterations_per_epoch(std::size_t n, const StepPlan& plan) {
  return std::max<std::size_t>(1, n / (plan.P * plan.K));
}

/// Groups of sample indices by class label, one group per distinct label.
inline std::vector<std::vector<std::size_t>> groups_of(std::span<const std::size_t> labels) {
  std::map<std::size_t, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(m.size());
  for (auto& [k, v] : m) out.push_back(std::move(v));
  return out;
}

inline void register_encoder(num::Adam& opt, Encoder& enc, double backbone_lr, double head_lr) {
  auto params = enc.parameters();
  for (std::size_t k = 0; k < params.size(); ++k)
    opt.add(params[k], k < Encoder::kBackboneParams ? backbone_lr : head_lr);
}

inline std::vector<Tensor> encoder_grads(const Graph& g, const model::EncoderBinding& b) {
  std::vector<Tensor> out;
  for (Var v : b.vars()) out.push_back(g.grad(v));
  return out;
}

/// Moving-average prototype update for every class present in the batch with
/// id >= `from`.
inline void update_prototypes(MemoryBank& bank, const Tensor& features, std::span<const std::size_t> labels,
                              double momentum, std::size_t from) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= from && bank.active(labels[i])) groups[labels[i]].push_back(i);
  for (const auto& [k, rows] : groups) {
    std::vector<double> mean(features.cols(), 0.0);
    for (std::size_t i : rows) {
      auto f = features.row(i);
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += f[j] / static_cast<double>(rows.size());
    }
    bank.update(k, mean, momentum);
  }
}

inline std::vector<int> as_int(std::span<const std::size_t> v) {
  return std::vector<int>(v.begin(), v.end());
}

inline void accumulate(EpochTrace& tr, const Graph& g, Var total, Var trip, Var id, std::optional<Var> aux,
                       std::optional<Var> cd, std::optional<Var> kd) {
  tr.total += g.scalar(total);
  tr.triplet += g.scalar(trip);
  tr.id += g.scalar(id);
  if (aux) tr.aux += g.scalar(*aux);
  if (cd) tr.cd += g.scalar(*cd);
  if (kd) tr.kd += g.scalar(*kd);
  ++tr.iterations;
}

inline void finish(EpochTrace& tr) {
  const double n = static_cast<double>(std::max<std::size_t>(1, tr.iterations));
  tr.total /= n;
  tr.triplet /= n;
  tr.id /= n;
  tr.aux /= n;
  tr.cd /= n;
  tr.kd /= n;
  if (!std::isfinite(tr.total)) throw NumericalFailure("training: non-finite loss");
}

/// Prototype-softmax plus triplet training of `state` on fixed labels; used for
/// the initial step and for joint training.
inline std::vector<EpochTrace> supervised_prototype_training(LearnerState& state, const TrainSplit& train,
                                                             std::span<const std::size_t> labels,
                                                             const StepPlan& plan, double backbone_lr,
                                                             double head_lr, Rng& rng, Method method,
                                                             const Hooks& hooks) {
  const auto start = std::chrono::steady_clock::now();
  num::Adam opt;
  register_encoder(opt, state.models.online, backbone_lr, head_lr);
  const auto groups = groups_of(labels);
  const std::size_t P = std::min(plan.P, groups.size());
  const std::size_t iters = iterations_per_epoch(train.size(), plan);
  std::vector<EpochTrace> traces;
  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    EpochTrace tr;
    tr.epoch = epoch;
    for (std::size_t it = 0; it < iters; ++it) {
      const auto batch = stream::pk_sample(groups, P, plan.K, rng);
      std::vector<std::size_t> y(batch.size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = labels[batch.indices[i]];
      Graph g;
      const auto b = model::bind(g, state.models.online, true);
      const auto out = model::forward(g, state.models.online, b, g.constant(train.x.select_rows(batch.indices)),
                                      model::Mode::train);
      const auto view = loss::PrototypeView::of(state.bank);
      Var id = loss::id_star(g, out.feature, y, view, plan.weights.tau);
      Var trip = loss::triplet(g, out.feature, as_int(y), plan.weights.margin);
      Var total = g.add(trip, id);
      g.backward(total);
      opt.step(encoder_grads(g, b));
      update_prototypes(state.bank, g.value(out.feature), y, plan.prototype_momentum, 0);
      model::ema_update(state.models, plan.ema_alpha);
      accumulate(tr, g, total, trip, id, std::nullopt, std::nullopt, std::nullopt);
    }
    finish(tr);
    traces.push_back(tr);
    emit(hooks, method, state.step, state, nullptr, tr, start);
  }
  return traces;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One-vs-all heads

/// Trains the heads listed in `trainable` on fixed features with the
/// hard-negative objective. Each sample is scored against the trainable heads
/// plus the head of its own label; every other head is left bitwise intact.
/// All trained heads are frozen afterwards.
inline void train_ova_heads(OvaDetector& det, const Tensor& features, std::span<const std::size_t> labels,
                            const std::vector<std::size_t>& trainable, std::size_t class_count,
                            const StepPlan& plan, Rng& rng) {
  det.resize(class_count, rng);
  if (trainable.empty()) return;
  for (std::size_t k : trainable)
    if (det.frozen(k)) throw InvariantViolation("train_ova_heads: head is frozen");
  std::vector<bool> is_trainable(class_count, false);
  for (std::size_t k : trainable) is_trainable.at(k) = true;
  num::Adam opt;
  opt.add(&det.weights(), plan.ova_lr);
  opt.add(&det.bias(), plan.ova_lr);
  const auto groups = detail::groups_of(labels);
  if (groups.size() < 2 && trainable.size() < 2) throw InvalidArgument("train_ova_heads: needs two classes");
  const std::size_t P = std::min(plan.P, groups.size());
  const std::size_t iters = detail::iterations_per_epoch(labels.size(), plan);
  for (int epoch = 0; epoch < plan.ova_epochs; ++epoch) {
    for (std::size_t it = 0; it < iters; ++it) {
      const auto batch = stream::pk_sample(groups, P, plan.K, rng);
      std::vector<std::size_t> set = trainable;
      for (std::size_t i : batch.indices)
        if (!is_trainable[labels[i]]) set.push_back(labels[i]);
      std::sort(set.begin(), set.end());
      set.erase(std::unique(set.begin(), set.end()), set.end());
      if (set.size() < 2) continue;
      std::map<std::size_t, std::size_t> pos;
      for (std::size_t s = 0; s < set.size(); ++s) pos[set[s]] = s;
      const std::size_t B = batch.size();
      std::vector<std::size_t> flat, y(B);
      flat.reserve(B * 2 * set.size());
      for (std::size_t i = 0; i < B; ++i) {
        y[i] = pos.at(labels[batch.indices[i]]);
        for (std::size_t k : set) {
          flat.push_back(i * 2 * class_count + 2 * k);
          flat.push_back(i * 2 * class_count + 2 * k + 1);
        }
      }
      Graph g;
      Var w = g.parameter(det.weights());
      Var bias = g.parameter(det.bias());
      Var logits = g.add_row(g.matmul(g.constant(features.select_rows(batch.indices)), w), bias);
      Var sub = g.reshape(g.gather(logits, std::move(flat)), {B, 2 * set.size()});
      g.backward(loss::ova(g, sub, y));
      Tensor gw = g.grad(w), gb = g.grad(bias);
      for (std::size_t k = 0; k < class_count; ++k) {
        if (is_trainable[k]) continue;
        for (std::size_t r = 0; r < gw.rows(); ++r) gw.at(r, 2 * k) = gw.at(r, 2 * k + 1) = 0.0;
        gb[2 * k] = gb[2 * k + 1] = 0.0;
      }
      opt.step({gw, gb});
    }
  }
  for (std::size_t k : trainable) det.mark_trained(k);
  det.freeze_all_trained();
}

/// Fits the baseline classifier on fixed features by cross-entropy, starting
/// from zero weights.
inline Tensor fit_classifier(const Tensor& features, std::span<const std::size_t> labels, std::size_t class_count,
                             const StepPlan& plan, Rng& rng) {
  Tensor phi = Tensor::matrix(features.cols(), class_count);
  num::Adam opt;
  opt.add(&phi, plan.ova_lr);
  const auto groups = detail::groups_of(labels);
  const std::size_t P = std::min(plan.P, groups.size());
  const std::size_t iters = detail::iterations_per_epoch(labels.size(), plan);
  for (int epoch = 0; epoch < plan.ova_epochs; ++epoch) {
    for (std::size_t it = 0; it < iters; ++it) {
      const auto batch = stream::pk_sample(groups, P, plan.K, rng);
      std::vector<std::size_t> y(batch.size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = labels[batch.indices[i]];
      Graph g;
      Var w = g.parameter(phi);
      g.backward(loss::detail::cross_entropy(g, g.matmul(g.constant(features.select_rows(batch.indices)), w), y));
      opt.step({g.grad(w)});
    }
  }
  return phi;
}

// ---------------------------------------------------------------------------
// Steps

struct StepReport {
  Method method = Method::extendova;
  int step = 1;
  std::size_t old_count = 0;                 // global classes before the step
  std::vector<std::size_t> sample_labels;    // final pseudo-global label per train sample
  std::vector<EpochTrace> trace;
  std::optional<Identification> initial_identification;  // extendova
  std::optional<PseudoLabelState> initial_labels;        // extendova, before refinement
  std::optional<PseudoLabelState> final_labels;          // extendova, after refinement
  std::optional<Identification> refinement_identification;
  std::vector<double> max_softmax;  // baseline family: per-sample old-class confidence
};

/// Step 1: encoder, memory bank (class-mean init, moving-average updates) and
/// one OVA head per class. The baseline classifier is fitted on the final
/// step-1 features.
inline LearnerState train_initial_step(const TrainSplit& train, const StepPlan& plan,
                                       const model::EncoderShape& shape, Rng rng, const Hooks& hooks = {},
                                       StepReport* report = nullptr) {
  plan.validate();
  if (train.num_classes < 2) throw ConfigError("initial step: needs at least two classes");
  if (train.x.cols() != shape.d_in) throw ConfigError("initial step: d_in does not match the stream");
  Rng init_rng = rng.split("init"), batch_rng = rng.split("batch"), ova_rng = rng.split("ova");
  LearnerState st;
  st.step = 1;
  st.models.online = Encoder::create(shape, init_rng);
  st.models.ema = st.models.online;
  st.bank = MemoryBank(shape.d_out);
  std::vector<std::size_t> labels(train.local_label.begin(), train.local_label.end());
  st.bank.extend(detail::group_means(model::embed(st.models.online, train.x), train.class_members()), 1,
                 model::Origin::initial);
  auto trace = detail::supervised_prototype_training(st, train, labels, plan, plan.lr, plan.lr, batch_rng,
                                                     plan.method, hooks);
  st.detector = OvaDetector(shape.d_out);
  std::vector<std::size_t> heads(st.bank.size());
  for (std::size_t k = 0; k < heads.size(); ++k) heads[k] = k;
  train_ova_heads(st.detector, model::embed(st.models.ema, train.x), labels, heads, st.bank.size(), plan,
                  ova_rng);
  Rng cls_rng = rng.split("classifier");
  st.classifier.phi = fit_classifier(model::embed(st.models.ema, train.x), labels, st.bank.size(), plan, cls_rng);
  if (report) {
    report->method = plan.method;
    report->step = 1;
    report->old_count = 0;
    report->sample_labels = labels;
    report->trace = std::move(trace);
  }
  return st;
}

/// Identify, generate, early regularization, refinement, remaining epochs,
/// then OVA heads for the step's new classes.
inline LearnerState run_incremental_step(const TrainSplit& train, const LearnerState& prior, int step,
                                         const StepPlan& plan, Rng rng, const Hooks& hooks = {},
                                         StepReport* report = nullptr) {
  plan.validate();
  if (step < 2) throw InvalidArgument("incremental step: step must be at least 2");
  const auto start = std::chrono::steady_clock::now();
  Rng batch_rng = rng.split("batch"), sur_rng = rng.split("surrogate"), ova_rng = rng.split("ova");
  LearnerState st = prior;
  st.step = step;
  const Encoder old = prior.models.ema;
  st.models.online = old;
  st.models.ema = old;
  const std::size_t old_count = st.bank.size();

  auto ident = identify_seen_samples(train, st.models.ema, st.bank, st.detector, old_count, plan.ova_threshold);
  PseudoLabelState labels = generate_pseudo_labels(train, ident, st.bank, step);
  StepReport rep;
  rep.method = Method::extendova;
  rep.step = step;
  rep.old_count = old_count;
  rep.initial_identification = std::move(ident);
  rep.initial_labels = labels;

  num::Adam opt;
  detail::register_encoder(opt, st.models.online, plan.lr * plan.backbone_lr_factor, plan.lr);
  const std::size_t iters = detail::iterations_per_epoch(train.size(), plan);
  const auto groups = train.class_members();
  const std::size_t P = std::min(plan.P, groups.size());
  const bool aux_on = plan.use_aux && plan.weights.lambda_aux > 0.0;
  const bool cd_on = plan.use_cd && plan.weights.lambda_cd > 0.0;
  bool refined = false;

  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    const bool early = epoch <= plan.early_reg_epochs;
    const auto sample_labels = labels.sample_labels(train);
    EpochTrace tr;
    tr.epoch = epoch;
    for (std::size_t it = 0; it < iters; ++it) {
      const auto batch = stream::pk_sample(groups, P, plan.K, batch_rng);
      std::vector<std::size_t> y(batch.size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = sample_labels[batch.indices[i]];
      const Tensor xb = train.x.select_rows(batch.indices);
      Graph g;
      const auto b = model::bind(g, st.models.online, true);
      const auto out = model::forward(g, st.models.online, b, g.constant(xb), model::Mode::train);
      const auto view = loss::PrototypeView::of(st.bank);
      Var id = loss::id_star(g, out.feature, y, view, plan.weights.tau);
      Var trip = loss::triplet(g, out.feature, detail::as_int(y), plan.weights.margin);
      std::optional<Var> aux, cd;
      if (aux_on && early) aux = loss::aux(g, out.feature, y, st.bank, old_count, plan.weights.tau);
      if (cd_on && (plan.cd_whole_step || refined || plan.early_reg_epochs == 0)) {
        const auto sur = sample_surrogates(st.bank, old_count, old, batch.size(), sur_rng);
        cd = loss::cd(g, out.feature, model::embed(old, xb), sur.features, plan.cd_pairing);
      }
      Var total = loss::extendova_total(g, trip, id, aux, cd, plan.weights, early);
      g.backward(total);
      opt.step(detail::encoder_grads(g, b));
      detail::update_prototypes(st.bank, g.value(out.feature), y, plan.prototype_momentum,
                                early ? old_count : 0);
      model::ema_update(st.models, plan.ema_alpha);
      detail::accumulate(tr, g, total, trip, id, aux, cd, std::nullopt);
    }
    detail::finish(tr);
    rep.trace.push_back(tr);
    detail::emit(hooks, Method::extendova, step, st, &labels, tr, start);
    if (epoch == plan.early_reg_epochs && plan.use_refinement) {
      auto again = identify_seen_samples(train, st.models.ema, st.bank, st.detector, old_count, plan.ova_threshold);
      labels = refine_pseudo_labels(train, labels, again, st.bank);
      rep.refinement_identification = std::move(again);
      refined = true;
    }
  }

  const auto final_labels = labels.sample_labels(train);
  std::vector<std::size_t> heads;
  for (std::size_t k : labels.created)
    if (st.bank.active(k)) heads.push_back(k);
  train_ova_heads(st.detector, model::embed(st.models.ema, train.x), final_labels, heads, st.bank.size(), plan,
                  ova_rng);
  rep.final_labels = labels;
  rep.sample_labels = final_labels;
  if (report) *report = std::move(rep);
  return st;
}

/// Per-sample seen/unseen split of the threshold baseline: seen iff the largest
/// old-class softmax probability exceeds `threshold`.
struct BaselineAssignment {
  std::vector<std::size_t> labels;  // per sample
  std::vector<double> max_softmax;
  std::vector<bool> seen;
  std::size_t new_classes = 0;
  Tensor features;  // ema features
};

inline BaselineAssignment baseline_assign(const TrainSplit& train, const Encoder& ema,
                                          const model::BaselineClassifier& cls, double threshold) {
  BaselineAssignment a;
  a.features = model::embed(ema, train.x);
  const Tensor logits = num::matmul(a.features, cls.phi);
  const std::size_t n = train.size();
  const std::size_t n_old = cls.classes();
  a.labels.resize(n);
  a.max_softmax.resize(n);
  a.seen.resize(n);
  std::vector<long> new_id(static_cast<std::size_t>(train.num_classes), -1);
  std::vector<bool> has_unseen(static_cast<std::size_t>(train.num_classes), false);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor p = num::softmax(logits.select_rows(std::vector<std::size_t>{i}).reshaped({n_old}));
    const std::size_t k = num::argmax(p.data());
    a.max_softmax[i] = p[k];
    a.seen[i] = p[k] > threshold;
    if (a.seen[i]) a.labels[i] = k;
    else has_unseen[static_cast<std::size_t>(train.local_label[i])] = true;
  }
  for (std::size_t y = 0; y < has_unseen.size(); ++y)
    if (has_unseen[y]) new_id[y] = static_cast<long>(n_old + a.new_classes++);
  for (std::size_t i = 0; i < n; ++i)
    if (!a.seen[i]) a.labels[i] = static_cast<std::size_t>(new_id[static_cast<std::size_t>(train.local_label[i])]);
  return a;
}

/// Classifier-path step shared by baseline, lwf (threshold 1) and finetune
/// (every class new, no distillation). None of them smooths the weights.
inline LearnerState run_baseline_step(const TrainSplit& train, const LearnerState& prior, int step,
                                      const StepPlan& plan, Rng rng, const Hooks& hooks = {},
                                      StepReport* report = nullptr) {
  plan.validate();
  if (step < 2) throw InvalidArgument("baseline step: step must be at least 2");
  const auto start = std::chrono::steady_clock::now();
  const Method method = plan.method;
  const bool finetune = method == Method::finetune;
  const bool use_kd = !finetune && plan.weights.lambda_kd > 0.0;
  const double threshold = method == Method::lwf ? 1.0 : plan.baseline_threshold;
  const double alpha = 0.0;  // no smoothing on the classifier path
  Rng batch_rng = rng.split("batch");
  LearnerState st = prior;
  st.step = step;
  const Encoder old = prior.models.ema;
  const Tensor old_phi = prior.classifier.phi;
  st.models.online = old;
  st.models.ema = old;
  const std::size_t n_old = st.classifier.classes();

  StepReport rep;
  rep.method = method;
  rep.step = step;
  rep.old_count = n_old;
  std::vector<std::size_t> labels(train.size());
  Tensor feats;
  std::size_t n_new = 0;
  if (finetune) {
    feats = model::embed(st.models.ema, train.x);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = n_old + static_cast<std::size_t>(train.local_label[i]);
    n_new = static_cast<std::size_t>(train.num_classes);
  } else {
    auto a = baseline_assign(train, st.models.ema, st.classifier, threshold);
    labels = a.labels;
    n_new = a.new_classes;
    feats = std::move(a.features);
    rep.max_softmax = std::move(a.max_softmax);
  }
  std::vector<std::vector<std::size_t>> new_members(n_new);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= n_old) new_members[labels[i] - n_old].push_back(i);
  // new columns: class-mean direction at the mean norm of the existing columns
  double scale = 0.0;
  for (std::size_t k = 0; k < n_old; ++k) {
    double sq = 0.0;
    for (std::size_t j = 0; j < st.classifier.phi.rows(); ++j) sq += st.classifier.phi.at(j, k) * st.classifier.phi.at(j, k);
    scale += std::sqrt(sq) / static_cast<double>(n_old);
  }
  if (!(scale > 0.0)) scale = 1.0 / plan.weights.tau;
  Tensor init = num::normalize_rows(detail::group_means(feats, new_members));
  for (double& v : init.data()) v *= scale;
  st.classifier.extend(init);

  num::Adam opt;
  detail::register_encoder(opt, st.models.online, plan.lr * plan.backbone_lr_factor, plan.lr);
  opt.add(&st.classifier.phi, plan.lr);
  const auto groups = detail::groups_of(labels);
  const std::size_t P = std::min(plan.P, groups.size());
  const std::size_t iters = detail::iterations_per_epoch(train.size(), plan);
  const std::size_t n_all = st.classifier.classes();
  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    EpochTrace tr;
    tr.epoch = epoch;
    for (std::size_t it = 0; it < iters; ++it) {
      const auto batch = stream::pk_sample(groups, P, plan.K, batch_rng);
      std::vector<std::size_t> y(batch.size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = labels[batch.indices[i]];
      const Tensor xb = train.x.select_rows(batch.indices);
      Graph g;
      const auto b = model::bind(g, st.models.online, true);
      Var phi = g.parameter(st.classifier.phi);
      const auto out = model::forward(g, st.models.online, b, g.constant(xb), model::Mode::train);
      Var logits = g.matmul(out.feature, phi);
      Var id = loss::detail::cross_entropy(g, logits, y);
      Var trip = loss::triplet(g, out.feature, detail::as_int(y), plan.weights.margin);
      std::optional<Var> kd;
      if (use_kd && n_old > 0) {
        const std::size_t B = batch.size();
        std::vector<std::size_t> flat;
        flat.reserve(B * n_old);
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t k = 0; k < n_old; ++k) flat.push_back(i * n_all + k);
        Var new_old = g.reshape(g.gather(logits, std::move(flat)), {B, n_old});
        kd = loss::kd(g, new_old, num::matmul(model::embed(old, xb), old_phi));
      }
      Var total = loss::baseline_total(g, id, trip, kd, plan.weights);
      g.backward(total);
      auto grads = detail::encoder_grads(g, b);
      grads.push_back(g.grad(phi));
      opt.step(grads);
      model::ema_update(st.models, alpha);
      detail::accumulate(tr, g, total, trip, id, std::nullopt, std::nullopt, kd);
    }
    detail::finish(tr);
    rep.trace.push_back(tr);
    detail::emit(hooks, method, step, st, nullptr, tr, start);
  }
  rep.sample_labels = labels;
  if (report) *report = std::move(rep);
  return st;
}

/// Upper bound: prototype training on every step's data with true identities.
/// `labels` are dense global class ids; classes beyond the bank are appended
/// at their class mean.
inline LearnerState run_joint_step(const TrainSplit& all_data, std::span<const std::size_t> labels,
                                   const LearnerState& prior, int step, const StepPlan& plan, Rng rng,
                                   const Hooks& hooks = {}, StepReport* report = nullptr) {
  plan.validate();
  Rng batch_rng = rng.split("batch");
  LearnerState st = prior;
  st.step = step;
  st.models.online = prior.models.ema;
  st.models.ema = prior.models.ema;
  const std::size_t old_count = st.bank.size();
  std::size_t n_classes = old_count;
  for (std::size_t l : labels) n_classes = std::max(n_classes, l + 1);
  std::vector<std::vector<std::size_t>> new_members(n_classes - old_count);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= old_count) new_members[labels[i] - old_count].push_back(i);
  if (!new_members.empty())
    st.bank.extend(detail::group_means(model::embed(st.models.ema, all_data.x), new_members), step);
  auto trace = detail::supervised_prototype_training(st, all_data, labels, plan, plan.lr, plan.lr, batch_rng,
                                                     Method::joint, hooks);
  if (report) {
    report->method = Method::joint;
    report->step = step;
    report->old_count = old_count;
    report->sample_labels.assign(labels.begin(), labels.end());
    report->trace = std::move(trace);
  }
  return st;
}

}  // namespace extendova::pipeline
