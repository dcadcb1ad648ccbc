#pragma once

// Retrieval and identification metrics. Every function reads frozen models and
// evaluation-side ground truth; nothing here feeds back into training.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extendova/errors.hpp"
#include "extendova/model.hpp"
#include "extendova/pipeline.hpp"
#include "extendova/synthstream.hpp"

namespace extendova::eval {

using num::Tensor;

struct RankingResult {
  double mAP = 0.0;
  std::vector<double> cmc;          // cmc[r] = fraction of valid queries matched at rank <= r + 1
  std::vector<double> ap;           // per valid query
  std::size_t valid_queries = 0;
  std::size_t excluded_queries = 0;  // no cross-camera positive

  [[nodiscard]] double rank(std::size_t k) const {
    if (cmc.empty()) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
};

/// Cosine ranking of every query against the gallery. Gallery entries with the
/// query's identity and camera are junk and skipped; positives share the
/// identity from another camera. Ties in score keep gallery order.
inline RankingResult evaluate_retrieval(const Tensor& qf, std::span<const int> q_ids, std::span<const int> q_cams,
                                        const Tensor& gf, std::span<const int> g_ids, std::span<const int> g_cams) {
  if (qf.rows() != q_ids.size() || q_ids.size() != q_cams.size() || gf.rows() != g_ids.size() ||
      g_ids.size() != g_cams.size())
    throw InvalidArgument("evaluate_retrieval: inconsistent lengths");
  if (qf.rows() > 0 && gf.rows() > 0 && qf.cols() != gf.cols())
    throw InvalidArgument("evaluate_retrieval: feature widths differ");
  const Tensor q = num::normalize_rows(qf);
  const Tensor g = num::normalize_rows(gf);
  const std::size_t ng = g.rows();
  RankingResult res;
  res.cmc.assign(ng, 0.0);
  std::vector<std::size_t> order(ng);
  std::vector<double> score(ng);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < ng; ++j) score[j] = num::dot(q.row(i), g.row(j));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    std::size_t rank = 0, hits = 0, first_hit = 0;
    double ap = 0.0;
    std::size_t positives = 0;
    for (std::size_t j = 0; j < ng; ++j)
      if (g_ids[j] == q_ids[i] && g_cams[j] != q_cams[i]) ++positives;
    if (positives == 0) {
      ++res.excluded_queries;
      continue;
    }
    for (std::size_t j : order) {
      if (g_ids[j] == q_ids[i] && g_cams[j] == q_cams[i]) continue;  // junk
      ++rank;
      if (g_ids[j] == q_ids[i]) {
        ++hits;
        if (hits == 1) first_hit = rank;
        ap += static_cast<double>(hits) / static_cast<double>(rank);
        if (hits == positives) break;
      }
    }
    res.ap.push_back(ap / static_cast<double>(positives));
    for (std::size_t r = first_hit - 1; r < ng; ++r) res.cmc[r] += 1.0;
    ++res.valid_queries;
  }
  if (res.valid_queries > 0) {
    for (double& c : res.cmc) c /= static_cast<double>(res.valid_queries);
    res.mAP = std::accumulate(res.ap.begin(), res.ap.end(), 0.0) / static_cast<double>(res.valid_queries);
  }
  return res;
}

/// Every test sample queries all other samples of the split.
inline RankingResult evaluate_retrieval(const model::Encoder& enc, const stream::TestSplit& test) {
  const Tensor f = model::embed(enc, test.x);
  return evaluate_retrieval(f, test.global_id, test.camera_id, f, test.global_id, test.camera_id);
}

// ---------------------------------------------------------------------------

/// Global identity of each pseudo-global class (-1 when unknown). Built only
/// on the evaluation side.
using Registry = std::vector<int>;

/// Records the identity behind every class created at a step: the majority
/// true identity among the samples carrying that label.
inline void update_registry(Registry& reg, const pipeline::StepReport& rep, std::span<const int> train_global_id) {
  std::map<std::size_t, std::map<int, std::size_t>> tally;
  for (std::size_t i = 0; i < rep.sample_labels.size(); ++i) {
    const std::size_t l = rep.sample_labels[i];
    if (l >= rep.old_count) ++tally[l][train_global_id[i]];
  }
  for (const auto& [label, counts] : tally) {
    if (reg.size() <= label) reg.resize(label + 1, -1);
    int best = -1;
    std::size_t n = 0;
    for (const auto& [gid, c] : counts)
      if (c > n) {
        best = gid;
        n = c;
      }
    reg[label] = best;
  }
}

struct IdentificationReport {
  std::optional<double> precision;  // absent when nothing was selected
  double recall = 0.0;
  std::optional<double> assignment_accuracy;  // absent when nothing was selected
  std::size_t selected = 0;
  std::size_t truly_seen = 0;
  std::size_t correct_selected = 0;
};

/// Precision and recall of a selected-as-seen class set against the truth;
/// assignment accuracy counts selected classes mapped to the right identity.
inline IdentificationReport identification_metrics(const std::vector<bool>& selected,
                                                   const std::vector<std::size_t>& assigned,
                                                   const std::vector<stream::ClassTruth>& truth,
                                                   const Registry& registry) {
  if (selected.size() != truth.size() || assigned.size() != truth.size())
    throw InvalidArgument("identification_metrics: truth does not cover all classes");
  IdentificationReport r;
  std::size_t assigned_ok = 0;
  for (std::size_t y = 0; y < truth.size(); ++y) {
    if (truth[y].seen) ++r.truly_seen;
    if (!selected[y]) continue;
    ++r.selected;
    if (truth[y].seen) ++r.correct_selected;
    if (assigned[y] < registry.size() && registry[assigned[y]] == truth[y].global_id) ++assigned_ok;
  }
  if (r.selected > 0) {
    r.precision = static_cast<double>(r.correct_selected) / static_cast<double>(r.selected);
    r.assignment_accuracy = static_cast<double>(assigned_ok) / static_cast<double>(r.selected);
  }
  r.recall = r.truly_seen ? static_cast<double>(r.correct_selected) / static_cast<double>(r.truly_seen) : 0.0;
  return r;
}

inline IdentificationReport identification_metrics(const pipeline::PseudoLabelState& state,
                                                   const std::vector<stream::ClassTruth>& truth,
                                                   const Registry& registry) {
  std::vector<bool> sel(state.classes.size());
  std::vector<std::size_t> lab(state.classes.size());
  for (std::size_t y = 0; y < sel.size(); ++y) {
    sel[y] = state.classes[y].seen;
    lab[y] = state.classes[y].label;
  }
  return identification_metrics(sel, lab, truth, registry);
}

/// Class-level selection from per-sample flags: a class is selected iff all its
/// samples are flagged.
inline std::vector<bool> select_all_flagged(const stream::TrainSplit& train, const std::vector<bool>& flags) {
  std::vector<bool> sel(static_cast<std::size_t>(train.num_classes), true);
  std::vector<bool> any(sel.size(), false);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto y = static_cast<std::size_t>(train.local_label[i]);
    any[y] = true;
    if (!flags[i]) sel[y] = false;
  }
  for (std::size_t y = 0; y < sel.size(); ++y) sel[y] = sel[y] && any[y];
  return sel;
}

/// Fraction of samples of truly seen classes whose nearest active prototype is
/// an old class carrying the sample's identity.
inline double seen_class_accuracy(const model::Encoder& enc, const model::MemoryBank& bank, std::size_t old_count,
                                  const stream::TrainSplit& train, const std::vector<stream::ClassTruth>& truth,
                                  const Registry& registry) {
  const Tensor f = model::embed(enc, train.x);
  std::size_t n = 0, ok = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& t = truth.at(static_cast<std::size_t>(train.local_label[i]));
    if (!t.seen) continue;
    ++n;
    const std::size_t k = bank.nearest(f.row(i)).first;
    if (k < old_count && k < registry.size() && registry[k] == t.global_id) ++ok;
  }
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------

struct CurvePoint {
  int step;
  double mAP;
  double rank1;
};

/// Evaluates each step's model on one frozen test split.
inline std::vector<CurvePoint> forgetting_curve(const std::vector<const model::Encoder*>& checkpoints,
                                                const stream::TestSplit& test) {
  std::vector<CurvePoint> out;
  for (std::size_t s = 0; s < checkpoints.size(); ++s) {
    const auto r = evaluate_retrieval(*checkpoints[s], test);
    out.push_back({static_cast<int>(s) + 1, r.mAP, r.rank(1)});
  }
  return out;
}

struct Histogram {
  std::vector<double> mass;  // sums to 1
};

struct ConfidenceHistogram {
  std::optional<Histogram> seen;
  std::optional<Histogram> unseen;
  std::optional<double> overlap;  // sum of binwise minima
};

inline std::optional<Histogram> histogram(std::span<const double> scores, std::size_t bins) {
  if (scores.empty()) return std::nullopt;
  Histogram h;
  h.mass.assign(bins, 0.0);
  for (double s : scores) {
    const double c = std::clamp(s, 0.0, 1.0);
    const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
    h.mass[b] += 1.0 / static_cast<double>(scores.size());
  }
  return h;
}

/// Normalized histograms of scores in [0, 1] for seen and unseen samples.
inline ConfidenceHistogram confidence_histogram(std::span<const double> seen, std::span<const double> unseen,
                                                std::size_t bins) {
  if (bins < 2) throw InvalidArgument("confidence_histogram: needs at least two bins");
  ConfidenceHistogram out;
  out.seen = histogram(seen, bins);
  out.unseen = histogram(unseen, bins);
  if (out.seen && out.unseen) {
    double o = 0.0;
    for (std::size_t b = 0; b < bins; ++b) o += std::min(out.seen->mass[b], out.unseen->mass[b]);
    out.overlap = o;
  }
  return out;
}

/// Splits per-sample scores by the truth of the sample's class.
inline ConfidenceHistogram confidence_histogram(const stream::TrainSplit& train, std::span<const double> scores,
                                                const std::vector<stream::ClassTruth>& truth, std::size_t bins) {
  std::vector<double> s, u;
  for (std::size_t i = 0; i < train.size(); ++i)
    (truth.at(static_cast<std::size_t>(train.local_label[i])).seen ? s : u).push_back(scores[i]);
  return confidence_histogram(s, u, bins);
}

inline nlohmann::json to_json(const ConfidenceHistogram& h) {
  nlohmann::json j = nlohmann::json::object();
  j["seen"] = h.seen ? nlohmann::json(h.seen->mass) : nlohmann::json(nullptr);
  j["unseen"] = h.unseen ? nlohmann::json(h.unseen->mass) : nlohmann::json(nullptr);
  j["overlap"] = h.overlap ? nlohmann::json(*h.overlap) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

struct MetricRow {
  std::string method;
  int step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  if (std::trunc(v) == v && std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline const char* kCsvHeader = "method,step,split,metric,value,seed";

inline void write_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << kCsvHeader << '\n';
  for (const auto& r : rows)
    os << r.method << ',' << r.step << ',' << r.split << ',' << r.metric << ',' << format_double(r.value) << ','
       << r.seed << '\n';
}

inline std::vector<MetricRow> read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw ConfigError("metrics csv: missing header");
  std::vector<MetricRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto c = line.find(',', pos);
      f.push_back(line.substr(pos, c == std::string::npos ? std::string::npos : c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (f.size() != 6) throw ConfigError("metrics csv: expected 6 fields");
    rows.push_back({f[0], std::stoi(f[1]), f[2], f[3], std::stod(f[4]), std::stoull(f[5])});
  }
  return rows;
}

}  // namespace extendova::eval
