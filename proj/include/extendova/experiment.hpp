#pragma once

// Multi-method, multi-seed experiment runner with step-boundary checkpoints.
//
// Run directory layout:
//   config.json                      resolved configuration
//   run.json                         {"complete": bool, "methods": [...], "seeds": [...]}
//   metrics.csv                      method,step,split,metric,value,seed
//   seed_<s>/step_1.json             shared initial-step checkpoint
//   seed_<s>/<method>/step_<t>.json  checkpoint + metric rows of step t
//   seed_<s>/<method>/hist_step_<t>.json
//   seed_<s>/<method>/events.jsonl

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extendova/checkpoint.hpp"
#include "extendova/errors.hpp"
#include "extendova/eval.hpp"
#include "extendova/pipeline.hpp"
#include "extendova/stream_io.hpp"
#include "extendova/synthstream.hpp"

namespace extendova::experiment {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::Method;
using pipeline::StepPlan;

inline constexpr int kSchemaVersion = 1;

struct ExperimentConfig {
  stream::StreamConfig stream;
  std::optional<std::string> stream_file;  // fixed stream for every seed
  std::vector<Method> methods = {Method::extendova, Method::baseline, Method::finetune, Method::joint};
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "run";
  bool checkpoints = true;
  std::size_t hidden = 64;
  std::size_t d_out = 32;
  StepPlan plan;
  std::map<Method, StepPlan> overrides;  // resolved per-method plans
  std::size_t histogram_bins = 20;

  [[nodiscard]] StepPlan plan_for(Method m) const {
    auto it = overrides.find(m);
    StepPlan p = it == overrides.end() ? plan : it->second;
    p.method = m;
    return p;
  }
  [[nodiscard]] model::EncoderShape encoder_shape() const {
    return {static_cast<std::size_t>(stream.d_in), hidden, d_out};
  }
};

namespace detail {

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key + ": wrong value type");
  }
}

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& scope) {
  if (!j.is_object()) throw ConfigError(scope + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(scope + "." + k + ": unknown key");
}

}  // namespace detail

inline StepPlan plan_from_json(const json& j, StepPlan p, const std::string& scope) {
  detail::reject_unknown(j, {"epochs", "early_reg_epochs", "lr", "backbone_lr_factor", "P", "K", "lambda_kd",
                             "lambda_aux", "lambda_cd", "margin", "tau", "prototype_momentum", "ema_alpha",
                             "ova_threshold", "baseline_threshold", "use_aux", "use_refinement", "use_cd",
                             "cd_whole_step", "cd_pairing", "ova_epochs", "ova_lr"},
                         scope);
  using detail::get_as;
  for (const auto& [k, v] : j.items()) {
    const std::string key = scope + "." + k;
    if (k == "epochs") p.epochs = get_as<int>(v, key);
    else if (k == "early_reg_epochs") p.early_reg_epochs = get_as<int>(v, key);
    else if (k == "lr") p.lr = get_as<double>(v, key);
    else if (k == "backbone_lr_factor") p.backbone_lr_factor = get_as<double>(v, key);
    else if (k == "P") p.P = get_as<std::size_t>(v, key);
    else if (k == "K") p.K = get_as<std::size_t>(v, key);
    else if (k == "lambda_kd") p.weights.lambda_kd = get_as<double>(v, key);
    else if (k == "lambda_aux") p.weights.lambda_aux = get_as<double>(v, key);
    else if (k == "lambda_cd") p.weights.lambda_cd = get_as<double>(v, key);
    else if (k == "margin") p.weights.margin = get_as<double>(v, key);
    else if (k == "tau") p.weights.tau = get_as<double>(v, key);
    else if (k == "prototype_momentum") p.prototype_momentum = get_as<double>(v, key);
    else if (k == "ema_alpha") p.ema_alpha = get_as<double>(v, key);
    else if (k == "ova_threshold") p.ova_threshold = get_as<double>(v, key);
    else if (k == "baseline_threshold") p.baseline_threshold = get_as<double>(v, key);
    else if (k == "use_aux") p.use_aux = get_as<bool>(v, key);
    else if (k == "use_refinement") p.use_refinement = get_as<bool>(v, key);
    else if (k == "use_cd") p.use_cd = get_as<bool>(v, key);
    else if (k == "cd_whole_step") p.cd_whole_step = get_as<bool>(v, key);
    else if (k == "cd_pairing") {
      const auto s = get_as<std::string>(v, key);
      if (s == "paired") p.cd_pairing = loss::CdPairing::paired;
      else if (s == "all_pairs") p.cd_pairing = loss::CdPairing::all_pairs;
      else throw ConfigError(key + ": expected 'paired' or 'all_pairs'");
    } else if (k == "ova_epochs") p.ova_epochs = get_as<int>(v, key);
    else if (k == "ova_lr") p.ova_lr = get_as<double>(v, key);
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(scope + ": " + e.what());
  }
  return p;
}

inline json plan_to_json(const StepPlan& p) {
  return json{{"epochs", p.epochs},
              {"early_reg_epochs", p.early_reg_epochs},
              {"lr", p.lr},
              {"backbone_lr_factor", p.backbone_lr_factor},
              {"P", p.P},
              {"K", p.K},
              {"lambda_kd", p.weights.lambda_kd},
              {"lambda_aux", p.weights.lambda_aux},
              {"lambda_cd", p.weights.lambda_cd},
              {"margin", p.weights.margin},
              {"tau", p.weights.tau},
              {"prototype_momentum", p.prototype_momentum},
              {"ema_alpha", p.ema_alpha},
              {"ova_threshold", p.ova_threshold},
              {"baseline_threshold", p.baseline_threshold},
              {"use_aux", p.use_aux},
              {"use_refinement", p.use_refinement},
              {"use_cd", p.use_cd},
              {"cd_whole_step", p.cd_whole_step},
              {"cd_pairing", p.cd_pairing == loss::CdPairing::paired ? "paired" : "all_pairs"},
              {"ova_epochs", p.ova_epochs},
              {"ova_lr", p.ova_lr}};
}

/// Strict parse of an experiment configuration; every error names its key.
inline ExperimentConfig config_from_json(const json& j) {
  detail::reject_unknown(j, {"schema_version", "stream", "stream_file", "methods", "seeds", "output_dir",
                             "checkpoints", "encoder", "plan", "plan_overrides", "histogram_bins"},
                         "config");
  using detail::get_as;
  if (!j.contains("schema_version")) throw ConfigError("config.schema_version: missing");
  if (get_as<int>(j["schema_version"], "config.schema_version") != kSchemaVersion)
    throw ConfigError("config.schema_version: unsupported version");
  ExperimentConfig c;
  if (j.contains("stream")) c.stream = stream::config_from_json(j["stream"]);
  if (j.contains("stream_file")) c.stream_file = get_as<std::string>(j["stream_file"], "config.stream_file");
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : get_as<std::vector<std::string>>(j["methods"], "config.methods")) {
      try {
        c.methods.push_back(pipeline::method_from_string(m));
      } catch (const ConfigError&) {
        throw ConfigError("config.methods: unknown method '" + m + "'");
      }
    }
    if (c.methods.empty()) throw ConfigError("config.methods: must not be empty");
    if (std::set<Method>(c.methods.begin(), c.methods.end()).size() != c.methods.size())
      throw ConfigError("config.methods: duplicate method");
  }
  if (j.contains("seeds")) {
    c.seeds = get_as<std::vector<std::uint64_t>>(j["seeds"], "config.seeds");
    if (c.seeds.empty()) throw ConfigError("config.seeds: must not be empty");
  }
  if (j.contains("output_dir")) c.output_dir = get_as<std::string>(j["output_dir"], "config.output_dir");
  if (j.contains("checkpoints")) c.checkpoints = get_as<bool>(j["checkpoints"], "config.checkpoints");
  if (j.contains("histogram_bins")) {
    c.histogram_bins = get_as<std::size_t>(j["histogram_bins"], "config.histogram_bins");
    if (c.histogram_bins < 2) throw ConfigError("config.histogram_bins: must be at least 2");
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    detail::reject_unknown(e, {"hidden", "d_out"}, "config.encoder");
    if (e.contains("hidden")) c.hidden = get_as<std::size_t>(e["hidden"], "config.encoder.hidden");
    if (e.contains("d_out")) c.d_out = get_as<std::size_t>(e["d_out"], "config.encoder.d_out");
    if (c.hidden == 0 || c.d_out == 0) throw ConfigError("config.encoder: sizes must be positive");
  }
  if (j.contains("plan")) c.plan = plan_from_json(j["plan"], c.plan, "config.plan");
  else c.plan.validate();
  if (j.contains("plan_overrides")) {
    const auto& o = j["plan_overrides"];
    if (!o.is_object()) throw ConfigError("config.plan_overrides: expected an object");
    for (const auto& [name, body] : o.items()) {
      Method m;
      try {
        m = pipeline::method_from_string(name);
      } catch (const ConfigError&) {
        throw ConfigError("config.plan_overrides." + name + ": unknown method");
      }
      c.overrides[m] = plan_from_json(body, c.plan, "config.plan_overrides." + name);
    }
  }
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(pipeline::to_string(m));
  json j{{"schema_version", kSchemaVersion},
         {"stream", stream::config_to_json(c.stream)},
         {"methods", methods},
         {"seeds", c.seeds},
         {"output_dir", c.output_dir},
         {"checkpoints", c.checkpoints},
         {"encoder", {{"hidden", c.hidden}, {"d_out", c.d_out}}},
         {"plan", plan_to_json(c.plan)},
         {"histogram_bins", c.histogram_bins}};
  if (c.stream_file) j["stream_file"] = *c.stream_file;
  if (!c.overrides.empty()) {
    json o = json::object();
    for (const auto& [m, p] : c.overrides) o[pipeline::to_string(m)] = plan_to_json(p);
    j["plan_overrides"] = o;
  }
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

/// Relative output directories resolve against EXTENDOVA_OUTPUT_ROOT when set.
inline fs::path resolve_output_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("EXTENDOVA_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Stream and evaluation helpers

inline std::vector<stream::StepDataset> stream_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.stream_file) return stream::read_stream(*cfg.stream_file).steps;
  stream::StreamConfig s = cfg.stream;
  s.seed = seed;
  return stream::generate_stream(s);
}

/// Test samples of every camera encountered up to step t (1-based).
inline stream::TestSplit test_up_to(const std::vector<stream::StepDataset>& steps, int t) {
  stream::TestSplit out;
  for (int s = 0; s < t; ++s) out.append(steps[static_cast<std::size_t>(s)].test);
  return out;
}

/// Training data of steps 1..t with dense identity labels in order of first
/// appearance; step-1 classes keep their labels.
struct JointData {
  stream::TrainSplit train;
  std::vector<std::size_t> labels;
};

inline JointData joint_data(const std::vector<stream::StepDataset>& steps, int t) {
  JointData jd;
  std::map<int, std::size_t> dense;
  const auto& s1 = steps[0];
  std::size_t next = static_cast<std::size_t>(s1.train.num_classes);
  for (std::size_t i = 0; i < s1.train.size(); ++i)
    dense.emplace(s1.train_global_id[i], static_cast<std::size_t>(s1.train.local_label[i]));
  std::vector<double> data;
  for (int s = 0; s < t; ++s) {
    const auto& ds = steps[static_cast<std::size_t>(s)];
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      const int gid = ds.train_global_id[i];
      std::size_t label;
      if (s == 0) {
        label = static_cast<std::size_t>(ds.train.local_label[i]);
      } else {
        auto it = dense.find(gid);
        if (it == dense.end()) it = dense.emplace(gid, next++).first;
        label = it->second;
      }
      jd.labels.push_back(label);
      jd.train.camera_id.push_back(ds.train.camera_id[i]);
      jd.train.local_label.push_back(static_cast<int>(label));
      auto r = ds.train.x.row(i);
      data.insert(data.end(), r.begin(), r.end());
    }
  }
  jd.train.num_classes = static_cast<int>(next);
  jd.train.x = num::Tensor::matrix(jd.labels.size(), steps[0].train.x.cols(), std::move(data));
  return jd;
}

inline void add_rows(std::vector<eval::MetricRow>& rows, Method m, int step, std::uint64_t seed,
                     const std::string& split, const std::string& metric, double value) {
  rows.push_back({pipeline::to_string(m), step, split, metric, value, seed});
}

inline void add_retrieval_rows(std::vector<eval::MetricRow>& rows, Method m, int step, std::uint64_t seed,
                               const model::Encoder& enc, const std::vector<stream::StepDataset>& steps) {
  const auto all = eval::evaluate_retrieval(enc, test_up_to(steps, step));
  add_rows(rows, m, step, seed, "all", "mAP", all.mAP);
  add_rows(rows, m, step, seed, "all", "rank1", all.rank(1));
  add_rows(rows, m, step, seed, "all", "rank5", all.rank(5));
  const auto first = eval::evaluate_retrieval(enc, steps[0].test);
  add_rows(rows, m, step, seed, "step1", "mAP", first.mAP);
  add_rows(rows, m, step, seed, "step1", "rank1", first.rank(1));
}

inline void add_identification_rows(std::vector<eval::MetricRow>& rows, Method m, int step, std::uint64_t seed,
                                    const std::string& prefix, const eval::IdentificationReport& r) {
  if (r.precision) add_rows(rows, m, step, seed, "train", prefix + "_precision", *r.precision);
  add_rows(rows, m, step, seed, "train", prefix + "_recall", r.recall);
  if (r.assignment_accuracy)
    add_rows(rows, m, step, seed, "train", prefix + "_assignment_accuracy", *r.assignment_accuracy);
}

/// Registry of the shared initial step: class k carries the identity of its
/// samples.
inline eval::Registry initial_registry(const stream::StepDataset& s1) {
  pipeline::StepReport rep;
  rep.old_count = 0;
  rep.sample_labels.assign(s1.train.local_label.begin(), s1.train.local_label.end());
  eval::Registry reg;
  eval::update_registry(reg, rep, s1.train_global_id);
  return reg;
}

struct StepOutcome {
  pipeline::LearnerState state;
  pipeline::StepReport report;
  std::vector<eval::MetricRow> rows;
  json histograms = json::object();
};

/// One incremental step of `method`, scored on the evaluation side.
inline StepOutcome run_step(const ExperimentConfig& cfg, Method method, std::uint64_t seed,
                            const std::vector<stream::StepDataset>& steps, int t,
                            const pipeline::LearnerState& prior, eval::Registry& registry,
                            pipeline::EventLog* log = nullptr) {
  const auto& ds = steps[static_cast<std::size_t>(t - 1)];
  const StepPlan plan = cfg.plan_for(method);
  const num::Rng rng = num::Rng(seed).split(pipeline::to_string(method)).split(static_cast<std::uint64_t>(t));
  StepOutcome out;
  std::optional<double> seen_acc;
  pipeline::Hooks hooks;
  hooks.log = log;
  const std::size_t old_count = method == Method::extendova || method == Method::joint ? prior.bank.size()
                                                                                         : prior.classifier.classes();
  if (method == Method::extendova) {
    hooks.on_epoch = [&](const pipeline::EpochEvent& ev) {
      if (ev.epoch == plan.early_reg_epochs)
        seen_acc = eval::seen_class_accuracy(ev.state.models.ema, ev.state.bank, old_count, ds.train,
                                             ds.overlap_truth, registry);
    };
  }
  switch (method) {
    case Method::extendova:
      out.state = pipeline::run_incremental_step(ds.train, prior, t, plan, rng, hooks, &out.report);
      break;
    case Method::baseline:
    case Method::lwf:
    case Method::finetune:
      out.state = pipeline::run_baseline_step(ds.train, prior, t, plan, rng, hooks, &out.report);
      break;
    case Method::joint: {
      const auto jd = joint_data(steps, t);
      out.state = pipeline::run_joint_step(jd.train, jd.labels, prior, t, plan, rng, hooks, &out.report);
      break;
    }
  }
  // identification metrics use the registry as it stood before the step
  const auto& truth = ds.overlap_truth;
  const std::size_t bins = cfg.histogram_bins;
  if (method == Method::extendova) {
    const auto& rep = out.report;
    add_identification_rows(out.rows, method, t, seed, "raw", eval::identification_metrics(*rep.initial_labels, truth, registry));
    add_identification_rows(out.rows, method, t, seed, "refined", eval::identification_metrics(*rep.final_labels, truth, registry));
    add_rows(out.rows, method, t, seed, "train", "flips", static_cast<double>(rep.final_labels->flips));
    add_rows(out.rows, method, t, seed, "train", "c_sc", static_cast<double>(rep.final_labels->seen_classes().size()));
    add_rows(out.rows, method, t, seed, "train", "c_uc", static_cast<double>(rep.final_labels->unseen_classes().size()));
    if (seen_acc) add_rows(out.rows, method, t, seed, "train", "seen_acc_early", *seen_acc);
    const auto raw = eval::confidence_histogram(ds.train, rep.initial_identification->scores, truth, bins);
    out.histograms["ova_raw"] = eval::to_json(raw);
    if (raw.overlap) add_rows(out.rows, method, t, seed, "train", "ova_raw_overlap", *raw.overlap);
    if (rep.refinement_identification) {
      const auto post = eval::confidence_histogram(ds.train, rep.refinement_identification->scores, truth, bins);
      out.histograms["ova_post"] = eval::to_json(post);
      if (post.overlap) add_rows(out.rows, method, t, seed, "train", "ova_post_overlap", *post.overlap);
    }
  } else if (method == Method::baseline || method == Method::lwf) {
    const auto& ms = out.report.max_softmax;
    const double threshold = method == Method::lwf ? 1.0 : plan.baseline_threshold;
    std::vector<bool> flags(ms.size());
    for (std::size_t i = 0; i < ms.size(); ++i) flags[i] = ms[i] > threshold;
    const auto sel = eval::select_all_flagged(ds.train, flags);
    std::vector<std::size_t> assigned(sel.size(), SIZE_MAX);
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      assigned[static_cast<std::size_t>(ds.train.local_label[i])] = out.report.sample_labels[i];
    add_identification_rows(out.rows, method, t, seed, "raw", eval::identification_metrics(sel, assigned, truth, registry));
    const auto h = eval::confidence_histogram(ds.train, ms, truth, bins);
    out.histograms["softmax"] = eval::to_json(h);
    if (h.overlap) add_rows(out.rows, method, t, seed, "train", "softmax_overlap", *h.overlap);
  }
  eval::update_registry(registry, out.report, ds.train_global_id);
  std::vector<eval::MetricRow> retrieval;
  add_retrieval_rows(retrieval, method, t, seed, out.state.models.ema, steps);
  out.rows.insert(out.rows.begin(), retrieval.begin(), retrieval.end());
  return out;
}

// ---------------------------------------------------------------------------
// Runner

struct RunOptions {
  std::optional<int> halt_after_step;  // stop every (method, seed) after this step
  bool quiet = true;
};

struct RunResult {
  std::vector<eval::MetricRow> rows;
  bool complete = true;
  fs::path dir;
};

namespace detail {

inline json rows_to_json(const std::vector<eval::MetricRow>& rows) {
  json a = json::array();
  for (const auto& r : rows)
    a.push_back({{"method", r.method}, {"step", r.step}, {"split", r.split}, {"metric", r.metric},
                 {"value", r.value}, {"seed", r.seed}});
  return a;
}

inline std::vector<eval::MetricRow> rows_from_json(const json& a) {
  std::vector<eval::MetricRow> rows;
  for (const auto& r : a)
    rows.push_back({r.at("method").get<std::string>(), r.at("step").get<int>(), r.at("split").get<std::string>(),
                    r.at("metric").get<std::string>(), r.at("value").get<double>(),
                    r.at("seed").get<std::uint64_t>()});
  return rows;
}

inline json registry_to_json(const eval::Registry& r) { return json(r); }

}  // namespace detail

/// Runs every (method, seed); with checkpoints enabled, completed steps found
/// in the run directory are loaded instead of recomputed.
inline RunResult run_experiment(const ExperimentConfig& cfg, fs::path dir, const RunOptions& opt = {}) {
  RunResult result;
  result.dir = dir;
  const bool persist = cfg.checkpoints && !dir.empty();
  if (!dir.empty()) {
    fs::create_directories(dir);
    checkpoint::write_json_atomic((dir / "config.json").string(), config_to_json(cfg));
  }
  std::ostringstream log_out;
  for (std::uint64_t seed : cfg.seeds) {
    const auto steps = stream_for_seed(cfg, seed);
    const int T = static_cast<int>(steps.size());
    const fs::path seed_dir = dir / ("seed_" + std::to_string(seed));
    if (persist) fs::create_directories(seed_dir);

    // shared initial step
    pipeline::LearnerState s1;
    const fs::path s1_path = seed_dir / "step_1.json";
    if (persist && fs::exists(s1_path)) {
      s1 = checkpoint::state_from_json(checkpoint::read_json(s1_path.string()));
    } else {
      StepPlan p = cfg.plan;
      s1 = pipeline::train_initial_step(steps[0].train, p, cfg.encoder_shape(), num::Rng(seed).split("step1"));
      if (persist) checkpoint::write_json_atomic(s1_path.string(), checkpoint::state_to_json(s1));
    }
    const eval::Registry reg1 = initial_registry(steps[0]);
    std::vector<eval::MetricRow> step1_rows;

    for (Method m : cfg.methods) {
      const fs::path mdir = seed_dir / pipeline::to_string(m);
      if (persist) fs::create_directories(mdir);
      std::optional<pipeline::EventLog> log;
      if (persist) log.emplace((mdir / "events.jsonl").string());
      pipeline::LearnerState state = s1;
      eval::Registry reg = reg1;
      add_retrieval_rows(result.rows, m, 1, seed, s1.models.ema, steps);
      for (int t = 2; t <= T; ++t) {
        if (opt.halt_after_step && t > *opt.halt_after_step) {
          result.complete = false;
          break;
        }
        const fs::path ck = mdir / ("step_" + std::to_string(t) + ".json");
        if (persist && fs::exists(ck)) {
          const json j = checkpoint::read_json(ck.string());
          state = checkpoint::state_from_json(j.at("state"));
          reg = j.at("registry").get<eval::Registry>();
          const auto rows = detail::rows_from_json(j.at("rows"));
          result.rows.insert(result.rows.end(), rows.begin(), rows.end());
          continue;
        }
        auto outcome = run_step(cfg, m, seed, steps, t, state, reg, log ? &*log : nullptr);
        state = std::move(outcome.state);
        if (persist) {
          checkpoint::write_json_atomic((mdir / ("hist_step_" + std::to_string(t) + ".json")).string(),
                                        outcome.histograms);
          checkpoint::write_json_atomic(ck.string(), json{{"state", checkpoint::state_to_json(state)},
                                                          {"registry", detail::registry_to_json(reg)},
                                                          {"rows", detail::rows_to_json(outcome.rows)}});
        }
        result.rows.insert(result.rows.end(), outcome.rows.begin(), outcome.rows.end());
      }
    }
  }
  if (!dir.empty()) {
    {
      std::ofstream f(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
      eval::write_csv(f, result.rows);
    }
    json methods = json::array();
    for (Method m : cfg.methods) methods.push_back(pipeline::to_string(m));
    checkpoint::write_json_atomic((dir / "run.json").string(),
                                  json{{"complete", result.complete}, {"methods", methods}, {"seeds", cfg.seeds}});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Report

struct SummaryLine {
  std::string method;
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single seed
  std::size_t n = 0;
};

struct Report {
  bool partial = false;
  std::vector<SummaryLine> summary;
  std::vector<SummaryLine> curve;  // metric = "step<t>_step1_mAP"
};

namespace detail {

inline SummaryLine summarize(const std::string& method, const std::string& metric, const std::vector<double>& v) {
  SummaryLine s{method, metric, 0.0, 0.0, v.size()};
  if (v.empty()) return s;
  for (double x : v) s.mean += x / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

}  // namespace detail

/// Final-step retrieval, forgetting and identification per method, aggregated
/// over seeds in method order of first appearance.
inline Report build_report(const std::vector<eval::MetricRow>& rows, bool complete) {
  Report rep;
  rep.partial = !complete;
  std::vector<std::string> methods;
  std::map<std::pair<std::string, std::uint64_t>, int> last_step;
  for (const auto& r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    auto& ls = last_step[{r.method, r.seed}];
    ls = std::max(ls, r.step);
  }
  auto value = [&](const std::string& m, std::uint64_t seed, int step, const std::string& split,
                   const std::string& metric) -> std::optional<double> {
    for (const auto& r : rows)
      if (r.method == m && r.seed == seed && r.step == step && r.split == split && r.metric == metric) return r.value;
    return std::nullopt;
  };
  for (const auto& m : methods) {
    std::map<std::string, std::vector<double>> acc;
    std::map<int, std::vector<double>> curve;
    for (const auto& [key, last] : last_step) {
      if (key.first != m) continue;
      const auto seed = key.second;
      for (const char* metric : {"mAP", "rank1"})
        if (auto v = value(m, seed, last, "all", metric)) acc[std::string("final_all_") + metric].push_back(*v);
      auto first = value(m, seed, 1, "step1", "mAP");
      auto final1 = value(m, seed, last, "step1", "mAP");
      if (final1) acc["final_step1_mAP"].push_back(*final1);
      if (first && final1) acc["step1_mAP_drop"].push_back(*first - *final1);
      for (const char* metric : {"raw_precision", "raw_recall", "refined_precision", "refined_recall"})
        if (auto v = value(m, seed, 2, "train", metric)) acc[std::string("step2_") + metric].push_back(*v);
      for (int t = 1; t <= last; ++t)
        if (auto v = value(m, seed, t, "step1", "mAP")) curve[t].push_back(*v);
    }
    for (const char* metric : {"final_all_mAP", "final_all_rank1", "final_step1_mAP", "step1_mAP_drop",
                               "step2_raw_precision", "step2_raw_recall", "step2_refined_precision",
                               "step2_refined_recall"})
      if (acc.count(metric)) rep.summary.push_back(detail::summarize(m, metric, acc[metric]));
    for (const auto& [t, v] : curve)
      rep.curve.push_back(detail::summarize(m, "step" + std::to_string(t) + "_step1_mAP", v));
  }
  return rep;
}

inline Report load_report(const fs::path& dir) {
  std::ifstream f(dir / "metrics.csv", std::ios::binary);
  if (!f) throw ConfigError("report: no metrics.csv in " + dir.string());
  const auto rows = eval::read_csv(f);
  bool complete = false;
  if (fs::exists(dir / "run.json")) complete = checkpoint::read_json((dir / "run.json").string()).value("complete", false);
  return build_report(rows, complete);
}

inline std::string report_csv(const Report& r) {
  std::ostringstream os;
  if (r.partial) os << "# partial run: some steps are missing\n";
  os << "section,method,metric,mean,std,n\n";
  for (const auto& [name, lines] : {std::pair{"summary", &r.summary}, std::pair{"curve", &r.curve}})
    for (const auto& s : *lines)
      os << name << ',' << s.method << ',' << s.metric << ',' << eval::format_double(s.mean) << ','
         << eval::format_double(s.stddev) << ',' << s.n << '\n';
  return os.str();
}

inline std::string report_json(const Report& r) {
  auto lines = [](const std::vector<SummaryLine>& v) {
    json a = json::array();
    for (const auto& s : v)
      a.push_back({{"method", s.method}, {"metric", s.metric}, {"mean", s.mean}, {"std", s.stddev}, {"n", s.n}});
    return a;
  };
  return json{{"partial", r.partial}, {"summary", lines(r.summary)}, {"curve", lines(r.curve)}}.dump(2) + "\n";
}

}  // namespace extendova::experiment
