#pragma once

// JSON exchange format for generated streams:
//
// {
//   "format": "extendova-stream", "version": 1,
//   "config": { ...StreamConfig fields... },
//   "steps": [
//     { "step": 1, "cameras": [0, 1, 2, 3], "n_local_classes": 120,
//       "train": [ {"x": [...], "camera_id": 0, "local_label": 17}, ... ],
//       "test":  [ {"x": [...], "camera_id": 0, "global_id": 131}, ... ],
//       "evaluation": { "overlap_truth": [ {"local_label": 0, "seen": false, "global_id": 5}, ... ],
//                       "train_global_id": [ ... ] } } ] }
//
// Doubles are written in shortest round-trip form, so a re-read stream is
// bit-identical to the generated one.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extendova/errors.hpp"
#include "extendova/synthstream.hpp"

namespace extendova::stream {

using nlohmann::json;

inline json config_to_json(const StreamConfig& c) {
  return json{{"num_steps", c.num_steps},
              {"initial_cameras", c.initial_cameras},
              {"cameras_per_step", c.cameras_per_step},
              {"initial_ids", c.initial_ids},
              {"initial_views_per_id", c.initial_views_per_id},
              {"ids_per_camera", c.ids_per_camera},
              {"samples_per_id", c.samples_per_id},
              {"test_initial_ids", c.test_initial_ids},
              {"test_ids_per_camera", c.test_ids_per_camera},
              {"test_samples_per_id", c.test_samples_per_id},
              {"test_overlap", c.test_overlap},
              {"overlap_fraction", c.overlap_fraction},
              {"domain_shift", c.domain_shift},
              {"offset_std", c.offset_std},
              {"noise_std", c.noise_std},
              {"d_latent", c.d_latent},
              {"d_in", c.d_in},
              {"setup", to_string(c.setup)},
              {"step1_global_labels", c.step1_global_labels},
              {"seed", c.seed}};
}

/// Strict parse: unknown keys are rejected, missing keys keep the defaults of
/// the chosen setup.
inline StreamConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("stream: expected an object");
  StreamConfig c;
  if (j.contains("setup")) {
    if (!j["setup"].is_string()) throw ConfigError("stream.setup: expected a string");
    if (setup_from_string(j["setup"].get<std::string>()) == Setup::exceptional)
      c = exceptional_defaults();
  }
  static const std::set<std::string> known = {
      "num_steps", "initial_cameras", "cameras_per_step", "initial_ids", "initial_views_per_id",
      "ids_per_camera", "samples_per_id", "test_initial_ids", "test_ids_per_camera",
      "test_samples_per_id", "test_overlap", "overlap_fraction", "domain_shift", "offset_std",
      "noise_std", "d_latent", "d_in", "setup", "step1_global_labels", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("stream." + key + ": unknown key");
    try {
      if (key == "num_steps") c.num_steps = value.get<int>();
      else if (key == "initial_cameras") c.initial_cameras = value.get<int>();
      else if (key == "cameras_per_step") c.cameras_per_step = value.get<int>();
      else if (key == "initial_ids") c.initial_ids = value.get<int>();
      else if (key == "initial_views_per_id") c.initial_views_per_id = value.get<int>();
      else if (key == "ids_per_camera") c.ids_per_camera = value.get<int>();
      else if (key == "samples_per_id") c.samples_per_id = value.get<int>();
      else if (key == "test_initial_ids") c.test_initial_ids = value.get<int>();
      else if (key == "test_ids_per_camera") c.test_ids_per_camera = value.get<int>();
      else if (key == "test_samples_per_id") c.test_samples_per_id = value.get<int>();
      else if (key == "test_overlap") c.test_overlap = value.get<double>();
      else if (key == "overlap_fraction") c.overlap_fraction = value.get<std::vector<double>>();
      else if (key == "domain_shift") c.domain_shift = value.get<double>();
      else if (key == "offset_std") c.offset_std = value.get<double>();
      else if (key == "noise_std") c.noise_std = value.get<double>();
      else if (key == "d_latent") c.d_latent = value.get<int>();
      else if (key == "d_in") c.d_in = value.get<int>();
      else if (key == "setup") c.setup = setup_from_string(value.get<std::string>());
      else if (key == "step1_global_labels") c.step1_global_labels = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
    } catch (const json::exception&) {
      throw ConfigError("stream." + key + ": wrong value type");
    }
  }
  c.validate();
  return c;
}

namespace detail {

inline json row_json(const Tensor& x, std::size_t i) {
  auto r = x.row(i);
  return json(std::vector<double>(r.begin(), r.end()));
}

inline Tensor rows_from(const std::vector<std::vector<double>>& rows, std::size_t width) {
  std::vector<double> data;
  data.reserve(rows.size() * width);
  for (const auto& r : rows) {
    if (r.size() != width) throw InvalidArgument("stream file: inconsistent feature width");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor::matrix(rows.size(), width, std::move(data));
}

}  // namespace detail

inline json stream_to_json(const StreamConfig& cfg, const std::vector<StepDataset>& steps) {
  json out{{"format", "extendova-stream"}, {"version", 1}, {"config", config_to_json(cfg)}};
  json arr = json::array();
  for (const auto& ds : steps) {
    json train = json::array(), test = json::array(), truth = json::array();
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      train.push_back({{"x", detail::row_json(ds.train.x, i)},
                       {"camera_id", ds.train.camera_id[i]},
                       {"local_label", ds.train.local_label[i]}});
    for (std::size_t i = 0; i < ds.test.size(); ++i)
      test.push_back({{"x", detail::row_json(ds.test.x, i)},
                      {"camera_id", ds.test.camera_id[i]},
                      {"global_id", ds.test.global_id[i]}});
    for (std::size_t k = 0; k < ds.overlap_truth.size(); ++k)
      truth.push_back({{"local_label", k},
                       {"seen", ds.overlap_truth[k].seen},
                       {"global_id", ds.overlap_truth[k].global_id}});
    arr.push_back({{"step", ds.step},
                   {"cameras", ds.cameras},
                   {"n_local_classes", ds.train.num_classes},
                   {"train", std::move(train)},
                   {"test", std::move(test)},
                   {"evaluation",
                    {{"overlap_truth", std::move(truth)}, {"train_global_id", ds.train_global_id}}}});
  }
  out["steps"] = std::move(arr);
  return out;
}

struct LoadedStream {
  StreamConfig config;
  std::vector<StepDataset> steps;
};

inline LoadedStream stream_from_json(const json& j) {
  if (j.value("format", "") != "extendova-stream") throw ConfigError("stream file: wrong format tag");
  if (j.value("version", 0) != 1) throw ConfigError("stream file: unsupported version");
  LoadedStream out;
  out.config = config_from_json(j.at("config"));
  const std::size_t d_in = static_cast<std::size_t>(out.config.d_in);
  for (const auto& s : j.at("steps")) {
    StepDataset ds;
    ds.step = s.at("step").get<int>();
    ds.cameras = s.at("cameras").get<std::vector<int>>();
    ds.train.num_classes = s.at("n_local_classes").get<int>();
    std::vector<std::vector<double>> rows;
    for (const auto& e : s.at("train")) {
      rows.push_back(e.at("x").get<std::vector<double>>());
      ds.train.camera_id.push_back(e.at("camera_id").get<int>());
      ds.train.local_label.push_back(e.at("local_label").get<int>());
    }
    ds.train.x = detail::rows_from(rows, d_in);
    rows.clear();
    for (const auto& e : s.at("test")) {
      rows.push_back(e.at("x").get<std::vector<double>>());
      ds.test.camera_id.push_back(e.at("camera_id").get<int>());
      ds.test.global_id.push_back(e.at("global_id").get<int>());
    }
    ds.test.x = detail::rows_from(rows, d_in);
    const auto& ev = s.at("evaluation");
    ds.overlap_truth.assign(static_cast<std::size_t>(ds.train.num_classes), ClassTruth{});
    for (const auto& t : ev.at("overlap_truth"))
      ds.overlap_truth.at(t.at("local_label").get<std::size_t>()) =
          ClassTruth{t.at("seen").get<bool>(), t.at("global_id").get<int>()};
    ds.train_global_id = ev.at("train_global_id").get<std::vector<int>>();
    out.steps.push_back(std::move(ds));
  }
  return out;
}

inline void write_stream(const std::string& path, const StreamConfig& cfg,
                         const std::vector<StepDataset>& steps) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f << stream_to_json(cfg, steps).dump() << '\n';
}

inline LoadedStream read_stream(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return stream_from_json(json::parse(f));
}

}  // namespace extendova::stream
