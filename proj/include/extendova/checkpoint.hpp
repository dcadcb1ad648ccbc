#pragma once

// Step-boundary checkpoints as JSON. Doubles round-trip exactly, so a resumed
// run continues from bit-identical state.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "extendova/errors.hpp"
#include "extendova/model.hpp"
#include "extendova/pipeline.hpp"

namespace extendova::checkpoint {

using nlohmann::json;
using num::Tensor;

inline json tensor_to_json(const Tensor& t) { return json{{"shape", t.shape()}, {"data", t.data()}}; }

inline Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<std::vector<std::size_t>>(), j.at("data").get<std::vector<double>>());
}

inline json encoder_to_json(const model::Encoder& e) {
  return json{{"w1", tensor_to_json(e.w1)},
              {"b1", tensor_to_json(e.b1)},
              {"w2", tensor_to_json(e.w2)},
              {"gamma", tensor_to_json(e.gamma)},
              {"beta", tensor_to_json(e.beta)},
              {"running_mean", tensor_to_json(e.running_mean)},
              {"running_var", tensor_to_json(e.running_var)},
              {"running_norm", e.running_norm},
              {"bn_momentum", e.bn_momentum},
              {"bn_eps", e.bn_eps}};
}

inline model::Encoder encoder_from_json(const json& j) {
  model::Encoder e;
  e.w1 = tensor_from_json(j.at("w1"));
  e.b1 = tensor_from_json(j.at("b1"));
  e.w2 = tensor_from_json(j.at("w2"));
  e.gamma = tensor_from_json(j.at("gamma"));
  e.beta = tensor_from_json(j.at("beta"));
  e.running_mean = tensor_from_json(j.at("running_mean"));
  e.running_var = tensor_from_json(j.at("running_var"));
  e.running_norm = j.at("running_norm").get<double>();
  e.bn_momentum = j.at("bn_momentum").get<double>();
  e.bn_eps = j.at("bn_eps").get<double>();
  return e;
}

inline json bank_to_json(const model::MemoryBank& b) {
  json meta = json::array();
  for (const auto& m : b.metadata())
    meta.push_back({{"created_at_step", m.created_at_step},
                    {"origin", m.origin == model::Origin::initial ? "initial" : "extended"},
                    {"active", m.active}});
  return json{{"dim", b.dim()}, {"prototypes", tensor_to_json(b.prototypes())}, {"meta", meta}};
}

inline model::MemoryBank bank_from_json(const json& j) {
  std::vector<model::ClassMeta> meta;
  for (const auto& m : j.at("meta"))
    meta.push_back({m.at("created_at_step").get<int>(),
                    m.at("origin").get<std::string>() == "initial" ? model::Origin::initial : model::Origin::extended,
                    m.at("active").get<bool>()});
  Tensor w = tensor_from_json(j.at("prototypes"));
  if (w.rows() == 0) w = Tensor::matrix(0, j.at("dim").get<std::size_t>());
  return model::MemoryBank::from_parts(std::move(w), std::move(meta));
}

inline json detector_to_json(const model::OvaDetector& d) {
  return json{{"dim", d.dim()},
              {"weights", tensor_to_json(d.weights())},
              {"bias", tensor_to_json(d.bias())},
              {"trained", d.trained_flags()},
              {"frozen", d.frozen_flags()}};
}

inline model::OvaDetector detector_from_json(const json& j) {
  Tensor w = tensor_from_json(j.at("weights"));
  if (w.cols() == 0) w = Tensor::matrix(j.at("dim").get<std::size_t>(), 0);
  return model::OvaDetector::from_parts(std::move(w), tensor_from_json(j.at("bias")),
                                        j.at("trained").get<std::vector<bool>>(),
                                        j.at("frozen").get<std::vector<bool>>());
}

inline json state_to_json(const pipeline::LearnerState& s) {
  return json{{"step", s.step},
              {"online", encoder_to_json(s.models.online)},
              {"ema", encoder_to_json(s.models.ema)},
              {"bank", bank_to_json(s.bank)},
              {"detector", detector_to_json(s.detector)},
              {"classifier", tensor_to_json(s.classifier.phi)}};
}

inline pipeline::LearnerState state_from_json(const json& j) {
  pipeline::LearnerState s;
  s.step = j.at("step").get<int>();
  s.models.online = encoder_from_json(j.at("online"));
  s.models.ema = encoder_from_json(j.at("ema"));
  s.bank = bank_from_json(j.at("bank"));
  s.detector = detector_from_json(j.at("detector"));
  s.classifier.phi = tensor_from_json(j.at("classifier"));
  return s;
}

/// Writes to a temporary file and renames, so a crash never leaves a torn
/// checkpoint behind.
inline void write_json_atomic(const std::string& path, const json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp);
    f << j.dump() << '\n';
    if (!f) throw Error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot rename " + tmp);
}

inline json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return json::parse(f);
}

}  // namespace extendova::checkpoint
