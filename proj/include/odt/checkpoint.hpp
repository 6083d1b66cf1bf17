#pragma once

// JSON checkpoints: policy config, named parameters, optimizer moments, the
// dual variable, step counters and rng states. Doubles round-trip exactly.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "odt/error.hpp"
#include "odt/policy.hpp"
#include "odt/rng.hpp"
#include "odt/train.hpp"

namespace odt {

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw Error("checkpoint tensor has the wrong size");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const PolicyConfig& p) {
  return {{"state_dim", p.state_dim},
          {"action_dim", p.action_dim},
          {"n_layers", p.n_layers},
          {"n_heads", p.n_heads},
          {"embed_dim", p.embed_dim},
          {"context_len", p.context_len},
          {"dropout", p.dropout},
          {"use_positional_embedding", p.use_positional_embedding},
          {"max_timestep", p.max_timestep},
          {"log_std_min", p.log_std_min},
          {"log_std_max", p.log_std_max},
          {"deterministic", p.deterministic},
          {"rtg_scale", p.rtg_scale}};
}

inline PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig p;
  p.state_dim = j.at("state_dim");
  p.action_dim = j.at("action_dim");
  p.n_layers = j.at("n_layers");
  p.n_heads = j.at("n_heads");
  p.embed_dim = j.at("embed_dim");
  p.context_len = j.at("context_len");
  p.dropout = j.at("dropout");
  p.use_positional_embedding = j.at("use_positional_embedding");
  p.max_timestep = j.at("max_timestep");
  p.log_std_min = j.at("log_std_min");
  p.log_std_max = j.at("log_std_max");
  p.deterministic = j.at("deterministic");
  p.rtg_scale = j.at("rtg_scale");
  return p;
}

struct Checkpoint {
  PolicyConfig policy;
  std::vector<Parameter> params;
  DualState dual;
  long step = 0;
  long dual_steps = 0;
  long optimizer_steps = 0;
  std::vector<Matrix> m, v;
  std::map<std::string, std::string> rng_states;
  nlohmann::json extra = nlohmann::json::object();
};

inline Checkpoint make_checkpoint(const PolicyModel& model, const DualState& dual, const TrainState& state,
                                  std::map<std::string, std::string> rngs = {}) {
  Checkpoint c;
  c.policy = model.config();
  c.params = model.parameters();
  c.dual = dual;
  c.step = state.step;
  c.dual_steps = state.dual_steps;
  c.optimizer_steps = state.opt.steps();
  c.m = state.opt.first_moments();
  c.v = state.opt.second_moments();
  c.rng_states = std::move(rngs);
  return c;
}

inline nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "odt-checkpoint-v1";
  j["policy"] = to_json(c.policy);
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    nlohmann::json p = {{"name", c.params[i].name}, {"value", detail::matrix_json(c.params[i].value)}};
    if (i < c.m.size()) {
      p["m"] = detail::matrix_json(c.m[i]);
      p["v"] = detail::matrix_json(c.v[i]);
    }
    params.push_back(std::move(p));
  }
  j["parameters"] = std::move(params);
  j["dual"] = {{"log_lambda", c.dual.log_lambda}, {"target_entropy", c.dual.target_entropy},
               {"lr", c.dual.opt.lr},         {"m", c.dual.opt.m},
               {"v", c.dual.opt.v},           {"t", c.dual.opt.t}};
  j["step"] = c.step;
  j["dual_steps"] = c.dual_steps;
  j["optimizer_steps"] = c.optimizer_steps;
  j["rng"] = c.rng_states;
  j["extra"] = c.extra;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "odt-checkpoint-v1") throw Error("not an odt checkpoint");
  Checkpoint c;
  c.policy = policy_config_from_json(j.at("policy"));
  for (const auto& p : j.at("parameters")) {
    c.params.push_back(Parameter{p.at("name"), detail::matrix_from_json(p.at("value")), true});
    if (p.contains("m")) {
      c.m.push_back(detail::matrix_from_json(p.at("m")));
      c.v.push_back(detail::matrix_from_json(p.at("v")));
    }
  }
  const auto& d = j.at("dual");
  c.dual.log_lambda = d.at("log_lambda");
  c.dual.target_entropy = d.at("target_entropy");
  c.dual.opt.lr = d.at("lr");
  c.dual.opt.m = d.at("m");
  c.dual.opt.v = d.at("v");
  c.dual.opt.t = d.at("t");
  c.step = j.at("step");
  c.dual_steps = j.at("dual_steps");
  c.optimizer_steps = j.at("optimizer_steps");
  c.rng_states = j.at("rng").get<std::map<std::string, std::string>>();
  c.extra = j.value("extra", nlohmann::json::object());
  return c;
}

/// Copies parameter values by name into `model` (the decay flags stay those
/// of the model).
inline void load_parameters(PolicyModel& model, const Checkpoint& c) {
  if (c.params.size() != model.parameters().size()) throw Error("checkpoint does not match the model");
  for (const auto& p : c.params) {
    auto& dst = model.parameter(p.name).value;
    if (dst.rows() != p.value.rows() || dst.cols() != p.value.cols())
      throw Error("checkpoint tensor '" + p.name + "' has the wrong shape");
    dst = p.value;
  }
}

/// Restores optimizer moments and counters into `state`.
inline void load_train_state(TrainState& state, const Checkpoint& c) {
  state.step = c.step;
  state.dual_steps = c.dual_steps;
  if (!c.m.empty()) {
    if (c.m.size() != state.opt.first_moments().size()) throw Error("checkpoint optimizer state does not match");
    state.opt.first_moments() = c.m;
    state.opt.second_moments() = c.v;
    state.opt.set_steps(c.optimizer_steps);
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write checkpoint '" + path + "'");
  os << to_json(c).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
  try {
    return checkpoint_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint '" + path + "' is malformed: " + e.what());
  }
}

}  // namespace odt
