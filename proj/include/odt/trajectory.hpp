#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "odt/error.hpp"
#include "odt/rng.hpp"
#include "odt/types.hpp"

namespace odt {

/// One episode: aligned states, executed actions and rewards.
struct Trajectory {
  Matrix states;   // length x state_dim
  Matrix actions;  // length x action_dim
  Vector rewards;  // length
  nlohmann::json meta = nlohmann::json::object();

  int length() const { return static_cast<int>(rewards.size()); }
  int state_dim() const { return static_cast<int>(states.cols()); }
  int action_dim() const { return static_cast<int>(actions.cols()); }
  double total_return() const { return rewards.sum(); }

  void validate() const {
    if (rewards.size() == 0) throw Error("empty trajectory");
    if (states.rows() != rewards.size() || actions.rows() != rewards.size())
      throw Error("trajectory sequences are not aligned");
    if (!states.allFinite() || !actions.allFinite() || !rewards.allFinite())
      throw Error("trajectory contains non-finite values");
  }
};

/// Return-to-go values g_1..g_T, one per timestep.
struct RtgSequence {
  Vector values;

  int size() const { return static_cast<int>(values.size()); }
  double operator[](int t) const { return values[t]; }
};

/// Undiscounted suffix sums, accumulated back to front.
inline RtgSequence compute_rtg(std::span<const double> rewards) {
  if (rewards.empty()) throw Error("empty trajectory");
  RtgSequence out{Vector(static_cast<Eigen::Index>(rewards.size()))};
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    if (!std::isfinite(rewards[i])) throw Error("non-finite reward");
    acc += rewards[i];
    out.values[static_cast<Eigen::Index>(i)] = acc;
  }
  return out;
}

inline RtgSequence compute_rtg(const Vector& rewards) {
  return compute_rtg(std::span<const double>(rewards.data(), static_cast<std::size_t>(rewards.size())));
}

/// RTGs from the rewards actually obtained; any intended RTG stream the
/// trajectory was collected under is ignored.
inline RtgSequence relabel_hindsight(const Trajectory& traj) {
  traj.validate();
  return compute_rtg(traj.rewards);
}

/// Next conditioning value after observing reward r. No floor at zero.
constexpr double decrement_rtg(double rtg, double reward) { return rtg - reward; }

struct WindowSource {
  std::size_t trajectory_id = 0;
  int start = 0;  // 0-based timestep of the first window entry
};

/// A length-w slice of a trajectory right-padded with zeros to K entries.
struct TrainingWindow {
  Matrix states;                  // K x state_dim
  Matrix actions;                 // K x action_dim
  Vector rtgs;                    // K
  std::vector<int> timesteps;     // K, global timestep within the trajectory
  std::vector<std::uint8_t> mask; // K, 1 for the first `length` entries
  int length = 0;
  WindowSource source;

  int context_len() const { return static_cast<int>(mask.size()); }
};

/// Window covering timesteps [start, min(start + K, |traj|)).
inline TrainingWindow make_window(const Trajectory& traj, const RtgSequence& rtgs, int start, int K,
                                  std::size_t trajectory_id = 0) {
  if (K < 1) throw Error("context length must be >= 1");
  if (start < 0 || start >= traj.length()) throw Error("window start out of range");
  if (rtgs.size() != traj.length()) throw Error("rtg sequence does not match trajectory length");
  const int w = std::min(K, traj.length() - start);
  TrainingWindow win;
  win.states = Matrix::Zero(K, traj.state_dim());
  win.actions = Matrix::Zero(K, traj.action_dim());
  win.rtgs = Vector::Zero(K);
  win.timesteps.assign(static_cast<std::size_t>(K), 0);
  win.mask.assign(static_cast<std::size_t>(K), 0);
  win.states.topRows(w) = traj.states.middleRows(start, w);
  win.actions.topRows(w) = traj.actions.middleRows(start, w);
  win.rtgs.head(w) = rtgs.values.segment(start, w);
  for (int i = 0; i < w; ++i) {
    win.timesteps[static_cast<std::size_t>(i)] = start + i;
    win.mask[static_cast<std::size_t>(i)] = 1;
  }
  win.length = w;
  win.source = {trajectory_id, start};
  return win;
}

/// Uniform start over all timesteps, then a forward window of up to K steps.
inline TrainingWindow sample_subsequence(const Trajectory& traj, const RtgSequence& rtgs, int K, Rng& rng,
                                         std::size_t trajectory_id = 0) {
  if (K < 1) throw Error("context length must be >= 1");
  const int start = static_cast<int>(rng.index(static_cast<std::size_t>(traj.length())));
  return make_window(traj, rtgs, start, K, trajectory_id);
}

// ---------------------------------------------------------------------------
// jsonl serialization: one object per line with `states`, `actions`,
// `rewards` and optional `meta`.

namespace detail {

inline nlohmann::json rows_to_json(const Matrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

inline Matrix rows_from_json(const nlohmann::json& j, const char* field) {
  if (!j.is_array() || j.empty()) throw Error(std::string("trajectory field '") + field + "' must be a non-empty array");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw Error(std::string("ragged rows in trajectory field '") + field + "'");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const Trajectory& traj) {
  nlohmann::json j;
  j["states"] = detail::rows_to_json(traj.states);
  j["actions"] = detail::rows_to_json(traj.actions);
  j["rewards"] = std::vector<double>(traj.rewards.data(), traj.rewards.data() + traj.rewards.size());
  if (!traj.meta.empty()) j["meta"] = traj.meta;
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  for (const char* field : {"states", "actions", "rewards"})
    if (!j.contains(field)) throw Error(std::string("trajectory is missing field '") + field + "'");
  Trajectory traj;
  traj.states = detail::rows_from_json(j.at("states"), "states");
  traj.actions = detail::rows_from_json(j.at("actions"), "actions");
  const auto rewards = j.at("rewards").get<std::vector<double>>();
  traj.rewards = Eigen::Map<const Vector>(rewards.data(), static_cast<Eigen::Index>(rewards.size()));
  if (j.contains("meta")) traj.meta = j.at("meta");
  traj.validate();
  return traj;
}

inline void write_jsonl(std::ostream& os, std::span<const Trajectory> trajectories) {
  for (const auto& traj : trajectories) os << to_json(traj).dump() << '\n';
}

inline std::vector<Trajectory> read_jsonl(std::istream& is) {
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_jsonl(const std::string& path, std::span<const Trajectory> trajectories) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_jsonl(os, trajectories);
}

inline std::vector<Trajectory> load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open dataset '" + path + "'");
  return read_jsonl(is);
}

}  // namespace odt
