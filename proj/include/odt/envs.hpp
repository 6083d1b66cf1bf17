#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "odt/env_constants.hpp"
#include "odt/error.hpp"
#include "odt/rng.hpp"
#include "odt/trajectory.hpp"
#include "odt/types.hpp"

namespace odt {

struct EnvSpec {
  std::string name;
  int state_dim = 0;
  int action_dim = 0;
  Vector action_low;
  Vector action_high;
  int max_episode_len = 1;
  double expert_return = 1.0;  // g*
  double random_return = 0.0;
  double rtg_scale = 1.0;      // RTG inputs are divided by this before embedding

  void validate() const {
    if (state_dim < 1 || action_dim < 1) throw Error("env dims must be positive");
    if (action_low.size() != action_dim || action_high.size() != action_dim)
      throw Error("action bounds do not match action_dim");
    if (!(action_low.array() < action_high.array()).all()) throw Error("action_low must be < action_high");
    if (max_episode_len < 1) throw Error("max_episode_len must be >= 1");
    if (!(expert_return > random_return)) throw Error("expert_return must exceed random_return");
  }
};

struct StepResult {
  Vector state;
  double reward = 0.0;
  bool done = false;
};

/// 100 * (raw - random) / (expert - random).
inline double normalized_score(const EnvSpec& spec, double raw_return) {
  if (spec.expert_return == spec.random_return) throw Error("expert and random returns coincide");
  return 100.0 * (raw_return - spec.random_return) / (spec.expert_return - spec.random_return);
}

/// Single-threaded episodic environment. Independent instances are safe to
/// run in parallel.
class Environment {
 public:
  virtual ~Environment() = default;

  const EnvSpec& spec() const { return spec_; }
  bool done() const { return done_; }
  int elapsed() const { return t_; }
  const Vector& state() const { return state_; }

  Vector reset(Rng& rng) {
    t_ = 0;
    done_ = false;
    state_ = sample_initial_state(rng);
    return state_;
  }

  /// Clamps the action to the bounds, then applies the dynamics.
  StepResult step(const Vector& action) {
    if (done_) throw Error("episode finished");
    if (action.size() != spec_.action_dim) throw Error("action has wrong dimension");
    const Vector a = clamp_action(action);
    StepResult r = transition(state_, a);
    ++t_;
    if (t_ >= spec_.max_episode_len) r.done = true;
    state_ = r.state;
    done_ = r.done;
    return r;
  }

  /// Places the env in an arbitrary state (tests and closed-form checks).
  void set_state(const Vector& s) {
    state_ = s;
    t_ = 0;
    done_ = false;
  }

  Vector clamp_action(const Vector& a) const {
    return a.cwiseMax(spec_.action_low).cwiseMin(spec_.action_high);
  }

  Vector random_action(Rng& rng) const {
    Vector a(spec_.action_dim);
    for (int i = 0; i < spec_.action_dim; ++i) a[i] = rng.uniform(spec_.action_low[i], spec_.action_high[i]);
    return a;
  }

  /// Pure dynamics: no episode bookkeeping, no timeout.
  virtual StepResult transition(const Vector& state, const Vector& clamped_action) const = 0;
  virtual Vector expert_action(const Vector& state) const = 0;
  /// Behaviour policy of the offline datasets at the given noise level.
  virtual Vector behavior_action(const Vector& state, double noise_scale, Rng& rng) const = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;

 protected:
  explicit Environment(EnvSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
  virtual Vector sample_initial_state(Rng& rng) const = 0;

 private:
  EnvSpec spec_;
  Vector state_;
  int t_ = 0;
  bool done_ = true;
};

/// Point mass in the plane. State (x, y, vx, vy), action = force in [-1,1]^2,
/// per-step reward max(0, 1 - |x - target|) with the target at the origin.
class PointCtrl final : public Environment {
 public:
  static constexpr int kMaxSteps = 100;
  static constexpr double kEscapeRadius = 5.0;
  static constexpr double kP = 2.0;
  static constexpr double kD = 1.0;

  PointCtrl() : Environment(make_spec()) {}

  static EnvSpec make_spec() {
    EnvSpec s;
    s.name = "pointctrl";
    s.state_dim = 4;
    s.action_dim = 2;
    s.action_low = Vector::Constant(2, -1.0);
    s.action_high = Vector::Constant(2, 1.0);
    s.max_episode_len = kMaxSteps;
    s.expert_return = constants::kPointCtrlExpertReturn;
    s.random_return = constants::kPointCtrlRandomReturn;
    s.rtg_scale = static_cast<double>(kMaxSteps);
    return s;
  }

  static double reward_at(const Vector& state) { return std::max(0.0, 1.0 - state.head<2>().norm()); }

  StepResult transition(const Vector& s, const Vector& a) const override {
    StepResult r;
    r.reward = reward_at(s);
    r.state = Vector(4);
    r.state.head<2>() = s.head<2>() + 0.1 * s.tail<2>();
    r.state.tail<2>() = 0.9 * s.tail<2>() + 0.1 * a;
    r.done = r.state.head<2>().norm() > kEscapeRadius;
    return r;
  }

  Vector expert_action(const Vector& s) const override {
    return clamp_action(-kP * s.head<2>() - kD * s.tail<2>());
  }

  Vector behavior_action(const Vector& s, double noise_scale, Rng& rng) const override {
    Vector a = expert_action(s);
    for (int i = 0; i < 2; ++i) a[i] += noise_scale * rng.normal();
    return clamp_action(a);
  }

  std::unique_ptr<Environment> clone() const override { return std::make_unique<PointCtrl>(*this); }

 protected:
  Vector sample_initial_state(Rng& rng) const override {
    Vector s = Vector::Zero(4);
    s[0] = rng.uniform(-1.0, 1.0);
    s[1] = rng.uniform(-1.0, 1.0);
    return s;
  }
};

/// 8x8 goal reaching. State (ax, ay, gx, gy) / 7. The action picks the axis
/// with the larger magnitude and moves one cell in its sign; (0, 0) stays.
/// Reward 1 on reaching the goal, which ends the episode.
class GridGoal final : public Environment {
 public:
  static constexpr int kSize = 8;
  static constexpr int kMaxSteps = 64;

  GridGoal() : Environment(make_spec()) {}

  static EnvSpec make_spec() {
    EnvSpec s;
    s.name = "gridgoal";
    s.state_dim = 4;
    s.action_dim = 2;
    s.action_low = Vector::Constant(2, -1.0);
    s.action_high = Vector::Constant(2, 1.0);
    s.max_episode_len = kMaxSteps;
    s.expert_return = constants::kGridGoalExpertReturn;
    s.random_return = constants::kGridGoalRandomReturn;
    s.rtg_scale = 1.0;
    return s;
  }

  static int cell(double coord) { return static_cast<int>(std::lround(coord * (kSize - 1))); }
  static double coord(int cell) { return static_cast<double>(cell) / (kSize - 1); }

  static Vector make_state(int ax, int ay, int gx, int gy) {
    Vector s(4);
    s << coord(ax), coord(ay), coord(gx), coord(gy);
    return s;
  }

  static bool at_goal(const Vector& s) { return cell(s[0]) == cell(s[2]) && cell(s[1]) == cell(s[3]); }

  StepResult transition(const Vector& s, const Vector& a) const override {
    int pos[2] = {cell(s[0]), cell(s[1])};
    if (a[0] != 0.0 || a[1] != 0.0) {
      const int axis = std::abs(a[0]) >= std::abs(a[1]) ? 0 : 1;
      pos[axis] = std::clamp(pos[axis] + (a[axis] > 0.0 ? 1 : -1), 0, kSize - 1);
    }
    StepResult r;
    r.state = make_state(pos[0], pos[1], cell(s[2]), cell(s[3]));
    r.done = at_goal(r.state);
    r.reward = r.done ? 1.0 : 0.0;
    return r;
  }

  /// Greedy Manhattan move along the axis with the larger remaining distance.
  Vector expert_action(const Vector& s) const override {
    const int dx = cell(s[2]) - cell(s[0]);
    const int dy = cell(s[3]) - cell(s[1]);
    Vector a = Vector::Zero(2);
    if (dx == 0 && dy == 0) return a;
    if (std::abs(dx) >= std::abs(dy))
      a[0] = dx > 0 ? 1.0 : -1.0;
    else
      a[1] = dy > 0 ? 1.0 : -1.0;
    return a;
  }

  /// Epsilon-greedy: a uniform random action with probability noise_scale.
  Vector behavior_action(const Vector& s, double noise_scale, Rng& rng) const override {
    if (rng.uniform() < noise_scale) return random_action(rng);
    return expert_action(s);
  }

  std::unique_ptr<Environment> clone() const override { return std::make_unique<GridGoal>(*this); }

 protected:
  Vector sample_initial_state(Rng& rng) const override {
    const int cells = kSize * kSize;
    const int agent = static_cast<int>(rng.index(cells));
    int goal = static_cast<int>(rng.index(cells - 1));
    if (goal >= agent) ++goal;
    return make_state(agent % kSize, agent / kSize, goal % kSize, goal / kSize);
  }
};

inline std::unique_ptr<Environment> make_env(const std::string& name) {
  if (name == "pointctrl") return std::make_unique<PointCtrl>();
  if (name == "gridgoal") return std::make_unique<GridGoal>();
  throw ConfigError("unknown env '" + name + "' (expected pointctrl or gridgoal)");
}

using StatePolicy = std::function<Vector(const Vector& state, Rng& rng)>;

/// Runs one episode to termination. Stored actions are the clamped ones.
inline Trajectory run_episode(Environment& env, const StatePolicy& policy, Rng& env_rng, Rng& policy_rng) {
  const auto& spec = env.spec();
  std::vector<Vector> states, actions;
  std::vector<double> rewards;
  Vector s = env.reset(env_rng);
  while (!env.done()) {
    const Vector a = env.clamp_action(policy(s, policy_rng));
    const StepResult r = env.step(a);
    states.push_back(s);
    actions.push_back(a);
    rewards.push_back(r.reward);
    s = r.state;
  }
  Trajectory traj;
  const auto n = static_cast<Eigen::Index>(rewards.size());
  traj.states.resize(n, spec.state_dim);
  traj.actions.resize(n, spec.action_dim);
  traj.rewards.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    traj.states.row(i) = states[static_cast<std::size_t>(i)].transpose();
    traj.actions.row(i) = actions[static_cast<std::size_t>(i)].transpose();
    traj.rewards[i] = rewards[static_cast<std::size_t>(i)];
  }
  return traj;
}

enum class DatasetQuality { medium, medium_replay };

inline DatasetQuality parse_quality(const std::string& q) {
  if (q == "medium") return DatasetQuality::medium;
  if (q == "medium-replay" || q == "medium-replay-like") return DatasetQuality::medium_replay;
  throw ConfigError("unknown dataset quality '" + q + "' (expected medium or medium-replay)");
}

/// Noise level whose behaviour policy scores about g*/3.
inline double calibrated_medium_noise(const EnvSpec& spec) {
  return spec.name == "gridgoal" ? constants::kGridGoalMediumEpsilon : constants::kPointCtrlMediumNoise;
}

/// Noise level at the start of a medium-replay-like dataset.
inline double replay_start_noise(const EnvSpec& spec) {
  return spec.name == "gridgoal" ? 1.0 : 3.0 * constants::kPointCtrlMediumNoise;
}

/// `medium`: every trajectory at `noise_scale`. `medium_replay`: noise
/// decreases linearly from the replay start level down to `noise_scale`
/// across the dataset, like the replay buffer of an improving agent.
inline std::vector<Trajectory> generate_offline_dataset(const Environment& proto, DatasetQuality quality,
                                                        int n_trajectories, double noise_scale, Rng& rng) {
  if (noise_scale < 0.0) throw Error("noise_scale must be >= 0");
  if (n_trajectories < 1) throw Error("n_trajectories must be >= 1");
  auto env = proto.clone();
  const double start = std::max(noise_scale, replay_start_noise(proto.spec()));
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n_trajectories));
  for (int i = 0; i < n_trajectories; ++i) {
    double noise = noise_scale;
    if (quality == DatasetQuality::medium_replay && n_trajectories > 1)
      noise = start + (noise_scale - start) * static_cast<double>(i) / static_cast<double>(n_trajectories - 1);
    const Environment* e = env.get();
    StatePolicy behaviour = [e, noise](const Vector& s, Rng& r) { return e->behavior_action(s, noise, r); };
    Trajectory traj = run_episode(*env, behaviour, rng, rng);
    traj.meta["noise"] = noise;
    out.push_back(std::move(traj));
  }
  return out;
}

inline double mean_return(std::span<const Trajectory> trajs) {
  double total = 0.0;
  for (const auto& t : trajs) total += t.total_return();
  return trajs.empty() ? 0.0 : total / static_cast<double>(trajs.size());
}

// ---------------------------------------------------------------------------
// Measurement routines behind the frozen constants in env_constants.hpp.
// tools/measure_env_constants regenerates that header from these.

inline double measure_expert_return(const Environment& proto, int episodes, std::uint64_t seed) {
  auto env = proto.clone();
  Rng rng(seed);
  const Environment* e = env.get();
  StatePolicy expert = [e](const Vector& s, Rng&) { return e->expert_action(s); };
  double total = 0.0;
  for (int i = 0; i < episodes; ++i) total += run_episode(*env, expert, rng, rng).total_return();
  return total / episodes;
}

inline double measure_random_return(const Environment& proto, int episodes, std::uint64_t seed) {
  auto env = proto.clone();
  Rng rng(seed);
  const Environment* e = env.get();
  StatePolicy random = [e](const Vector&, Rng& r) { return e->random_action(r); };
  double total = 0.0;
  for (int i = 0; i < episodes; ++i) total += run_episode(*env, random, rng, rng).total_return();
  return total / episodes;
}

inline double measure_behavior_return(const Environment& proto, double noise, int episodes, std::uint64_t seed) {
  Rng rng(seed);
  const auto data = generate_offline_dataset(proto, DatasetQuality::medium, episodes, noise, rng);
  return mean_return(data);
}

struct CalibrationPoint {
  double noise;
  double mean_return;
};

/// Sweeps `grid` and returns the point whose mean return is closest to
/// expert_return / 3.
inline CalibrationPoint calibrate_medium(const Environment& proto, double expert_return,
                                         std::span<const double> grid, int episodes, std::uint64_t seed,
                                         std::vector<CalibrationPoint>* sweep = nullptr) {
  CalibrationPoint best{grid.front(), 0.0};
  double best_gap = 1e300;
  for (double noise : grid) {
    const double ret = measure_behavior_return(proto, noise, episodes, seed);
    if (sweep) sweep->push_back({noise, ret});
    const double gap = std::abs(ret - expert_return / 3.0);
    if (gap < best_gap) {
      best_gap = gap;
      best = {noise, ret};
    }
  }
  return best;
}

struct EnvConstants {
  double pointctrl_expert = 0.0;
  double pointctrl_random = 0.0;
  CalibrationPoint pointctrl_medium{};
  double gridgoal_expert = 0.0;
  double gridgoal_random = 0.0;
  CalibrationPoint gridgoal_medium{};
};

/// The fixed measurement protocol: expert over 100 episodes, uniform random
/// policy over 1000, calibration sweeps at 200 episodes per grid point.
inline EnvConstants measure_env_constants(std::vector<CalibrationPoint>* pointctrl_sweep = nullptr,
                                          std::vector<CalibrationPoint>* gridgoal_sweep = nullptr) {
  static constexpr double kNoiseGrid[] = {1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 15, 20, 30, 50};
  static constexpr double kEpsilonGrid[] = {0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0};
  EnvConstants c;
  const PointCtrl point;
  c.pointctrl_expert = measure_expert_return(point, 100, 1);
  c.pointctrl_random = measure_random_return(point, 1000, 2);
  c.pointctrl_medium = calibrate_medium(point, c.pointctrl_expert, kNoiseGrid, 200, 3, pointctrl_sweep);
  const GridGoal grid;
  c.gridgoal_expert = measure_expert_return(grid, 100, 1);
  c.gridgoal_random = measure_random_return(grid, 1000, 2);
  c.gridgoal_medium = calibrate_medium(grid, c.gridgoal_expert, kEpsilonGrid, 200, 3, gridgoal_sweep);
  return c;
}

}  // namespace odt
