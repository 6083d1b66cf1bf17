#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "odt/checkpoint.hpp"
#include "odt/config.hpp"
#include "odt/envs.hpp"
#include "odt/policy.hpp"
#include "odt/replay.hpp"
#include "odt/rng.hpp"
#include "odt/stats.hpp"
#include "odt/train.hpp"

namespace odt {

// ---------------------------------------------------------------------------
// Rollouts and evaluation

struct RolloutResult {
  Trajectory trajectory;
  RtgSequence intended;  // the conditioning stream g_init - cumulative reward
};

/// One full episode. The RTG token starts at g_init and is decremented by
/// each observed reward (it may go negative).
inline RolloutResult rollout(Environment& env, const PolicyModel& model, double g_init, ActMode mode, int k_eval,
                             Rng& env_rng, Rng& act_rng) {
  if (!std::isfinite(g_init)) throw Error("rollout: g_init must be finite");
  const EnvSpec& spec = env.spec();
  std::vector<ContextStep> context;
  std::vector<Vector> states, actions;
  std::vector<double> rewards, rtgs;
  double g = g_init;
  Vector s = env.reset(env_rng);
  while (!env.done()) {
    context.push_back(ContextStep{g, s, Vector::Zero(spec.action_dim), env.elapsed()});
    if (static_cast<int>(context.size()) > k_eval) context.erase(context.begin());
    const Vector a = act(model, context, k_eval, mode, act_rng, &spec.action_low, &spec.action_high);
    context.back().action = a;
    const StepResult r = env.step(a);
    states.push_back(s);
    actions.push_back(a);
    rewards.push_back(r.reward);
    rtgs.push_back(g);
    g = decrement_rtg(g, r.reward);
    s = r.state;
  }
  RolloutResult out;
  const auto n = static_cast<Eigen::Index>(rewards.size());
  out.trajectory.states.resize(n, spec.state_dim);
  out.trajectory.actions.resize(n, spec.action_dim);
  out.trajectory.rewards.resize(n);
  out.intended.values.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.trajectory.states.row(i) = states[k].transpose();
    out.trajectory.actions.row(i) = actions[k].transpose();
    out.trajectory.rewards[i] = rewards[k];
    out.intended.values[i] = rtgs[k];
  }
  return out;
}

struct EvalReport {
  int n_episodes = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double normalized = 0.0;
  double mean_length = 0.0;
  long online_samples = 0;  // exploration steps consumed before this evaluation
  std::vector<double> returns;
};

/// Environment seed of evaluation episode `i`; identical across calls so
/// successive evaluations see the same start states.
inline std::uint64_t eval_episode_seed(std::uint64_t eval_root, int i) {
  return substream_seed(eval_root, "episode-" + std::to_string(i));
}

/// Mean-action rollouts at g_eval. Consumes no online budget.
inline EvalReport evaluate(const PolicyModel& model, const Environment& proto, double g_eval, int n_episodes,
                           int k_eval, std::uint64_t eval_root, long online_samples = 0) {
  if (n_episodes < 1) throw Error("evaluate: n_episodes must be >= 1");
  EvalReport r;
  r.n_episodes = n_episodes;
  r.online_samples = online_samples;
  auto env = proto.clone();
  double total_len = 0.0;
  for (int i = 0; i < n_episodes; ++i) {
    Rng env_rng(eval_episode_seed(eval_root, i));
    Rng unused(0);
    const RolloutResult res = rollout(*env, model, g_eval, ActMode::mean, k_eval, env_rng, unused);
    r.returns.push_back(res.trajectory.total_return());
    total_len += res.trajectory.length();
  }
  r.mean_return = stats::mean(r.returns);
  r.std_return = stats::stddev(r.returns);
  r.normalized = normalized_score(proto.spec(), r.mean_return);
  r.mean_length = total_len / n_episodes;
  return r;
}

struct SweepPoint {
  double g_eval = 0.0;
  EvalReport report;
};

inline std::vector<SweepPoint> sweep_rtg(const PolicyModel& model, const Environment& proto,
                                         const std::vector<double>& grid, int n_episodes, int k_eval,
                                         std::uint64_t eval_root) {
  if (grid.empty()) throw Error("sweep_rtg: grid must be non-empty");
  std::vector<SweepPoint> out;
  for (double g : grid) out.push_back({g, evaluate(model, proto, g, n_episodes, k_eval, eval_root)});
  return out;
}

// ---------------------------------------------------------------------------
// Exploration RTG

struct GOnlineSchedule {
  GOnlineMode mode = GOnlineMode::fixed_scaled;
  double scale = 2.0;      // c
  double quantile = 100.0;  // q
};

inline double g_online_schedule(const GOnlineSchedule& s, const EnvSpec& spec, const ReplayBuffer& buffer) {
  if (s.mode == GOnlineMode::fixed_scaled) return s.scale * spec.expert_return;
  if (buffer.empty()) throw Error("curriculum g_online needs a non-empty buffer");
  return stats::percentile(buffer.returns(), s.quantile);
}

inline GOnlineSchedule schedule_of(const RunConfig& c) { return {c.g_online_mode, c.g_online_scale, c.g_online_quantile}; }

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  int round = 0;
  long online_samples = 0;
  std::optional<EvalReport> eval;
  double nll = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();
  double lambda = std::numeric_limits<double>::quiet_NaN();
};

inline const char* metrics_header() { return "round,online_samples,eval_mean,eval_std,normalized,nll,entropy,lambda"; }

/// Fixed 17-significant-digit formatting; NaN and absent values are empty.
inline std::string format_number(double x) {
  if (!std::isfinite(x)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline std::string format_row(const MetricsRow& r) {
  std::ostringstream os;
  os << r.round << ',' << r.online_samples << ',';
  if (r.eval) os << format_number(r.eval->mean_return) << ',' << format_number(r.eval->std_return) << ','
                 << format_number(r.eval->normalized);
  else os << ",,";
  os << ',' << format_number(r.nll) << ',' << format_number(r.entropy) << ',' << format_number(r.lambda);
  return os.str();
}

// ---------------------------------------------------------------------------
// Run state

/// Named rng streams, all derived from the run seed.
struct Streams {
  Rng env, policy_init, dropout, sampler, exploration;
  std::uint64_t eval_root = 0;

  explicit Streams(std::uint64_t seed)
      : env(Rng::substream(seed, "env")),
        policy_init(Rng::substream(seed, "policy-init")),
        dropout(Rng::substream(seed, "dropout")),
        sampler(Rng::substream(seed, "sampler")),
        exploration(Rng::substream(seed, "exploration")),
        eval_root(substream_seed(seed, "eval")) {}

  std::map<std::string, std::string> states() const {
    return {{"env", env.state()},
            {"dropout", dropout.state()},
            {"sampler", sampler.state()},
            {"exploration", exploration.state()}};
  }

  void restore(const std::map<std::string, std::string>& s) {
    auto set = [&](const char* k, Rng& r) {
      if (auto it = s.find(k); it != s.end()) r.set_state(it->second);
    };
    set("env", env);
    set("dropout", dropout);
    set("sampler", sampler);
    set("exploration", exploration);
  }
};

struct Hooks {
  std::function<void(const std::string&)> log;          // progress lines
  std::function<void(const MetricsRow&)> on_row;        // metrics.csv rows
  std::function<void(const StepMetrics&)> on_step;      // per-iteration train log
  std::string checkpoint_dir;                           // abort checkpoints go here when set

  void info(const std::string& s) const {
    if (log) log(s);
  }
};

/// Everything a pretrain/finetune run mutates.
struct Lab {
  RunConfig cfg;
  std::unique_ptr<Environment> env;
  Streams rng;
  PolicyModel model;
  DualState dual;
  TrainState train;
  long online_samples = 0;

  explicit Lab(RunConfig c)
      : cfg((c.validate(), std::move(c))),
        env(make_env(cfg.env)),
        rng(cfg.seed),
        model(cfg.policy_config(env->spec()), rng.policy_init),
        dual(make_dual(cfg.train_config(), env->spec().action_dim)),
        train(cfg.train_config(), model) {}

  const EnvSpec& spec() const { return env->spec(); }
  double g_eval() const { return cfg.resolved_g_eval(spec()); }

  EvalReport evaluate_now() const {
    return evaluate(model, *env, g_eval(), cfg.eval_episodes, cfg.eval_context_len, rng.eval_root, online_samples);
  }

  Checkpoint checkpoint() const {
    Checkpoint c = make_checkpoint(model, dual, train, rng.states());
    c.extra["online_samples"] = online_samples;
    return c;
  }

  void restore(const Checkpoint& c) {
    if (to_json(c.policy) != to_json(model.config())) throw ConfigError("checkpoint policy config does not match the run config");
    load_parameters(model, c);
    load_train_state(train, c);
    dual = c.dual;
  }
};

namespace detail {

struct BlockStats {
  double nll = 0.0, entropy = 0.0;
  int n = 0;
  void add(const StepMetrics& m) {
    nll += std::isfinite(m.nll) ? m.nll : m.l2;
    entropy += m.entropy;
    ++n;
  }
  double mean_nll() const { return n ? nll / n : std::numeric_limits<double>::quiet_NaN(); }
  double mean_entropy() const { return n ? entropy / n : std::numeric_limits<double>::quiet_NaN(); }
};

inline void run_iterations(Lab& lab, const ReplayBuffer& buffer, long n, BlockStats& stats, const Hooks& hooks) {
  for (long i = 0; i < n; ++i) {
    StepMetrics m;
    try {
      m = train_iteration(lab.model, lab.dual, buffer, lab.train, lab.rng.sampler, lab.rng.dropout);
    } catch (const NumericalError&) {
      if (!hooks.checkpoint_dir.empty()) save_checkpoint(hooks.checkpoint_dir + "/abort.json", lab.checkpoint());
      throw;
    }
    stats.add(m);
    if (hooks.on_step) hooks.on_step(m);
  }
}

}  // namespace detail

/// Offline buffer for pretraining: the whole dataset, hindsight RTGs.
inline ReplayBuffer dataset_buffer(std::span<const Trajectory> dataset) {
  if (dataset.empty()) throw Error("offline dataset is empty");
  ReplayBuffer b(dataset.size());
  for (const auto& t : dataset) b.insert_fifo(t);
  return b;
}

/// I_pre iterations on the offline data. Metrics rows are emitted per block
/// of `updates_between_rollouts` iterations with an evaluation every
/// `eval_interval` blocks and after the last block.
inline void pretrain(Lab& lab, std::span<const Trajectory> dataset, const Hooks& hooks = {}) {
  const ReplayBuffer buffer = dataset_buffer(dataset);
  const long total = lab.cfg.pretrain_updates;
  const long block = lab.cfg.updates_between_rollouts > 0 ? lab.cfg.updates_between_rollouts : std::max(1L, total);
  long done = 0;
  int index = 0;
  while (done < total) {
    const long n = std::min(block, total - done);
    detail::BlockStats s;
    detail::run_iterations(lab, buffer, n, s, hooks);
    done += n;
    ++index;
    MetricsRow row;
    row.round = index;
    row.online_samples = 0;
    row.nll = s.mean_nll();
    row.entropy = s.mean_entropy();
    row.lambda = lab.model.config().deterministic ? std::numeric_limits<double>::quiet_NaN() : lab.dual.lambda();
    if (index % lab.cfg.eval_interval == 0 || done == total) row.eval = lab.evaluate_now();
    if (hooks.on_row) hooks.on_row(row);
    std::ostringstream os;
    os << "pretrain " << done << "/" << total << " nll " << format_number(row.nll);
    if (row.eval) os << " eval " << format_number(row.eval->mean_return) << " (normalized " << row.eval->normalized << ")";
    hooks.info(os.str());
  }
}

inline ReplayBuffer initial_buffer(const RunConfig& cfg, std::span<const Trajectory> dataset, Rng& rng) {
  return cfg.buffer_init == BufferInit::top_n ? ReplayBuffer::init_top_n(dataset, cfg.buffer_size)
                                              : ReplayBuffer::init_random(dataset, cfg.buffer_size, rng);
}

struct FinetuneResult {
  ReplayBuffer buffer{1};
  EvalReport initial;
  EvalReport final;
};

/// R rounds of (explore, insert, I updates), evaluating every
/// eval_interval rounds. Row 0 evaluates the starting model.
inline FinetuneResult finetune(Lab& lab, std::span<const Trajectory> dataset, const Hooks& hooks = {}) {
  const RunConfig& cfg = lab.cfg;
  // lambda and its moments carry over; target and step size follow this run's config.
  if (cfg.reset_dual) lab.dual = make_dual(cfg.train_config(), lab.spec().action_dim);
  lab.dual.target_entropy = cfg.target_entropy.value_or(-static_cast<double>(lab.spec().action_dim));
  lab.dual.opt.lr = cfg.dual_lr;
  lab.train.cfg.learning_rate = cfg.finetune_learning_rate.value_or(cfg.learning_rate);
  lab.train.cfg.weight_decay = cfg.finetune_weight_decay.value_or(cfg.weight_decay);

  FinetuneResult out;
  out.buffer = initial_buffer(cfg, dataset, lab.rng.sampler);
  out.initial = lab.evaluate_now();
  out.final = out.initial;
  {
    MetricsRow row;
    row.round = 0;
    row.online_samples = lab.online_samples;
    row.eval = out.initial;
    row.lambda = lab.model.config().deterministic ? std::numeric_limits<double>::quiet_NaN() : lab.dual.lambda();
    if (hooks.on_row) hooks.on_row(row);
  }
  const GOnlineSchedule schedule = schedule_of(cfg);
  auto env = lab.env->clone();
  for (int round = 1; round <= cfg.finetune_rounds; ++round) {
    const double g_online = g_online_schedule(schedule, lab.spec(), out.buffer);
    RolloutResult r = rollout(*env, lab.model, g_online, ActMode::sample, cfg.eval_context_len, lab.rng.env,
                              lab.rng.exploration);
    lab.online_samples += r.trajectory.length();
    if (cfg.hindsight) out.buffer.insert_fifo(std::move(r.trajectory));
    else out.buffer.insert_with_rtgs(std::move(r.trajectory), std::move(r.intended));
    detail::BlockStats s;
    detail::run_iterations(lab, out.buffer, cfg.updates_between_rollouts, s, hooks);
    MetricsRow row;
    row.round = round;
    row.online_samples = lab.online_samples;
    row.nll = s.mean_nll();
    row.entropy = s.mean_entropy();
    row.lambda = lab.model.config().deterministic ? std::numeric_limits<double>::quiet_NaN() : lab.dual.lambda();
    if (round % cfg.eval_interval == 0 || round == cfg.finetune_rounds) {
      row.eval = lab.evaluate_now();
      out.final = *row.eval;
      std::ostringstream os;
      os << "finetune round " << round << "/" << cfg.finetune_rounds << " samples " << lab.online_samples << " eval "
         << format_number(row.eval->mean_return) << " (normalized " << row.eval->normalized << ") lambda "
         << format_number(row.lambda);
      hooks.info(os.str());
    }
    if (hooks.on_row) hooks.on_row(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

inline std::vector<Trajectory> generate_dataset(const RunConfig& cfg, std::uint64_t seed) {
  auto env = make_env(cfg.env);
  Rng rng = Rng::substream(seed, "env");
  return generate_offline_dataset(*env, parse_quality(cfg.dataset_quality), cfg.dataset_size,
                                  cfg.dataset_noise.value_or(calibrated_medium_noise(env->spec())), rng);
}

/// Summary written next to a dataset and into run directories.
inline nlohmann::json dataset_summary(const EnvSpec& spec, std::span<const Trajectory> data) {
  std::vector<double> returns;
  std::size_t steps = 0;
  for (const auto& t : data) {
    returns.push_back(t.total_return());
    steps += static_cast<std::size_t>(t.length());
  }
  nlohmann::json j;
  j["env"] = spec.name;
  j["n_trajectories"] = data.size();
  j["n_steps"] = steps;
  j["mean_return"] = stats::mean(returns);
  j["std_return"] = stats::stddev(returns);
  j["max_return"] = *std::max_element(returns.begin(), returns.end());
  j["normalized"] = normalized_score(spec, stats::mean(returns));
  return j;
}

}  // namespace odt
