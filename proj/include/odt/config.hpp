#pragma once

// Flat JSON run configuration. Every key is optional in the input file;
// absent keys take the defaults below and `null` means "derive from the
// environment" where noted. Unknown keys are rejected.

#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "odt/envs.hpp"
#include "odt/error.hpp"
#include "odt/policy.hpp"
#include "odt/train.hpp"

namespace odt {

enum class GOnlineMode { fixed_scaled, curriculum };
enum class BufferInit { top_n, random };

struct RunConfig {
  // data
  std::string env = "pointctrl";
  std::string dataset_path;            // jsonl; empty means "<out>/dataset.jsonl" for gen-data
  std::string dataset_quality = "medium";
  int dataset_size = 200;
  std::optional<double> dataset_noise;  // null: calibrated medium level

  // schedule
  long pretrain_updates = 5000;  // I_pre
  int finetune_rounds = 200;     // R
  int updates_between_rollouts = 300;  // I
  int buffer_size = 100;         // N
  int eval_interval = 10;        // rounds
  int eval_episodes = 10;
  int context_len = 20;          // K
  int eval_context_len = 5;      // K_eval
  std::optional<double> g_eval;  // null: expert return g*
  GOnlineMode g_online_mode = GOnlineMode::fixed_scaled;
  double g_online_scale = 2.0;       // c
  double g_online_quantile = 100.0;  // q
  BufferInit buffer_init = BufferInit::top_n;
  bool hindsight = true;
  bool reset_dual = false;
  std::string pretrained_checkpoint;  // finetune/eval/sweep-rtg input; empty: pretrain first
  std::vector<double> sweep_fractions{0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5};  // of g*

  // policy
  int n_layers = 2;
  int n_heads = 2;
  int embed_dim = 64;
  double dropout = 0.1;
  std::string nonlinearity = "relu";
  bool positional_embedding = true;
  std::optional<int> max_timestep;  // null: env max_episode_len
  bool deterministic = false;
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  // optimisation
  std::string optimizer = "lamb";
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  std::optional<double> finetune_learning_rate;  // null: learning_rate
  std::optional<double> finetune_weight_decay;   // null: weight_decay
  long warmup_steps = 1000;
  double grad_clip = 0.25;
  int batch_size = 64;  // B
  std::optional<double> target_entropy;  // null: -dim(A)
  double init_lambda = 1.0;
  double dual_lr = 1e-4;

  std::uint64_t seed = 0;
  bool strict_determinism = false;

  void validate() const {
    make_env(env);  // throws ConfigError on unknown names
    parse_quality(dataset_quality);
    if (dataset_size < 1) throw ConfigError("dataset_size must be >= 1");
    if (dataset_noise && *dataset_noise < 0.0) throw ConfigError("dataset_noise must be >= 0");
    if (pretrain_updates < 0) throw ConfigError("pretrain_updates must be >= 0");
    if (finetune_rounds < 0) throw ConfigError("finetune_rounds must be >= 0");
    if (updates_between_rollouts < 0) throw ConfigError("updates_between_rollouts must be >= 0");
    if (buffer_size < 1) throw ConfigError("buffer_size must be positive");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
    if (context_len < 1) throw ConfigError("context_len must be >= 1");
    if (eval_context_len < 1 || eval_context_len > context_len)
      throw ConfigError("eval_context_len must be in [1, context_len]");
    if (g_eval && !std::isfinite(*g_eval)) throw ConfigError("g_eval must be finite");
    if (!(g_online_scale > 0.0)) throw ConfigError("g_online_scale must be > 0");
    if (!(g_online_quantile > 0.0 && g_online_quantile <= 100.0))
      throw ConfigError("g_online_quantile must be in (0, 100]");
    if (sweep_fractions.empty()) throw ConfigError("sweep_fractions must be non-empty");
    if (nonlinearity != "relu") throw ConfigError("nonlinearity must be 'relu'");
    parse_optimizer(optimizer);
    if (finetune_learning_rate && !(*finetune_learning_rate > 0.0))
      throw ConfigError("finetune_learning_rate must be positive");
    if (finetune_weight_decay && *finetune_weight_decay < 0.0) throw ConfigError("finetune_weight_decay must be >= 0");
    policy_config(make_env(env)->spec()).validate();
    train_config().validate();
  }

  PolicyConfig policy_config(const EnvSpec& spec) const {
    PolicyConfig p;
    p.state_dim = spec.state_dim;
    p.action_dim = spec.action_dim;
    p.n_layers = n_layers;
    p.n_heads = n_heads;
    p.embed_dim = embed_dim;
    p.context_len = context_len;
    p.dropout = dropout;
    p.use_positional_embedding = positional_embedding;
    p.max_timestep = max_timestep.value_or(spec.max_episode_len);
    p.log_std_min = log_std_min;
    p.log_std_max = log_std_max;
    p.deterministic = deterministic;
    p.rtg_scale = spec.rtg_scale;
    return p;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.optimizer = parse_optimizer(optimizer);
    t.learning_rate = learning_rate;
    t.weight_decay = weight_decay;
    t.warmup_steps = warmup_steps;
    t.grad_clip = grad_clip;
    t.batch_size = batch_size;
    t.target_entropy = target_entropy;
    t.init_lambda = init_lambda;
    t.dual_lr = dual_lr;
    return t;
  }

  double resolved_g_eval(const EnvSpec& spec) const { return g_eval.value_or(spec.expert_return); }
};

inline std::string to_string(GOnlineMode m) { return m == GOnlineMode::fixed_scaled ? "fixed_scaled" : "curriculum"; }
inline std::string to_string(BufferInit b) { return b == BufferInit::top_n ? "top_n" : "random"; }

namespace detail {

template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

/// Serializes every key. With `spec`, null (derived) values are replaced by
/// their resolved values and a few derived quantities are added.
inline nlohmann::json to_json(const RunConfig& c, const EnvSpec* spec = nullptr) {
  using detail::opt_json;
  nlohmann::json j;
  j["env"] = c.env;
  j["dataset_path"] = c.dataset_path;
  j["dataset_quality"] = c.dataset_quality;
  j["dataset_size"] = c.dataset_size;
  j["dataset_noise"] = opt_json(c.dataset_noise);
  j["pretrain_updates"] = c.pretrain_updates;
  j["finetune_rounds"] = c.finetune_rounds;
  j["updates_between_rollouts"] = c.updates_between_rollouts;
  j["buffer_size"] = c.buffer_size;
  j["eval_interval"] = c.eval_interval;
  j["eval_episodes"] = c.eval_episodes;
  j["context_len"] = c.context_len;
  j["eval_context_len"] = c.eval_context_len;
  j["g_eval"] = opt_json(c.g_eval);
  j["g_online_mode"] = to_string(c.g_online_mode);
  j["g_online_scale"] = c.g_online_scale;
  j["g_online_quantile"] = c.g_online_quantile;
  j["buffer_init"] = to_string(c.buffer_init);
  j["hindsight"] = c.hindsight;
  j["reset_dual"] = c.reset_dual;
  j["pretrained_checkpoint"] = c.pretrained_checkpoint;
  j["sweep_fractions"] = c.sweep_fractions;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["embed_dim"] = c.embed_dim;
  j["dropout"] = c.dropout;
  j["nonlinearity"] = c.nonlinearity;
  j["positional_embedding"] = c.positional_embedding;
  j["max_timestep"] = opt_json(c.max_timestep);
  j["deterministic"] = c.deterministic;
  j["log_std_min"] = c.log_std_min;
  j["log_std_max"] = c.log_std_max;
  j["optimizer"] = c.optimizer;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["finetune_learning_rate"] = opt_json(c.finetune_learning_rate);
  j["finetune_weight_decay"] = opt_json(c.finetune_weight_decay);
  j["warmup_steps"] = c.warmup_steps;
  j["grad_clip"] = c.grad_clip;
  j["batch_size"] = c.batch_size;
  j["target_entropy"] = opt_json(c.target_entropy);
  j["init_lambda"] = c.init_lambda;
  j["dual_lr"] = c.dual_lr;
  j["seed"] = c.seed;
  j["strict_determinism"] = c.strict_determinism;
  if (spec) {
    j["dataset_noise"] = c.dataset_noise.value_or(calibrated_medium_noise(*spec));
    j["g_eval"] = c.resolved_g_eval(*spec);
    j["max_timestep"] = c.max_timestep.value_or(spec->max_episode_len);
    j["finetune_learning_rate"] = c.finetune_learning_rate.value_or(c.learning_rate);
    j["finetune_weight_decay"] = c.finetune_weight_decay.value_or(c.weight_decay);
    j["target_entropy"] = c.target_entropy.value_or(-static_cast<double>(spec->action_dim));
    j["g_online"] = c.g_online_mode == GOnlineMode::fixed_scaled
                        ? nlohmann::json(c.g_online_scale * spec->expert_return)
                        : nlohmann::json("percentile " + std::to_string(c.g_online_quantile) + " of buffer returns");
    j["expert_return"] = spec->expert_return;
    j["random_return"] = spec->random_return;
    j["rtg_scale"] = spec->rtg_scale;
  }
  return j;
}

namespace detail {

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v);
  out = v;
}

}  // namespace detail

/// Keys written only into resolved configs; accepted and ignored on input.
inline const std::set<std::string>& derived_config_keys() {
  static const std::set<std::string> k{"g_online", "expert_return", "random_return", "rtg_scale", "command",
                                        "overrides"};
  return k;
}

/// Applies the keys present in `j` on top of `c`.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json known = to_json(RunConfig{});
  for (const auto& [key, _] : j.items())
    if (!known.contains(key) && !derived_config_keys().count(key))
      throw ConfigError("unknown config field '" + key + "'");
  using detail::read;
  read(j, "env", c.env);
  read(j, "dataset_path", c.dataset_path);
  read(j, "dataset_quality", c.dataset_quality);
  read(j, "dataset_size", c.dataset_size);
  read(j, "dataset_noise", c.dataset_noise);
  read(j, "pretrain_updates", c.pretrain_updates);
  read(j, "finetune_rounds", c.finetune_rounds);
  read(j, "updates_between_rollouts", c.updates_between_rollouts);
  read(j, "buffer_size", c.buffer_size);
  read(j, "eval_interval", c.eval_interval);
  read(j, "eval_episodes", c.eval_episodes);
  read(j, "context_len", c.context_len);
  read(j, "eval_context_len", c.eval_context_len);
  read(j, "g_eval", c.g_eval);
  if (j.contains("g_online_mode")) {
    std::string m;
    read(j, "g_online_mode", m);
    if (m == "fixed_scaled") c.g_online_mode = GOnlineMode::fixed_scaled;
    else if (m == "curriculum") c.g_online_mode = GOnlineMode::curriculum;
    else throw ConfigError("g_online_mode must be 'fixed_scaled' or 'curriculum'");
  }
  read(j, "g_online_scale", c.g_online_scale);
  read(j, "g_online_quantile", c.g_online_quantile);
  if (j.contains("buffer_init")) {
    std::string b;
    read(j, "buffer_init", b);
    if (b == "top_n") c.buffer_init = BufferInit::top_n;
    else if (b == "random") c.buffer_init = BufferInit::random;
    else throw ConfigError("buffer_init must be 'top_n' or 'random'");
  }
  read(j, "hindsight", c.hindsight);
  read(j, "reset_dual", c.reset_dual);
  read(j, "pretrained_checkpoint", c.pretrained_checkpoint);
  read(j, "sweep_fractions", c.sweep_fractions);
  read(j, "n_layers", c.n_layers);
  read(j, "n_heads", c.n_heads);
  read(j, "embed_dim", c.embed_dim);
  read(j, "dropout", c.dropout);
  read(j, "nonlinearity", c.nonlinearity);
  read(j, "positional_embedding", c.positional_embedding);
  read(j, "max_timestep", c.max_timestep);
  read(j, "deterministic", c.deterministic);
  read(j, "log_std_min", c.log_std_min);
  read(j, "log_std_max", c.log_std_max);
  read(j, "optimizer", c.optimizer);
  read(j, "learning_rate", c.learning_rate);
  read(j, "weight_decay", c.weight_decay);
  read(j, "finetune_learning_rate", c.finetune_learning_rate);
  read(j, "finetune_weight_decay", c.finetune_weight_decay);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "grad_clip", c.grad_clip);
  read(j, "batch_size", c.batch_size);
  read(j, "target_entropy", c.target_entropy);
  read(j, "init_lambda", c.init_lambda);
  read(j, "dual_lr", c.dual_lr);
  read(j, "seed", c.seed);
  read(j, "strict_determinism", c.strict_determinism);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

}  // namespace odt
