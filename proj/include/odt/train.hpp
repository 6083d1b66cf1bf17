#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "odt/error.hpp"
#include "odt/optim.hpp"
#include "odt/policy.hpp"
#include "odt/replay.hpp"
#include "odt/rng.hpp"

namespace odt {

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::lamb;
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  long warmup_steps = 10000;
  double grad_clip = 0.25;
  int batch_size = 64;
  std::optional<double> target_entropy;  // defaults to -action_dim
  double init_lambda = 1.0;
  double dual_lr = 1e-4;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(init_lambda > 0.0)) throw ConfigError("init_lambda must be positive");
    if (!(dual_lr > 0.0)) throw ConfigError("dual_lr must be positive");
  }
};

/// Temperature lambda = exp(log_lambda), stepped by Adam on log_lambda.
struct DualState {
  double log_lambda = 0.0;
  ScalarAdam opt;
  double target_entropy = -1.0;  // beta

  DualState() = default;
  DualState(double init_lambda, double target, double lr) : log_lambda(std::log(init_lambda)), target_entropy(target) {
    opt.lr = lr;
  }

  double lambda() const { return std::exp(log_lambda); }

  /// Fresh moments, same lambda and target.
  void reset_moments() {
    const double lr = opt.lr;
    opt = ScalarAdam{};
    opt.lr = lr;
  }
};

inline DualState make_dual(const TrainConfig& cfg, int action_dim) {
  return DualState(cfg.init_lambda, cfg.target_entropy.value_or(-static_cast<double>(action_dim)), cfg.dual_lr);
}

struct TrainState {
  TrainConfig cfg;
  ParameterOptimizer opt;
  long step = 0;  // primal steps taken
  long dual_steps = 0;

  TrainState() = default;
  TrainState(TrainConfig c, const PolicyModel& model) : cfg(std::move(c)) {
    cfg.validate();
    OptimizerConfig oc;
    oc.kind = cfg.optimizer;
    opt = ParameterOptimizer(oc, model.parameters());
  }

  /// Learning rate the next primal step will use.
  double next_lr() const { return warmup_lr(cfg.learning_rate, step + 1, cfg.warmup_steps); }
};

struct StepMetrics {
  long step = 0;
  double loss = 0.0;
  double nll = 0.0;
  double entropy = 0.0;
  double l2 = 0.0;
  double lambda = 0.0;  // value used by the primal step
  double grad_norm_pre = 0.0;
  double grad_norm_post = 0.0;
  double lr = 0.0;
};

inline LossSpec primal_loss(const PolicyModel& model, const DualState& dual) {
  if (model.config().deterministic) return {LossKind::l2, 0.0};
  return {LossKind::nll_entropy, dual.lambda()};
}

/// J(theta) on a batch, evaluation mode.
inline double loss_nll(const PolicyModel& model, std::span<const TrainingWindow> windows) {
  require_stochastic(model, "loss_nll");
  return -log_prob(model.forward(windows), windows);
}

inline double loss_l2(const PolicyModel& model, std::span<const TrainingWindow> windows) {
  if (!model.config().deterministic) throw Error("loss_l2 requires a deterministic policy");
  const Matrix diff = gather_actions(windows) - model.forward_deterministic(windows);
  return diff.rows() ? diff.squaredNorm() / static_cast<double>(diff.rows()) : 0.0;
}

/// One clipped optimizer step on J - lambda * H_hat (or l2), lambda fixed.
inline StepMetrics primal_step(PolicyModel& model, const DualState& dual, std::span<const TrainingWindow> windows,
                               TrainState& state, Rng& rng) {
  const LossSpec spec = primal_loss(model, dual);
  GradResult g = grad(model, spec, windows, rng, /*train_mode=*/true);
  const ClipResult clip = clip_global_norm(g.grads, state.cfg.grad_clip);
  ++state.step;
  const double lr = warmup_lr(state.cfg.learning_rate, state.step, state.cfg.warmup_steps);
  state.opt.step(model.parameters(), g.grads, lr, state.cfg.weight_decay);
  StepMetrics m;
  m.step = state.step;
  m.loss = g.terms.loss;
  m.nll = g.terms.nll;
  m.entropy = g.terms.entropy;
  m.l2 = g.terms.l2;
  m.lambda = spec.lambda;
  m.grad_norm_pre = clip.pre;
  m.grad_norm_post = clip.post;
  m.lr = lr;
  return m;
}

/// One Adam step on log_lambda for lambda * (H_hat - beta); H_hat is a
/// constant here. Returns the change in log_lambda.
inline double dual_step(DualState& dual, double entropy_estimate) {
  if (!std::isfinite(entropy_estimate)) throw NumericalError("entropy estimate is not finite");
  const double g = dual.lambda() * (entropy_estimate - dual.target_entropy);
  return dual.opt.step(dual.log_lambda, g);
}

inline std::vector<TrainingWindow> sample_batch(const ReplayBuffer& buffer, int batch_size, int K, Rng& rng) {
  std::vector<TrainingWindow> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) batch.push_back(sample_window(buffer, K, rng));
  return batch;
}

/// Sample a batch, one primal step, then one dual step with the entropy of
/// the same forward pass. The deterministic variant has no dual.
inline StepMetrics train_iteration(PolicyModel& model, DualState& dual, const ReplayBuffer& buffer, TrainState& state,
                                   Rng& sampler_rng, Rng& dropout_rng) {
  const auto batch = sample_batch(buffer, state.cfg.batch_size, model.config().context_len, sampler_rng);
  StepMetrics m = primal_step(model, dual, batch, state, dropout_rng);
  if (!model.config().deterministic) {
    dual_step(dual, m.entropy);
    ++state.dual_steps;
  }
  return m;
}

}  // namespace odt
