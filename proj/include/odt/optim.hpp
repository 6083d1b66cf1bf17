#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "odt/error.hpp"
#include "odt/policy.hpp"
#include "odt/types.hpp"

namespace odt {

enum class OptimizerKind { lamb, adamw };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "lamb") return OptimizerKind::lamb;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("optimizer must be 'lamb' or 'adamw', got '" + s + "'");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::lamb ? "lamb" : "adamw"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::lamb;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
};

/// lr = base * min(1, step / warmup), step counted from 1.
inline double warmup_lr(double base_lr, long step, long warmup_steps) {
  if (warmup_steps <= 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

inline double global_norm(const std::vector<Matrix>& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

struct ClipResult {
  double pre = 0.0;
  double post = 0.0;
};

/// Rescales all gradients jointly so their global norm is at most `max_norm`.
inline ClipResult clip_global_norm(std::vector<Matrix>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("grad clip threshold must be positive");
  ClipResult r;
  r.pre = global_norm(grads);
  if (r.pre > max_norm) {
    const double scale = max_norm / r.pre;
    for (auto& g : grads) g *= scale;
    r.post = global_norm(grads);
  } else {
    r.post = r.pre;
  }
  return r;
}

/// First/second moments for every parameter tensor. LAMB applies the trust
/// ratio per tensor; AdamW is the same update without it.
class ParameterOptimizer {
 public:
  ParameterOptimizer() = default;
  ParameterOptimizer(OptimizerConfig cfg, const std::vector<Parameter>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }

  /// One update with learning rate `lr` and decoupled weight decay `wd`
  /// applied to parameters flagged for decay.
  void step(std::vector<Parameter>& params, const std::vector<Matrix>& grads, double lr, double wd) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw Error("optimizer state does not match the parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& w = params[i].value;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
      Matrix r = ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps)).matrix();
      if (params[i].decay && wd != 0.0) r += wd * w;
      double trust = 1.0;
      if (cfg_.kind == OptimizerKind::lamb) {
        const double wn = w.norm(), rn = r.norm();
        trust = (wn > 0.0 && rn > 0.0) ? wn / rn : 1.0;
      }
      w -= (lr * trust) * r;
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  long steps() const { return t_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

/// Adam on a single scalar.
struct ScalarAdam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double m = 0.0;
  double v = 0.0;
  long t = 0;

  /// Returns the applied change.
  double step(double& x, double g) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    const double delta = -lr * mhat / (std::sqrt(vhat) + eps);
    x += delta;
    return delta;
  }
};

}  // namespace odt
