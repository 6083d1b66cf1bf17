#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "odt/error.hpp"
#include "odt/nn.hpp"
#include "odt/rng.hpp"
#include "odt/trajectory.hpp"
#include "odt/types.hpp"

namespace odt {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

struct PolicyConfig {
  int state_dim = 1;
  int action_dim = 1;
  int n_layers = 2;
  int n_heads = 2;
  int embed_dim = 64;
  int context_len = 20;  // K
  double dropout = 0.1;
  bool use_positional_embedding = true;
  int max_timestep = 1000;  // size of the timestep table; larger steps are capped
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  bool deterministic = false;
  double rtg_scale = 1.0;

  void validate() const {
    if (state_dim < 1 || action_dim < 1) throw ConfigError("state_dim and action_dim must be positive");
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (n_heads < 1 || embed_dim < 1 || embed_dim % n_heads != 0)
      throw ConfigError("embed_dim must be a positive multiple of n_heads");
    if (context_len < 1) throw ConfigError("context_len must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (max_timestep < 1) throw ConfigError("max_timestep must be >= 1");
    if (!(log_std_min < log_std_max)) throw ConfigError("log_std bounds must satisfy low < high");
    if (!(rtg_scale > 0.0)) throw ConfigError("rtg_scale must be positive");
  }
};

struct Parameter {
  std::string name;
  Matrix value;
  bool decay = true;  // weight decay applies (weights and embedding tables)
};

/// Diagonal Gaussian per valid (window, timestep) position. Rows of `mean`
/// and `log_std` are the valid positions in window order; padded positions
/// have no row.
struct GaussianBatch {
  Matrix mean;
  Matrix log_std;
  std::vector<std::pair<int, int>> positions;  // (window, timestep within window)
  int batch = 0;
  int context_len = 0;

  int valid_positions() const { return static_cast<int>(mean.rows()); }

  /// batch x context_len mask, row-major.
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(batch * context_len), 0);
    for (const auto& [b, t] : positions) m[static_cast<std::size_t>(b * context_len + t)] = 1;
    return m;
  }
};

enum class ActMode { sample, mean };

/// Targets of the valid positions, stacked in the same order as GaussianBatch.
inline Matrix gather_actions(std::span<const TrainingWindow> windows) {
  Eigen::Index rows = 0;
  for (const auto& w : windows) rows += w.length;
  const Eigen::Index a_dim = windows.empty() ? 0 : windows.front().actions.cols();
  Matrix out(rows, a_dim);
  Eigen::Index r = 0;
  for (const auto& w : windows) {
    out.middleRows(r, w.length) = w.actions.topRows(w.length);
    r += w.length;
  }
  return out;
}

/// Return-conditioned causal transformer with a diagonal Gaussian head.
///
/// Tokens are interleaved per timestep as (g_t, s_t, a_t). The action
/// distribution for timestep t is read from the final hidden state at the
/// s_t token, so it sees g_{<=t}, s_{<=t} and a_{<t}. Windows are
/// right-padded; padding sits after every valid token and the causal mask
/// keeps it out of every valid position, so the forward pass only runs the
/// valid tokens.
///
/// A model is immutable during evaluation; mutation happens through
/// `parameters()` in the training loop.
class PolicyModel {
 public:
  struct BlockCache {
    Matrix x_in;
    nn::LayerNormCache ln1;
    Matrix ln1_out;
    Matrix qkv;
    nn::AttentionCache attn;
    Matrix att;
    Matrix drop_attn;
    Matrix x_mid;
    nn::LayerNormCache ln2;
    Matrix ln2_out;
    Matrix fc_pre;
    Matrix fc_act;
    Matrix drop_mlp;
  };

  struct Cache {
    std::vector<nn::Segment> segments;
    std::vector<int> timesteps;  // per timestep row (M)
    Matrix rtg_in, state_in, action_in;
    nn::LayerNormCache embed_ln;
    Matrix drop_embed;
    std::vector<BlockCache> blocks;
    nn::LayerNormCache final_ln;
    std::vector<Eigen::Index> state_rows;
    Matrix hidden_state;  // P x E
    Matrix raw_log_std;   // P x A
  };

  PolicyModel(PolicyConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int e = cfg_.embed_dim;
    auto uniform = [&](int rows, int cols, double bound) {
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = init_rng.uniform(-bound, bound);
      return m;
    };
    auto linear = [&](const std::string& name, int in, int out) {
      LinearIdx idx;
      idx.w = add(name + ".weight", uniform(in, out, 1.0 / std::sqrt(static_cast<double>(in))), true);
      idx.b = add(name + ".bias", Matrix::Zero(1, out), false);
      return idx;
    };
    auto layer_norm = [&](const std::string& name) {
      NormIdx idx;
      idx.gamma = add(name + ".gamma", Matrix::Ones(1, e), false);
      idx.beta = add(name + ".beta", Matrix::Zero(1, e), false);
      return idx;
    };
    embed_rtg_ = linear("embed_rtg", 1, e);
    embed_state_ = linear("embed_state", cfg_.state_dim, e);
    embed_action_ = linear("embed_action", cfg_.action_dim, e);
    if (cfg_.use_positional_embedding)
      embed_timestep_ = add("embed_timestep.weight", uniform(cfg_.max_timestep, e, 0.05), true);
    embed_ln_ = layer_norm("embed_ln");
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      BlockIdx b;
      b.ln1 = layer_norm(p + "ln1");
      b.qkv = linear(p + "attn.qkv", e, 3 * e);
      b.proj = linear(p + "attn.proj", e, e);
      b.ln2 = layer_norm(p + "ln2");
      b.fc = linear(p + "mlp.fc", e, 4 * e);
      b.fc_proj = linear(p + "mlp.proj", 4 * e, e);
      blocks_.push_back(b);
    }
    final_ln_ = layer_norm("final_ln");
    head_mean_.w = add("head_mean.weight", Matrix::Zero(e, cfg_.action_dim), true);
    head_mean_.b = add("head_mean.bias", Matrix::Zero(1, cfg_.action_dim), false);
    head_log_std_.w = add("head_log_std.weight", Matrix::Zero(e, cfg_.action_dim), true);
    head_log_std_.b = add("head_log_std.bias", Matrix::Constant(1, cfg_.action_dim, -1.0), false);
  }

  const PolicyConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  Parameter& parameter(std::string_view name) { return params_[index_of(name)]; }
  const Parameter& parameter(std::string_view name) const { return params_[index_of(name)]; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw Error("no parameter named '" + std::string(name) + "'");
  }

  /// Zero tensors shaped like every parameter.
  std::vector<Matrix> zero_grads() const {
    std::vector<Matrix> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    return g;
  }

  /// Policy distribution for every valid position. Dropout is active only in
  /// train mode, where `dropout_rng` must be non-null.
  GaussianBatch forward(std::span<const TrainingWindow> windows, bool train_mode = false,
                        Rng* dropout_rng = nullptr, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    const int e = cfg_.embed_dim;
    const bool drop = train_mode && cfg_.dropout > 0.0;
    if (drop && dropout_rng == nullptr) throw Error("train-mode forward needs a dropout rng");

    // Stack the valid timesteps of every window.
    c.segments.clear();
    c.timesteps.clear();
    Eigen::Index m = 0;
    for (const auto& w : windows) {
      if (w.length > cfg_.context_len) throw Error("window length exceeds context length K");
      if (w.states.cols() != cfg_.state_dim || w.actions.cols() != cfg_.action_dim)
        throw Error("window dimensions do not match the policy");
      if (w.length == 0) continue;  // fully masked: contributes nothing
      c.segments.push_back({3 * m, 3 * static_cast<Eigen::Index>(w.length)});
      m += w.length;
    }
    c.rtg_in.resize(m, 1);
    c.state_in.resize(m, cfg_.state_dim);
    c.action_in.resize(m, cfg_.action_dim);
    {
      Eigen::Index r = 0;
      for (const auto& w : windows) {
        c.rtg_in.middleRows(r, w.length) = w.rtgs.head(w.length) / cfg_.rtg_scale;
        c.state_in.middleRows(r, w.length) = w.states.topRows(w.length);
        c.action_in.middleRows(r, w.length) = w.actions.topRows(w.length);
        for (int t = 0; t < w.length; ++t)
          c.timesteps.push_back(std::min(w.timesteps[static_cast<std::size_t>(t)], cfg_.max_timestep - 1));
        r += w.length;
      }
    }

    const Matrix er = nn::linear(c.rtg_in, w(embed_rtg_.w), w(embed_rtg_.b));
    const Matrix es = nn::linear(c.state_in, w(embed_state_.w), w(embed_state_.b));
    const Matrix ea = nn::linear(c.action_in, w(embed_action_.w), w(embed_action_.b));
    Matrix x(3 * m, e);
    for (Eigen::Index i = 0; i < m; ++i) {
      x.row(3 * i) = er.row(i);
      x.row(3 * i + 1) = es.row(i);
      x.row(3 * i + 2) = ea.row(i);
      if (cfg_.use_positional_embedding) {
        const auto pos = w(embed_timestep_).row(c.timesteps[static_cast<std::size_t>(i)]);
        x.row(3 * i) += pos;
        x.row(3 * i + 1) += pos;
        x.row(3 * i + 2) += pos;
      }
    }
    x = nn::layer_norm(x, w(embed_ln_.gamma), w(embed_ln_.beta), c.embed_ln);
    c.drop_embed = drop ? nn::dropout_mask(x.rows(), x.cols(), cfg_.dropout, *dropout_rng) : Matrix();
    nn::apply_mask(x, c.drop_embed);

    c.blocks.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const BlockIdx& b = blocks_[l];
      BlockCache& bc = c.blocks[l];
      bc.x_in = x;
      bc.ln1_out = nn::layer_norm(x, w(b.ln1.gamma), w(b.ln1.beta), bc.ln1);
      bc.qkv = nn::linear(bc.ln1_out, w(b.qkv.w), w(b.qkv.b));
      bc.att = nn::causal_attention(bc.qkv, c.segments, cfg_.n_heads, bc.attn);
      Matrix a = nn::linear(bc.att, w(b.proj.w), w(b.proj.b));
      bc.drop_attn = drop ? nn::dropout_mask(a.rows(), a.cols(), cfg_.dropout, *dropout_rng) : Matrix();
      nn::apply_mask(a, bc.drop_attn);
      bc.x_mid = x + a;
      bc.ln2_out = nn::layer_norm(bc.x_mid, w(b.ln2.gamma), w(b.ln2.beta), bc.ln2);
      bc.fc_pre = nn::linear(bc.ln2_out, w(b.fc.w), w(b.fc.b));
      bc.fc_act = nn::relu(bc.fc_pre);
      Matrix f = nn::linear(bc.fc_act, w(b.fc_proj.w), w(b.fc_proj.b));
      bc.drop_mlp = drop ? nn::dropout_mask(f.rows(), f.cols(), cfg_.dropout, *dropout_rng) : Matrix();
      nn::apply_mask(f, bc.drop_mlp);
      x = bc.x_mid + f;
    }
    const Matrix y = nn::layer_norm(x, w(final_ln_.gamma), w(final_ln_.beta), c.final_ln);

    c.state_rows.resize(static_cast<std::size_t>(m));
    c.hidden_state.resize(m, e);
    for (Eigen::Index i = 0; i < m; ++i) {
      c.state_rows[static_cast<std::size_t>(i)] = 3 * i + 1;
      c.hidden_state.row(i) = y.row(3 * i + 1);
    }

    GaussianBatch out;
    out.batch = static_cast<int>(windows.size());
    out.context_len = cfg_.context_len;
    out.mean = nn::linear(c.hidden_state, w(head_mean_.w), w(head_mean_.b));
    c.raw_log_std = nn::linear(c.hidden_state, w(head_log_std_.w), w(head_log_std_.b));
    out.log_std = c.raw_log_std.cwiseMax(cfg_.log_std_min).cwiseMin(cfg_.log_std_max);
    for (std::size_t b = 0; b < windows.size(); ++b)
      for (int t = 0; t < windows[b].length; ++t) out.positions.emplace_back(static_cast<int>(b), t);
    return out;
  }

  /// Mean-head output of the deterministic variant. Same trunk as forward().
  Matrix forward_deterministic(std::span<const TrainingWindow> windows, bool train_mode = false,
                               Rng* dropout_rng = nullptr, Cache* cache = nullptr) const {
    if (!cfg_.deterministic) throw Error("forward_deterministic requires a deterministic policy");
    return forward(windows, train_mode, dropout_rng, cache).mean;
  }

  /// Reverse pass from d(loss)/d(mean) and d(loss)/d(log_std) at every valid
  /// position. The log_std gradient is cut where the clamp is active.
  std::vector<Matrix> backward(const Cache& c, const Matrix& dmean, const Matrix& dlog_std) const {
    std::vector<Matrix> g = zero_grads();
    const int e = cfg_.embed_dim;

    Matrix dls = dlog_std;
    for (Eigen::Index i = 0; i < dls.size(); ++i) {
      const double raw = c.raw_log_std.data()[i];
      if (raw < cfg_.log_std_min || raw > cfg_.log_std_max) dls.data()[i] = 0.0;
    }
    Matrix dh = nn::linear_backward(c.hidden_state, w(head_mean_.w), dmean, g[head_mean_.w], g[head_mean_.b]);
    dh += nn::linear_backward(c.hidden_state, w(head_log_std_.w), dls, g[head_log_std_.w], g[head_log_std_.b]);

    const Eigen::Index n = c.final_ln.xhat.rows();
    Matrix dy = Matrix::Zero(n, e);
    for (std::size_t i = 0; i < c.state_rows.size(); ++i)
      dy.row(c.state_rows[i]) = dh.row(static_cast<Eigen::Index>(i));
    Matrix dx = nn::layer_norm_backward(dy, w(final_ln_.gamma), c.final_ln, g[final_ln_.gamma], g[final_ln_.beta]);

    for (std::size_t l = blocks_.size(); l-- > 0;) {
      const BlockIdx& b = blocks_[l];
      const BlockCache& bc = c.blocks[l];
      Matrix df = dx;
      nn::apply_mask(df, bc.drop_mlp);
      Matrix dact = nn::linear_backward(bc.fc_act, w(b.fc_proj.w), df, g[b.fc_proj.w], g[b.fc_proj.b]);
      Matrix dpre = nn::relu_backward(bc.fc_pre, dact);
      Matrix dln2 = nn::linear_backward(bc.ln2_out, w(b.fc.w), dpre, g[b.fc.w], g[b.fc.b]);
      Matrix dmid = dx + nn::layer_norm_backward(dln2, w(b.ln2.gamma), bc.ln2, g[b.ln2.gamma], g[b.ln2.beta]);
      Matrix da = dmid;
      nn::apply_mask(da, bc.drop_attn);
      Matrix datt = nn::linear_backward(bc.att, w(b.proj.w), da, g[b.proj.w], g[b.proj.b]);
      Matrix dqkv = nn::causal_attention_backward(bc.qkv, c.segments, cfg_.n_heads, bc.attn, datt);
      Matrix dln1 = nn::linear_backward(bc.ln1_out, w(b.qkv.w), dqkv, g[b.qkv.w], g[b.qkv.b]);
      dx = dmid + nn::layer_norm_backward(dln1, w(b.ln1.gamma), bc.ln1, g[b.ln1.gamma], g[b.ln1.beta]);
    }

    nn::apply_mask(dx, c.drop_embed);
    dx = nn::layer_norm_backward(dx, w(embed_ln_.gamma), c.embed_ln, g[embed_ln_.gamma], g[embed_ln_.beta]);

    const Eigen::Index m = c.rtg_in.rows();
    Matrix der(m, e), des(m, e), dea(m, e);
    for (Eigen::Index i = 0; i < m; ++i) {
      der.row(i) = dx.row(3 * i);
      des.row(i) = dx.row(3 * i + 1);
      dea.row(i) = dx.row(3 * i + 2);
      if (cfg_.use_positional_embedding)
        g[embed_timestep_].row(c.timesteps[static_cast<std::size_t>(i)]) += der.row(i) + des.row(i) + dea.row(i);
    }
    nn::linear_backward(c.rtg_in, w(embed_rtg_.w), der, g[embed_rtg_.w], g[embed_rtg_.b]);
    nn::linear_backward(c.state_in, w(embed_state_.w), des, g[embed_state_.w], g[embed_state_.b]);
    nn::linear_backward(c.action_in, w(embed_action_.w), dea, g[embed_action_.w], g[embed_action_.b]);
    return g;
  }

 private:
  struct LinearIdx {
    std::size_t w = 0, b = 0;
  };
  struct NormIdx {
    std::size_t gamma = 0, beta = 0;
  };
  struct BlockIdx {
    NormIdx ln1;
    LinearIdx qkv, proj;
    NormIdx ln2;
    LinearIdx fc, fc_proj;
  };

  std::size_t add(std::string name, Matrix value, bool decay) {
    params_.push_back(Parameter{std::move(name), std::move(value), decay});
    return params_.size() - 1;
  }

  const Matrix& w(std::size_t i) const { return params_[i].value; }

  PolicyConfig cfg_;
  std::vector<Parameter> params_;
  LinearIdx embed_rtg_, embed_state_, embed_action_;
  std::size_t embed_timestep_ = 0;
  NormIdx embed_ln_;
  std::vector<BlockIdx> blocks_;
  NormIdx final_ln_;
  LinearIdx head_mean_, head_log_std_;
};

// ---------------------------------------------------------------------------
// Distribution operations

inline void require_stochastic(const PolicyModel& model, const char* op) {
  if (model.config().deterministic) throw Error(std::string(op) + " is undefined for a deterministic policy");
}

/// Mean over valid positions of sum_d log N(a_d | mu_d, sigma_d^2).
inline double log_prob(const GaussianBatch& dist, const Matrix& actions) {
  if (actions.rows() != dist.mean.rows() || actions.cols() != dist.mean.cols())
    throw Error("log_prob: action shape does not match the distribution");
  if (dist.valid_positions() == 0) return 0.0;
  const auto z = (actions - dist.mean).array() / dist.log_std.array().exp();
  const double total = -(kHalfLog2Pi + dist.log_std.array() + 0.5 * z.square()).sum();
  if (!std::isfinite(total)) throw NumericalError("log_prob is not finite");
  return total / dist.valid_positions();
}

inline double log_prob(const GaussianBatch& dist, std::span<const TrainingWindow> windows) {
  return log_prob(dist, gather_actions(windows));
}

/// Closed-form entropy sum_d (0.5 log(2 pi e) + log sigma_d), averaged over
/// valid positions.
inline double entropy_closed_form(const GaussianBatch& dist) {
  if (dist.valid_positions() == 0) return 0.0;
  return (kHalfLog2Pi + 0.5 + dist.log_std.array()).sum() / dist.valid_positions();
}

/// Standard normal draws, one per valid position and action dimension.
inline Matrix draw_noise(const GaussianBatch& dist, Rng& rng) {
  Matrix eps(dist.mean.rows(), dist.mean.cols());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
  return eps;
}

/// -log pi(a') at the reparameterized sample a' = mu + sigma * eps, averaged
/// over valid positions.
inline double entropy_from_noise(const GaussianBatch& dist, const Matrix& eps) {
  if (dist.valid_positions() == 0) return 0.0;
  const Matrix sigma = dist.log_std.array().exp().matrix();
  const Matrix sample = dist.mean + (sigma.array() * eps.array()).matrix();
  return -log_prob(dist, sample);
}

/// One-sample Monte Carlo entropy estimate.
inline double entropy_one_sample(const GaussianBatch& dist, Rng& rng) {
  return entropy_from_noise(dist, draw_noise(dist, rng));
}

// ---------------------------------------------------------------------------
// Losses and the differentiation contract

enum class LossKind {
  nll,          // J(theta)
  nll_entropy,  // J(theta) - lambda * H_hat
  l2,           // deterministic variant
};

struct LossSpec {
  LossKind kind = LossKind::nll;
  double lambda = 0.0;
};

struct LossTerms {
  double loss = 0.0;
  double nll = 0.0;      // NaN for the deterministic variant
  double entropy = 0.0;  // one-sample estimate; NaN for the deterministic variant
  double l2 = 0.0;       // NaN for stochastic losses
};

struct GradResult {
  LossTerms terms;
  std::vector<Matrix> grads;
};

namespace detail {

/// Loss value plus d/d(mean), d/d(log_std) at the valid positions.
struct HeadGrads {
  LossTerms terms;
  Matrix dmean;
  Matrix dlog_std;
};

inline HeadGrads loss_head(const PolicyModel& model, const LossSpec& spec, const GaussianBatch& dist,
                           const Matrix& actions, Rng& rng) {
  const auto p = static_cast<double>(std::max(1, dist.valid_positions()));
  HeadGrads h;
  h.dmean = Matrix::Zero(dist.mean.rows(), dist.mean.cols());
  h.dlog_std = Matrix::Zero(dist.mean.rows(), dist.mean.cols());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (spec.kind == LossKind::l2) {
    if (!model.config().deterministic) throw Error("the l2 loss requires a deterministic policy");
    const Matrix diff = actions - dist.mean;
    h.terms.l2 = dist.valid_positions() ? diff.squaredNorm() / p : 0.0;
    h.terms.loss = h.terms.l2;
    h.terms.nll = nan;
    h.terms.entropy = nan;
    h.dmean = -2.0 * diff / p;
    return h;
  }
  require_stochastic(model, "the NLL loss");
  const Matrix inv_var = (-2.0 * dist.log_std.array()).exp().matrix();
  const Matrix diff = actions - dist.mean;
  h.terms.nll = -log_prob(dist, actions);
  h.dmean = -(diff.array() * inv_var.array()).matrix() / p;
  h.dlog_std = (1.0 - diff.array().square() * inv_var.array()).matrix() / p;
  h.terms.l2 = nan;
  h.terms.loss = h.terms.nll;
  // The estimate is always drawn so both losses consume the rng identically.
  const Matrix eps = draw_noise(dist, rng);
  h.terms.entropy = entropy_from_noise(dist, eps);
  if (spec.kind == LossKind::nll_entropy) {
    // -log pi(mu + sigma eps) = sum_d log sigma_d + eps_d^2 / 2 + const, so
    // the total derivative is 0 w.r.t. mu and 1 w.r.t. each log sigma_d.
    h.terms.loss -= spec.lambda * h.terms.entropy;
    h.dlog_std.array() -= spec.lambda / p;
  }
  return h;
}

}  // namespace detail

/// Scalar value of the loss; consumes `rng` exactly like grad().
inline LossTerms loss_value(const PolicyModel& model, const LossSpec& spec, std::span<const TrainingWindow> windows,
                            Rng& rng, bool train_mode = false) {
  const GaussianBatch dist = model.forward(windows, train_mode, &rng);
  return detail::loss_head(model, spec, dist, gather_actions(windows), rng).terms;
}

/// Exact reverse-mode gradient of the specified loss w.r.t. every parameter.
/// Dropout masks (train mode) and the reparameterization noise come from
/// `rng`, in that order, so a copy of the same rng reproduces the value.
inline GradResult grad(const PolicyModel& model, const LossSpec& spec, std::span<const TrainingWindow> windows,
                       Rng& rng, bool train_mode = false) {
  PolicyModel::Cache cache;
  const GaussianBatch dist = model.forward(windows, train_mode, &rng, &cache);
  detail::HeadGrads h = detail::loss_head(model, spec, dist, gather_actions(windows), rng);
  if (!std::isfinite(h.terms.loss)) throw NumericalError("loss is not finite");
  GradResult out;
  out.terms = h.terms;
  out.grads = model.backward(cache, h.dmean, h.dlog_std);
  for (std::size_t i = 0; i < out.grads.size(); ++i)
    if (!out.grads[i].allFinite())
      throw NumericalError("non-finite gradient in parameter '" + model.parameters()[i].name + "'");
  return out;
}

// ---------------------------------------------------------------------------
// Acting

struct ContextStep {
  double rtg = 0.0;
  Vector state;
  Vector action;  // ignored for the newest step
  int timestep = 0;
};

/// Builds the conditioning window from the newest min(|context|, k_eval)
/// steps. The newest step's action slot is zeroed.
inline TrainingWindow context_window(std::span<const ContextStep> context, int k_eval, int action_dim) {
  if (context.empty()) throw Error("act: empty context");
  if (k_eval < 1) throw Error("act: K_eval must be >= 1");
  const int len = std::min(static_cast<int>(context.size()), k_eval);
  const auto first = context.size() - static_cast<std::size_t>(len);
  const auto state_dim = context.back().state.size();
  TrainingWindow w;
  w.states = Matrix::Zero(len, state_dim);
  w.actions = Matrix::Zero(len, action_dim);
  w.rtgs = Vector::Zero(len);
  w.timesteps.assign(static_cast<std::size_t>(len), 0);
  w.mask.assign(static_cast<std::size_t>(len), 1);
  w.length = len;
  for (int i = 0; i < len; ++i) {
    const ContextStep& s = context[first + static_cast<std::size_t>(i)];
    w.states.row(i) = s.state.transpose();
    if (i + 1 < len) w.actions.row(i) = s.action.transpose();
    w.rtgs[i] = s.rtg;
    w.timesteps[static_cast<std::size_t>(i)] = s.timestep;
  }
  return w;
}

/// Action for the newest context step. `mean` returns mu; `sample` returns
/// mu + sigma * eps (a deterministic policy always returns its output).
/// When bounds are given the action is clamped into them.
inline Vector act(const PolicyModel& model, std::span<const ContextStep> context, int k_eval, ActMode mode, Rng& rng,
                  const Vector* low = nullptr, const Vector* high = nullptr) {
  if (k_eval > model.config().context_len) throw Error("act: K_eval exceeds the training context length");
  const TrainingWindow w = context_window(context, k_eval, model.config().action_dim);
  const GaussianBatch dist = model.forward(std::span<const TrainingWindow>(&w, 1));
  const Eigen::Index last = dist.mean.rows() - 1;
  Vector a = dist.mean.row(last).transpose();
  if (mode == ActMode::sample && !model.config().deterministic) {
    for (Eigen::Index d = 0; d < a.size(); ++d) a[d] += std::exp(dist.log_std(last, d)) * rng.normal();
  }
  if (low && high) a = a.cwiseMax(*low).cwiseMin(*high);
  return a;
}

}  // namespace odt
