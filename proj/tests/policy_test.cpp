#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "odt/policy.hpp"
#include "test_support.hpp"

namespace odt {
namespace {

using testing::finite_difference_check;
using testing::randomize;
using testing::tiny_batch;
using testing::tiny_config;

// ---------------------------------------------------------------------------
// Straight-line reference forward: one window, plain loops over doubles,
// no batching or Eigen expressions. Independent of the batched path.

using Vec = std::vector<double>;

struct Reference {
  const PolicyModel& m;

  double at(const char* name, int r, int c) const { return m.parameter(name).value(r, c); }
  double at(const std::string& name, int r, int c) const { return m.parameter(name).value(r, c); }

  Vec linear(const Vec& x, const std::string& prefix) const {
    const auto& w = m.parameter(prefix + ".weight").value;
    Vec y(static_cast<std::size_t>(w.cols()));
    for (int o = 0; o < w.cols(); ++o) {
      double s = at(prefix + ".bias", 0, o);
      for (int i = 0; i < w.rows(); ++i) s += x[static_cast<std::size_t>(i)] * w(i, o);
      y[static_cast<std::size_t>(o)] = s;
    }
    return y;
  }

  Vec layer_norm(const Vec& x, const std::string& prefix) const {
    double mean = 0, var = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * at(prefix + ".gamma", 0, static_cast<int>(i)) +
             at(prefix + ".beta", 0, static_cast<int>(i));
    return y;
  }

  /// Returns (mean, log_std) per valid timestep.
  std::vector<std::pair<Vec, Vec>> run(const TrainingWindow& w) const {
    const auto& cfg = m.config();
    const int e = cfg.embed_dim;
    std::vector<Vec> tokens;
    for (int t = 0; t < w.length; ++t) {
      Vec g{w.rtgs[t] / cfg.rtg_scale};
      Vec s(w.states.row(t).data(), w.states.row(t).data() + w.states.cols());
      Vec a(w.actions.row(t).data(), w.actions.row(t).data() + w.actions.cols());
      for (auto* emb : {&g, &s, &a}) {
        const char* name = emb == &g ? "embed_rtg" : emb == &s ? "embed_state" : "embed_action";
        Vec tok = linear(*emb, name);
        if (cfg.use_positional_embedding)
          for (int i = 0; i < e; ++i) tok[static_cast<std::size_t>(i)] += at("embed_timestep.weight", w.timesteps[t], i);
        tokens.push_back(layer_norm(tok, "embed_ln"));
      }
    }
    const int n = static_cast<int>(tokens.size());
    const int hd = e / cfg.n_heads;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      std::vector<Vec> qkv;
      for (const auto& x : tokens) qkv.push_back(linear(layer_norm(x, p + "ln1"), p + "attn.qkv"));
      std::vector<Vec> next = tokens;
      for (int i = 0; i < n; ++i) {
        Vec att(static_cast<std::size_t>(e), 0.0);
        for (int h = 0; h < cfg.n_heads; ++h) {
          Vec score(static_cast<std::size_t>(i + 1));
          double mx = -1e300;
          for (int j = 0; j <= i; ++j) {
            double s = 0;
            for (int d = 0; d < hd; ++d)
              s += qkv[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * hd + d)] *
                   qkv[static_cast<std::size_t>(j)][static_cast<std::size_t>(e + h * hd + d)];
            score[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(hd));
            mx = std::max(mx, score[static_cast<std::size_t>(j)]);
          }
          double z = 0;
          for (double& s : score) z += (s = std::exp(s - mx));
          for (int j = 0; j <= i; ++j)
            for (int d = 0; d < hd; ++d)
              att[static_cast<std::size_t>(h * hd + d)] += score[static_cast<std::size_t>(j)] / z *
                                                           qkv[static_cast<std::size_t>(j)][static_cast<std::size_t>(2 * e + h * hd + d)];
        }
        const Vec a = linear(att, p + "attn.proj");
        for (int d = 0; d < e; ++d) next[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] += a[static_cast<std::size_t>(d)];
      }
      for (auto& x : next) {
        Vec hdn = linear(layer_norm(x, p + "ln2"), p + "mlp.fc");
        for (double& v : hdn) v = std::max(0.0, v);
        const Vec f = linear(hdn, p + "mlp.proj");
        for (int d = 0; d < e; ++d) x[static_cast<std::size_t>(d)] += f[static_cast<std::size_t>(d)];
      }
      tokens = next;
    }
    std::vector<std::pair<Vec, Vec>> out;
    for (int t = 0; t < w.length; ++t) {
      const Vec hdn = layer_norm(tokens[static_cast<std::size_t>(3 * t + 1)], "final_ln");
      Vec ls = linear(hdn, "head_log_std");
      for (double& v : ls) v = std::clamp(v, cfg.log_std_min, cfg.log_std_max);
      out.emplace_back(linear(hdn, "head_mean"), ls);
    }
    return out;
  }
};

TEST(PolicyForward, ZeroInputsWithZeroHeadsGiveBiasOutputs) {
  Rng rng(1);
  PolicyModel model(tiny_config(), rng);
  TrainingWindow w;
  w.states = Matrix::Zero(4, 3);
  w.actions = Matrix::Zero(4, 2);
  w.rtgs = Vector::Zero(4);
  w.timesteps = {0, 1, 2, 3};
  w.mask = {1, 1, 1, 1};
  w.length = 4;
  const auto dist = model.forward(std::span<const TrainingWindow>(&w, 1));
  EXPECT_TRUE((dist.mean.array() == 0.0).all());
  EXPECT_TRUE((dist.log_std.array() == -1.0).all());
}

TEST(PolicyForward, MatchesStraightLineReference) {
  Rng rng(2);
  PolicyConfig cfg = tiny_config();
  cfg.context_len = 2;
  PolicyModel model(cfg, rng);
  randomize(model, rng);
  auto batch = tiny_batch(rng, 3, 2, 2);
  const auto dist = model.forward(batch);
  const Reference ref{model};
  int row = 0;
  for (const auto& w : batch) {
    const auto expected = ref.run(w);
    for (int t = 0; t < w.length; ++t, ++row) {
      for (int d = 0; d < 2; ++d) {
        EXPECT_NEAR(dist.mean(row, d), expected[static_cast<std::size_t>(t)].first[static_cast<std::size_t>(d)], 1e-6);
        EXPECT_NEAR(dist.log_std(row, d), expected[static_cast<std::size_t>(t)].second[static_cast<std::size_t>(d)], 1e-6);
      }
    }
  }
}

TEST(PolicyForward, CausalityFutureTokensDoNotLeak) {
  Rng rng(3);
  PolicyConfig cfg = tiny_config();
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  PolicyModel model(cfg, rng);
  randomize(model, rng);
  const Trajectory traj = testing::random_trajectory(6, 3, 2, rng);
  const TrainingWindow base = make_window(traj, compute_rtg(traj.rewards), 0, 4);
  const auto ref = model.forward(std::span<const TrainingWindow>(&base, 1));
  for (int t = 0; t + 1 < base.length; ++t) {
    for (int which = 0; which < 3; ++which) {
      TrainingWindow w = base;
      if (which == 0) w.rtgs[t + 1] += 7.0;
      if (which == 1) w.states.row(t + 1).array() += 3.0;
      if (which == 2) w.actions.row(t).array() -= 5.0;  // a_t itself is hidden from position t
      const auto out = model.forward(std::span<const TrainingWindow>(&w, 1));
      for (int u = 0; u <= t; ++u) {
        EXPECT_TRUE((out.mean.row(u).array() == ref.mean.row(u).array()).all()) << "t=" << t << " which=" << which;
        EXPECT_TRUE((out.log_std.row(u).array() == ref.log_std.row(u).array()).all());
      }
      EXPECT_FALSE((out.mean.row(t + 1).array() == ref.mean.row(t + 1).array()).all());
    }
  }
}

TEST(PolicyForward, WithoutPositionalEmbeddingTimestepsAreIgnored) {
  Rng rng(4);
  PolicyConfig cfg = tiny_config();
  cfg.use_positional_embedding = false;
  PolicyModel model(cfg, rng);
  randomize(model, rng);
  auto batch = tiny_batch(rng);
  const auto ref = model.forward(batch);
  for (auto& w : batch)
    for (auto& ts : w.timesteps) ts += 3;
  const auto shifted = model.forward(batch);
  EXPECT_TRUE((ref.mean.array() == shifted.mean.array()).all());

  cfg.use_positional_embedding = true;
  PolicyModel with_pos(cfg, rng);
  randomize(with_pos, rng);
  const auto a = with_pos.forward(batch);
  for (auto& w : batch)
    for (auto& ts : w.timesteps) ts -= 3;
  const auto b = with_pos.forward(batch);
  EXPECT_FALSE((a.mean.array() == b.mean.array()).all());
}

TEST(PolicyForward, ReorderingEarlierTimestepsChangesLaterOutputs) {
  // Without positional embeddings, order information reaches position t only
  // through the causal mask: swapping two earlier timesteps changes what the
  // first of them sees, while the last position sees the same set of tokens.
  Rng rng(14);
  PolicyConfig cfg = tiny_config();
  cfg.use_positional_embedding = false;
  PolicyModel model(cfg, rng);
  randomize(model, rng);
  const Trajectory traj = testing::random_trajectory(4, 3, 2, rng);
  TrainingWindow w = make_window(traj, compute_rtg(traj.rewards), 0, 4);
  const auto ref = model.forward(std::span<const TrainingWindow>(&w, 1));
  TrainingWindow swapped = w;
  swapped.states.row(0).swap(swapped.states.row(1));
  swapped.actions.row(0).swap(swapped.actions.row(1));
  std::swap(swapped.rtgs[0], swapped.rtgs[1]);
  const auto out = model.forward(std::span<const TrainingWindow>(&swapped, 1));
  EXPECT_FALSE((out.mean.row(0).array() == ref.mean.row(0).array()).all());
}

TEST(PolicyForward, RejectsWindowsLongerThanContext) {
  Rng rng(5);
  PolicyConfig cfg = tiny_config();
  cfg.context_len = 2;
  PolicyModel model(cfg, rng);
  auto batch = tiny_batch(rng, 3, 2, 4);
  EXPECT_THROW(model.forward(batch), Error);
}

TEST(PolicyForward, DeterministicVariantSharesTrunk) {
  Rng rng(6);
  PolicyConfig cfg = tiny_config();
  PolicyModel stochastic(cfg, rng);
  randomize(stochastic, rng);
  cfg.deterministic = true;
  PolicyModel deterministic(cfg, rng);
  deterministic.parameters() = stochastic.parameters();
  const auto batch = tiny_batch(rng);
  EXPECT_TRUE((deterministic.forward_deterministic(batch).array() == stochastic.forward(batch).mean.array()).all());
  EXPECT_THROW(stochastic.forward_deterministic(batch), Error);
  Rng r(0);
  EXPECT_THROW(grad(deterministic, {LossKind::nll, 0.0}, batch, r), Error);
  EXPECT_THROW(grad(stochastic, {LossKind::l2, 0.0}, batch, r), Error);
}

// ---------------------------------------------------------------------------
// Distribution operations

GaussianBatch single_position(double mean, double log_std) {
  GaussianBatch d;
  d.mean = Matrix::Constant(1, 1, mean);
  d.log_std = Matrix::Constant(1, 1, log_std);
  d.positions = {{0, 0}};
  d.batch = 1;
  d.context_len = 1;
  return d;
}

TEST(LogProb, StandardNormalAtMode) {
  const auto d = single_position(0.0, 0.0);
  EXPECT_NEAR(log_prob(d, Matrix::Zero(1, 1)), -0.5 * std::log(2.0 * M_PI), 1e-15);
  EXPECT_NEAR(log_prob(d, Matrix::Zero(1, 1)), -0.9189, 1e-4);
}

TEST(LogProb, MeanAtTargetIsStationary) {
  Rng rng(7);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  auto batch = tiny_batch(rng);
  const auto dist = model.forward(batch);
  const Matrix targets = dist.mean;
  const double at_mode = log_prob(dist, targets);
  for (double delta : {-1e-3, 1e-3}) {
    GaussianBatch moved = dist;
    moved.mean.array() += delta;
    EXPECT_LT(log_prob(moved, targets), at_mode);
  }
}

TEST(LogProb, MatchesDensityProductOracle) {
  Rng rng(8);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto batch = tiny_batch(rng);
  const auto dist = model.forward(batch);
  const Matrix actions = gather_actions(batch);
  double total = 0.0;
  for (Eigen::Index i = 0; i < actions.rows(); ++i) {
    double density = 1.0;
    for (Eigen::Index d = 0; d < actions.cols(); ++d) {
      const double sigma = std::exp(dist.log_std(i, d));
      const double z = (actions(i, d) - dist.mean(i, d)) / sigma;
      density *= std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * M_PI));
    }
    total += std::log(density);
  }
  EXPECT_NEAR(log_prob(dist, actions), total / static_cast<double>(actions.rows()), 1e-8);
}

TEST(Entropy, ZeroNoiseGivesPlugInValue) {
  Rng rng(9);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto dist = model.forward(tiny_batch(rng));
  const double expected = (kHalfLog2Pi + dist.log_std.array()).sum() / dist.valid_positions();
  EXPECT_NEAR(entropy_from_noise(dist, Matrix::Zero(dist.mean.rows(), dist.mean.cols())), expected, 1e-12);
}

TEST(Entropy, OneSampleEstimateIsUnbiased) {
  Rng rng(10);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto dist = model.forward(tiny_batch(rng));
  const double closed = entropy_closed_form(dist);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += entropy_one_sample(dist, rng);
  EXPECT_NEAR(sum / n, closed, 0.01 * std::abs(closed));
}

TEST(Entropy, ClampFloorBoundsEstimate) {
  Rng rng(11);
  PolicyConfig cfg = tiny_config();
  PolicyModel model(cfg, rng);
  model.parameter("head_log_std.bias").value.setConstant(-100.0);
  const auto dist = model.forward(tiny_batch(rng));
  EXPECT_TRUE((dist.log_std.array() == cfg.log_std_min).all());
  const double floor = cfg.action_dim * (kHalfLog2Pi + cfg.log_std_min);
  for (int i = 0; i < 100; ++i) EXPECT_GE(entropy_one_sample(dist, rng), floor - 1e-12);
}

// ---------------------------------------------------------------------------
// Gradients

double max_abs(const std::vector<Matrix>& g) {
  double m = 0.0;
  for (const auto& x : g) m = std::max(m, x.cwiseAbs().maxCoeff());
  return m;
}

struct GradCase {
  LossKind kind;
  double lambda;
  bool train_mode;
};

class GradientCheck : public ::testing::TestWithParam<GradCase> {};

TEST_P(GradientCheck, MatchesCentralFiniteDifferences) {
  const GradCase gc = GetParam();
  Rng rng(12);
  PolicyConfig cfg = tiny_config();
  cfg.deterministic = gc.kind == LossKind::l2;
  if (gc.train_mode) cfg.dropout = 0.1;
  PolicyModel model(cfg, rng);
  randomize(model, rng);
  const auto batch = tiny_batch(rng);
  const LossSpec spec{gc.kind, gc.lambda};
  const Rng stream(99);
  Rng r1 = stream;
  const GradResult g = grad(model, spec, batch, r1, gc.train_mode);
  auto loss = [&] {
    Rng r = stream;
    return loss_value(model, spec, batch, r, gc.train_mode).loss;
  };
  const auto res = finite_difference_check(model, g.grads, loss);
  EXPECT_LE(res.max_rel_error, 1e-4) << "worst parameter " << res.worst_parameter;
  EXPECT_EQ(res.checked, model.parameter_count());
}

INSTANTIATE_TEST_SUITE_P(Losses, GradientCheck,
                         ::testing::Values(GradCase{LossKind::nll, 0.0, false},
                                           GradCase{LossKind::nll_entropy, 0.5, false},
                                           GradCase{LossKind::nll_entropy, 3.0, false},
                                           GradCase{LossKind::nll_entropy, 0.5, true},
                                           GradCase{LossKind::l2, 0.0, false}));

TEST(Gradient, FullyMaskedBatchHasZeroGradient) {
  Rng rng(13);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  auto batch = tiny_batch(rng);
  for (auto& w : batch) {
    w.length = 0;
    std::fill(w.mask.begin(), w.mask.end(), 0);
  }
  Rng r(1);
  const auto g = grad(model, {LossKind::nll_entropy, 0.5}, batch, r);
  EXPECT_EQ(g.terms.loss, 0.0);
  EXPECT_EQ(max_abs(g.grads), 0.0);
}

TEST(Gradient, LinearInLambda) {
  Rng rng(15);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto batch = tiny_batch(rng);
  const Rng stream(5);
  auto at = [&](double lambda) {
    Rng r = stream;
    return grad(model, {LossKind::nll_entropy, lambda}, batch, r).grads;
  };
  const auto g0 = at(0.0), g1 = at(1.0), g = at(2.5);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Matrix combo = g0[i] + 2.5 * (g1[i] - g0[i]);
    EXPECT_LE((g[i] - combo).cwiseAbs().maxCoeff(), 1e-10) << model.parameters()[i].name;
  }
  // lambda = 0 reduces to the plain NLL gradient.
  Rng r = stream;
  const auto nll = grad(model, {LossKind::nll, 0.0}, batch, r).grads;
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_TRUE((nll[i].array() == g0[i].array()).all());
}

TEST(Gradient, PaddedTargetsDoNotMatter) {
  Rng rng(16);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  auto batch = tiny_batch(rng);
  ASSERT_LT(batch[1].length, batch[1].context_len());
  Rng r1(3);
  const auto a = grad(model, {LossKind::nll_entropy, 0.7}, batch, r1);
  for (int t = batch[1].length; t < batch[1].context_len(); ++t) {
    batch[1].actions.row(t).setConstant(1e6);
    batch[1].states.row(t).setConstant(-42.0);
    batch[1].rtgs[t] = 1234.0;
  }
  Rng r2(3);
  const auto b = grad(model, {LossKind::nll_entropy, 0.7}, batch, r2);
  EXPECT_EQ(a.terms.loss, b.terms.loss);
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE((a.grads[i].array() == b.grads[i].array()).all());
}

TEST(Gradient, L2IsSigmaSquaredScaledNll) {
  // With log_std frozen at log(sigma), grad(l2)/2 == sigma^2 * grad(NLL) on
  // the mean head.
  Rng rng(17);
  PolicyConfig cfg = tiny_config();
  PolicyModel stochastic(cfg, rng);
  randomize(stochastic, rng);
  const double log_sigma = -0.3;
  stochastic.parameter("head_log_std.weight").value.setZero();
  stochastic.parameter("head_log_std.bias").value.setConstant(log_sigma);
  cfg.deterministic = true;
  PolicyModel deterministic(cfg, rng);
  deterministic.parameters() = stochastic.parameters();
  const auto batch = tiny_batch(rng);
  Rng r1(0), r2(0);
  const auto nll = grad(stochastic, {LossKind::nll, 0.0}, batch, r1);
  const auto l2 = grad(deterministic, {LossKind::l2, 0.0}, batch, r2);
  const double var = std::exp(2.0 * log_sigma);
  for (const char* name : {"head_mean.weight", "head_mean.bias"}) {
    const auto i = stochastic.index_of(name);
    EXPECT_LE((0.5 * l2.grads[i] - var * nll.grads[i]).cwiseAbs().maxCoeff(), 1e-6) << name;
  }
}

TEST(Loss, ZeroTargetsZeroOutputsGiveZeroL2) {
  Rng rng(18);
  PolicyConfig cfg = tiny_config();
  cfg.deterministic = true;
  PolicyModel model(cfg, rng);  // zero-initialized mean head
  auto batch = tiny_batch(rng);
  for (auto& w : batch) w.actions.setZero();
  Rng r(0);
  EXPECT_EQ(loss_value(model, {LossKind::l2, 0.0}, batch, r).loss, 0.0);
}

// ---------------------------------------------------------------------------
// Acting

std::vector<ContextStep> make_context(Rng& rng, int n) {
  std::vector<ContextStep> ctx;
  for (int t = 0; t < n; ++t) {
    ContextStep s;
    s.rtg = rng.uniform(0, 3);
    s.state = Vector::Random(3);
    s.action = Vector::Random(2);
    s.timestep = t;
    ctx.push_back(s);
  }
  return ctx;
}

TEST(Act, MeanModeIsDeterministic) {
  Rng rng(19);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto ctx = make_context(rng, 6);
  Rng r(0);
  const Vector a = act(model, ctx, 4, ActMode::mean, r);
  const Vector b = act(model, ctx, 4, ActMode::mean, r);
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Act, EvalContextOfOneIgnoresHistory) {
  Rng rng(20);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  auto ctx = make_context(rng, 4);
  Rng r(0);
  const Vector a = act(model, ctx, 1, ActMode::mean, r);
  std::swap(ctx[0], ctx[2]);
  ctx[1].state.setConstant(9.0);
  const Vector b = act(model, ctx, 1, ActMode::mean, r);
  EXPECT_TRUE((a.array() == b.array()).all());
  EXPECT_THROW(act(model, std::vector<ContextStep>{}, 1, ActMode::mean, r), Error);
}

TEST(Act, SampleModeCentresOnMean) {
  Rng rng(21);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto ctx = make_context(rng, 3);
  Rng r(1);
  const Vector mu = act(model, ctx, 4, ActMode::mean, r);
  const TrainingWindow w = context_window(ctx, 4, 2);
  const auto dist = model.forward(std::span<const TrainingWindow>(&w, 1));
  Vector sum = Vector::Zero(2);
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += act(model, ctx, 4, ActMode::sample, r);
  for (int d = 0; d < 2; ++d) {
    const double sigma = std::exp(dist.log_std(dist.mean.rows() - 1, d));
    EXPECT_NEAR(sum[d] / n, mu[d], 3.0 * sigma / 100.0);
  }
}

TEST(Act, ClampsToBounds) {
  Rng rng(22);
  PolicyModel model(tiny_config(), rng);
  model.parameter("head_mean.bias").value.setConstant(5.0);
  const auto ctx = make_context(rng, 2);
  const Vector lo = Vector::Constant(2, -1.0), hi = Vector::Constant(2, 1.0);
  Rng r(0);
  const Vector a = act(model, ctx, 4, ActMode::mean, r, &lo, &hi);
  EXPECT_TRUE((a.array() == 1.0).all());
}

}  // namespace
}  // namespace odt
