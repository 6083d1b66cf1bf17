#include <gtest/gtest.h>

#include <cmath>

#include "odt/train.hpp"
#include "test_support.hpp"

using namespace odt;
using odt::testing::randomize;
using odt::testing::tiny_batch;
using odt::testing::tiny_config;

namespace {

std::vector<Parameter> two_params() {
  std::vector<Parameter> p;
  Matrix a(2, 2);
  a << 1.0, -2.0, 0.5, 3.0;
  Matrix b(1, 3);
  b << 0.0, 0.0, 0.0;
  p.push_back({"a", a, true});
  p.push_back({"b", b, false});
  return p;
}

std::vector<Matrix> two_grads() {
  Matrix ga(2, 2);
  ga << 0.3, -0.1, 0.0, 2.0;
  Matrix gb(1, 3);
  gb << -1.0, 0.25, 4.0;
  return {ga, gb};
}

// Adam moments after one step from zero, then the decayed update direction, all
// written out entry by entry.
Matrix first_step_direction(const Matrix& g, const Matrix& w, double wd, double eps) {
  Matrix r(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double m = 0.1 * g.data()[i] / (1 - 0.9);
    const double v = 0.001 * g.data()[i] * g.data()[i] / (1 - 0.999);
    r.data()[i] = m / (std::sqrt(v) + eps) + wd * w.data()[i];
  }
  return r;
}

// Ten trajectories whose actions are a fixed smooth function of the state.
ReplayBuffer smoke_buffer(Rng& rng) {
  ReplayBuffer buf(10);
  Matrix W(2, 3);
  W << 0.9, -0.4, 0.3, 0.2, 0.7, -0.8;
  for (int i = 0; i < 10; ++i) {
    Trajectory t;
    const int len = 20;
    t.states.resize(len, 3);
    t.actions.resize(len, 2);
    t.rewards.resize(len);
    for (int k = 0; k < len; ++k) {
      for (int d = 0; d < 3; ++d) t.states(k, d) = rng.uniform(-1, 1);
      const Vector a = (W * t.states.row(k).transpose()).array().tanh();
      t.actions.row(k) = a.transpose();
      t.rewards[k] = rng.uniform(0, 1);
    }
    buf.insert_fifo(t);
  }
  return buf;
}

PolicyConfig smoke_config() {
  PolicyConfig c = tiny_config(3, 2);
  c.embed_dim = 16;
  c.n_heads = 2;
  c.max_timestep = 20;
  c.rtg_scale = 10.0;
  return c;
}

TrainConfig smoke_train() {
  TrainConfig t;
  t.optimizer = OptimizerKind::adamw;
  t.learning_rate = 3e-3;
  t.weight_decay = 1e-4;
  t.warmup_steps = 10;
  t.batch_size = 16;
  return t;
}

}  // namespace

TEST(Warmup, LinearRampFromOneBasedSteps) {
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 1, 4), 0.25e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 2, 4), 0.5e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 4, 4), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 400, 4), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 1, 0), 1e-3);
}

TEST(Clip, ScalesGlobalNormDown) {
  std::vector<Matrix> g = {Matrix::Constant(1, 1, 6.0), Matrix::Constant(1, 1, 8.0)};
  const auto r = clip_global_norm(g, 0.25);
  EXPECT_DOUBLE_EQ(r.pre, 10.0);
  EXPECT_NEAR(r.post, 0.25, 1e-15);
  EXPECT_NEAR(g[0](0, 0), 0.15, 1e-15);
  EXPECT_NEAR(g[1](0, 0), 0.2, 1e-15);
}

TEST(Clip, LeavesSmallGradientsAlone) {
  std::vector<Matrix> g = {Matrix::Constant(2, 1, 0.1)};
  const Matrix before = g[0];
  const auto r = clip_global_norm(g, 0.25);
  EXPECT_EQ(r.pre, r.post);
  EXPECT_TRUE(g[0] == before);
}

TEST(Clip, RejectsNonPositiveThreshold) {
  std::vector<Matrix> g = {Matrix::Constant(1, 1, 1.0)};
  EXPECT_THROW(clip_global_norm(g, 0.0), ConfigError);
  EXPECT_THROW(clip_global_norm(g, -1.0), ConfigError);
}

TEST(Optimizer, ParseKinds) {
  EXPECT_EQ(parse_optimizer("lamb"), OptimizerKind::lamb);
  EXPECT_EQ(parse_optimizer("adamw"), OptimizerKind::adamw);
  EXPECT_THROW(parse_optimizer("sgd"), ConfigError);
  EXPECT_EQ(to_string(OptimizerKind::adamw), "adamw");
}

TEST(Optimizer, AdamWFirstStepMatchesHandComputation) {
  auto params = two_params();
  const auto grads = two_grads();
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adamw;
  ParameterOptimizer opt(cfg, params);
  const auto w0 = params;
  const double lr = 0.01, wd = 0.1;
  opt.step(params, grads, lr, wd);
  const Matrix ra = first_step_direction(grads[0], w0[0].value, wd, cfg.eps);
  const Matrix rb = first_step_direction(grads[1], w0[1].value, 0.0, cfg.eps);
  EXPECT_LT((params[0].value - (w0[0].value - lr * ra)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((params[1].value - (w0[1].value - lr * rb)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Optimizer, LambAppliesPerTensorTrustRatio) {
  auto params = two_params();
  const auto grads = two_grads();
  OptimizerConfig cfg;
  ParameterOptimizer opt(cfg, params);
  const auto w0 = params;
  const double lr = 0.01, wd = 0.1;
  opt.step(params, grads, lr, wd);
  const Matrix ra = first_step_direction(grads[0], w0[0].value, wd, cfg.eps);
  const double trust_a = w0[0].value.norm() / ra.norm();
  EXPECT_LT((params[0].value - (w0[0].value - lr * trust_a * ra)).cwiseAbs().maxCoeff(), 1e-15);
  // Zero weights: trust ratio falls back to 1.
  const Matrix rb = first_step_direction(grads[1], w0[1].value, 0.0, cfg.eps);
  EXPECT_LT((params[1].value - (-lr * rb)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Optimizer, LambZeroUpdateKeepsWeights) {
  std::vector<Parameter> p = {{"w", Matrix::Constant(2, 2, 1.0), false}};
  ParameterOptimizer opt(OptimizerConfig{}, p);
  opt.step(p, {Matrix::Zero(2, 2)}, 0.1, 0.0);
  EXPECT_TRUE(p[0].value == Matrix::Constant(2, 2, 1.0));
}

TEST(Optimizer, SecondStepUsesBiasCorrectedMoments) {
  std::vector<Parameter> p = {{"w", Matrix::Constant(1, 1, 0.5), false}};
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adamw;
  ParameterOptimizer opt(cfg, p);
  const double g1 = 0.4, g2 = -1.2, lr = 0.05;
  opt.step(p, {Matrix::Constant(1, 1, g1)}, lr, 0.0);
  opt.step(p, {Matrix::Constant(1, 1, g2)}, lr, 0.0);
  double w = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? g1 : g2;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + cfg.eps);
  }
  EXPECT_NEAR(p[0].value(0, 0), w, 1e-15);
}

TEST(Optimizer, MismatchedStateThrows) {
  auto params = two_params();
  ParameterOptimizer opt(OptimizerConfig{}, params);
  EXPECT_THROW(opt.step(params, {Matrix::Zero(2, 2)}, 0.1, 0.0), Error);
}

TEST(ScalarAdam, FirstStepIsSignTimesLr) {
  ScalarAdam a;
  a.lr = 0.01;
  double x = 1.0;
  const double d = a.step(x, 3.0);
  EXPECT_NEAR(d, -0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_DOUBLE_EQ(x, 1.0 + d);
}

TEST(TrainConfig, ValidateRejectsBadValues) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& t) { t.learning_rate = 0; }, [](TrainConfig& t) { t.weight_decay = -1; },
           [](TrainConfig& t) { t.warmup_steps = -1; }, [](TrainConfig& t) { t.grad_clip = 0; },
           [](TrainConfig& t) { t.batch_size = 0; }, [](TrainConfig& t) { t.init_lambda = 0; },
           [](TrainConfig& t) { t.dual_lr = 0; }}) {
    TrainConfig bad;
    mutate(bad);
    EXPECT_THROW(bad.validate(), ConfigError);
  }
}

TEST(Dual, DefaultTargetIsMinusActionDim) {
  const auto d = make_dual(TrainConfig{}, 2);
  EXPECT_EQ(d.target_entropy, -2.0);
  EXPECT_DOUBLE_EQ(d.lambda(), 1.0);
  TrainConfig c;
  c.target_entropy = -5.0;
  c.init_lambda = 10.0;
  const auto e = make_dual(c, 2);
  EXPECT_EQ(e.target_entropy, -5.0);
  EXPECT_NEAR(e.lambda(), 10.0, 1e-12);
}

TEST(Dual, StepSignsFollowConstraintSlack) {
  DualState above(1.0, -2.0, 1e-4);
  EXPECT_LT(dual_step(above, -1.0), 0.0);  // entropy above target: lambda shrinks
  DualState below(1.0, -2.0, 1e-4);
  EXPECT_GT(dual_step(below, -3.0), 0.0);
  DualState tight(1.0, -2.0, 1e-4);
  EXPECT_EQ(dual_step(tight, -2.0), 0.0);
  EXPECT_DOUBLE_EQ(tight.lambda(), 1.0);
}

TEST(Dual, LambdaStaysPositive) {
  DualState d(1.0, -2.0, 0.5);
  for (int i = 0; i < 500; ++i) dual_step(d, 100.0);
  EXPECT_GT(d.lambda(), 0.0);
  EXPECT_TRUE(std::isfinite(d.log_lambda));
}

TEST(Dual, ResetMomentsKeepsLambdaAndLr) {
  DualState d(2.0, -2.0, 0.3);
  dual_step(d, 0.0);
  const double ll = d.log_lambda;
  d.reset_moments();
  EXPECT_EQ(d.log_lambda, ll);
  EXPECT_EQ(d.opt.lr, 0.3);
  EXPECT_EQ(d.opt.t, 0);
  EXPECT_EQ(d.opt.m, 0.0);
}

TEST(Dual, NonFiniteEntropyThrows) {
  DualState d;
  EXPECT_THROW(dual_step(d, NAN), NumericalError);
}

TEST(PrimalLoss, PicksObjectiveByVariant) {
  Rng rng(1);
  PolicyModel stoch(tiny_config(), rng);
  DualState dual(0.7, -2.0, 1e-4);
  auto spec = primal_loss(stoch, dual);
  EXPECT_EQ(spec.kind, LossKind::nll_entropy);
  EXPECT_NEAR(spec.lambda, 0.7, 1e-15);
  auto cfg = tiny_config();
  cfg.deterministic = true;
  PolicyModel det(cfg, rng);
  EXPECT_EQ(primal_loss(det, dual).kind, LossKind::l2);
  const auto batch = tiny_batch(rng);
  EXPECT_THROW(loss_nll(det, batch), Error);
  EXPECT_THROW(loss_l2(stoch, batch), Error);
}

TEST(PrimalStep, ZeroLambdaGradientEqualsNll) {
  Rng rng(2);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng);
  const auto batch = tiny_batch(rng);
  Rng r1(5), r2(5);
  const auto a = grad(model, {LossKind::nll_entropy, 0.0}, batch, r1);
  const auto b = grad(model, {LossKind::nll, 0.0}, batch, r2);
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE(a.grads[i] == b.grads[i]);
  EXPECT_EQ(a.terms.loss, b.terms.loss);
}

TEST(PrimalStep, ClipsThenStepsWithWarmupLr) {
  Rng rng(3);
  PolicyModel model(tiny_config(), rng);
  randomize(model, rng, 2.0);
  const auto batch = tiny_batch(rng);
  TrainConfig tc;
  tc.warmup_steps = 4;
  tc.learning_rate = 1e-3;
  tc.grad_clip = 0.01;
  TrainState st(tc, model);
  DualState dual = make_dual(tc, 2);
  EXPECT_DOUBLE_EQ(st.next_lr(), 0.25e-3);
  Rng drop(4);
  const auto m = primal_step(model, dual, batch, st, drop);
  EXPECT_EQ(m.step, 1);
  EXPECT_DOUBLE_EQ(m.lr, 0.25e-3);
  EXPECT_GT(m.grad_norm_pre, 0.01);
  EXPECT_NEAR(m.grad_norm_post, 0.01, 1e-12);
  EXPECT_EQ(st.opt.steps(), 1);
  EXPECT_DOUBLE_EQ(st.next_lr(), 0.5e-3);
}

TEST(TrainIteration, SingleTrajectoryBufferAndIdenticalSeedsAreBitIdentical) {
  Rng rng(6);
  ReplayBuffer buf(1);
  buf.insert_fifo(odt::testing::random_trajectory(9, 3, 2, rng));
  auto run = [&](std::vector<Matrix>& out, double& ll) {
    Rng init(7), sampler(8), drop(9);
    auto cfg = tiny_config();
    cfg.dropout = 0.1;
    PolicyModel model(cfg, init);
    TrainConfig tc;
    tc.batch_size = 1;
    TrainState st(tc, model);
    DualState dual = make_dual(tc, 2);
    for (int i = 0; i < 2; ++i) train_iteration(model, dual, buf, st, sampler, drop);
    for (const auto& p : model.parameters()) out.push_back(p.value);
    ll = dual.log_lambda;
  };
  std::vector<Matrix> a, b;
  double la = 0, lb = 0;
  run(a, la);
  run(b, lb);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i] == b[i]);
  EXPECT_EQ(la, lb);
}

TEST(TrainIteration, OnePrimalAndOneDualStepWithSameEntropy) {
  Rng rng(10);
  ReplayBuffer buf(3);
  for (int i = 0; i < 3; ++i) buf.insert_fifo(odt::testing::random_trajectory(6 + i, 3, 2, rng));
  Rng init(11), sampler(12), drop(13);
  PolicyModel model(tiny_config(), init);
  TrainConfig tc;
  tc.batch_size = 4;
  TrainState st(tc, model);
  DualState dual = make_dual(tc, 2);
  DualState replay = dual;
  const auto m = train_iteration(model, dual, buf, st, sampler, drop);
  EXPECT_EQ(st.step, 1);
  EXPECT_EQ(st.dual_steps, 1);
  EXPECT_EQ(st.opt.steps(), 1);
  EXPECT_EQ(m.lambda, replay.lambda());
  dual_step(replay, m.entropy);
  EXPECT_EQ(replay.log_lambda, dual.log_lambda);
}

TEST(TrainIteration, DeterministicVariantSkipsDual) {
  Rng rng(14);
  ReplayBuffer buf(1);
  buf.insert_fifo(odt::testing::random_trajectory(6, 3, 2, rng));
  auto cfg = tiny_config();
  cfg.deterministic = true;
  Rng init(15), sampler(16), drop(17);
  PolicyModel model(cfg, init);
  TrainConfig tc;
  tc.batch_size = 2;
  TrainState st(tc, model);
  DualState dual = make_dual(tc, 2);
  train_iteration(model, dual, buf, st, sampler, drop);
  EXPECT_EQ(st.dual_steps, 0);
  EXPECT_EQ(dual.log_lambda, 0.0);
  EXPECT_EQ(dual.opt.t, 0);
}

TEST(TrainIteration, EmptyBufferThrows) {
  Rng rng(18);
  PolicyModel model(tiny_config(), rng);
  ReplayBuffer buf(2);
  TrainState st(TrainConfig{}, model);
  DualState dual;
  EXPECT_THROW(train_iteration(model, dual, buf, st, rng, rng), Error);
}

TEST(SmokeFit, NllHalvesWithin200Iterations) {
  Rng data_rng(20);
  const ReplayBuffer buf = smoke_buffer(data_rng);
  Rng init(21), sampler(22), drop(23), eval_rng(24);
  PolicyModel model(smoke_config(), init);
  const auto eval_batch = sample_batch(buf, 64, model.config().context_len, eval_rng);
  const double j0 = loss_nll(model, eval_batch);
  TrainState st(smoke_train(), model);
  DualState dual = make_dual(st.cfg, 2);
  for (int i = 0; i < 200; ++i) train_iteration(model, dual, buf, st, sampler, drop);
  const double j1 = loss_nll(model, eval_batch);
  RecordProperty("initial_nll", std::to_string(j0));
  RecordProperty("final_nll", std::to_string(j1));
  EXPECT_LE(j1, 0.5 * j0) << "J went from " << j0 << " to " << j1;
}

TEST(SmokeFit, LambdaFallsBelowOneWhenTargetIsFarBelow) {
  Rng data_rng(30);
  const ReplayBuffer buf = smoke_buffer(data_rng);
  Rng init(31), sampler(32), drop(33);
  PolicyModel model(smoke_config(), init);
  TrainConfig tc = smoke_train();
  tc.target_entropy = -20.0;
  TrainState st(tc, model);
  DualState dual = make_dual(tc, 2);
  std::vector<double> lambdas;
  for (int i = 0; i < 300; ++i) {
    train_iteration(model, dual, buf, st, sampler, drop);
    lambdas.push_back(dual.lambda());
  }
  EXPECT_LT(dual.lambda(), 1.0);
  for (std::size_t i = 1; i < lambdas.size(); ++i) EXPECT_LE(lambdas[i], lambdas[i - 1]);
}
