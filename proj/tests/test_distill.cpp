// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cfloat>
#include <cmath>

#include "fixtures.hpp"

namespace td = textdistill;
using td::DistillConfig;
using td::Errc;
using td::Tensor;
using namespace td::testing;

namespace {

DistillConfig base_config(std::size_t m, std::size_t L, std::size_t d) {
  DistillConfig c;
  c.per_class = m;
  c.max_len = L;
  c.dim = d;
  return c;
}

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const td::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return Errc::Io;
}

}  // namespace

TEST(InitDistilled, ClassBlockedLabels) {
  auto d = td::init_distilled<float>(base_config(2, 5, 3), 3, {0, 1}, 1);
  EXPECT_EQ(d.size(), 6u);
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
  EXPECT_EQ(d.samples.shape(), (td::Shape{6, 5, 3}));
  EXPECT_EQ(d.class_counts(), (std::vector<std::size_t>{2, 2, 2}));
}

TEST(InitDistilled, GaussianMatchesStats) {
  auto d = td::init_distilled<double>(base_config(10, 20, 16), 4, {0.0, 0.4}, 9);
  double s = 0, s2 = 0;
  for (double v : d.samples.values()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(d.samples.numel());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, 0.4, 0.02);
}

TEST(InitDistilled, DeterministicAndRealSample) {
  auto cfg = base_config(2, 4, 3);
  EXPECT_TRUE(td::init_distilled<float>(cfg, 2, {0, 1}, 5) == td::init_distilled<float>(cfg, 2, {0, 1}, 5));
  EXPECT_FALSE(td::init_distilled<float>(cfg, 2, {0, 1}, 5) == td::init_distilled<float>(cfg, 2, {0, 1}, 6));

  cfg.init = td::InitMode::RealSample;
  EXPECT_EQ(code_of([&] { td::init_distilled<float>(cfg, 2, {0, 1}, 5); }), Errc::RealSampleModeNeedsDataset);
  auto table = gaussian_table(10, 3, 1.0, 2);
  auto ds = random_dataset(8, 4, 10, 2, 3);
  auto d = td::init_distilled<float>(cfg, 2, td::stats_of(table), 5, &ds, &table);
  // Every sample equals the embedding of some real example of its own class.
  for (std::size_t i = 0; i < d.size(); ++i) {
    bool found = false;
    for (std::size_t e = 0; e < ds.size() && !found; ++e) {
      if (ds.examples[e].label != d.labels[i]) continue;
      std::vector<std::size_t> one{e};
      auto x = td::embed_examples<float>(ds, one, table).to_vector();
      found = std::equal(x.begin(), x.end(), d.samples.values().begin() + static_cast<std::ptrdiff_t>(i * 12));
    }
    EXPECT_TRUE(found) << i;
  }
}

TEST(InnerTrain, ZeroStepSizeReturnsTheta0) {
  auto t = make_tiny(1);
  t.spec.lr = 0;
  auto out = td::inner_train(t.model, t.theta0, t.dtilde.samples, t.dtilde.labels, t.spec, false);
  EXPECT_TRUE(out == t.theta0);
  auto recorded = td::inner_train(t.model, t.theta0, t.dtilde.samples.detach(true), t.dtilde.labels, t.spec, true);
  EXPECT_TRUE(recorded.detach() == t.theta0);
}

TEST(InnerTrain, SingleStepClosedForm) {
  auto t = make_tiny(0);
  t.spec.epochs = 1;
  t.spec.batch = 0;
  auto params = t.theta0.detach(true);
  auto grads = td::backward(td::model_loss(t.model, params, t.dtilde.samples, t.dtilde.labels), params.tensors);
  auto out = td::inner_train(t.model, t.theta0, t.dtilde.samples, t.dtilde.labels, t.spec, false);
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (std::size_t i = 0; i < out.tensors[k].numel(); ++i) {
      EXPECT_NEAR(out.tensors[k][i], t.theta0.tensors[k][i] - t.spec.lr * grads[k][i], 1e-15);
    }
  }
}

TEST(InnerTrain, DescendsOnFixedOrder) {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto t = make_tiny(seed);
    t.spec.lr = 0.05;
    const double before = td::model_loss(t.model, t.theta0, t.dtilde.samples, t.dtilde.labels).item();
    auto out = td::inner_train(t.model, t.theta0, t.dtilde.samples, t.dtilde.labels, t.spec, false);
    decreased += td::model_loss(t.model, out, t.dtilde.samples, t.dtilde.labels).item() <= before;
  }
  EXPECT_GT(decreased, 10);
}

TEST(InnerTrain, ShapeMismatch) {
  auto t = make_tiny(2);
  std::vector<std::size_t> wrong(t.dtilde.size() + 1, 0);
  EXPECT_EQ(code_of([&] { td::inner_train(t.model, t.theta0, t.dtilde.samples, wrong, t.spec, false); }),
            Errc::ShapeMismatch);
}

TEST(OuterLoss, SameBatchEqualsInnerPostTrainingLoss) {
  auto t = make_tiny(3);
  auto trained = td::inner_train(t.model, t.theta0, t.dtilde.samples, t.dtilde.labels, t.spec, false);
  EXPECT_EQ(td::outer_loss(t.model, trained, t.dtilde.samples, t.dtilde.labels).item(),
            td::model_loss(t.model, trained, t.dtilde.samples, t.dtilde.labels).item());
}

TEST(OuterLoss, ZeroInnerStepGivesExactZeroGradient) {
  auto t = make_tiny(4);
  t.spec.lr = 0;
  auto samples = t.dtilde.samples.detach(true);
  auto trained = td::inner_train(t.model, t.theta0, samples, t.dtilde.labels, t.spec, true);
  auto loss = td::outer_loss(t.model, trained, t.real_x, t.real_y);
  EXPECT_EQ(loss.item(), td::model_loss(t.model, t.theta0, t.real_x, t.real_y).item());
  const auto g = td::meta_gradient(loss, samples);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
  for (double v : td::meta_grad_fd_oracle(t.model, t.dtilde.samples, t.dtilde.labels, t.theta0, t.real_x, t.real_y,
                                          t.spec)) {
    EXPECT_EQ(v, 0.0);
  }
}

TEST(OuterLoss, DetachedGraph) {
  auto t = make_tiny(5);
  auto samples = t.dtilde.samples.detach(true);
  auto trained = td::inner_train(t.model, t.theta0, samples, t.dtilde.labels, t.spec, false);
  auto loss = td::outer_loss(t.model, trained, t.real_x, t.real_y);
  EXPECT_EQ(code_of([&] { td::meta_gradient(loss, samples); }), Errc::DetachedGraph);
}

TEST(MetaGradient, MatchesFiniteDifferencesOnTinyInstances) {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 12 && seed < 60; ++seed) {
    auto t = make_tiny(seed);
    ASSERT_LE(t.theta0.numel(), 500u);
    ASSERT_LE(td::DistillConfig{}.inner_epochs * t.spec.epochs, 3u);
    auto [autodiff, margin] = tiny_meta_grad(t);
    if (margin < 1e-3) continue;
    auto fd = td::meta_grad_fd_oracle(t.model, t.dtilde.samples, t.dtilde.labels, t.theta0, t.real_x, t.real_y, t.spec);
    EXPECT_LT(rel_err(autodiff, fd), 1e-3) << "seed " << seed;
    ++checked;
  }
  EXPECT_GE(checked, 10);
}

TEST(MetaGradient, LinearModelOneStepClosedForm) {
  LinearModel model{3, 2, 3};
  const std::size_t D = 6, C = 3;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto xs = random_tensor<double>({4, 3, 2}, rng, false);
    std::vector<std::size_t> ys{0, 1, 2, 1};
    auto xr = random_tensor<double>({5, 3, 2}, rng, false);
    std::vector<std::size_t> yr{2, 0, 1, 1, 0};
    auto theta0 = model.init_params<double>(seed);
    td::InnerSpec spec{0.7, 1, 0, 0};
    auto analytic = linear_one_step_meta_grad(xs.to_vector(), ys, theta0.tensors[0].to_vector(),
                                              theta0.tensors[1].to_vector(), xr.to_vector(), yr, D, C, spec.lr);
    auto fd = td::meta_grad_fd_oracle(model, xs, ys, theta0, xr, yr, spec);
    EXPECT_LT(rel_err(analytic, fd), 1e-6);
    auto samples = xs.detach(true);
    auto loss = td::outer_loss(model, td::inner_train(model, theta0, samples, ys, spec, true), xr, yr);
    EXPECT_LT(rel_err(analytic, as_double(td::meta_gradient(loss, samples))), 1e-10);
  }
}

TEST(MetaGradient, OracleSizeGuard) {
  LinearModel model{30, 20, 2};
  auto xs = Tensor<double>::zeros({4, 30, 20});
  std::vector<std::size_t> ys{0, 0, 1, 1};
  auto theta0 = model.init_params<double>(0);
  EXPECT_EQ(code_of([&] { td::meta_grad_fd_oracle(model, xs, ys, theta0, xs, ys, td::InnerSpec{}); }),
            Errc::TooLargeForOracle);
}

TEST(DistillStep, ZeroCases) {
  auto t = make_tiny(6);
  DistillConfig cfg = base_config(t.dtilde.per_class, 6, 4);
  cfg.inner_lr = t.spec.lr;
  td::OuterState state;

  auto frozen = t.dtilde;
  auto m = td::distill_step(t.model, frozen, t.theta0, t.real_x, t.real_y, cfg, 0.0, state);
  EXPECT_EQ(frozen.samples.to_vector(), t.dtilde.samples.to_vector());
  EXPECT_GT(m.grad_norm, 0.0);
  EXPECT_TRUE(std::isfinite(m.outer_loss));
  EXPECT_EQ(frozen.step, 1u);

  cfg.inner_lr = 0;
  auto still = t.dtilde;
  m = td::distill_step(t.model, still, t.theta0, t.real_x, t.real_y, cfg, 0.5, state);
  EXPECT_EQ(still.samples.to_vector(), t.dtilde.samples.to_vector());
  EXPECT_EQ(m.grad_norm, 0.0);
}

TEST(DistillStep, MovesByFdVerifiedGradient) {
  auto t = make_tiny(7);
  DistillConfig cfg = base_config(t.dtilde.per_class, 6, 4);
  cfg.inner_lr = t.spec.lr;
  cfg.inner_epochs = t.spec.epochs;
  cfg.inner_batch = t.spec.batch;
  t.spec.order_seed = td::inner_spec_for(cfg, t.dtilde.step).order_seed;
  auto fd = td::meta_grad_fd_oracle(t.model, t.dtilde.samples, t.dtilde.labels, t.theta0, t.real_x, t.real_y, t.spec);
  auto before = t.dtilde.samples.to_vector();
  td::OuterState state;
  td::distill_step(t.model, t.dtilde, t.theta0, t.real_x, t.real_y, cfg, 0.1, state);
  std::vector<double> moved, expected;
  for (std::size_t i = 0; i < before.size(); ++i) {
    moved.push_back(t.dtilde.samples[i] - before[i]);
    expected.push_back(-0.1 * fd[i]);
  }
  EXPECT_LT(rel_err(moved, expected), 1e-3);
}

TEST(DistillStep, NonFiniteLeavesStateUnchanged) {
  td::TextCnn model(td::ModelConfig{4, {2}, 2, 2, 5});
  DistillConfig cfg = base_config(1, 5, 4);
  cfg.inner_lr = 1e38;
  cfg.inner_epochs = 3;
  auto d = td::init_distilled<float>(cfg, 2, {0, 3}, 1);
  auto theta0 = model.init_params<float>(1);
  auto before = d;
  td::OuterState state;
  EXPECT_EQ(code_of([&] { td::distill_step(model, d, theta0, d.samples, d.labels, cfg, 0.1, state); }),
            Errc::NonFiniteGradient);
  EXPECT_TRUE(d == before);
}

namespace {

struct SmallRun {
  td::TextCnn model{td::ModelConfig{4, {2, 3}, 4, 3, 8}};
  td::Dataset train = random_dataset(30, 8, 15, 3, 1);
  td::EmbeddingTable table = gaussian_table(15, 4, 0.5, 2);
  DistillConfig cfg;
  SmallRun() {
    cfg = base_config(2, 8, 4);
    cfg.outer_steps = 5;
    cfg.inner_epochs = 2;
    cfg.real_batch = 8;
    cfg.seed = 3;
  }
};

}  // namespace

TEST(RunDistillation, ZeroStepsReturnsInitialSet) {
  SmallRun r;
  r.cfg.outer_steps = 0;
  auto d = td::run_distillation<float>(r.model, r.train, r.table, r.cfg);
  auto init = td::init_distilled<float>(r.cfg, 3, td::stats_of(r.table),
                                        td::derive_seed(r.cfg.seed, td::detail::kInitStream));
  EXPECT_EQ(d.samples.to_vector(), init.samples.to_vector());
  EXPECT_EQ(d.step, 0u);
  EXPECT_EQ(d.embedding_hash, r.table.hash());
}

TEST(RunDistillation, DeterministicAndLabelsImmutable) {
  SmallRun r;
  std::vector<td::StepMetrics> log;
  auto a = td::run_distillation<float>(r.model, r.train, r.table, r.cfg, [&](const td::StepMetrics& m) { log.push_back(m); });
  auto b = td::run_distillation<float>(r.model, r.train, r.table, r.cfg);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.step, 5u);
  ASSERT_EQ(log.size(), 5u);
  for (std::size_t i = 0; i < log.size(); ++i) EXPECT_EQ(log[i].step, i);
  EXPECT_EQ(a.labels, (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
  auto init = td::init_distilled<float>(r.cfg, 3, td::stats_of(r.table), 0);
  EXPECT_NE(a.samples.to_vector(), init.samples.to_vector());

  for (auto opt : {td::OuterOptimizer::Momentum, td::OuterOptimizer::Adam}) {
    r.cfg.optimizer = opt;
    auto c = td::run_distillation<float>(r.model, r.train, r.table, r.cfg);
    EXPECT_TRUE(c == td::run_distillation<float>(r.model, r.train, r.table, r.cfg));
    EXPECT_EQ(c.labels, a.labels);
  }
}

TEST(RunDistillation, DivergenceHalvesThenAborts) {
  SmallRun r;
  r.cfg.outer_steps = 1;
  r.cfg.outer_lr = 1e300;
  int calls = 0;
  EXPECT_EQ(code_of([&] { td::run_distillation<float>(r.model, r.train, r.table, r.cfg, [&](auto&) { ++calls; }); }),
            Errc::NonFiniteGradient);
  EXPECT_EQ(calls, 0);

  // Pick a step size whose first update overflows float by a factor of three;
  // two halvings bring it back in range.
  auto d = td::init_distilled<float>(r.cfg, 3, td::stats_of(r.table), td::derive_seed(r.cfg.seed, td::detail::kInitStream));
  td::BatchIterator it(r.train, r.cfg.real_batch, td::derive_seed(r.cfg.seed, td::detail::kRealStream));
  auto batch = it.next();
  auto x = td::embed_examples<float>(r.train, batch.indices, r.table);
  auto probe = d;
  td::OuterState state;
  td::distill_step(r.model, probe, td::theta_for_step<float>(r.model, r.cfg, 0), x, batch.labels, r.cfg, 1.0, state);
  double top = 0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < d.samples.numel(); ++i) {
    const double g = std::abs(static_cast<double>(d.samples[i]) - probe.samples[i]);
    if (g > top) top = g, arg = i;
  }
  ASSERT_GT(top, 0.0);
  (void)arg;
  r.cfg.outer_lr = 3.0 * FLT_MAX / top;
  std::vector<td::StepMetrics> log;
  auto out = td::run_distillation<float>(r.model, r.train, r.table, r.cfg, [&](const td::StepMetrics& m) { log.push_back(m); });
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].outer_lr, r.cfg.outer_lr / 4);
  for (float v : out.samples.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(RunDistillation, ConfigGuards) {
  SmallRun r;
  r.cfg.memory_budget = 10;
  EXPECT_EQ(code_of([&] { td::run_distillation<float>(r.model, r.train, r.table, r.cfg); }), Errc::InvalidConfig);
  r = SmallRun{};
  r.cfg.outer_lr = -1;
  EXPECT_EQ(code_of([&] { td::run_distillation<float>(r.model, r.train, r.table, r.cfg); }), Errc::InvalidConfig);
  r = SmallRun{};
  td::Dataset empty{{}, 3, 8};
  EXPECT_EQ(code_of([&] { td::run_distillation<float>(r.model, empty, r.table, r.cfg); }), Errc::EmptyDataset);
}

TEST(DistillConfigJson, RoundTripAndStrictKeys) {
  DistillConfig c;
  c.per_class = 7;
  c.optimizer = td::OuterOptimizer::Adam;
  c.theta_init = td::ThetaInit::Fixed;
  EXPECT_EQ(DistillConfig::from_json(c.to_json()), c);
  EXPECT_EQ(code_of([] { DistillConfig::from_json({{"per_clas", 2}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { DistillConfig::from_json({{"init", "uniform"}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { DistillConfig::from_json({{"inner_lr", "fast"}}); }), Errc::InvalidConfig);
}
