#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "raymoe/baseline.hpp"
#include "raymoe/gradcheck.hpp"
#include "raymoe/training.hpp"
#include "test_support.hpp"

using namespace raymoe;

namespace {

Model blob_model(std::uint64_t seed) {
  return init_params(build_topology(test::small_config(12, 2), seed), derive_seed(seed, 2));
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.epochs = 6;
  cfg.patience = 6;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.log_wall_time = false;
  return cfg;
}

}  // namespace

TEST(Adam, ScalarQuadraticMatchesOracle) {
  // tests/oracles/adam_scalar.py
  std::vector<double> w{1.0}, g(1);
  AdamState st;
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  for (int t = 0; t < 100; ++t) {
    g[0] = 2.0 * w[0];
    adam_step(w, g, st, cfg);
  }
  EXPECT_NEAR(w[0], 0.002936675681102549, 1e-15);
  EXPECT_EQ(st.step, 100u);
}

TEST(Adam, SizeMismatchIsConfigError) {
  std::vector<double> w(3), g(2);
  AdamState st;
  EXPECT_THROW(adam_step(w, g, st, TrainConfig{}), ConfigError);
}

TEST(EarlyStoppingRule, AccuracyFirstThenLoss) {
  EarlyStopping s(2);
  EXPECT_TRUE(s.observe(1, 0.5, 1.0));
  EXPECT_TRUE(s.observe(2, 0.5, 0.9));   // tie on accuracy, lower loss
  EXPECT_FALSE(s.observe(3, 0.5, 0.9));  // exact tie is not an improvement
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.observe(4, 0.4, 0.1));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_epoch(), 2u);
}

TEST(TrainConfigValidation, ListsEveryProblem) {
  TrainConfig cfg;
  cfg.learning_rate = -1;
  cfg.batch_size = 0;
  cfg.adam_beta1 = 1.0;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("learning_rate"), std::string::npos);
    EXPECT_NE(msg.find("batch_size"), std::string::npos);
    EXPECT_NE(msg.find("adam_beta1"), std::string::npos);
  }
}

TEST(Training, SeparableBlobsReachPerfectValidation) {
  const Dataset ds = test::blobs(200, 12, 5);
  Model m = blob_model(1);
  TrainConfig cfg = quick_config();
  cfg.epochs = 50;
  cfg.patience = 50;
  const auto log = train(m, ds, cfg);
  double best = 0.0;
  for (const auto& r : log.epochs) best = std::max(best, r.val_accuracy);
  EXPECT_EQ(best, 1.0);
  EXPECT_EQ(evaluate(m, ds, ds.splits.val).accuracy, 1.0);
}

TEST(Training, PatienceOneStopsAfterSecondEpochWithFirstWeights) {
  const Dataset ds = test::blobs(50, 12, 6);
  Model m = blob_model(2);
  const auto before = m.params;
  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.0;  // epoch 2 ties epoch 1 exactly
  cfg.patience = 1;
  cfg.epochs = 10;
  const auto log = train(m, ds, cfg);
  EXPECT_EQ(log.epochs.size(), 2u);
  EXPECT_EQ(log.best_epoch, 1u);
  EXPECT_TRUE(log.stopped_early);
  EXPECT_EQ(m.params, before);
}

TEST(Training, ReturnsBestEpochParameters) {
  const Dataset ds = test::blobs(60, 12, 7);
  Model m = blob_model(3);
  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.05;
  cfg.epochs = 12;
  cfg.patience = 12;
  std::vector<std::vector<double>> snapshots;
  const auto log = train(m, ds, cfg, [&](const EpochRecord&, std::span<const double> p) {
    snapshots.emplace_back(p.begin(), p.end());
  });
  ASSERT_EQ(snapshots.size(), log.epochs.size());
  ASSERT_GE(log.best_epoch, 1u);
  EXPECT_EQ(m.params, snapshots[log.best_epoch - 1]);
}

TEST(Training, ThreadCountDoesNotChangeResults) {
  const Dataset ds = test::blobs(80, 12, 8);
  TrainConfig cfg = quick_config();
  Model a = blob_model(4), b = blob_model(4);
  const auto la = train(a, ds, cfg);
  cfg.threads = 4;
  const auto lb = train(b, ds, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(to_json_lines(la), to_json_lines(lb));
}

TEST(Training, SeedDeterminesTrajectory) {
  const Dataset ds = test::blobs(80, 12, 9);
  TrainConfig cfg = quick_config();
  Model a = blob_model(5), b = blob_model(5), c = blob_model(5);
  train(a, ds, cfg);
  train(b, ds, cfg);
  cfg.seed = 4;
  train(c, ds, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
}

TEST(Training, WallTimeFieldIsZeroWhenDisabled) {
  const Dataset ds = test::blobs(20, 12, 10);
  Model m = blob_model(6);
  TrainConfig cfg = quick_config();
  cfg.epochs = 2;
  cfg.patience = 2;
  const auto log = train(m, ds, cfg);
  for (const auto& r : log.epochs) EXPECT_EQ(r.wall_ms, 0);
  EXPECT_NE(to_json_lines(log).find("\"epoch\":2"), std::string::npos);
}

TEST(Training, NonFiniteLossIsNumericalError) {
  const Dataset ds = test::blobs(20, 12, 11);
  for (std::size_t threads : {1u, 3u}) {
    Model m = blob_model(7);
    m.params[m.layout.output.bias] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg = quick_config();
    cfg.threads = threads;
    try {
      train(m, ds, cfg);
      FAIL();
    } catch (const NumericalError& e) {
      EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
    }
  }
}

TEST(Training, EmptySplitsAreDataErrors) {
  Dataset ds = test::blobs(20, 12, 12);
  ds.splits.val.clear();
  Model m = blob_model(8);
  EXPECT_THROW(train(m, ds, quick_config()), DataError);
}

TEST(Evaluate, DeterministicAndThreadInvariant) {
  const Dataset ds = test::blobs(100, 12, 13);
  const Model m = blob_model(9);
  const auto a = evaluate(m, ds, ds.splits.test, 1), b = evaluate(m, ds, ds.splits.test, 4);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.mean_loss, b.mean_loss);
  EXPECT_EQ(a.mean_used_params, b.mean_used_params);
  ASSERT_EQ(a.records.size(), ds.splits.test.size());
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    EXPECT_EQ(a.records[k].used_params, b.records[k].used_params);
    EXPECT_LE(a.records[k].used_params, a.total_params);
  }
}

TEST(Baseline, ParameterCountFormula) {
  // 784-w-w-w-w-10 by hand for w = 3.
  EXPECT_EQ(mlp_parameter_count(784, 3, 4, 10), 784u * 3 + 3 + 3 * (3 * 3 + 3) + 3 * 10 + 10);
}

TEST(Baseline, WidthMatchesBudgetWithinTenPercent) {
  for (std::size_t budget : {5000u, 20000u, 101234u, 400000u}) {
    const std::size_t w = solve_baseline_width(budget, 784, 10, 4);
    const auto count = static_cast<double>(mlp_parameter_count(784, w, 4, 10));
    EXPECT_LE(std::abs(count - static_cast<double>(budget)), 0.1 * static_cast<double>(budget)) << budget;
    const auto lower = static_cast<double>(mlp_parameter_count(784, w - 1 == 0 ? 1 : w - 1, 4, 10));
    const auto upper = static_cast<double>(mlp_parameter_count(784, w + 1, 4, 10));
    EXPECT_LE(std::abs(count - budget), std::abs(lower - budget));
    EXPECT_LE(std::abs(count - budget), std::abs(upper - budget));
  }
  EXPECT_THROW(solve_baseline_width(100, 784, 10, 4), ConfigError);
}

TEST(Baseline, DenseNetworkUsesEveryParameter) {
  const MlpBaseline net = build_baseline(4000, 12, 2, 4, 1);
  EXPECT_EQ(net.depth(), 4u);
  const Dataset ds = test::blobs(10, 12, 14);
  const auto res = evaluate(net, ds, ds.splits.test);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.used_params, net.total_parameter_count());
    EXPECT_EQ(r.active_block_pct, 100.0);
  }
}

TEST(Baseline, GradientMatchesFiniteDifferences) {
  const MlpBaseline net = build_baseline(800, 6, 3, 4, 2);
  std::vector<double> x{0.1, 0.9, 0.3, 0.5, 0.7, 0.2};
  const auto res = grad_check(net, x, 1);
  EXPECT_LT(res.max_rel_error, 1e-5) << res.worst_parameter;
}

TEST(Baseline, TrainsOnBlobs) {
  const Dataset ds = test::blobs(100, 12, 15);
  MlpBaseline net = build_baseline(3000, 12, 2, 4, 3);
  TrainConfig cfg = quick_config();
  cfg.epochs = 30;
  cfg.patience = 30;
  train(net, ds, cfg);
  EXPECT_GE(evaluate(net, ds, ds.splits.test).accuracy, 0.95);
}
