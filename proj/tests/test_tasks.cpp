#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "sama/tasks.hpp"

using namespace sama;
using namespace sama::tasks;

TEST(GenNoisy, ZeroNoise) {
  const auto ds = gen_noisy(500, 6, 3, 0.0, 12, 1);
  EXPECT_EQ(ds.noisy_count(), 0u);
  EXPECT_NO_THROW(ds.validate());
}

TEST(GenNoisy, NoisyCountWithinThreeSigma) {
  const auto ds = gen_noisy(2000, 10, 4, 0.4, 40, 3);
  const double mean = 800.0, sd = std::sqrt(2000 * 0.4 * 0.6);
  EXPECT_NEAR(static_cast<double>(ds.noisy_count()), mean, 3 * sd);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.is_noisy[i] != 0, ds.observed[i] != ds.truth[i]);
  }
}

TEST(GenNoisy, Deterministic) {
  const auto a = gen_noisy(100, 5, 3, 0.3, 9, 42, 20);
  const auto b = gen_noisy(100, 5, 3, 0.3, 9, 42, 20);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.observed, b.observed);
  EXPECT_EQ(a.truth, b.truth);
}

TEST(GenNoisy, MetaSplitCleanBalancedAndDisjoint) {
  const auto ds = gen_noisy(300, 8, 4, 0.5, 40, 5, 50);
  EXPECT_EQ(ds.meta_ids.size(), 40u);
  EXPECT_EQ(ds.train_ids.size(), 300u);
  EXPECT_EQ(ds.test_ids.size(), 50u);
  std::vector<int> per_class(4, 0);
  for (auto i : ds.meta_ids) {
    EXPECT_EQ(ds.is_noisy[i], 0);
    ++per_class[ds.observed[i]];
  }
  for (int c : per_class) EXPECT_EQ(c, 10);
  std::set<std::size_t> train(ds.train_ids.begin(), ds.train_ids.end());
  for (auto i : ds.meta_ids) EXPECT_EQ(train.count(i), 0u);
}

TEST(GenNoisy, RejectsBadArguments) {
  EXPECT_THROW(gen_noisy(10, 5, 3, 1.0, 3, 1), Error);
  EXPECT_THROW(gen_noisy(10, 5, 3, 0.1, 2, 1), Error);
  EXPECT_THROW(gen_noisy(10, 2, 3, 0.1, 3, 1), Error);
}

TEST(DatasetCsv, RoundTripIsExact) {
  const auto ds = gen_noisy(50, 3, 3, 0.3, 6, 8, 7);
  std::stringstream ss;
  write_csv(ds, ss);
  const std::string text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "feature_0,feature_1,feature_2,observed_label,true_label,is_noisy,split");
  const auto back = read_csv(ss);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.observed, ds.observed);
  EXPECT_EQ(back.truth, ds.truth);
  EXPECT_EQ(back.is_noisy, ds.is_noisy);
  EXPECT_EQ(back.split, ds.split);
}

TEST(DatasetCsv, RejectsInconsistentRows) {
  std::stringstream bad("feature_0,observed_label,true_label,is_noisy,split\n0.5,1,1,1,train\n");
  EXPECT_THROW(read_csv(bad), Error);
  std::stringstream short_row("feature_0,observed_label,true_label,is_noisy,split\n0.5,1,1\n");
  EXPECT_THROW(read_csv(short_row), Error);
}

namespace {

ReweightConfig small_config(std::uint64_t seed = 0) {
  ReweightConfig c;
  c.n = 200;
  c.d = 5;
  c.classes = 3;
  c.m = 12;
  c.n_test = 60;
  c.hidden = 8;
  c.batch = 20;
  c.seed = seed;
  return c;
}

double eval_base(ReweightTask& task, const Tensor& theta, const Tensor& lambda, const Batch& b) {
  Tape t;
  return task.base_loss(t, t.constant(theta), t.constant(lambda), b, nullptr).value().item();
}

}  // namespace

TEST(ReweightedLoss, ConstantHalfWeightsHalveTheMeanLoss) {
  ReweightTask task(small_config());
  auto p = task.problem();
  // Zero weight net: sigmoid(0) = 1/2 for every sample.
  const Tensor lambda = Tensor::zeros_like(p.lambda);
  const Batch b{0, 3, 7, 11};
  const auto X = gather_rows(task.data().features, b);
  const Tensor per = per_sample_ce(task.classifier(), p.theta, X, gather(task.data().observed, b));
  double mean = 0.0;
  for (double x : per.data()) mean += x / 4.0;
  EXPECT_NEAR(eval_base(task, p.theta, lambda, b), 0.5 * mean, 1e-15);
}

TEST(ReweightedLoss, SingleSample) {
  ReweightTask task(small_config());
  auto p = task.problem();
  const Batch b{5};
  const auto X = gather_rows(task.data().features, b);
  const Tensor per = per_sample_ce(task.classifier(), p.theta, X, gather(task.data().observed, b));
  const double w = task.weight_net().weight_values(p.lambda, WeightNet::features(per, nullptr))[0];
  EXPECT_NEAR(eval_base(task, p.theta, p.lambda, b), w * per[0], 1e-15);
}

TEST(ReweightedLoss, LambdaGradientMatchesFiniteDifferences) {
  ReweightTask task(small_config(2));
  auto p = task.problem();
  Rng rng(3);
  p.lambda = rng.normal_tensor(p.lambda.shape());
  const Batch b{1, 2, 3, 4, 5, 6, 7, 8};
  const Tensor g = base_grad_lambda(p, p.theta, nullptr, b).grad;
  const Tensor fd = finite_diff_grad(
      [&](const Tensor& l) { return eval_base(task, p.theta, l, b); }, p.lambda, 1e-6);
  EXPECT_LT(norm2(g - fd) / norm2(fd), 1e-7);
}

TEST(ReweightedLoss, LossInputCarriesNoGradient) {
  // With the weight-net input frozen at the anchor, d/dtheta of the loss is
  // mean_i w_i dl_i/dtheta with w_i held fixed.
  ReweightTask task(small_config(4));
  auto p = task.problem();
  Rng rng(5);
  p.lambda = rng.normal_tensor(p.lambda.shape());
  const Batch b{10, 20, 30};
  const Tensor g = base_grad_theta(p, p.theta, b).grad;
  const auto X = gather_rows(task.data().features, b);
  const auto labels = gather(task.data().observed, b);
  const Tensor w = task.weight_net().weight_values(
      p.lambda, WeightNet::features(per_sample_ce(task.classifier(), p.theta, X, labels), nullptr));
  auto frozen = [&](const Tensor& th) {
    const Tensor per = per_sample_ce(task.classifier(), th, X, labels);
    return (w[0] * per[0] + w[1] * per[1] + w[2] * per[2]) / 3.0;
  };
  const Tensor fd = finite_diff_grad(frozen, p.theta, 1e-6);
  EXPECT_LT(norm2(g - fd) / norm2(fd), 1e-6);
}

TEST(WeightNet, OutputsInUnitInterval) {
  const auto wn = WeightNet::make(true, 8);
  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    const Tensor lambda = rng.normal_tensor({wn.mlp.param_count()}, 3.0);
    const Tensor feats = rng.normal_tensor({50, 2}, 5.0);
    const Tensor ws = wn.weight_values(lambda, feats);
    for (double w : ws.data()) {
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
    }
  }
  // Near the initialization the output stays strictly inside.
  const Tensor init = wn.init(rng);
  const Tensor ws = wn.weight_values(init, rng.normal_tensor({50, 2}, 2.0));
  for (double w : ws.data()) {
    EXPECT_GT(w, 0.3);
    EXPECT_LT(w, 0.7);
  }
}

TEST(Uncertainty, ZeroWhenModelsMatchAndBounded) {
  ReweightTask task(small_config());
  auto p = task.problem();
  const Tensor X = gather_rows(task.data().features, {0, 1, 2, 3});
  const Tensor same = uncertainty(task.classifier(), p.theta, p.theta, X);
  for (double u : same.data()) EXPECT_EQ(u, 0.0);
  Rng rng(2);
  const Tensor far = rng.normal_tensor(p.theta.shape(), 10.0);
  const Tensor apart = uncertainty(task.classifier(), p.theta, far, X);
  EXPECT_GT(max_abs(apart), 0.0);
  for (double u : apart.data()) {
    EXPECT_GE(u, 0.0);
    EXPECT_LE(u, std::sqrt(2.0));
  }
}

TEST(Uncertainty, ZeroDecayTracksTheta) {
  Tensor ema = Tensor::vector({1, 2, 3});
  ema_update(ema, Tensor::vector({4, 5, 6}), 0.0);
  EXPECT_EQ(ema, Tensor::vector({4, 5, 6}));
  EXPECT_THROW(ema_update(ema, ema, 1.0), Error);
}

TEST(Auc, KnownCases) {
  EXPECT_DOUBLE_EQ(auc({0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(auc({1, 0, 1, 0, 1}, {1, 0, 1, 0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(auc({0.9, 0.1, 0.4, 0.6}, {0, 1, 1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(auc({0.1, 0.5, 0.5, 0.9}, {0, 1, 0, 1}), 0.875);
  EXPECT_THROW(auc({0.1, 0.2}, {1, 1}), Error);
}

TEST(Auc, WeightsFromNoiseFlagsSeparatePerfectly) {
  const auto ds = gen_noisy(300, 5, 3, 0.4, 9, 1);
  std::vector<double> w;
  std::vector<std::uint8_t> clean;
  for (auto i : ds.train_ids) {
    w.push_back(1.0 - ds.is_noisy[i]);
    clean.push_back(ds.is_noisy[i] ? 0 : 1);
  }
  EXPECT_DOUBLE_EQ(auc(w, clean), 1.0);
}

TEST(ReweightTask, UnitWeightsReproducePlainTraining) {
  auto cfg = small_config(6);
  cfg.constant_weight = 1.0;
  ReweightTask weighted(cfg);
  auto p = weighted.problem();
  TrainConfig tc;
  tc.unroll = 3;
  tc.meta_steps = 10;
  train(p, MetaGradMethod::none(), tc, weighted.streams());

  cfg.constant_weight.reset();
  ReweightTask plain(cfg);
  auto q = plain.problem();
  q.base_loss = [&plain](Tape& t, Var th, Var, const Batch& b, const Tensor*) {
    const Tensor X = gather_rows(plain.data().features, b);
    return mean(softmax_cross_entropy(plain.classifier().forward(th, t.constant(X)),
                                      gather(plain.data().observed, b)));
  };
  train(q, MetaGradMethod::none(), tc, plain.streams());
  EXPECT_EQ(p.theta, q.theta);
}

TEST(ReweightTask, BaseBatchesNeverTouchMetaSplit) {
  ReweightTask task(small_config(7));
  auto streams = task.streams();
  std::set<std::size_t> meta(task.data().meta_ids.begin(), task.data().meta_ids.end());
  std::set<std::size_t> seen;
  for (int k = 0; k < 50; ++k) {
    for (auto i : streams.base()) {
      EXPECT_EQ(meta.count(i), 0u);
      seen.insert(i);
    }
  }
  EXPECT_EQ(seen.size(), task.data().train_ids.size());
  for (auto i : streams.meta()) EXPECT_EQ(meta.count(i), 1u);
}

TEST(ReweightTask, SamaTrainingIsDeterministic) {
  auto run = [] {
    ReweightTask task(small_config(8));
    auto p = task.problem();
    TrainConfig tc;
    tc.unroll = 2;
    tc.meta_steps = 8;
    train(p, MetaGradMethod::sama(), tc, task.streams(), task.hooks());
    return std::make_pair(p.theta, p.lambda);
  };
  EXPECT_EQ(run(), run());
}

TEST(ReweightTask, UncertaintyVariantTrains) {
  auto cfg = small_config(9);
  cfg.use_uncertainty = true;
  ReweightTask task(cfg);
  auto p = task.problem();
  TrainConfig tc;
  tc.unroll = 2;
  tc.meta_steps = 5;
  const auto traj = train(p, MetaGradMethod::sama(), tc, task.streams(), task.hooks());
  EXPECT_EQ(traj.size(), 5u);
  EXPECT_NE(task.theta_ema(), p.theta);
  EXPECT_TRUE(all_finite(p.lambda));
}

TEST(ReweightTask, NoisyRunSeparatesCleanSamples) {
  ReweightConfig cfg;  // the 2000-sample, rho = 0.4 setting
  cfg.seed = 11;
  ReweightTask task(cfg);
  auto p = task.problem();
  TrainConfig tc;
  tc.unroll = 5;
  tc.meta_steps = 120;
  train(p, MetaGradMethod::sama(), tc, task.streams(), task.hooks());
  EXPECT_GT(weight_separation_auc(task, p.theta, p.lambda), 0.7);
}
