#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "sama/autodiff.hpp"
#include "sama/regress.hpp"

using namespace sama;
using namespace sama::regress;

namespace {

BiasedRegressionInstance scalar_instance() {
  BiasedRegressionInstance inst;
  inst.X = Tensor(Shape{1, 1}, {1.0});
  inst.y = Tensor::vector({2.0});
  inst.X_meta = Tensor(Shape{1, 1}, {1.0});
  inst.y_meta = Tensor::vector({1.0});
  inst.beta = 0.1;
  return inst;
}

double meta_objective(const BiasedRegressionInstance& inst, const Tensor& lambda) {
  const Tensor w = w_star(inst, lambda);
  double s = 0.0;
  for (std::size_t i = 0; i < inst.n_meta(); ++i) {
    double r = -inst.y_meta[i];
    for (std::size_t j = 0; j < inst.d(); ++j) r += inst.X_meta.at(i, j) * w[j];
    s += r * r;
  }
  return s;
}

}  // namespace

TEST(Generate, Deterministic) {
  auto a = generate(30, 5, 10, 0.1, 77);
  auto b = generate(30, 5, 10, 0.1, 77);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.X_meta, b.X_meta);
  EXPECT_EQ(a.y_meta, b.y_meta);
  EXPECT_NE(a.X, generate(30, 5, 10, 0.1, 78).X);
}

TEST(Generate, ScalarCaseAndShapes) {
  auto inst = generate(1, 1, 1, default_beta, 3);
  EXPECT_EQ(inst.X.shape(), (Shape{1, 1}));
  EXPECT_EQ(inst.y.shape(), (Shape{1}));
  EXPECT_DOUBLE_EQ(inst.beta, 0.1);
  EXPECT_NO_THROW(w_star(inst, Tensor::vector({0.0})));
}

TEST(Generate, RejectsBadArguments) {
  EXPECT_THROW(generate(0, 1, 1, 0.1, 1), Error);
  EXPECT_THROW(generate(1, 1, 1, 0.0, 1), Error);
}

TEST(WStar, ScalarInstance) {
  auto w = w_star(scalar_instance(), Tensor::vector({0.0}));
  EXPECT_NEAR(w[0], 2.0 / 1.1, 1e-15);
}

TEST(WStar, BaseStationarity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto inst = generate(40, 8, 12, 0.1, seed);
    Rng rng(seed + 100);
    const Tensor lambda = rng.normal_tensor({8}, 3.0);
    const Tensor w = w_star(inst, lambda);
    const auto X = regress::detail::as_matrix(inst.X);
    const Eigen::VectorXd wv = regress::detail::as_vector(w);
    const Eigen::VectorXd g = 2.0 * X.transpose() * (X * wv - regress::detail::as_vector(inst.y)) +
                              2.0 * inst.beta * (wv - regress::detail::as_vector(lambda));
    EXPECT_LT(g.lpNorm<Eigen::Infinity>(), 1e-9);
  }
}

TEST(WStar, LargeBetaPullsToLambda) {
  auto inst = generate(20, 4, 5, 1e9, 1);
  const Tensor lambda = Tensor::vector({1, -2, 3, -4});
  const Tensor w = w_star(inst, lambda);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], lambda[i], 1e-6);
}

TEST(MetaGradClosed, ScalarInstance) {
  auto g = meta_grad_closed(scalar_instance(), Tensor::vector({0.0}));
  EXPECT_NEAR(g[0], 0.1 * (1.0 / 1.1) * (2.0 / 1.1 - 1.0), 1e-15);
  EXPECT_NEAR(g[0], 0.074380, 1e-6);
}

TEST(MetaGradClosed, MatchesFiniteDifferencesUpToFactorTwo) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto inst = generate(30, 6, 10, 0.1, seed);
    Rng rng(seed);
    const Tensor lambda = rng.normal_tensor({6});
    const Tensor g = meta_grad_closed(inst, lambda);
    const Tensor fd =
        finite_diff_grad([&](const Tensor& l) { return meta_objective(inst, l); }, lambda, 1e-4);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(2.0 * g[i], fd[i], 1e-6 * std::max(1.0, std::abs(fd[i])));
    }
  }
}

TEST(LambdaStar, ScalarInstance) {
  const auto inst = scalar_instance();
  const Tensor ls = lambda_star(inst);
  // -9 and 1 in exact arithmetic; the factored solve rounds through 1/1.1.
  EXPECT_DOUBLE_EQ(ls[0], -9.0);
  EXPECT_DOUBLE_EQ(w_star(inst, ls)[0], 1.0);
}

TEST(LambdaStar, IsStationaryForMetaObjective) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto inst = generate(100, 20, 50, 0.1, seed);
    const Tensor g = meta_grad_closed(inst, lambda_star(inst));
    EXPECT_LT(max_abs(g), 1e-10);
  }
}

TEST(LambdaStar, InterpolatesWhenMetaRowsEqualDimension) {
  auto inst = generate(30, 5, 5, 0.1, 9);
  const Tensor w = w_star(inst, lambda_star(inst));
  const auto r = regress::detail::as_matrix(inst.X_meta) * regress::detail::as_vector(w) -
                 regress::detail::as_vector(inst.y_meta);
  EXPECT_LT(r.lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(LambdaStar, RankDeficientMetaSetThrows) {
  auto inst = generate(30, 6, 3, 0.1, 2);
  try {
    lambda_star(inst);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("n' >= d"), std::string::npos);
  }
}

TEST(BaseJacobian, CholeskySucceeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_NO_THROW(factor_base_jacobian(generate(5, 12, 4, 0.1, seed)));
  }
}

TEST(Metrics, Cosine) {
  const auto a = Tensor::vector({1, 2, 3});
  EXPECT_DOUBLE_EQ(cosine_similarity(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, -a), -1.0);
  EXPECT_EQ(cosine_similarity(Tensor::vector({0, 0, 0}), a), 0.0);
  auto m = metrics(a, a, Tensor::vector({3, 4}), Tensor::vector({0, 0}));
  EXPECT_DOUBLE_EQ(m.l2dist, 5.0);
  EXPECT_THROW(metrics(a, Tensor::vector({1, 2}), a, a), ShapeError);
}
