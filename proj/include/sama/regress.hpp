#pragma once

// Biased regression testbed with closed-form ground truth:
//
//   lambda* = argmin_l ||X' w*(l) - y'||^2
//   w*(l)   = argmin_w ||X w - y||^2 + beta ||w - l||^2
//
// The closed forms below omit the factor 2 from differentiating ||.||^2.
// Gradients the engine computes for the written objectives therefore carry
// an extra factor 2, which cancels in cosine similarity.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>

#include "sama/error.hpp"
#include "sama/random.hpp"
#include "sama/tensor.hpp"

namespace sama::regress {

struct BiasedRegressionInstance {
  Tensor X;       // [n, d]
  Tensor y;       // [n]
  Tensor X_meta;  // [n', d]
  Tensor y_meta;  // [n']
  double beta = 0.1;

  std::size_t n() const { return X.rows(); }
  std::size_t d() const { return X.cols(); }
  std::size_t n_meta() const { return X_meta.rows(); }
};

inline constexpr double default_beta = 0.1;

namespace detail {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline Eigen::Map<const Matrix> as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}

inline Eigen::Map<const Vector> as_vector(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

inline Tensor to_tensor(const Vector& v) {
  return Tensor::vector(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

inline void check_lambda(const BiasedRegressionInstance& inst, const Tensor& lambda) {
  if (lambda.size() != inst.d()) {
    throw ShapeError("biased regression: lambda has " + std::to_string(lambda.size()) +
                     " entries, expected " + std::to_string(inst.d()));
  }
}

}  // namespace detail

inline void validate(const BiasedRegressionInstance& inst) {
  if (inst.X.rank() != 2 || inst.X_meta.rank() != 2) {
    throw ShapeError("biased regression: X and X' must be matrices");
  }
  if (inst.X.cols() != inst.X_meta.cols()) {
    throw ShapeError("biased regression: X has " + std::to_string(inst.X.cols()) +
                     " columns but X' has " + std::to_string(inst.X_meta.cols()));
  }
  if (inst.y.size() != inst.X.rows() || inst.y_meta.size() != inst.X_meta.rows()) {
    throw ShapeError("biased regression: target length does not match design rows");
  }
  if (!(inst.beta > 0.0)) throw Error("biased regression: beta must be positive");
}

/// Standard-normal designs; targets from independent standard-normal weight
/// vectors plus N(0, noise^2) noise.
inline BiasedRegressionInstance generate(std::size_t n, std::size_t d, std::size_t n_meta,
                                         double beta, std::uint64_t seed,
                                         double noise = 0.1) {
  if (n == 0 || d == 0 || n_meta == 0) throw Error("generate: n, d and n' must be >= 1");
  if (!(beta > 0.0)) throw Error("generate: beta must be positive");
  Rng rng(seed);
  BiasedRegressionInstance inst;
  inst.beta = beta;
  inst.X = rng.normal_tensor({n, d});
  inst.X_meta = rng.normal_tensor({n_meta, d});
  const Tensor w_true = rng.normal_tensor({d});
  const Tensor w_true_meta = rng.normal_tensor({d});
  auto targets = [&](const Tensor& X, const Tensor& w) {
    Tensor out(Shape{X.rows()});
    for (std::size_t i = 0; i < X.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += X.at(i, j) * w[j];
      out[i] = s + noise * rng.normal();
    }
    return out;
  };
  inst.y = targets(inst.X, w_true);
  inst.y_meta = targets(inst.X_meta, w_true_meta);
  return inst;
}

/// X^T X + beta I.
inline detail::Matrix base_jacobian(const BiasedRegressionInstance& inst) {
  const auto X = detail::as_matrix(inst.X);
  detail::Matrix P = X.transpose() * X;
  P.diagonal().array() += inst.beta;
  return P;
}

/// Largest eigenvalue of the base-loss Hessian 2 (X^T X + beta I).
inline double base_hessian_max_eigenvalue(const BiasedRegressionInstance& inst) {
  Eigen::SelfAdjointEigenSolver<detail::Matrix> es(base_jacobian(inst),
                                                   Eigen::EigenvaluesOnly);
  return 2.0 * es.eigenvalues().maxCoeff();
}

/// Cholesky factor of the base Jacobian; throws if it is not positive definite.
inline Eigen::LLT<detail::Matrix> factor_base_jacobian(const BiasedRegressionInstance& inst) {
  Eigen::LLT<detail::Matrix> llt(base_jacobian(inst));
  if (llt.info() != Eigen::Success) {
    throw NumericError("biased regression: X^T X + beta I is not positive definite");
  }
  return llt;
}

/// w* = (X^T X + beta I)^{-1} (X^T y + beta lambda).
inline Tensor w_star(const BiasedRegressionInstance& inst, const Tensor& lambda) {
  detail::check_lambda(inst, lambda);
  const auto llt = factor_base_jacobian(inst);
  const auto X = detail::as_matrix(inst.X);
  const detail::Vector rhs =
      X.transpose() * detail::as_vector(inst.y) + inst.beta * detail::as_vector(lambda);
  return detail::to_tensor(llt.solve(rhs));
}

/// g = beta (X^T X + beta I)^{-1} (X'^T X' w* - X'^T y').
inline Tensor meta_grad_closed(const BiasedRegressionInstance& inst, const Tensor& lambda) {
  detail::check_lambda(inst, lambda);
  const auto llt = factor_base_jacobian(inst);
  const auto w = w_star(inst, lambda);
  const auto Xm = detail::as_matrix(inst.X_meta);
  const detail::Vector r =
      Xm.transpose() * (Xm * detail::as_vector(w)) - Xm.transpose() * detail::as_vector(inst.y_meta);
  return detail::to_tensor(inst.beta * llt.solve(r));
}

/// lambda* = (A^T A)^{-1} A^T b with A = beta X' P^{-1}, b = y' - X' P^{-1} X^T y.
inline Tensor lambda_star(const BiasedRegressionInstance& inst) {
  validate(inst);
  const auto llt = factor_base_jacobian(inst);
  const auto X = detail::as_matrix(inst.X);
  const auto Xm = detail::as_matrix(inst.X_meta);
  // P is symmetric, so X' P^{-1} = (P^{-1} X'^T)^T.
  const detail::Matrix A = inst.beta * llt.solve(Xm.transpose()).transpose();
  const detail::Vector b =
      detail::as_vector(inst.y_meta) - Xm * llt.solve(X.transpose() * detail::as_vector(inst.y));
  const detail::Matrix AtA = A.transpose() * A;
  Eigen::FullPivLU<detail::Matrix> lu(AtA);
  lu.setThreshold(1e-12);
  if (lu.rank() < AtA.rows()) {
    throw NumericError("lambda_star: A^T A is rank deficient (rank " + std::to_string(lu.rank()) +
                       " < d = " + std::to_string(AtA.rows()) +
                       "); the meta set needs n' >= d rows in general position");
  }
  return detail::to_tensor(lu.solve(A.transpose() * b));
}

struct Metrics {
  double cosine = 0.0;
  double l2dist = 0.0;
};

/// Cosine similarity, 0 when either vector has norm below 1e-15.
inline double cosine_similarity(const Tensor& a, const Tensor& b) {
  const double aa = dot(a, a);
  const double bb = dot(b, b);
  if (std::sqrt(aa) < 1e-15 || std::sqrt(bb) < 1e-15) return 0.0;
  const double c = dot(a, b) / std::sqrt(aa * bb);
  return std::clamp(c, -1.0, 1.0);
}

inline Metrics metrics(const Tensor& g_approx, const Tensor& g_closed, const Tensor& lambda_t,
                       const Tensor& lambda_opt) {
  require_same_shape(g_approx, g_closed, "metrics");
  require_same_shape(lambda_t, lambda_opt, "metrics");
  return {cosine_similarity(g_approx, g_closed), norm2(lambda_t - lambda_opt)};
}

}  // namespace sama::regress
