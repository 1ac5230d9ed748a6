#pragma once

// Meta-gradient engine for bilevel problems
//
//   lambda* = argmin_l L_meta(theta*(l)),  theta*(l) = argmin_t L_base(t, l)
//
// SAMA replaces the inverse base Jacobian with the identity, keeps the
// optimizer's elementwise adaptation du/dg, and evaluates the remaining
// mixed second derivative by a central difference of two first-order
// lambda-gradients:
//
//   v   = (du/dg) * dL_meta/dtheta
//   eps = alpha / ||v||
//   g   = -(dL_base/dl (theta + eps v) - dL_base/dl (theta - eps v)) / (2 eps)
//
// Baselines (Neumann series, conjugate gradient) approximate H^{-1} g_direct
// with Hessian-vector products taken as central differences of first-order
// gradients, so the tape never needs second-order support.
//
// Stop-gradient inputs of the base loss (e.g. per-sample losses fed into a
// weighting network) are evaluated at an "anchor" parameter. Perturbed
// evaluations keep the anchor at the unperturbed theta, so the differences
// above see the same function the base optimizer differentiates.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sama/autodiff.hpp"
#include "sama/error.hpp"
#include "sama/memory.hpp"
#include "sama/optim.hpp"
#include "sama/regress.hpp"
#include "sama/tensor.hpp"

namespace sama {

/// Sample ids drawn from a dataset; problems that ignore batching accept any.
using Batch = std::vector<std::size_t>;

/// L_base(theta, lambda; batch). `anchor` is where stop-gradient inputs are
/// evaluated; nullptr means at theta itself.
using BaseLossFn =
    std::function<Var(Tape&, Var theta, Var lambda, const Batch&, const Tensor* anchor)>;

/// L_meta(theta; batch).
using MetaLossFn = std::function<Var(Tape&, Var theta, const Batch&)>;

struct BilevelProblem {
  Tensor theta;
  Tensor lambda;
  BaseLossFn base_loss;
  MetaLossFn meta_loss;
  OptimizerConfig base_config;
  OptimizerState base_state;
  OptimizerConfig meta_config;
  OptimizerState meta_state;
  /// Set for biased-regression problems; enables the closed-form methods.
  const regress::BiasedRegressionInstance* regression = nullptr;

  static BilevelProblem make(Tensor theta, Tensor lambda, BaseLossFn base, MetaLossFn meta,
                             OptimizerConfig base_config, OptimizerConfig meta_config) {
    BilevelProblem p;
    p.base_state = OptimizerState::zeros_like(theta);
    p.meta_state = OptimizerState::zeros_like(lambda);
    p.theta = std::move(theta);
    p.lambda = std::move(lambda);
    p.base_loss = std::move(base);
    p.meta_loss = std::move(meta);
    p.base_config = base_config;
    p.meta_config = meta_config;
    return p;
  }
};

enum class MethodKind { none, sama, sama_na, neumann, cg, exact_ift, unrolled_exact };

inline const char* to_string(MethodKind k) {
  switch (k) {
    case MethodKind::none: return "none";
    case MethodKind::sama: return "sama";
    case MethodKind::sama_na: return "sama_na";
    case MethodKind::neumann: return "neumann";
    case MethodKind::cg: return "cg";
    case MethodKind::exact_ift: return "exact_ift";
    case MethodKind::unrolled_exact: return "unrolled_exact";
  }
  return "?";
}

inline MethodKind parse_method(const std::string& s) {
  for (auto k : {MethodKind::none, MethodKind::sama, MethodKind::sama_na, MethodKind::neumann,
                 MethodKind::cg, MethodKind::exact_ift, MethodKind::unrolled_exact}) {
    if (s == to_string(k)) return k;
  }
  if (s == "baseline") return MethodKind::none;
  throw Error("unknown meta-gradient method '" + s + "'");
}

struct MetaGradMethod {
  MethodKind kind = MethodKind::sama;
  double alpha = 1.0;
  std::size_t neumann_terms = 5;
  double neumann_scale = 0.0;  // 0: use the base learning rate
  std::size_t cg_iters = 5;
  double cg_tol = 1e-10;
  double cg_damping = 0.0;
  double hvp_step = 0.0;  // 0: 1e-4 (1 + ||theta||)

  static MetaGradMethod none() { return {MethodKind::none}; }
  static MetaGradMethod sama(double alpha = 1.0) {
    MetaGradMethod m;
    m.alpha = alpha;
    return m;
  }
  static MetaGradMethod sama_na(double alpha = 1.0) {
    MetaGradMethod m;
    m.kind = MethodKind::sama_na;
    m.alpha = alpha;
    return m;
  }
  static MetaGradMethod neumann(std::size_t terms, double scale = 0.0) {
    MetaGradMethod m;
    m.kind = MethodKind::neumann;
    m.neumann_terms = terms;
    m.neumann_scale = scale;
    return m;
  }
  static MetaGradMethod cg(std::size_t iters, double tol = 1e-10, double damping = 0.0) {
    MetaGradMethod m;
    m.kind = MethodKind::cg;
    m.cg_iters = iters;
    m.cg_tol = tol;
    m.cg_damping = damping;
    return m;
  }
  static MetaGradMethod exact_ift() { return {MethodKind::exact_ift}; }
  static MetaGradMethod unrolled_exact() { return {MethodKind::unrolled_exact}; }

  void validate() const {
    if (!(alpha > 0.0)) throw Error("method: alpha must be positive");
    if (neumann_terms < 1) throw Error("method: neumann terms must be >= 1");
    if (!(neumann_scale >= 0.0)) throw Error("method: neumann scale must be positive");
    if (!(cg_tol > 0.0)) throw Error("method: cg tolerance must be positive");
    if (!(cg_damping >= 0.0)) throw Error("method: cg damping must be >= 0");
    if (!(hvp_step >= 0.0)) throw Error("method: hvp step must be positive");
  }
};

// ---------------------------------------------------------------------------
// First-order passes

struct LossGrad {
  double loss = 0.0;
  Tensor grad;
};

/// dL_base/dtheta at `theta`, stop-gradient inputs at `anchor`.
inline LossGrad base_grad_theta(const BilevelProblem& p, const Tensor& theta,
                                const Batch& batch, const Tensor* anchor = nullptr) {
  Tape tape;
  Var th = tape.leaf(theta);
  Var la = tape.constant(p.lambda);
  Var loss = p.base_loss(tape, th, la, batch, anchor);
  LossGrad r{loss.value().item(), {}};
  if (!std::isfinite(r.loss)) throw NumericError("base loss is not finite");
  r.grad = tape.backward(loss, {th})[th];
  return r;
}

/// dL_base/dlambda at `theta`, stop-gradient inputs at `anchor`.
inline LossGrad base_grad_lambda(const BilevelProblem& p, const Tensor& theta,
                                 const Tensor* anchor, const Batch& batch) {
  Tape tape;
  Var th = tape.constant(theta);
  Var la = tape.leaf(p.lambda);
  Var loss = p.base_loss(tape, th, la, batch, anchor);
  LossGrad r{loss.value().item(), {}};
  if (!std::isfinite(r.loss)) throw NumericError("base loss is not finite");
  r.grad = tape.backward(loss, {la})[la];
  return r;
}

/// Meta loss and its gradient in theta (the direct gradient).
inline LossGrad meta_grad_theta(const BilevelProblem& p, const Tensor& theta,
                                const Batch& batch) {
  Tape tape;
  Var th = tape.leaf(theta);
  Var loss = p.meta_loss(tape, th, batch);
  LossGrad r{loss.value().item(), {}};
  if (!std::isfinite(r.loss)) throw NumericError("meta loss is not finite");
  r.grad = tape.backward(loss, {th})[th];
  return r;
}

inline double meta_loss_value(const BilevelProblem& p, const Batch& batch) {
  Tape tape;
  Var th = tape.constant(p.theta);
  return p.meta_loss(tape, th, batch).value().item();
}

/// dL_meta/dtheta at the current theta.
inline Tensor direct_grad(const BilevelProblem& p, const Batch& meta_batch) {
  return meta_grad_theta(p, p.theta, meta_batch).grad;
}

// ---------------------------------------------------------------------------
// SAMA

/// v = adaptation_diag(base state, g_base) * g_direct, or g_direct itself
/// when `adapt` is false (identity adaptation).
inline Tensor perturbation_vector(const Tensor& g_direct, const BilevelProblem& p,
                                  const Batch& base_batch, bool adapt = true) {
  require_same_shape(g_direct, p.theta, "perturbation_vector");
  if (!adapt) return g_direct;
  if (p.base_config.kind != OptimizerKind::adam) {
    // du/dg is the constant learning rate; no gradient needed.
    return p.base_config.lr * g_direct;
  }
  Tensor g_base = base_grad_theta(p, p.theta, base_batch).grad;
  if (p.base_config.weight_decay > 0.0) axpy(p.base_config.weight_decay, p.theta, g_base);
  return hadamard(adaptation_diag(p.base_state, g_base, p.base_config), g_direct);
}

inline constexpr double degenerate_norm = 1e-12;

/// eps = alpha / ||v||, or nullopt when v is degenerate.
inline std::optional<double> sama_epsilon(const Tensor& v, double alpha) {
  const double nv = norm2(v);
  if (!(nv >= degenerate_norm)) return std::nullopt;
  return alpha / nv;
}

/// -(dL_base/dl(theta + eps w) - dL_base/dl(theta - eps w)) / (2 eps).
inline Tensor mixed_grad_fd(const BilevelProblem& p, const Tensor& w, double eps,
                            const Batch& base_batch) {
  Tensor shifted = p.theta;
  axpy(eps, w, shifted);
  Tensor plus = base_grad_lambda(p, shifted, &p.theta, base_batch).grad;
  shifted = p.theta;
  axpy(-eps, w, shifted);
  Tensor minus = base_grad_lambda(p, shifted, &p.theta, base_batch).grad;
  Tensor out = plus - minus;
  const double c = -1.0 / (2.0 * eps);
  for (auto& x : out.data()) x *= c;
  return out;
}

/// SAMA meta gradient for perturbation v; nullopt signals a degenerate v
/// (||v|| < 1e-12), in which case the caller skips the meta update.
inline std::optional<Tensor> sama_meta_grad(const BilevelProblem& p, const Tensor& v,
                                            double alpha, const Batch& base_batch) {
  require_same_shape(v, p.theta, "sama_meta_grad");
  const auto eps = sama_epsilon(v, alpha);
  if (!eps) return std::nullopt;
  return mixed_grad_fd(p, v, *eps, base_batch);
}

// ---------------------------------------------------------------------------
// Second-order baselines

inline double default_hvp_step(const Tensor& theta) { return 1e-4 * (1.0 + norm2(theta)); }

/// H w by central differences of dL_base/dtheta with step hvp_step / ||w||.
inline Tensor hvp_fd(const BilevelProblem& p, const Tensor& w, double hvp_step,
                     const Batch& base_batch) {
  require_same_shape(w, p.theta, "hvp_fd");
  const double nw = norm2(w);
  if (!(nw > 0.0)) throw Error("hvp_fd: direction must be nonzero");
  const double h = hvp_step / nw;
  Tensor shifted = p.theta;
  axpy(h, w, shifted);
  Tensor plus = base_grad_theta(p, shifted, base_batch, &p.theta).grad;
  shifted = p.theta;
  axpy(-h, w, shifted);
  Tensor minus = base_grad_theta(p, shifted, base_batch, &p.theta).grad;
  Tensor out = plus - minus;
  for (auto& x : out.data()) x /= 2.0 * h;
  if (!all_finite(out)) throw NumericError("hvp_fd: non-finite Hessian-vector product");
  return out;
}

/// x = eta * sum_{k < terms} (I - eta H)^k g.
inline Tensor neumann_solve(const BilevelProblem& p, const Tensor& g, std::size_t terms,
                            double eta, double hvp_step, const Batch& base_batch) {
  if (terms < 1) throw Error("neumann: need at least one term");
  const double g_norm = norm2(g);
  Tensor acc = g;
  if (g_norm == 0.0) return acc;
  Tensor term = g;
  for (std::size_t k = 1; k < terms; ++k) {
    if (norm2(term) == 0.0) break;
    axpy(-eta, hvp_fd(p, term, hvp_step, base_batch), term);
    const double tn = norm2(term);
    if (!std::isfinite(tn) || tn > 10.0 * g_norm) {
      throw DivergenceError("neumann divergence at term " + std::to_string(k) +
                                ": iterate norm grew beyond 10x the initial norm",
                            k);
    }
    axpy(1.0, term, acc);
  }
  for (auto& x : acc.data()) x *= eta;
  return acc;
}

struct CgResult {
  Tensor x;
  std::size_t iterations = 0;
};

/// Solve (H + damping I) x = g by conjugate gradient from x = 0.
inline CgResult cg_solve(const BilevelProblem& p, const Tensor& g, std::size_t max_iters,
                         double tol, double damping, double hvp_step, const Batch& base_batch) {
  CgResult r{Tensor::zeros_like(g), 0};
  const double g_norm = norm2(g);
  Tensor res = g;
  Tensor dir = g;
  double rr = dot(res, res);
  for (std::size_t i = 0; i < max_iters; ++i) {
    if (std::sqrt(rr) <= tol * g_norm) break;
    Tensor hd = hvp_fd(p, dir, hvp_step, base_batch);
    if (damping > 0.0) axpy(damping, dir, hd);
    const double curvature = dot(dir, hd);
    if (!(curvature > 0.0)) {
      throw CurvatureError("cg: non-positive curvature p^T H p = " + std::to_string(curvature) +
                               " at iteration " + std::to_string(i),
                           i);
    }
    const double step = rr / curvature;
    axpy(step, dir, r.x);
    axpy(-step, hd, res);
    const double rr_next = dot(res, res);
    const double beta = rr_next / rr;
    rr = rr_next;
    for (std::size_t j = 0; j < dir.size(); ++j) dir[j] = res[j] + beta * dir[j];
    r.iterations = i + 1;
  }
  return r;
}

namespace detail {
inline Tensor assemble_from_solution(const BilevelProblem& p, const Tensor& x, double hvp_step,
                                     const Batch& base_batch) {
  const double nx = norm2(x);
  if (nx == 0.0) return Tensor::zeros_like(p.lambda);
  return mixed_grad_fd(p, x, hvp_step / nx, base_batch);
}
}  // namespace detail

inline Tensor neumann_meta_grad(const BilevelProblem& p, const Tensor& g_direct,
                                std::size_t terms, double eta, double hvp_step,
                                const Batch& base_batch) {
  const Tensor x = neumann_solve(p, g_direct, terms, eta, hvp_step, base_batch);
  return detail::assemble_from_solution(p, x, hvp_step, base_batch);
}

inline Tensor cg_meta_grad(const BilevelProblem& p, const Tensor& g_direct,
                           std::size_t max_iters, double tol, double damping, double hvp_step,
                           const Batch& base_batch) {
  const auto r = cg_solve(p, g_direct, max_iters, tol, damping, hvp_step, base_batch);
  return detail::assemble_from_solution(p, r.x, hvp_step, base_batch);
}

/// Meta gradient obtained by differentiating T plain gradient steps of size
/// gamma on the biased-regression base loss, starting from w0:
///   J_{t+1} = (I - gamma H) J_t + 2 gamma beta I,  H = 2 X^T X + 2 beta I
/// and returning J_T^T grad L_meta(w_T).
inline Tensor unrolled_exact_meta_grad(const regress::BiasedRegressionInstance& inst,
                                       const Tensor& lambda, std::size_t steps, double gamma,
                                       const Tensor* w0 = nullptr) {
  if (steps < 1) throw Error("unrolled_exact_meta_grad: T must be >= 1");
  using regress::detail::as_matrix;
  using regress::detail::as_vector;
  using Mat = regress::detail::Matrix;
  using Vec = regress::detail::Vector;
  const auto d = static_cast<Eigen::Index>(inst.d());
  const auto X = as_matrix(inst.X);
  const auto Xm = as_matrix(inst.X_meta);
  const auto y = as_vector(inst.y);
  const auto ym = as_vector(inst.y_meta);
  const auto lam = as_vector(lambda);
  Mat H = 2.0 * X.transpose() * X;
  H.diagonal().array() += 2.0 * inst.beta;
  const Mat step_map = Mat::Identity(d, d) - gamma * H;
  Mat J = Mat::Zero(d, d);
  Vec w = w0 ? Vec(as_vector(*w0)) : Vec::Zero(d);
  for (std::size_t t = 0; t < steps; ++t) {
    const Vec gw = 2.0 * X.transpose() * (X * w - y) + 2.0 * inst.beta * (w - lam);
    J = step_map * J;
    J.diagonal().array() += 2.0 * gamma * inst.beta;
    w -= gamma * gw;
  }
  const Vec gm = 2.0 * Xm.transpose() * (Xm * w - ym);
  return regress::detail::to_tensor(J.transpose() * gm);
}

// ---------------------------------------------------------------------------
// Alternating training loop

struct TrainConfig {
  std::size_t unroll = 1;      // base steps per meta step
  std::size_t meta_steps = 0;
  bool apply_v_step = true;    // theta <- theta - eps v after each SAMA meta update
  std::uint64_t seed = 0;
};

struct DataStreams {
  std::function<Batch()> base;
  std::function<Batch()> meta;
};

struct StepRecord {
  std::size_t step = 0;
  double base_loss = 0.0;
  double meta_loss = 0.0;
  double meta_grad_norm = 0.0;
  double wall_seconds = 0.0;
  std::size_t peak_bytes = 0;  // high-water mark above the bytes live at step start
  bool skipped = false;

  /// Equality of everything except wall time.
  bool same_outcome(const StepRecord& o) const {
    return step == o.step && base_loss == o.base_loss && meta_loss == o.meta_loss &&
           meta_grad_norm == o.meta_grad_norm && peak_bytes == o.peak_bytes &&
           skipped == o.skipped;
  }
};

using Trajectory = std::vector<StepRecord>;

struct TrainHooks {
  std::function<void(const Tensor& theta)> after_base_step;
  /// Called with the meta gradient (nullopt when skipped) before lambda moves.
  std::function<void(std::size_t step, const BilevelProblem&, const std::optional<Tensor>&)>
      before_meta_update;
  std::function<void(const StepRecord&, const BilevelProblem&)> after_meta_step;
};

namespace detail {

inline void apply_update(Tensor& param, OptimizerState& state, const OptimizerConfig& cfg,
                         const Tensor& grad) {
  Tensor g = grad;
  if (cfg.weight_decay > 0.0) axpy(cfg.weight_decay, param, g);
  auto r = update_vector(state, g, cfg);
  state = std::move(r.next);
  axpy(-1.0, r.u, param);
}

}  // namespace detail

/// Computes the meta gradient for the current state. `v_out`/`eps_out`
/// receive the SAMA perturbation when the method has one.
inline std::optional<Tensor> compute_meta_grad(const BilevelProblem& p, const MetaGradMethod& m,
                                               const Tensor& g_direct, const Batch& base_batch,
                                               const Tensor* theta_before_unroll,
                                               std::size_t unroll, Tensor* v_out = nullptr,
                                               double* eps_out = nullptr) {
  const double hvp_step = m.hvp_step > 0.0 ? m.hvp_step : default_hvp_step(p.theta);
  switch (m.kind) {
    case MethodKind::none:
      return std::nullopt;
    case MethodKind::sama:
    case MethodKind::sama_na: {
      Tensor v = perturbation_vector(g_direct, p, base_batch, m.kind == MethodKind::sama);
      const auto eps = sama_epsilon(v, m.alpha);
      if (!eps) return std::nullopt;
      Tensor g = mixed_grad_fd(p, v, *eps, base_batch);
      if (v_out) *v_out = std::move(v);
      if (eps_out) *eps_out = *eps;
      return g;
    }
    case MethodKind::neumann: {
      const double eta = m.neumann_scale > 0.0 ? m.neumann_scale : p.base_config.lr;
      return neumann_meta_grad(p, g_direct, m.neumann_terms, eta, hvp_step, base_batch);
    }
    case MethodKind::cg:
      return cg_meta_grad(p, g_direct, m.cg_iters, m.cg_tol, m.cg_damping, hvp_step, base_batch);
    case MethodKind::exact_ift:
      if (!p.regression) throw Error("exact_ift requires a biased-regression problem");
      return regress::meta_grad_closed(*p.regression, p.lambda);
    case MethodKind::unrolled_exact:
      if (!p.regression) throw Error("unrolled_exact requires a biased-regression problem");
      if (p.base_config.kind != OptimizerKind::sgd) {
        throw Error("unrolled_exact requires a plain sgd base optimizer");
      }
      return unrolled_exact_meta_grad(*p.regression, p.lambda, unroll, p.base_config.lr,
                                      theta_before_unroll);
  }
  return std::nullopt;
}

/// Alternate `unroll` base steps with one meta step, `meta_steps` times.
inline Trajectory train(BilevelProblem& p, const MetaGradMethod& m, const TrainConfig& c,
                        const DataStreams& streams, const TrainHooks& hooks = {}) {
  if (c.unroll < 1) throw Error("train: unroll must be >= 1");
  m.validate();
  p.base_config.validate();
  p.meta_config.validate();
  Trajectory traj;
  traj.reserve(c.meta_steps);
  using Clock = std::chrono::steady_clock;

  for (std::size_t step = 0; step < c.meta_steps; ++step) {
    memory::reset_peak();
    const std::size_t live_at_start = memory::live_bytes();
    const auto t0 = Clock::now();
    StepRecord rec;
    rec.step = step;

    std::optional<Tensor> theta_before;
    if (m.kind == MethodKind::unrolled_exact) theta_before = p.theta;

    Batch base_batch;
    for (std::size_t t = 0; t < c.unroll; ++t) {
      base_batch = streams.base();
      LossGrad lg;
      try {
        lg = base_grad_theta(p, p.theta, base_batch);
      } catch (const NumericError&) {
        throw NumericError("train: non-finite base loss at meta step " + std::to_string(step) +
                           ", base step " + std::to_string(t));
      }
      rec.base_loss = lg.loss;
      detail::apply_update(p.theta, p.base_state, p.base_config, lg.grad);
      if (hooks.after_base_step) hooks.after_base_step(p.theta);
    }

    const Batch meta_batch = streams.meta();
    std::optional<Tensor> meta_grad;
    Tensor v;
    double eps = 0.0;
    try {
      if (m.kind == MethodKind::none) {
        rec.meta_loss = meta_loss_value(p, meta_batch);
        if (!std::isfinite(rec.meta_loss)) throw NumericError("meta loss is not finite");
      } else {
        const LossGrad direct = meta_grad_theta(p, p.theta, meta_batch);
        rec.meta_loss = direct.loss;
        meta_grad = compute_meta_grad(p, m, direct.grad, base_batch,
                                      theta_before ? &*theta_before : nullptr, c.unroll, &v,
                                      &eps);
        if (meta_grad && !all_finite(*meta_grad)) throw NumericError("meta gradient is not finite");
      }
    } catch (const NumericError& e) {
      throw NumericError("train: meta step " + std::to_string(step) + ": " + e.what());
    }

    if (hooks.before_meta_update) hooks.before_meta_update(step, p, meta_grad);

    if (meta_grad) {
      rec.meta_grad_norm = norm2(*meta_grad);
      detail::apply_update(p.lambda, p.meta_state, p.meta_config, *meta_grad);
      const bool sama_like = m.kind == MethodKind::sama || m.kind == MethodKind::sama_na;
      if (sama_like && c.apply_v_step) axpy(-eps, v, p.theta);
    } else {
      rec.skipped = m.kind != MethodKind::none;
    }

    rec.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    rec.peak_bytes = memory::peak_bytes() - std::min(live_at_start, memory::peak_bytes());
    traj.push_back(rec);
    if (hooks.after_meta_step) hooks.after_meta_step(rec, p);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Biased regression as a bilevel problem

/// L_base = ||X w - y||^2 + beta ||w - lambda||^2,  L_meta = ||X' w - y'||^2.
/// Batches are ignored; both losses use all rows.
inline BilevelProblem regression_problem(const regress::BiasedRegressionInstance& inst,
                                         Tensor lambda0, OptimizerConfig base_config,
                                         OptimizerConfig meta_config,
                                         std::optional<Tensor> theta0 = std::nullopt) {
  regress::validate(inst);
  const double beta = inst.beta;
  const Tensor X = inst.X, y = inst.y, Xm = inst.X_meta, ym = inst.y_meta;
  BaseLossFn base = [X, y, beta](Tape& t, Var w, Var lam, const Batch&, const Tensor*) {
    Var fit = squared_norm(matmul(t.constant(X), w) - t.constant(y));
    return fit + scale(squared_norm(w - lam), beta);
  };
  MetaLossFn meta = [Xm, ym](Tape& t, Var w, const Batch&) {
    return squared_norm(matmul(t.constant(Xm), w) - t.constant(ym));
  };
  Tensor theta = theta0 ? std::move(*theta0) : Tensor(Shape{inst.d()});
  auto p = BilevelProblem::make(std::move(theta), std::move(lambda0), std::move(base),
                                std::move(meta), base_config, meta_config);
  p.regression = &inst;
  return p;
}

/// Streams for problems that ignore batch contents.
inline DataStreams full_batch_streams() { return {[] { return Batch{}; }, [] { return Batch{}; }}; }

}  // namespace sama
