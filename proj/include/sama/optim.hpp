#pragma once

// Base-level optimizers. Each exposes the update vector u(g) and the
// elementwise derivative du/dg with the previous moments held fixed. The
// latter is the diagonal "algorithmic adaptation" matrix used to build the
// SAMA perturbation vector.

#include <cmath>
#include <cstdint>
#include <string>

#include "sama/error.hpp"
#include "sama/tensor.hpp"

namespace sama {

enum class OptimizerKind { sgd, sgd_momentum, adam };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd-momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "sgd-momentum" || s == "momentum") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw Error("unknown optimizer '" + s + "' (expected sgd, sgd-momentum or adam)");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 0.1;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool bias_correction = true;
  double weight_decay = 0.0;  // L2 term added to the loss gradient

  static OptimizerConfig sgd(double lr) {
    OptimizerConfig c;
    c.lr = lr;
    return c;
  }

  static OptimizerConfig sgd_momentum(double lr, double momentum) {
    OptimizerConfig c;
    c.kind = OptimizerKind::sgd_momentum;
    c.lr = lr;
    c.momentum = momentum;
    return c;
  }

  static OptimizerConfig adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8, bool bias_correction = true) {
    OptimizerConfig c;
    c.kind = OptimizerKind::adam;
    c.lr = lr;
    c.beta1 = beta1;
    c.beta2 = beta2;
    c.eps = eps;
    c.bias_correction = bias_correction;
    return c;
  }

  void validate() const {
    if (!(lr > 0.0)) throw Error("optimizer: learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw Error("optimizer: weight_decay must be >= 0");
    if (kind == OptimizerKind::sgd_momentum && !(momentum >= 0.0 && momentum < 1.0)) {
      throw Error("optimizer: momentum must lie in [0, 1)");
    }
    if (kind == OptimizerKind::adam) {
      if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw Error("optimizer: adam betas must lie in [0, 1)");
      }
      if (!(eps >= 0.0)) throw Error("optimizer: adam eps must be >= 0");
    }
  }
};

/// Moment buffers shaped like the parameter, plus the step count.
struct OptimizerState {
  Tensor m;
  Tensor v;
  std::uint64_t t = 0;

  static OptimizerState zeros_like(const Tensor& param) {
    return {Tensor::zeros_like(param), Tensor::zeros_like(param), 0};
  }
};

struct UpdateResult {
  Tensor u;
  OptimizerState next;
};

namespace detail {

inline void check_update_inputs(const OptimizerState& state, const Tensor& g, const char* op) {
  if (state.m.shape() != g.shape() || state.v.shape() != g.shape()) {
    throw ShapeError(std::string(op) + ": gradient shape " + shape_string(g.shape()) +
                     " does not match optimizer buffers " + shape_string(state.m.shape()));
  }
  if (!all_finite(g)) throw NumericError(std::string(op) + ": non-finite gradient");
}

// Correction factors for the step being taken (t + 1); 1 when disabled.
inline std::pair<double, double> bias_factors(const OptimizerState& s, const OptimizerConfig& c) {
  if (!c.bias_correction) return {1.0, 1.0};
  const double t = static_cast<double>(s.t + 1);
  return {1.0 / (1.0 - std::pow(c.beta1, t)), 1.0 / (1.0 - std::pow(c.beta2, t))};
}

}  // namespace detail

/// Update vector u with theta_next = theta - u, and the advanced state.
inline UpdateResult update_vector(const OptimizerState& state, const Tensor& g,
                                  const OptimizerConfig& cfg) {
  detail::check_update_inputs(state, g, "update_vector");
  UpdateResult r{Tensor::zeros_like(g), state};
  r.next.t = state.t + 1;
  switch (cfg.kind) {
    case OptimizerKind::sgd:
      r.u = cfg.lr * g;
      break;
    case OptimizerKind::sgd_momentum:
      for (std::size_t i = 0; i < g.size(); ++i) {
        r.next.m[i] = cfg.momentum * state.m[i] + g[i];
        r.u[i] = cfg.lr * r.next.m[i];
      }
      break;
    case OptimizerKind::adam: {
      const auto [c1, c2] = detail::bias_factors(state, cfg);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        r.next.m[i] = m;
        r.next.v[i] = v;
        r.u[i] = cfg.lr * (c1 * m) / (std::sqrt(c2 * v) + cfg.eps);
      }
      break;
    }
  }
  return r;
}

/// Elementwise du/dg of update_vector at (state, g), prior moments fixed.
///
/// For Adam without bias correction, with s = sqrt(b2 v + (1 - b2) g^2):
///
///   du/dg = lr [(1-b1) b2 v + (1-b1) eps s - (1-b2) b1 m g] / [s (s + eps)^2]
///
/// With correction, u = lr (c1 / sqrt(c2)) m' / (s + eps / sqrt(c2)), so the
/// same expression applies with eps' = eps / sqrt(c2), scaled by c1 / sqrt(c2).
inline Tensor adaptation_diag(const OptimizerState& state, const Tensor& g,
                              const OptimizerConfig& cfg) {
  detail::check_update_inputs(state, g, "adaptation_diag");
  switch (cfg.kind) {
    case OptimizerKind::sgd:
    case OptimizerKind::sgd_momentum:
      return Tensor(g.shape(), cfg.lr);
    case OptimizerKind::adam:
      break;
  }
  const auto [c1, c2] = detail::bias_factors(state, cfg);
  const double root_c2 = std::sqrt(c2);
  const double eps = cfg.eps / root_c2;
  const double gain = cfg.lr * c1 / root_c2;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  Tensor d = Tensor::zeros_like(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double s = std::sqrt(b2 * state.v[i] + (1.0 - b2) * g[i] * g[i]);
    if (s == 0.0 && eps == 0.0) {
      throw NumericError("adaptation_diag: singular denominator (s = 0 and eps = 0) at index " +
                         std::to_string(i));
    }
    const double num = (1.0 - b1) * b2 * state.v[i] + (1.0 - b1) * eps * s -
                       (1.0 - b2) * b1 * state.m[i] * g[i];
    if (s == 0.0) {
      // v = 0 and g = 0: the limit is (1 - b1) / eps.
      d[i] = gain * (1.0 - b1) / eps;
    } else {
      d[i] = gain * num / (s * (s + eps) * (s + eps));
    }
  }
  return d;
}

/// An optimizer bound to one parameter tensor.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const Tensor& param)
      : cfg_(cfg), state_(OptimizerState::zeros_like(param)) {
    cfg_.validate();
  }

  Optimizer(OptimizerConfig cfg, OptimizerState state) : cfg_(cfg), state_(std::move(state)) {
    cfg_.validate();
  }

  /// param <- param - u(grad + weight_decay * param). Returns u.
  Tensor step(Tensor& param, const Tensor& grad) {
    Tensor g = grad;
    if (cfg_.weight_decay > 0.0) axpy(cfg_.weight_decay, param, g);
    auto r = update_vector(state_, g, cfg_);
    state_ = std::move(r.next);
    axpy(-1.0, r.u, param);
    return std::move(r.u);
  }

  Tensor adaptation(const Tensor& grad) const { return adaptation_diag(state_, grad, cfg_); }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  const OptimizerState& state() const noexcept { return state_; }
  OptimizerState& state() noexcept { return state_; }

 private:
  OptimizerConfig cfg_;
  OptimizerState state_;
};

}  // namespace sama
