#pragma once

// Seeded finite-difference suites for the tape and for the optimizer
// adaptation diagonal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sama/autodiff.hpp"
#include "sama/optim.hpp"
#include "sama/random.hpp"

namespace sama::gradcheck {

/// |a - b| / max(|a|, |b|, floor); the floor keeps entries that are
/// numerically zero from dominating through cancellation noise.
inline constexpr double relative_floor = 1e-3;

inline double relative_error(double a, double b, double floor = relative_floor) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

inline double max_relative_error(const Tensor& a, const Tensor& b,
                                 double floor = relative_floor) {
  require_same_shape(a, b, "max_relative_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, relative_error(a[i], b[i], floor));
  }
  return worst;
}

struct CaseResult {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct SuiteReport {
  std::vector<CaseResult> cases;
  double tolerance = 0.0;

  std::size_t failures() const {
    return static_cast<std::size_t>(
        std::count_if(cases.begin(), cases.end(), [](const CaseResult& c) { return !c.passed; }));
  }
  double worst() const {
    double w = 0.0;
    for (const auto& c : cases) w = std::max(w, c.max_rel_error);
    return w;
  }
};

enum class Activation { tanh, sigmoid, relu };
enum class Loss { mse, softmax_ce, squared_norm, mean };

inline const char* name(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline const char* name(Loss l) {
  switch (l) {
    case Loss::mse: return "mse";
    case Loss::softmax_ce: return "softmax_ce";
    case Loss::squared_norm: return "squared_norm";
    case Loss::mean: return "mean";
  }
  return "?";
}

/// A random MLP with its input batch and targets, differentiated with
/// respect to every weight, every bias and the input.
struct MlpCase {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Activation activation = Activation::tanh;
  Loss loss = Loss::mse;
  std::size_t batch = 1;
  std::vector<Tensor> params;  // x, then (W, b) per layer
  Tensor target;
  std::vector<std::size_t> labels;

  Var forward(Tape& tape, std::span<const Var> leaves) const {
    Var h = leaves[0];
    const std::size_t layers = widths.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      h = add(matmul(h, leaves[1 + 2 * l]), leaves[2 + 2 * l]);
      if (l + 1 < layers) {
        switch (activation) {
          case Activation::tanh: h = sama::tanh(h); break;
          case Activation::sigmoid: h = sigmoid(h); break;
          case Activation::relu: h = relu(h); break;
        }
      }
    }
    switch (loss) {
      case Loss::mse: return mse(h, tape.constant(target));
      case Loss::softmax_ce: return mean(softmax_cross_entropy(h, labels));
      case Loss::squared_norm: return squared_norm(h);
      case Loss::mean: return mean(h);
    }
    return h;
  }

  double value_with(std::size_t which, const Tensor& replaced) const {
    std::vector<Tensor> inputs = params;
    inputs[which] = replaced;
    auto rec = record(std::move(inputs), [this](Tape& t, std::span<const Var> l) {
      return forward(t, l);
    });
    return rec.value().item();
  }
};

inline MlpCase make_mlp_case(std::uint64_t seed) {
  Rng rng(seed);
  MlpCase c;
  const std::size_t depth = 1 + rng.below(3);  // weight layers
  c.widths.push_back(1 + rng.below(8));
  for (std::size_t l = 0; l + 1 < depth; ++l) c.widths.push_back(1 + rng.below(32));
  c.activation = static_cast<Activation>(rng.below(3));
  c.loss = static_cast<Loss>(rng.below(4));
  const std::size_t out = c.loss == Loss::softmax_ce ? 2 + rng.below(5) : 1 + rng.below(4);
  c.widths.push_back(out);
  c.batch = 1 + rng.below(6);
  c.params.push_back(rng.normal_tensor({c.batch, c.widths[0]}));
  for (std::size_t l = 0; l + 1 < c.widths.size(); ++l) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(c.widths[l]));
    c.params.push_back(rng.normal_tensor({c.widths[l], c.widths[l + 1]}, sd));
    c.params.push_back(rng.normal_tensor({c.widths[l + 1]}, 0.1));
  }
  c.target = rng.normal_tensor({c.batch, out});
  for (std::size_t i = 0; i < c.batch; ++i) c.labels.push_back(rng.below(out));
  return c;
}

inline std::string describe(const MlpCase& c, std::uint64_t seed) {
  std::string w;
  for (std::size_t i = 0; i < c.widths.size(); ++i) {
    w += (i ? "-" : "") + std::to_string(c.widths[i]);
  }
  return "mlp seed=" + std::to_string(seed) + " widths=" + w + " act=" + name(c.activation) +
         " loss=" + name(c.loss) + " batch=" + std::to_string(c.batch);
}

/// backward() against finite_diff_grad on `count` seeded MLP cases.
inline SuiteReport autodiff_suite(std::size_t count, std::uint64_t seed = 1,
                                  double step = 1e-5, double tol = 1e-5) {
  SuiteReport report;
  report.tolerance = tol;
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t case_seed = seed * 1000003ull + k;
    const MlpCase c = make_mlp_case(case_seed);
    auto rec = record(c.params, [&c](Tape& t, std::span<const Var> l) { return c.forward(t, l); });
    const Gradients grads = rec.backward();
    double worst = 0.0;
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      const Tensor fd = finite_diff_grad(
          [&](const Tensor& x) { return c.value_with(i, x); }, c.params[i], step);
      worst = std::max(worst, max_relative_error(grads[rec.leaves[i]], fd));
    }
    report.cases.push_back({describe(c, case_seed), worst, worst < tol});
  }
  return report;
}

/// A random optimizer state and gradient for adaptation checks.
struct AdaptCase {
  OptimizerConfig config;
  OptimizerState state;
  Tensor g;
};

inline AdaptCase make_adapt_case(std::uint64_t seed, OptimizerConfig cfg, std::size_t size = 8) {
  Rng rng(seed);
  AdaptCase c{cfg, {}, rng.normal_tensor({size})};
  c.state.m = rng.normal_tensor({size}, 0.5);
  c.state.v = Tensor({size});
  for (auto& v : c.state.v.data()) {
    const double r = rng.uniform(0.05, 1.5);
    v = r * r;
  }
  c.state.t = rng.below(50);
  if (rng.below(5) == 0) {
    // fresh state, as on the first step
    c.state = OptimizerState::zeros_like(c.g);
  }
  return c;
}

/// Entry i of the central difference of update_vector in g_i with step
/// 1e-6 (1 + |g_i|).
inline Tensor update_fd(const AdaptCase& c) {
  Tensor out = Tensor::zeros_like(c.g);
  Tensor probe = c.g;
  for (std::size_t i = 0; i < c.g.size(); ++i) {
    const double h = 1e-6 * (1.0 + std::abs(c.g[i]));
    probe[i] = c.g[i] + h;
    const double up = update_vector(c.state, probe, c.config).u[i];
    probe[i] = c.g[i] - h;
    const double down = update_vector(c.state, probe, c.config).u[i];
    probe[i] = c.g[i];
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

inline std::vector<OptimizerConfig> adaptation_configs() {
  auto adam_nc = OptimizerConfig::adam(0.01);
  adam_nc.bias_correction = false;
  return {OptimizerConfig::sgd(0.1), OptimizerConfig::sgd_momentum(0.05, 0.9),
          OptimizerConfig::adam(0.01), adam_nc};
}

/// adaptation_diag against the finite difference of update_vector.
inline SuiteReport adaptation_suite(std::size_t count, std::uint64_t seed = 7,
                                    double tol = 1e-5) {
  SuiteReport report;
  report.tolerance = tol;
  const auto configs = adaptation_configs();
  for (std::size_t k = 0; k < count; ++k) {
    const OptimizerConfig& cfg = configs[k % configs.size()];
    const AdaptCase c = make_adapt_case(seed * 7919ull + k, cfg);
    const Tensor analytic = adaptation_diag(c.state, c.g, c.config);
    const double err = max_relative_error(analytic, update_fd(c));
    std::string label = std::string(to_string(cfg.kind));
    if (cfg.kind == OptimizerKind::adam) label += cfg.bias_correction ? "/corrected" : "/plain";
    report.cases.push_back({"adapt " + label + " case " + std::to_string(k), err, err < tol});
  }
  return report;
}

}  // namespace sama::gradcheck
