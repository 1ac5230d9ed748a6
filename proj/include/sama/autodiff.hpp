#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records primitives in application order; inputs of a node always
// have smaller ids, so one backward sweep in reverse id order is a valid
// topological traversal. Only first-order gradients are supported, and a
// tape can be swept exactly once.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sama/error.hpp"
#include "sama/tensor.hpp"

namespace sama {

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  matmul,
  add,
  add_bias,
  sub,
  mul,
  scale,
  relu,
  tanh,
  sigmoid,
  sum,
  mean,
  mse,
  squared_norm,
  softmax_ce,
  slice,
  reshape,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::mse: return "mse";
    case OpKind::squared_norm: return "squared_norm";
    case OpKind::softmax_ce: return "softmax_cross_entropy";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
  }
  return "?";
}

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Gradients keyed by leaf id.
class Gradients {
 public:
  const Tensor& operator[](Var v) const { return at(v.id); }

  const Tensor& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
      throw TapeError("gradients: leaf " + std::to_string(id) + " was not requested");
    }
    return it->second;
  }

  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<NodeId, Tensor> grads_;
};

class Tape {
 public:
  static constexpr NodeId none = std::numeric_limits<NodeId>::max();

  struct Node {
    OpKind kind = OpKind::constant;
    std::array<NodeId, 2> inputs{none, none};
    Tensor value;
    Tensor aux;  // softmax probabilities for softmax_ce
    double factor = 0.0;
    std::size_t offset = 0;
    std::vector<std::size_t> labels;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) {
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var constant(Tensor value) {
    Node n;
    n.kind = OpKind::constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  bool consumed() const noexcept { return consumed_; }

  Var push(Node n) {
    for (auto in : n.inputs) {
      if (in != none && in >= nodes_.size()) {
        throw TapeError("tape: input refers to a node that was not recorded yet");
      }
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Gradients backward(Var root, std::span<const Var> wrt);

  Gradients backward(Var root, std::initializer_list<Var> wrt) {
    return backward(root, std::span<const Var>(wrt.begin(), wrt.size()));
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }

namespace detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw TapeError(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

inline Var unary(Var a, OpKind kind, Tensor value) {
  Tape::Node n;
  n.kind = kind;
  n.inputs = {a.id, Tape::none};
  n.value = std::move(value);
  return a.tape->push(std::move(n));
}

inline Var binary(Var a, Var b, OpKind kind, Tensor value) {
  Tape::Node n;
  n.kind = kind;
  n.inputs = {a.id, b.id};
  n.value = std::move(value);
  return a.tape->push(std::move(n));
}

// C = A * B for A [n,k] and B [k,m] (or B [k], giving C [n]).
inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols();
  const std::size_t m = b.rank() == 2 ? b.cols() : 1;
  Tensor c(b.rank() == 2 ? Shape{n, m} : Shape{n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * m;
      double* crow = pc + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || (sb.size() != 2 && sb.size() != 1) || sa[1] != sb[0]) {
    detail::shape_fail("matmul", sa, sb);
  }
  return detail::binary(a, b, OpKind::matmul, detail::matmul_values(a.value(), b.value()));
}

/// Elementwise sum of equal shapes, or a [n,m] + [m] bias broadcast.
inline Var add(Var a, Var b) {
  detail::same_tape(a, b, "add");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return detail::binary(a, b, OpKind::add, a.value() + b.value());
  if (sa.size() == 2 && sb.size() == 1 && sa[1] == sb[0]) {
    Tensor out = a.value();
    const std::size_t m = sa[1];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % m];
    return detail::binary(a, b, OpKind::add_bias, std::move(out));
  }
  detail::shape_fail("add", sa, sb);
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b, "subtract");
  if (a.shape() != b.shape()) detail::shape_fail("subtract", a.shape(), b.shape());
  return detail::binary(a, b, OpKind::sub, a.value() - b.value());
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b, "multiply");
  if (a.shape() != b.shape()) detail::shape_fail("multiply", a.shape(), b.shape());
  return detail::binary(a, b, OpKind::mul, hadamard(a.value(), b.value()));
}

inline Var scale(Var a, double factor) {
  Tape::Node n;
  n.kind = OpKind::scale;
  n.inputs = {a.id, Tape::none};
  n.value = factor * a.value();
  n.factor = factor;
  return a.tape->push(std::move(n));
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) x = x > 0.0 ? x : 0.0;
  return detail::unary(a, OpKind::relu, std::move(out));
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) x = std::tanh(x);
  return detail::unary(a, OpKind::tanh, std::move(out));
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) x = sigmoid_value(x);
  return detail::unary(a, OpKind::sigmoid, std::move(out));
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return detail::unary(a, OpKind::sum, Tensor::scalar(s));
}

inline Var mean(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return detail::unary(a, OpKind::mean, Tensor::scalar(s / static_cast<double>(a.value().size())));
}

/// Mean of squared differences over all elements.
inline Var mse(Var pred, Var target) {
  detail::same_tape(pred, target, "mse");
  if (pred.shape() != target.shape()) detail::shape_fail("mse", pred.shape(), target.shape());
  double s = 0.0;
  const auto& p = pred.value();
  const auto& t = target.value();
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
  return detail::binary(pred, target, OpKind::mse,
                        Tensor::scalar(s / static_cast<double>(p.size())));
}

/// Sum of squares, ||a||^2.
inline Var squared_norm(Var a) {
  return detail::unary(a, OpKind::squared_norm, Tensor::scalar(dot(a.value(), a.value())));
}

/// Per-sample cross-entropy of softmax(logits) against class labels.
/// logits [n,K] -> losses [n].
inline Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    detail::shape_fail("softmax_cross_entropy", s, Shape{labels.size()});
  }
  const std::size_t n = s[0], k = s[1];
  const auto& z = logits.value();
  Tensor probs(Shape{n, k});
  Tensor loss(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(k) + " classes");
    }
    double zmax = z[i * k];
    for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z[i * k + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[i * k + j] - zmax);
    const double lse = zmax + std::log(denom);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[i * k + j] - lse);
    loss[i] = lse - z[i * k + labels[i]];
  }
  Tape::Node node;
  node.kind = OpKind::softmax_ce;
  node.inputs = {logits.id, Tape::none};
  node.value = std::move(loss);
  node.aux = std::move(probs);
  node.labels.assign(labels.begin(), labels.end());
  return logits.tape->push(std::move(node));
}

/// Contiguous run of the flattened input, viewed with the given shape.
inline Var slice(Var a, std::size_t offset, Shape shape) {
  const std::size_t count = shape_size(shape);
  if (offset + count > a.value().size()) {
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") exceeds input " +
                     shape_string(a.shape()));
  }
  Tensor out(shape, a.value().data().subspan(offset, count));
  Tape::Node n;
  n.kind = OpKind::slice;
  n.inputs = {a.id, Tape::none};
  n.value = std::move(out);
  n.offset = offset;
  return a.tape->push(std::move(n));
}

inline Var reshape(Var a, Shape shape) {
  return detail::unary(a, OpKind::reshape, a.value().reshaped(std::move(shape)));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

inline Gradients Tape::backward(Var root, std::span<const Var> wrt) {
  if (consumed_) {
    throw TapeError("backward: tape already consumed; record the forward pass again");
  }
  if (root.tape != this || root.id >= nodes_.size()) {
    throw TapeError("backward: root is not on this tape");
  }
  if (nodes_[root.id].value.size() != 1) {
    throw TapeError("backward: root must be scalar, got shape " +
                    shape_string(nodes_[root.id].value.shape()));
  }
  const std::size_t count = root.id + 1;
  std::vector<char> reach(count, 0);
  for (const Var& v : wrt) {
    if (v.tape != this || v.id >= nodes_.size() || nodes_[v.id].kind != OpKind::leaf) {
      throw TapeError("backward: leaf id " + std::to_string(v.id) + " is not a leaf on this tape");
    }
    if (v.id < count) reach[v.id] = 1;
  }
  consumed_ = true;

  for (std::size_t i = 0; i < count; ++i) {
    const auto& n = nodes_[i];
    if (n.kind == OpKind::leaf || n.kind == OpKind::constant) continue;
    for (auto in : n.inputs) {
      if (in != none && reach[in]) reach[i] = 1;
    }
  }

  std::vector<Tensor> adj(count);
  std::vector<char> has(count, 0);
  auto accumulate = [&](NodeId id, Tensor&& g) {
    if (!reach[id]) return;
    if (!has[id]) {
      adj[id] = std::move(g);
      has[id] = 1;
    } else {
      axpy(1.0, g, adj[id]);
    }
  };
  auto wants = [&](NodeId id) { return id != none && reach[id]; };

  adj[root.id] = Tensor(nodes_[root.id].value.shape(), 1.0);
  has[root.id] = 1;

  for (std::size_t idx = count; idx-- > 0;) {
    if (!has[idx] || !reach[idx]) continue;
    const Node& n = nodes_[idx];
    const Tensor& g = adj[idx];
    const NodeId ia = n.inputs[0];
    const NodeId ib = n.inputs[1];
    switch (n.kind) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::matmul: {
        const Tensor& a = nodes_[ia].value;
        const Tensor& b = nodes_[ib].value;
        const std::size_t rows = a.rows(), inner = a.cols();
        const std::size_t m = b.rank() == 2 ? b.cols() : 1;
        if (wants(ia)) {
          Tensor da(a.shape());
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * b[p * m + j];
              da[i * inner + p] = s;
            }
          accumulate(ia, std::move(da));
        }
        if (wants(ib)) {
          Tensor db(b.shape());
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
              const double aip = a[i * inner + p];
              for (std::size_t j = 0; j < m; ++j) db[p * m + j] += aip * g[i * m + j];
            }
          accumulate(ib, std::move(db));
        }
        break;
      }
      case OpKind::add:
        if (wants(ia)) accumulate(ia, Tensor(g));
        if (wants(ib)) accumulate(ib, Tensor(g));
        break;
      case OpKind::add_bias: {
        if (wants(ia)) accumulate(ia, Tensor(g));
        if (wants(ib)) {
          Tensor db(nodes_[ib].value.shape());
          const std::size_t m = db.size();
          for (std::size_t i = 0; i < g.size(); ++i) db[i % m] += g[i];
          accumulate(ib, std::move(db));
        }
        break;
      }
      case OpKind::sub:
        if (wants(ia)) accumulate(ia, Tensor(g));
        if (wants(ib)) accumulate(ib, -g);
        break;
      case OpKind::mul:
        if (wants(ia)) accumulate(ia, hadamard(g, nodes_[ib].value));
        if (wants(ib)) accumulate(ib, hadamard(g, nodes_[ia].value));
        break;
      case OpKind::scale:
        accumulate(ia, n.factor * g);
        break;
      case OpKind::relu: {
        Tensor da = g;
        const Tensor& x = nodes_[ia].value;
        for (std::size_t i = 0; i < da.size(); ++i)
          if (!(x[i] > 0.0)) da[i] = 0.0;
        accumulate(ia, std::move(da));
        break;
      }
      case OpKind::tanh: {
        Tensor da = g;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] *= 1.0 - n.value[i] * n.value[i];
        accumulate(ia, std::move(da));
        break;
      }
      case OpKind::sigmoid: {
        Tensor da = g;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] *= n.value[i] * (1.0 - n.value[i]);
        accumulate(ia, std::move(da));
        break;
      }
      case OpKind::sum:
        accumulate(ia, Tensor(nodes_[ia].value.shape(), g[0]));
        break;
      case OpKind::mean: {
        const auto& shape = nodes_[ia].value.shape();
        accumulate(ia, Tensor(shape, g[0] / static_cast<double>(shape_size(shape))));
        break;
      }
      case OpKind::mse: {
        const Tensor& p = nodes_[ia].value;
        const Tensor& t = nodes_[ib].value;
        const double c = 2.0 * g[0] / static_cast<double>(p.size());
        Tensor dp(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) dp[i] = c * (p[i] - t[i]);
        if (wants(ib)) accumulate(ib, -dp);
        if (wants(ia)) accumulate(ia, std::move(dp));
        break;
      }
      case OpKind::squared_norm:
        accumulate(ia, (2.0 * g[0]) * nodes_[ia].value);
        break;
      case OpKind::softmax_ce: {
        Tensor dz = n.aux;
        const std::size_t k = dz.cols();
        for (std::size_t i = 0; i < dz.rows(); ++i) {
          dz[i * k + n.labels[i]] -= 1.0;
          for (std::size_t j = 0; j < k; ++j) dz[i * k + j] *= g[i];
        }
        accumulate(ia, std::move(dz));
        break;
      }
      case OpKind::slice: {
        if (!has[ia]) {
          adj[ia] = Tensor(nodes_[ia].value.shape());
          has[ia] = 1;
        }
        double* dst = adj[ia].data().data() + n.offset;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        break;
      }
      case OpKind::reshape:
        accumulate(ia, g.reshaped(nodes_[ia].value.shape()));
        break;
    }
    if (n.kind != OpKind::leaf) adj[idx] = Tensor();  // release the adjoint early
  }

  Gradients out;
  for (const Var& v : wrt) {
    if (v.id < count && has[v.id]) {
      out.grads_.insert_or_assign(v.id, adj[v.id]);
    } else {
      out.grads_.insert_or_assign(v.id, Tensor::zeros_like(nodes_[v.id].value));
    }
  }
  return out;
}

/// A recorded forward pass: the tape, the leaf handles and the output.
struct Recording {
  std::unique_ptr<Tape> tape;
  std::vector<Var> leaves;
  Var output;

  const Tensor& value() const { return output.value(); }
  Gradients backward() { return tape->backward(output, leaves); }
};

/// Record `f(tape, leaves)` with one differentiable leaf per input tensor.
template <class F>
Recording record(std::vector<Tensor> inputs, F&& f) {
  Recording r;
  r.tape = std::make_unique<Tape>();
  r.leaves.reserve(inputs.size());
  for (auto& t : inputs) r.leaves.push_back(r.tape->leaf(std::move(t)));
  r.output = std::forward<F>(f)(*r.tape, std::span<const Var>(r.leaves));
  return r;
}

/// Central finite-difference gradient of a scalar function.
template <class F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw NumericError("finite_diff_grad: step must be positive");
  Tensor probe = x;
  Tensor grad = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f(std::as_const(probe));
    probe[i] = x[i] - step;
    const double down = f(std::as_const(probe));
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace sama
