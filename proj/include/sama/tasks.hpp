#pragma once

// Noisy-label data reweighting at desk scale.
//
// Base:  min_theta  mean_i  w(l_i, u_i; lambda) * l_i      (training split)
// Meta:  min_lambda mean_j  CE(f(x_j; theta*), y_j)         (clean meta split)
//
// l_i and u_i enter the weight net as constants: gradients reach theta only
// through the multiplied l_i.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sama/autodiff.hpp"
#include "sama/bilevel.hpp"
#include "sama/error.hpp"
#include "sama/random.hpp"

namespace sama::tasks {

enum class Split : std::uint8_t { train, meta, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::meta: return "meta";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "meta") return Split::meta;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + s + "'");
}

struct NoisyDataset {
  std::size_t d = 0;
  std::size_t classes = 0;
  Tensor features;  // [N, d]
  std::vector<std::size_t> observed;
  std::vector<std::size_t> truth;
  std::vector<std::uint8_t> is_noisy;
  std::vector<Split> split;
  std::vector<std::size_t> train_ids, meta_ids, test_ids;

  std::size_t size() const { return observed.size(); }

  std::size_t noisy_count() const {
    return static_cast<std::size_t>(std::count(is_noisy.begin(), is_noisy.end(), 1));
  }

  void index_splits() {
    train_ids.clear();
    meta_ids.clear();
    test_ids.clear();
    for (std::size_t i = 0; i < size(); ++i) {
      switch (split[i]) {
        case Split::train: train_ids.push_back(i); break;
        case Split::meta: meta_ids.push_back(i); break;
        case Split::test: test_ids.push_back(i); break;
      }
    }
  }

  void validate() const {
    const std::size_t n = size();
    if (truth.size() != n || is_noisy.size() != n || split.size() != n ||
        features.rank() != 2 || features.rows() != n || features.cols() != d) {
      throw ShapeError("dataset: column lengths disagree");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (observed[i] >= classes || truth[i] >= classes) throw Error("dataset: label out of range");
      if ((observed[i] != truth[i]) != (is_noisy[i] != 0)) {
        throw Error("dataset: is_noisy disagrees with labels at row " + std::to_string(i));
      }
      if (split[i] != Split::train && is_noisy[i]) {
        throw Error("dataset: noisy label outside the training split at row " + std::to_string(i));
      }
    }
  }
};

/// Gaussian blobs with unit covariance around separation * e_c, one per
/// class. Training labels are flipped with probability rho to a uniformly
/// chosen wrong class. The m meta samples are clean and class-balanced.
inline NoisyDataset gen_noisy(std::size_t n, std::size_t d, std::size_t classes, double rho,
                              std::size_t m, std::uint64_t seed, std::size_t n_test = 0,
                              double separation = 2.0) {
  if (classes < 2) throw Error("gen_noisy: need at least 2 classes");
  if (classes > d) throw Error("gen_noisy: class means need classes <= d");
  if (!(rho >= 0.0 && rho < 1.0)) throw Error("gen_noisy: rho must lie in [0, 1)");
  if (m < classes) throw Error("gen_noisy: meta split needs m >= classes");
  if (n == 0) throw Error("gen_noisy: n must be >= 1");

  Rng rng(seed);
  NoisyDataset ds;
  ds.d = d;
  ds.classes = classes;
  const std::size_t total = n + m + n_test;
  ds.features = Tensor(Shape{total, d});
  ds.observed.resize(total);
  ds.truth.resize(total);
  ds.is_noisy.assign(total, 0);
  ds.split.resize(total);

  auto draw = [&](std::size_t i, std::size_t label, Split s) {
    ds.truth[i] = label;
    ds.observed[i] = label;
    ds.split[i] = s;
    for (std::size_t j = 0; j < d; ++j) {
      ds.features.at(i, j) = (j == label ? separation : 0.0) + rng.normal();
    }
  };

  std::size_t i = 0;
  for (; i < n; ++i) {
    draw(i, rng.below(classes), Split::train);
    if (rng.uniform() < rho) {
      const std::size_t shift = 1 + rng.below(classes - 1);
      ds.observed[i] = (ds.truth[i] + shift) % classes;
      ds.is_noisy[i] = 1;
    }
  }
  for (std::size_t k = 0; k < m; ++k, ++i) draw(i, k % classes, Split::meta);
  for (std::size_t k = 0; k < n_test; ++k, ++i) draw(i, rng.below(classes), Split::test);
  ds.index_splits();
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_csv(const NoisyDataset& ds, std::ostream& os) {
  for (std::size_t j = 0; j < ds.d; ++j) os << "feature_" << j << ',';
  os << "observed_label,true_label,is_noisy,split\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.d; ++j) os << ds.features.at(i, j) << ',';
    os << ds.observed[i] << ',' << ds.truth[i] << ',' << int(ds.is_noisy[i]) << ','
       << to_string(ds.split[i]) << '\n';
  }
}

inline NoisyDataset read_csv(std::istream& is) {
  auto split_line = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::string line;
  if (!std::getline(is, line)) throw Error("dataset csv: empty input");
  const auto header = split_line(line);
  if (header.size() < 5) throw Error("dataset csv: header too short");
  const std::size_t d = header.size() - 4;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "feature_" + std::to_string(j)) {
      throw Error("dataset csv: expected column feature_" + std::to_string(j) + ", got '" +
                  header[j] + "'");
    }
  }
  if (header[d] != "observed_label" || header[d + 1] != "true_label" ||
      header[d + 2] != "is_noisy" || header[d + 3] != "split") {
    throw Error("dataset csv: trailing columns must be observed_label,true_label,is_noisy,split");
  }

  NoisyDataset ds;
  ds.d = d;
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw Error("dataset csv: line " + std::to_string(line_no) + " has " +
                  std::to_string(cells.size()) + " cells, expected " +
                  std::to_string(header.size()));
    }
    try {
      for (std::size_t j = 0; j < d; ++j) values.push_back(std::stod(cells[j]));
      ds.observed.push_back(std::stoull(cells[d]));
      ds.truth.push_back(std::stoull(cells[d + 1]));
      ds.is_noisy.push_back(static_cast<std::uint8_t>(std::stoi(cells[d + 2])));
    } catch (const std::logic_error&) {
      throw Error("dataset csv: malformed number on line " + std::to_string(line_no));
    }
    ds.split.push_back(parse_split(cells[d + 3]));
  }
  if (ds.observed.empty()) throw Error("dataset csv: no rows");
  ds.features = Tensor(Shape{ds.observed.size(), d}, values);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    max_label = std::max({max_label, ds.observed[i], ds.truth[i]});
  }
  ds.classes = max_label + 1;
  ds.index_splits();
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Models over flat parameter vectors

inline Tensor gather_rows(const Tensor& X, const Batch& ids) {
  if (ids.empty()) throw Error("gather_rows: empty batch");
  const std::size_t d = X.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= X.rows()) throw Error("gather_rows: id out of range");
    std::copy_n(X.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return out;
}

inline std::vector<std::size_t> gather(const std::vector<std::size_t>& v, const Batch& ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(v.at(i));
  return out;
}

/// Two-layer perceptron: in -> hidden (activation) -> out, parameters laid
/// out as W1 [in,h], b1 [h], W2 [h,out], b2 [out].
struct Mlp {
  enum class Act { tanh, relu };
  std::size_t in = 1, hidden = 1, out = 1;
  Act act = Act::tanh;

  std::size_t param_count() const { return in * hidden + hidden + hidden * out + out; }

  Var forward(Var params, Var x) const {
    std::size_t off = 0;
    Var W1 = slice(params, off, {in, hidden});
    off += in * hidden;
    Var b1 = slice(params, off, {hidden});
    off += hidden;
    Var W2 = slice(params, off, {hidden, out});
    off += hidden * out;
    Var b2 = slice(params, off, {out});
    Var h = add(matmul(x, W1), b1);
    h = act == Act::tanh ? sama::tanh(h) : relu(h);
    return add(matmul(h, W2), b2);
  }

  /// W ~ N(0, scale^2 / fan_in) for both layers, zero biases.
  Tensor init(Rng& rng, double scale = 1.0) const {
    Tensor p(Shape{param_count()});
    std::size_t off = 0;
    for (std::size_t k = 0; k < in * hidden; ++k) {
      p[off++] = scale * rng.normal() / std::sqrt(static_cast<double>(in));
    }
    off += hidden;
    for (std::size_t k = 0; k < hidden * out; ++k) {
      p[off++] = scale * rng.normal() / std::sqrt(static_cast<double>(hidden));
    }
    return p;
  }
};

/// Per-sample cross-entropy of the classifier at `theta`, as plain values.
/// Recorded with the same primitives as the training loss, so the numbers
/// match the tape bit for bit.
inline Tensor per_sample_ce(const Mlp& net, const Tensor& theta, const Tensor& X,
                            const std::vector<std::size_t>& labels) {
  Tape t;
  return softmax_cross_entropy(net.forward(t.constant(theta), t.constant(X)), labels).value();
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  const std::size_t n = p.rows(), k = p.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, p.at(i, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (p.at(i, c) = std::exp(p.at(i, c) - mx));
    for (std::size_t c = 0; c < k; ++c) p.at(i, c) /= z;
  }
  return p;
}

inline Tensor logits_of(const Mlp& net, const Tensor& theta, const Tensor& X) {
  Tape t;
  return net.forward(t.constant(theta), t.constant(X)).value();
}

/// Per-sample L2 distance between the softmax outputs at theta and theta_ema.
inline Tensor uncertainty(const Mlp& net, const Tensor& theta, const Tensor& theta_ema,
                          const Tensor& X) {
  const Tensor p = softmax_rows(logits_of(net, theta, X));
  const Tensor q = softmax_rows(logits_of(net, theta_ema, X));
  Tensor u(Shape{X.rows()});
  for (std::size_t i = 0; i < X.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      const double diff = p.at(i, c) - q.at(i, c);
      s += diff * diff;
    }
    u[i] = std::sqrt(s);
  }
  return u;
}

/// theta_ema <- decay * theta_ema + (1 - decay) * theta.
inline void ema_update(Tensor& theta_ema, const Tensor& theta, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw Error("ema: decay must lie in [0, 1)");
  require_same_shape(theta_ema, theta, "ema_update");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    theta_ema[i] = decay * theta_ema[i] + (1.0 - decay) * theta[i];
  }
}

/// Sigmoid-output weight net on [loss] or [loss, uncertainty] features.
struct WeightNet {
  Mlp mlp;

  static WeightNet make(bool use_uncertainty, std::size_t hidden = 16) {
    return {Mlp{use_uncertainty ? 2u : 1u, hidden, 1, Mlp::Act::relu}};
  }

  bool uses_uncertainty() const { return mlp.in == 2; }

  /// First layer N(0, 1), output layer N(0, 0.01^2), zero biases: the
  /// initial weights sit near 1/2 and vary little with the inputs.
  Tensor init(Rng& rng) const {
    Tensor p(Shape{mlp.param_count()});
    std::size_t off = 0;
    for (std::size_t k = 0; k < mlp.in * mlp.hidden; ++k) p[off++] = rng.normal();
    off += mlp.hidden;
    for (std::size_t k = 0; k < mlp.hidden; ++k) p[off++] = 0.01 * rng.normal();
    return p;
  }

  static Tensor features(const Tensor& losses, const Tensor* unc) {
    const std::size_t n = losses.size();
    Tensor f(Shape{n, unc ? 2u : 1u});
    for (std::size_t i = 0; i < n; ++i) {
      f.at(i, 0) = losses[i];
      if (unc) f.at(i, 1) = (*unc)[i];
    }
    return f;
  }

  /// Weights [n] for constant features [n, in].
  Var weights(Var lambda, Var feats) const {
    Var w = sigmoid(mlp.forward(lambda, feats));
    return reshape(w, {feats.shape()[0]});
  }

  Tensor weight_values(const Tensor& lambda, const Tensor& feats) const {
    Tape t;
    return weights(t.constant(lambda), t.constant(feats)).value();
  }
};

/// Rank AUC of `scores` separating positives from negatives; ties count 1/2.
inline double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& positive) {
  if (scores.size() != positive.size()) throw ShapeError("auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        pos_rank_sum += mid_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw Error("auc: need at least one sample of each class");
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---------------------------------------------------------------------------
// The bilevel task

struct ReweightConfig {
  std::size_t n = 2000;
  std::size_t d = 10;
  std::size_t classes = 4;
  double rho = 0.4;
  std::size_t m = 40;
  std::size_t n_test = 1000;
  double separation = 2.0;
  std::size_t hidden = 64;
  std::size_t weight_hidden = 16;
  bool use_uncertainty = false;
  double ema_decay = 0.9;
  std::size_t batch = 100;
  OptimizerConfig base_optimizer = OptimizerConfig::adam(1e-2);
  OptimizerConfig meta_optimizer = OptimizerConfig::adam(1e-2);
  /// Replace the weight net by this constant (e.g. 1 for plain training).
  std::optional<double> constant_weight;
  std::uint64_t seed = 0;
};

class ReweightTask {
 public:
  explicit ReweightTask(ReweightConfig cfg)
      : ReweightTask(cfg, gen_noisy(cfg.n, cfg.d, cfg.classes, cfg.rho, cfg.m, cfg.seed,
                                    cfg.n_test, cfg.separation)) {}

  ReweightTask(ReweightConfig cfg, NoisyDataset data)
      : cfg_(cfg),
        data_(std::move(data)),
        net_{data_.d, cfg.hidden, data_.classes, Mlp::Act::tanh},
        wnet_(WeightNet::make(cfg.use_uncertainty, cfg.weight_hidden)),
        rng_(cfg.seed ^ 0x5eed5eedull) {
    if (cfg_.batch == 0) throw Error("reweight: batch must be >= 1");
    if (data_.train_ids.empty() || data_.meta_ids.empty()) {
      throw Error("reweight: dataset needs training and meta samples");
    }
    Rng init_rng(cfg.seed + 1);
    theta0_ = net_.init(init_rng);
    lambda0_ = wnet_.init(init_rng);
    theta_ema_ = theta0_;
  }

  // problem() and streams() capture `this`.
  ReweightTask(const ReweightTask&) = delete;
  ReweightTask& operator=(const ReweightTask&) = delete;

  const NoisyDataset& data() const { return data_; }
  const Mlp& classifier() const { return net_; }
  const WeightNet& weight_net() const { return wnet_; }
  const ReweightConfig& config() const { return cfg_; }
  const Tensor& theta_ema() const { return theta_ema_; }

  /// Reweighted base loss with stop-gradient inputs at `anchor` (or theta).
  Var base_loss(Tape& t, Var theta, Var lambda, const Batch& batch, const Tensor* anchor) const {
    const Tensor X = gather_rows(data_.features, batch);
    const auto labels = gather(data_.observed, batch);
    Var per = softmax_cross_entropy(net_.forward(theta, t.constant(X)), labels);
    if (!all_finite(per.value())) throw NumericError("reweight: non-finite per-sample loss");
    if (cfg_.constant_weight) {
      return mean(t.constant(Tensor(Shape{batch.size()}, *cfg_.constant_weight)) * per);
    }
    const Tensor losses = anchor ? per_sample_ce(net_, *anchor, X, labels) : per.value();
    std::optional<Tensor> unc;
    if (wnet_.uses_uncertainty()) {
      unc = uncertainty(net_, anchor ? *anchor : theta.value(), theta_ema_, X);
    }
    Var feats = t.constant(WeightNet::features(losses, unc ? &*unc : nullptr));
    return mean(wnet_.weights(lambda, feats) * per);
  }

  Var meta_loss(Tape& t, Var theta, const Batch& batch) const {
    const Tensor X = gather_rows(data_.features, batch);
    return mean(softmax_cross_entropy(net_.forward(theta, t.constant(X)),
                                      gather(data_.observed, batch)));
  }

  /// A fresh problem at the initial parameters. The task must outlive it.
  BilevelProblem problem() {
    theta_ema_ = theta0_;
    auto p = BilevelProblem::make(
        theta0_, lambda0_,
        [this](Tape& t, Var th, Var la, const Batch& b, const Tensor* a) {
          return base_loss(t, th, la, b, a);
        },
        [this](Tape& t, Var th, const Batch& b) { return meta_loss(t, th, b); },
        cfg_.base_optimizer, cfg_.meta_optimizer);
    return p;
  }

  /// Base batches: shuffled passes over the training split. Meta batches:
  /// the whole meta split.
  DataStreams streams() {
    rng_ = Rng(cfg_.seed ^ 0x5eed5eedull);
    cursor_ = 0;
    order_ = data_.train_ids;
    rng_.shuffle(order_);
    return {[this] { return next_base_batch(); }, [this] { return data_.meta_ids; }};
  }

  TrainHooks hooks() {
    TrainHooks h;
    if (wnet_.uses_uncertainty()) {
      h.after_base_step = [this](const Tensor& theta) {
        ema_update(theta_ema_, theta, cfg_.ema_decay);
      };
    }
    return h;
  }

  std::size_t base_steps_per_epoch() const {
    return (data_.train_ids.size() + cfg_.batch - 1) / cfg_.batch;
  }

  double accuracy(const Tensor& theta, const std::vector<std::size_t>& ids) const {
    const Tensor logits = logits_of(net_, theta, gather_rows(data_.features, ids));
    std::size_t correct = 0;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c) {
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      }
      correct += best == data_.truth[ids[r]];
    }
    return static_cast<double>(correct) / static_cast<double>(ids.size());
  }

  double test_accuracy(const Tensor& theta) const {
    return accuracy(theta, data_.test_ids.empty() ? data_.train_ids : data_.test_ids);
  }

  /// Learned weights for every training sample at (theta, lambda).
  std::vector<double> train_weights(const Tensor& theta, const Tensor& lambda) const {
    const Tensor X = gather_rows(data_.features, data_.train_ids);
    const Tensor losses = per_sample_ce(net_, theta, X, gather(data_.observed, data_.train_ids));
    std::optional<Tensor> unc;
    if (wnet_.uses_uncertainty()) unc = uncertainty(net_, theta, theta_ema_, X);
    return wnet_.weight_values(lambda, WeightNet::features(losses, unc ? &*unc : nullptr))
        .to_vector();
  }

  std::vector<std::uint8_t> train_clean_flags() const {
    std::vector<std::uint8_t> clean;
    for (auto i : data_.train_ids) clean.push_back(data_.is_noisy[i] ? 0 : 1);
    return clean;
  }

 private:
  Batch next_base_batch() {
    Batch b;
    b.reserve(cfg_.batch);
    while (b.size() < cfg_.batch) {
      if (cursor_ == order_.size()) {
        rng_.shuffle(order_);
        cursor_ = 0;
        if (!b.empty()) break;  // end of pass: short final batch
      }
      b.push_back(order_[cursor_++]);
    }
    return b;
  }

  ReweightConfig cfg_;
  NoisyDataset data_;
  Mlp net_;
  WeightNet wnet_;
  Tensor theta0_, lambda0_, theta_ema_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// AUC of the learned weights as a clean-vs-noisy classifier over the
/// training split (clean = positive).
inline double weight_separation_auc(const ReweightTask& task, const Tensor& theta,
                                    const Tensor& lambda) {
  return auc(task.train_weights(theta, lambda), task.train_clean_flags());
}

}  // namespace sama::tasks
