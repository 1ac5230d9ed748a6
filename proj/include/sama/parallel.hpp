#pragma once

// Simulated data-parallel execution of the SAMA meta step.
//
// Each worker holds a full replica (theta, lambda, optimizer states) and a
// shard of the data. The all-reduce is a fixed ascending-rank incremental
// mean, bucket by bucket, so results do not depend on which worker finishes
// first. Communication is only logged, never performed.
//
// deferred: every pass up to the last is local; only the final
//           lambda-gradient is reduced (1 synchronization).
// exact:    the direct and base gradients are reduced first so all workers
//           build the same v, then the lambda-gradient (2 synchronizations).

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sama/bilevel.hpp"
#include "sama/error.hpp"
#include "sama/random.hpp"
#include "sama/tensor.hpp"

namespace sama::parallel {

enum class SyncMode { exact, deferred };

inline const char* to_string(SyncMode m) { return m == SyncMode::exact ? "exact" : "deferred"; }

inline SyncMode parse_sync_mode(const std::string& s) {
  if (s == "exact") return SyncMode::exact;
  if (s == "deferred") return SyncMode::deferred;
  throw Error("unknown sync mode '" + s + "' (expected exact or deferred)");
}

struct SyncPlan {
  std::size_t workers = 1;
  SyncMode mode = SyncMode::deferred;
  std::size_t bucket_bytes = 4096;
  bool threads = false;  // run worker-local work on std::threads

  void validate() const {
    if (workers < 1) throw Error("sync plan: workers must be >= 1");
    if (bucket_bytes < sizeof(double)) throw Error("sync plan: bucket_bytes too small");
  }
};

enum class Phase { base, meta };

struct CommEvent {
  std::size_t step = 0;
  Phase phase = Phase::meta;
  std::size_t sync = 0;    // index of the all-reduce within the step and phase
  std::size_t bucket = 0;
  std::size_t bytes = 0;
  double ready_fraction = 0.0;  // share of the producing pass done when the bucket is ready
};

class CommLog {
 public:
  void add(CommEvent e) { events_.push_back(e); }
  const std::vector<CommEvent>& events() const { return events_; }
  void clear() { events_.clear(); }

  std::size_t sync_count(std::size_t step, Phase phase = Phase::meta) const {
    std::size_t n = 0;
    for (const auto& e : events_) {
      if (e.step == step && e.phase == phase && e.bucket == 0) ++n;
    }
    return n;
  }

  std::size_t bytes(std::size_t step, Phase phase = Phase::meta) const {
    std::size_t n = 0;
    for (const auto& e : events_) {
      if (e.step == step && e.phase == phase) n += e.bytes;
    }
    return n;
  }

  std::size_t bucket_count(std::size_t step, Phase phase = Phase::meta) const {
    std::size_t n = 0;
    for (const auto& e : events_) n += e.step == step && e.phase == phase;
    return n;
  }

 private:
  std::vector<CommEvent> events_;
};

/// Disjoint shards with sizes differing by at most one, from a seeded shuffle.
inline std::vector<std::vector<std::size_t>> shard(const std::vector<std::size_t>& ids,
                                                   std::size_t K, std::uint64_t seed) {
  if (K == 0) throw Error("shard: K must be >= 1");
  if (K > ids.size()) {
    throw Error("shard: cannot split " + std::to_string(ids.size()) + " samples into " +
                std::to_string(K) + " shards");
  }
  std::vector<std::size_t> order = ids;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out(K);
  const std::size_t base = ids.size() / K, extra = ids.size() % K;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    out[k].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

/// Elementwise mean over ranks 0..K-1, accumulated in that order per bucket.
inline Tensor all_reduce_mean(std::span<const Tensor> inputs, const SyncPlan& plan,
                              CommLog* log = nullptr, std::size_t step = 0,
                              Phase phase = Phase::meta, std::size_t sync = 0) {
  if (inputs.empty()) throw Error("all_reduce_mean: no inputs");
  for (const auto& t : inputs) require_same_shape(t, inputs[0], "all_reduce_mean");
  const std::size_t n = inputs[0].size();
  const std::size_t per_bucket = std::max<std::size_t>(1, plan.bucket_bytes / sizeof(double));
  const std::size_t buckets = (n + per_bucket - 1) / per_bucket;
  Tensor out = inputs[0];
  for (std::size_t b = 0; b < buckets; ++b) {
    const std::size_t lo = b * per_bucket, hi = std::min(n, lo + per_bucket);
    for (std::size_t k = 1; k < inputs.size(); ++k) {
      const double inv = 1.0 / static_cast<double>(k + 1);
      for (std::size_t i = lo; i < hi; ++i) out[i] += (inputs[k][i] - out[i]) * inv;
    }
    if (log) {
      log->add({step, phase, sync, b, (hi - lo) * sizeof(double),
                static_cast<double>(b + 1) / static_cast<double>(buckets)});
    }
  }
  return out;
}

struct WorkerContext {
  std::size_t rank = 0;
  std::vector<std::size_t> shard;
  BilevelProblem replica;
};

inline std::uint64_t replica_hash(const BilevelProblem& p) {
  std::uint64_t h = content_hash(p.theta);
  h = content_hash(p.lambda, h);
  h = content_hash(p.base_state.m, h);
  h = content_hash(p.base_state.v, h);
  h = content_hash(p.meta_state.m, h);
  h = content_hash(p.meta_state.v, h);
  return h ^ (p.base_state.t * 0x9e3779b97f4a7c15ull) ^ (p.meta_state.t << 17);
}

inline void check_replicas(const std::vector<WorkerContext>& ws) {
  if (ws.empty()) throw Error("distributed: no workers");
  const auto h0 = replica_hash(ws[0].replica);
  for (const auto& w : ws) {
    if (replica_hash(w.replica) != h0) {
      throw ReplicaError("replica divergence: worker " + std::to_string(w.rank) +
                         " differs from worker 0");
    }
  }
}

struct CommReport {
  std::size_t step = 0;
  SyncMode mode = SyncMode::deferred;
  std::size_t sync_count = 0;
  std::size_t bytes = 0;
  std::size_t bucket_count = 0;

  std::string to_json_line() const {
    nlohmann::ordered_json j{{"step", step},
                     {"mode", to_string(mode)},
                     {"sync_count", sync_count},
                     {"bytes", bytes},
                     {"bucket_count", bucket_count}};
    return j.dump();
  }
};

struct WorkerTiming {
  std::size_t rank = 0;
  double local_seconds = 0.0;
};

struct DistributedResult {
  std::optional<Tensor> meta_grad;  // nullopt when v is degenerate (exact mode)
  Tensor v;                         // shared v (exact mode), rank 0's v (deferred)
  double epsilon = 0.0;
  CommReport report;
  std::vector<WorkerTiming> timings;
  /// Buckets of the final reduction that can overlap the last backward pass.
  double overlap_fraction = 0.0;
};

namespace detail {

template <class F>
void for_each_worker(std::size_t K, bool threads, F&& f) {
  if (!threads || K == 1) {
    for (std::size_t k = 0; k < K; ++k) f(k);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(K);
  pool.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    pool.emplace_back([&, k] {
      try {
        f(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline double share(std::size_t part, std::size_t total, std::size_t K) {
  return static_cast<double>(K) * static_cast<double>(part) / static_cast<double>(total);
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor out(Shape{a.size() + b.size()});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

inline Tensor part(const Tensor& flat, std::size_t offset, const Shape& shape) {
  return Tensor(shape, flat.data().subspan(offset, shape_size(shape)));
}

}  // namespace detail

/// One SAMA (or SAMA-NA) meta gradient across workers. Worker k uses
/// base_batches[k] and meta_batches[k]; contributions are weighted by batch
/// size so exact mode reproduces the gradient on the union of the batches.
inline DistributedResult distributed_meta_step(std::vector<WorkerContext>& ws,
                                               const SyncPlan& plan, const MetaGradMethod& m,
                                               const std::vector<Batch>& base_batches,
                                               const std::vector<Batch>& meta_batches,
                                               std::size_t step, CommLog& log) {
  plan.validate();
  if (m.kind != MethodKind::sama && m.kind != MethodKind::sama_na) {
    throw Error("distributed_meta_step: only sama and sama_na are distributed");
  }
  const std::size_t K = ws.size();
  if (K != plan.workers || base_batches.size() != K || meta_batches.size() != K) {
    throw Error("distributed_meta_step: need one context and one batch pair per worker");
  }
  check_replicas(ws);
  const bool adapt = m.kind == MethodKind::sama;
  std::size_t base_total = 0, meta_total = 0;
  for (std::size_t k = 0; k < K; ++k) {
    base_total += std::max<std::size_t>(1, base_batches[k].size());
    meta_total += std::max<std::size_t>(1, meta_batches[k].size());
  }
  auto base_share = [&](std::size_t k) {
    return detail::share(std::max<std::size_t>(1, base_batches[k].size()), base_total, K);
  };
  auto meta_share = [&](std::size_t k) {
    return detail::share(std::max<std::size_t>(1, meta_batches[k].size()), meta_total, K);
  };

  DistributedResult r;
  r.report.step = step;
  r.report.mode = plan.mode;
  r.timings.resize(K);
  std::vector<Tensor> contrib(K);
  using Clock = std::chrono::steady_clock;
  auto timed = [&](std::size_t k, auto&& body) {
    const auto t0 = Clock::now();
    body();
    r.timings[k].rank = ws[k].rank;
    r.timings[k].local_seconds += std::chrono::duration<double>(Clock::now() - t0).count();
  };

  std::vector<std::optional<double>> eps(K);
  std::vector<Tensor> vs(K);
  if (plan.mode == SyncMode::deferred) {
    detail::for_each_worker(K, plan.threads, [&](std::size_t k) {
      timed(k, [&] {
        const auto& p = ws[k].replica;
        const Tensor gd = direct_grad(p, meta_batches[k]);
        vs[k] = perturbation_vector(gd, p, base_batches[k], adapt);
        eps[k] = sama_epsilon(vs[k], m.alpha);
        contrib[k] = eps[k] ? mixed_grad_fd(p, vs[k], *eps[k], base_batches[k])
                            : Tensor::zeros_like(p.lambda);
        contrib[k] = base_share(k) * contrib[k];
      });
    });
    r.meta_grad = all_reduce_mean(contrib, plan, &log, step, Phase::meta, 0);
    r.v = vs[0];
    r.epsilon = eps[0].value_or(0.0);
  } else {
    detail::for_each_worker(K, plan.threads, [&](std::size_t k) {
      timed(k, [&] {
        const auto& p = ws[k].replica;
        const Tensor gd = meta_share(k) * direct_grad(p, meta_batches[k]);
        Tensor gb = base_grad_theta(p, p.theta, base_batches[k]).grad;
        contrib[k] = detail::concat(gd, base_share(k) * gb);
      });
    });
    const Tensor shared = all_reduce_mean(contrib, plan, &log, step, Phase::meta, 0);
    const auto& p0 = ws[0].replica;
    const Tensor gd = detail::part(shared, 0, p0.theta.shape());
    Tensor gb = detail::part(shared, p0.theta.size(), p0.theta.shape());
    if (!adapt) {
      r.v = gd;
    } else if (p0.base_config.kind != OptimizerKind::adam) {
      r.v = p0.base_config.lr * gd;
    } else {
      if (p0.base_config.weight_decay > 0.0) axpy(p0.base_config.weight_decay, p0.theta, gb);
      r.v = hadamard(adaptation_diag(p0.base_state, gb, p0.base_config), gd);
    }
    const auto e = sama_epsilon(r.v, m.alpha);
    if (!e) {
      r.report.sync_count = log.sync_count(step);
      r.report.bytes = log.bytes(step);
      r.report.bucket_count = log.bucket_count(step);
      return r;
    }
    r.epsilon = *e;
    detail::for_each_worker(K, plan.threads, [&](std::size_t k) {
      timed(k, [&] {
        contrib[k] = base_share(k) * mixed_grad_fd(ws[k].replica, r.v, *e, base_batches[k]);
      });
    });
    r.meta_grad = all_reduce_mean(contrib, plan, &log, step, Phase::meta, 1);
  }
  r.report.sync_count = log.sync_count(step);
  r.report.bytes = log.bytes(step);
  r.report.bucket_count = log.bucket_count(step);
  const std::size_t final_buckets = [&] {
    std::size_t n = 0;
    for (const auto& e : log.events()) {
      n += e.step == step && e.phase == Phase::meta && e.sync + 1 == r.report.sync_count;
    }
    return n;
  }();
  r.overlap_fraction = final_buckets ? double(final_buckets - 1) / double(final_buckets) : 0.0;
  return r;
}

/// Applies a synchronized meta gradient on every replica: the meta optimizer
/// step on lambda, plus theta <- theta - eps v in exact mode (in deferred
/// mode each worker's v is local, so the step would split the replicas).
inline void apply_meta_update(std::vector<WorkerContext>& ws, const DistributedResult& r,
                              const SyncPlan& plan, bool apply_v_step) {
  if (!r.meta_grad) return;
  for (auto& w : ws) {
    sama::detail::apply_update(w.replica.lambda, w.replica.meta_state, w.replica.meta_config,
                         *r.meta_grad);
    if (apply_v_step && plan.mode == SyncMode::exact) axpy(-r.epsilon, r.v, w.replica.theta);
  }
}

struct DistributedConfig {
  std::size_t unroll = 1;
  std::size_t meta_steps = 0;
  bool apply_v_step = true;
};

/// Per-step summary handed to the distributed_train callback.
struct DistributedStep {
  std::size_t step = 0;
  double base_loss = 0.0;  // batch-weighted mean over workers, last base step
  CommReport report;
  bool skipped = false;
};

/// Alternating training across workers. Base gradients are all-reduced each
/// base step (logged under Phase::base); the meta step follows plan.mode.
/// Method `none` trains theta only. `next_batches(rank)` returns that
/// worker's next (base, meta) batches.
inline std::vector<CommReport> distributed_train(
    std::vector<WorkerContext>& ws, const SyncPlan& plan, const MetaGradMethod& m,
    const DistributedConfig& c,
    const std::function<std::pair<Batch, Batch>(std::size_t rank)>& next_batches, CommLog& log,
    const std::function<void(const DistributedStep&, const std::vector<WorkerContext>&)>& on_step =
        {}) {
  std::vector<CommReport> reports;
  const std::size_t K = ws.size();
  for (std::size_t step = 0; step < c.meta_steps; ++step) {
    std::vector<Batch> base(K), meta(K);
    DistributedStep info;
    info.step = step;
    for (std::size_t t = 0; t < c.unroll; ++t) {
      std::vector<Tensor> grads(K);
      std::vector<double> losses(K);
      std::size_t total = 0;
      for (std::size_t k = 0; k < K; ++k) {
        std::tie(base[k], meta[k]) = next_batches(ws[k].rank);
        total += std::max<std::size_t>(1, base[k].size());
      }
      detail::for_each_worker(K, plan.threads, [&](std::size_t k) {
        const double w = detail::share(std::max<std::size_t>(1, base[k].size()), total, K);
        auto lg = base_grad_theta(ws[k].replica, ws[k].replica.theta, base[k]);
        grads[k] = w * lg.grad;
        losses[k] = w * lg.loss;
      });
      const Tensor g = all_reduce_mean(grads, plan, &log, step, Phase::base, t);
      info.base_loss = 0.0;
      for (std::size_t k = 0; k < K; ++k) info.base_loss += losses[k] / static_cast<double>(K);
      for (auto& w : ws) sama::detail::apply_update(w.replica.theta, w.replica.base_state,
                                              w.replica.base_config, g);
    }
    if (m.kind == MethodKind::none) {
      info.report = CommReport{step, plan.mode, 0, 0, 0};
    } else {
      const auto r = distributed_meta_step(ws, plan, m, base, meta, step, log);
      apply_meta_update(ws, r, plan, c.apply_v_step);
      info.report = r.report;
      info.skipped = !r.meta_grad;
    }
    check_replicas(ws);
    reports.push_back(info.report);
    if (on_step) on_step(info, ws);
  }
  return reports;
}

}  // namespace sama::parallel
