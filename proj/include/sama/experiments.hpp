#pragma once

// Experiment runners behind the CLI subcommands. Each returns plain rows so
// tests can inspect them; the write_* functions serialize to CSV.

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "sama/bilevel.hpp"
#include "sama/config.hpp"
#include "sama/gradcheck.hpp"
#include "sama/memory.hpp"
#include "sama/parallel.hpp"
#include "sama/regress.hpp"
#include "sama/tasks.hpp"

namespace sama::experiments {

/// Shortest text that round-trips: 17 significant digits.
inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// Writes "# schema: <name>/<version>" then the header row.
inline void csv_preamble(std::ostream& os, const std::string& schema,
                         const std::vector<std::string>& columns) {
  os << "# schema: " << schema << '\n';
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n';
}

inline std::string method_label(MethodKind k) {
  return k == MethodKind::none ? "baseline" : to_string(k);
}

// ---------------------------------------------------------------------------
// regress

struct RegressRow {
  std::size_t step = 0;
  MethodKind method = MethodKind::sama;
  double cosine = 0.0;        // against the closed form at the pre-update lambda
  double lambda_dist = 0.0;   // ||lambda - lambda*|| after the update
  double meta_grad_norm = 0.0;
};

inline MetaGradMethod regress_method(const config::RegressSettings& s, MethodKind k) {
  switch (k) {
    case MethodKind::sama: return MetaGradMethod::sama(s.alpha);
    case MethodKind::sama_na: return MetaGradMethod::sama_na(s.alpha);
    case MethodKind::neumann: return MetaGradMethod::neumann(s.neumann_terms);
    case MethodKind::cg: return MetaGradMethod::cg(s.cg_iters);
    case MethodKind::exact_ift: return MetaGradMethod::exact_ift();
    case MethodKind::unrolled_exact: return MetaGradMethod::unrolled_exact();
    case MethodKind::none: break;
  }
  throw Error("regress: unsupported method");
}

/// Every method starts from theta = lambda = 0 on one shared instance.
inline std::vector<RegressRow> run_regress(const config::RegressSettings& s, std::uint64_t seed) {
  const auto inst = regress::generate(s.n, s.d, s.n_meta, s.beta, seed, s.noise);
  const Tensor opt = regress::lambda_star(inst);
  const double gamma = s.base_lr > 0.0 ? s.base_lr : 1.0 / regress::base_hessian_max_eigenvalue(inst);
  std::vector<RegressRow> rows;
  for (auto kind : s.methods) {
    auto p = regression_problem(inst, Tensor(Shape{inst.d()}), OptimizerConfig::sgd(gamma),
                                s.meta_optimizer);
    TrainConfig c;
    c.unroll = s.unroll;
    c.meta_steps = s.meta_steps;
    c.apply_v_step = s.v_step;
    RegressRow row;
    row.method = kind;
    TrainHooks hooks;
    hooks.before_meta_update = [&](std::size_t step, const BilevelProblem& q,
                                   const std::optional<Tensor>& g) {
      row.step = step;
      row.cosine = g ? regress::cosine_similarity(*g, regress::meta_grad_closed(inst, q.lambda))
                     : 0.0;
    };
    hooks.after_meta_step = [&](const StepRecord& rec, const BilevelProblem& q) {
      row.lambda_dist = norm2(q.lambda - opt);
      row.meta_grad_norm = rec.meta_grad_norm;
      rows.push_back(row);
    };
    train(p, regress_method(s, kind), c, full_batch_streams(), hooks);
  }
  return rows;
}

inline void write_regress_csv(const std::vector<RegressRow>& rows, std::ostream& os) {
  csv_preamble(os, "sama-regress/1",
               {"step", "method", "cosine_to_closed_form", "lambda_l2_dist", "meta_grad_norm"});
  for (const auto& r : rows) {
    os << r.step << ',' << method_label(r.method) << ',' << fmt(r.cosine) << ','
       << fmt(r.lambda_dist) << ',' << fmt(r.meta_grad_norm) << '\n';
  }
}

// ---------------------------------------------------------------------------
// reweight

struct ReweightRow {
  std::uint64_t seed = 0;
  MethodKind method = MethodKind::sama;
  std::size_t step = 0;
  double train_loss = 0.0;
  double meta_loss = 0.0;
  double test_accuracy = 0.0;
  double weight_auc = 0.0;
};

struct ReweightFinal {
  std::uint64_t seed = 0;
  MethodKind method = MethodKind::sama;
  double test_accuracy = 0.0;
  double weight_auc = 0.0;
};

struct ReweightResult {
  std::vector<ReweightRow> rows;
  std::vector<ReweightFinal> finals;
  std::vector<parallel::CommReport> comm;
  std::size_t workers = 1;
  parallel::SyncMode sync = parallel::SyncMode::deferred;

  double mean_accuracy(MethodKind k) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& f : finals) {
      if (f.method == k) s += f.test_accuracy, ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  double mean_auc(MethodKind k) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& f : finals) {
      if (f.method == k) s += f.weight_auc, ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

inline MetaGradMethod reweight_method(MethodKind k, double alpha, std::size_t neumann_terms = 5,
                                      std::size_t cg_iters = 5, double cg_damping = 0.0) {
  switch (k) {
    case MethodKind::none: return MetaGradMethod::none();
    case MethodKind::sama: return MetaGradMethod::sama(alpha);
    case MethodKind::sama_na: return MetaGradMethod::sama_na(alpha);
    case MethodKind::neumann: return MetaGradMethod::neumann(neumann_terms);
    case MethodKind::cg: return MetaGradMethod::cg(cg_iters, 1e-10, cg_damping);
    default: break;
  }
  throw Error(std::string("reweight: method '") + to_string(k) + "' is not supported");
}

/// The no-meta baseline trains with every weight fixed at 1.
inline tasks::ReweightConfig task_config_for(tasks::ReweightConfig c, MethodKind k,
                                             std::uint64_t seed) {
  c.seed = seed;
  if (k == MethodKind::none) c.constant_weight = 1.0;
  return c;
}

namespace detail {

/// Per-worker base batches of size ceil(batch / K), cycling over a shard
/// with a fresh shuffle each pass.
class ShardStream {
 public:
  ShardStream(std::vector<std::size_t> ids, std::size_t batch, std::uint64_t seed)
      : ids_(std::move(ids)), batch_(batch), rng_(seed) {
    rng_.shuffle(ids_);
  }

  Batch next() {
    Batch b;
    while (b.size() < batch_) {
      if (cursor_ == ids_.size()) {
        rng_.shuffle(ids_);
        cursor_ = 0;
        if (!b.empty()) break;
      }
      b.push_back(ids_[cursor_++]);
    }
    return b;
  }

 private:
  std::vector<std::size_t> ids_;
  std::size_t batch_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

inline double weight_auc(const tasks::ReweightTask& task, MethodKind k, const Tensor& theta,
                         const Tensor& lambda) {
  if (k == MethodKind::none) {
    return tasks::auc(std::vector<double>(task.data().train_ids.size(), 1.0),
                      task.train_clean_flags());
  }
  return tasks::weight_separation_auc(task, theta, lambda);
}

}  // namespace detail

inline std::size_t reweight_meta_steps(const config::ReweightSettings& s,
                                       const tasks::ReweightTask& task) {
  return (s.epochs * task.base_steps_per_epoch() + s.unroll - 1) / s.unroll;
}

inline ReweightResult run_reweight(const config::ReweightSettings& s, std::uint64_t seed) {
  ReweightResult result;
  result.workers = s.workers;
  result.sync = s.sync;
  if (s.workers > 1 && s.task.use_uncertainty) {
    throw ConfigError("reweight: use_uncertainty is not supported with workers > 1", 0,
                      "use_uncertainty");
  }
  for (std::size_t j = 0; j < s.seeds; ++j) {
    const std::uint64_t run_seed = seed + j;
    for (auto kind : s.methods) {
      tasks::ReweightTask task(task_config_for(s.task, kind, run_seed));
      const auto method =
          reweight_method(kind, s.alpha, s.neumann_terms, s.cg_iters, s.cg_damping);
      const std::size_t steps = reweight_meta_steps(s, task);
      auto record = [&](std::size_t step, double train_loss, double meta_loss, const Tensor& theta,
                        const Tensor& lambda) {
        ReweightRow row{run_seed, kind, step, train_loss, meta_loss, task.test_accuracy(theta),
                        detail::weight_auc(task, kind, theta, lambda)};
        result.rows.push_back(row);
        if (step + 1 == steps) {
          result.finals.push_back({run_seed, kind, row.test_accuracy, row.weight_auc});
        }
      };

      if (s.workers == 1) {
        auto p = task.problem();
        TrainConfig c;
        c.unroll = s.unroll;
        c.meta_steps = steps;
        c.apply_v_step = s.v_step;
        auto hooks = task.hooks();
        hooks.after_meta_step = [&](const StepRecord& rec, const BilevelProblem& q) {
          record(rec.step, rec.base_loss, rec.meta_loss, q.theta, q.lambda);
        };
        train(p, method, c, task.streams(), hooks);
        continue;
      }

      const std::size_t K = s.workers;
      if (K > task.data().meta_ids.size()) {
        throw ConfigError("reweight: more workers than meta samples", 0, "workers");
      }
      const auto train_shards = parallel::shard(task.data().train_ids, K, run_seed);
      const auto meta_shards = parallel::shard(task.data().meta_ids, K, run_seed + 1);
      std::vector<detail::ShardStream> streams;
      const std::size_t per_worker = (s.task.batch + K - 1) / K;
      for (std::size_t k = 0; k < K; ++k) {
        streams.emplace_back(train_shards[k], per_worker, run_seed * 1000 + k);
      }
      std::vector<parallel::WorkerContext> ws;
      const auto p0 = task.problem();
      for (std::size_t k = 0; k < K; ++k) ws.push_back({k, train_shards[k], p0});
      parallel::SyncPlan plan{K, s.sync};
      parallel::CommLog log;
      parallel::DistributedConfig c{s.unroll, steps, s.v_step};
      const Batch all_meta = task.data().meta_ids;
      parallel::distributed_train(
          ws, plan, method, c,
          [&](std::size_t rank) { return std::make_pair(streams[rank].next(), meta_shards[rank]); },
          log,
          [&](const parallel::DistributedStep& info, const std::vector<parallel::WorkerContext>& w) {
            const auto& q = w[0].replica;
            record(info.step, info.base_loss, meta_loss_value(q, all_meta), q.theta, q.lambda);
            if (kind != MethodKind::none) result.comm.push_back(info.report);
          });
    }
  }
  return result;
}

inline void write_reweight_csv(const ReweightResult& r, std::ostream& os) {
  csv_preamble(os, "sama-reweight/1",
               {"seed", "method", "step", "train_loss", "meta_loss", "test_accuracy", "weight_auc"});
  for (const auto& row : r.rows) {
    os << row.seed << ',' << method_label(row.method) << ',' << row.step << ','
       << fmt(row.train_loss) << ',' << fmt(row.meta_loss) << ',' << fmt(row.test_accuracy) << ','
       << fmt(row.weight_auc) << '\n';
  }
}

inline nlohmann::ordered_json reweight_summary(const ReweightResult& r) {
  nlohmann::ordered_json j;
  j["schema"] = "sama-reweight-summary/1";
  j["workers"] = r.workers;
  j["sync"] = parallel::to_string(r.sync);
  nlohmann::ordered_json methods = nlohmann::ordered_json::object();
  for (const auto& f : r.finals) {
    auto& m = methods[method_label(f.method)];
    m["per_seed"].push_back(
        {{"seed", f.seed}, {"test_accuracy", f.test_accuracy}, {"weight_auc", f.weight_auc}});
  }
  for (auto& [name, m] : methods.items()) {
    const auto kind = parse_method(name);
    m["test_accuracy"] = r.mean_accuracy(kind);
    m["weight_auc"] = r.mean_auc(kind);
  }
  j["final"] = methods;
  return j;
}

// ---------------------------------------------------------------------------
// bench

struct BenchRow {
  MethodKind method = MethodKind::sama;
  std::size_t workers = 1;
  std::size_t unroll = 1;
  double throughput = 0.0;  // base samples per second over the timed steps
  std::size_t peak_bytes = 0;
  std::size_t sync_count = 0;  // all-reduces per meta step
};

struct BenchCase {
  MethodKind method = MethodKind::sama;
  std::size_t workers = 1;
  std::size_t unroll = 1;
};

/// One benchmark cell: `warmup` untimed meta steps, then `meta_steps` timed.
inline BenchRow bench_one(const config::BenchSettings& s, const BenchCase& bc, std::uint64_t seed) {
  tasks::ReweightTask task(task_config_for(s.task, MethodKind::sama, seed));
  const auto method = reweight_method(bc.method, s.alpha, s.neumann_terms, s.cg_iters, s.cg_damping);
  const std::size_t total_steps = s.warmup + s.meta_steps;
  BenchRow row{bc.method, bc.workers, bc.unroll, 0.0, 0, 0};
  double seconds = 0.0;
  std::size_t samples = 0;

  if (bc.workers == 1) {
    auto p = task.problem();
    TrainConfig c;
    c.unroll = bc.unroll;
    c.meta_steps = total_steps;
    auto hooks = task.hooks();
    hooks.after_meta_step = [&](const StepRecord& rec, const BilevelProblem&) {
      if (rec.step < s.warmup) return;
      seconds += rec.wall_seconds;
      samples += bc.unroll * s.task.batch;
      row.peak_bytes = std::max(row.peak_bytes, rec.peak_bytes);
    };
    train(p, method, c, task.streams(), hooks);
  } else {
    if (bc.method != MethodKind::sama && bc.method != MethodKind::sama_na) {
      throw Error("bench: only sama and sama_na run with workers > 1");
    }
    const std::size_t K = bc.workers;
    const auto train_shards = parallel::shard(task.data().train_ids, K, seed);
    const auto meta_shards = parallel::shard(task.data().meta_ids, K, seed + 1);
    const std::size_t per_worker = (s.task.batch + K - 1) / K;
    std::vector<detail::ShardStream> streams;
    for (std::size_t k = 0; k < K; ++k) streams.emplace_back(train_shards[k], per_worker, seed + k);
    std::vector<parallel::WorkerContext> ws;
    const auto p0 = task.problem();
    for (std::size_t k = 0; k < K; ++k) ws.push_back({k, train_shards[k], p0});
    parallel::CommLog log;
    using Clock = std::chrono::steady_clock;
    auto t0 = Clock::now();
    memory::reset_peak();
    std::size_t live0 = memory::live_bytes();
    parallel::distributed_train(
        ws, parallel::SyncPlan{K, s.sync}, method, {bc.unroll, total_steps, true},
        [&](std::size_t rank) { return std::make_pair(streams[rank].next(), meta_shards[rank]); },
        log, [&](const parallel::DistributedStep& info, const std::vector<parallel::WorkerContext>&) {
          const auto t1 = Clock::now();
          if (info.step >= s.warmup) {
            seconds += std::chrono::duration<double>(t1 - t0).count();
            samples += bc.unroll * per_worker * K;
            row.peak_bytes = std::max(row.peak_bytes,
                                      memory::peak_bytes() - std::min(live0, memory::peak_bytes()));
            row.sync_count = info.report.sync_count;
          }
          memory::reset_peak();
          live0 = memory::live_bytes();
          t0 = Clock::now();
        });
  }
  row.throughput = seconds > 0.0 ? static_cast<double>(samples) / seconds : 0.0;
  return row;
}

/// The full matrix; non-SAMA methods are only run single-worker.
inline std::vector<BenchRow> run_bench(const config::BenchSettings& s, std::uint64_t seed) {
  std::vector<BenchRow> rows;
  for (auto m : s.methods) {
    for (auto K : s.workers) {
      if (K > 1 && m != MethodKind::sama && m != MethodKind::sama_na) continue;
      for (auto T : s.unrolls) rows.push_back(bench_one(s, {m, K, T}, seed));
    }
  }
  return rows;
}

inline void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& os) {
  csv_preamble(os, "sama-bench/1",
               {"method", "workers", "unroll", "throughput", "peak_bytes", "sync_count"});
  for (const auto& r : rows) {
    os << method_label(r.method) << ',' << r.workers << ',' << r.unroll << ',' << fmt(r.throughput)
       << ',' << r.peak_bytes << ',' << r.sync_count << '\n';
  }
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckResult {
  gradcheck::SuiteReport autodiff;
  gradcheck::SuiteReport adaptation;

  std::size_t failures() const { return autodiff.failures() + adaptation.failures(); }
};

inline GradcheckResult run_gradcheck(const config::GradcheckSettings& s, std::uint64_t seed) {
  GradcheckResult r;
  r.autodiff = gradcheck::autodiff_suite(s.cases, seed + 1, 1e-5, s.tolerance);
  r.adaptation = gradcheck::adaptation_suite(s.adapt_cases, seed + 7, s.tolerance);
  // SGD's adaptation is the learning rate itself, bit for bit.
  const auto cfg = OptimizerConfig::sgd(0.37);
  Rng rng(seed);
  const auto state = OptimizerState::zeros_like(Tensor(Shape{8}));
  const Tensor d = adaptation_diag(state, rng.normal_tensor({8}), cfg);
  double err = 0.0;
  for (double x : d.data()) err = std::max(err, std::abs(x - 0.37));
  r.adaptation.cases.push_back({"sgd_constant_lr", err, err == 0.0});
  return r;
}

inline void write_gradcheck_csv(const GradcheckResult& r, std::ostream& os) {
  csv_preamble(os, "sama-gradcheck/1", {"suite", "case", "max_rel_error", "passed"});
  auto dump = [&](const char* suite, const gradcheck::SuiteReport& rep) {
    for (const auto& c : rep.cases) {
      os << suite << ',' << c.name << ',' << fmt(c.max_rel_error) << ',' << (c.passed ? 1 : 0)
         << '\n';
    }
  };
  dump("autodiff", r.autodiff);
  dump("adaptation", r.adaptation);
}

}  // namespace sama::experiments
