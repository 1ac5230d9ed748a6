#pragma once

// Experiment configuration: a flat `key = value` file with [sections].
//
//   seed = 3            # keys before any section are global
//   [regress]
//   methods = sama, cg
//
// Lines starting with '#' or ';' are comments, as is anything after " #".
// Unknown sections and keys are errors carrying the line number.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sama/bilevel.hpp"
#include "sama/error.hpp"
#include "sama/optim.hpp"
#include "sama/parallel.hpp"
#include "sama/tasks.hpp"

namespace sama::config {

struct Entry {
  std::string value;
  std::size_t line = 0;
};

struct RawConfig {
  std::map<std::string, std::map<std::string, Entry>> sections;  // "" holds global keys
  std::map<std::string, std::size_t> section_lines;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& s) {
  const auto t = trim(s);
  if (t.empty() || t[0] == '#' || t[0] == ';') return {};
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] == '#' && (t[i - 1] == ' ' || t[i - 1] == '\t')) return trim(t.substr(0, i));
  }
  return t;
}

}  // namespace detail

inline RawConfig parse(std::istream& is) {
  RawConfig raw;
  raw.sections[""];
  std::string current;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = detail::strip_comment(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("unterminated section header", line_no);
      current = detail::trim(t.substr(1, t.size() - 2));
      if (current.empty()) throw ConfigError("empty section name", line_no);
      if (raw.section_lines.count(current)) {
        throw ConfigError("duplicate section [" + current + "]", line_no, current);
      }
      raw.section_lines[current] = line_no;
      raw.sections[current];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value", line_no);
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("missing key before '='", line_no);
    auto& sec = raw.sections[current];
    if (sec.count(key)) throw ConfigError("duplicate key '" + key + "'", line_no, key);
    sec[key] = {value, line_no};
  }
  return raw;
}

inline RawConfig parse_string(const std::string& text) {
  std::istringstream is(text);
  return parse(is);
}

inline RawConfig load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  return parse(f);
}

/// Typed, consuming view of one section. finish() rejects leftover keys.
class Section {
 public:
  Section(std::string name, const std::map<std::string, Entry>* entries)
      : name_(std::move(name)), entries_(entries) {}

  std::size_t get_size(const std::string& key, std::size_t def) {
    const Entry* e = take(key);
    if (!e) return def;
    std::uint64_t v = 0;
    const auto& s = e->value;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) fail(*e, key, "a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
    return static_cast<std::uint64_t>(get_size(key, static_cast<std::size_t>(def)));
  }

  double get_double(const std::string& key, double def) {
    const Entry* e = take(key);
    if (!e) return def;
    double v = 0.0;
    const auto& s = e->value;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
      fail(*e, key, "a finite number");
    }
    return v;
  }

  bool get_bool(const std::string& key, bool def) {
    const Entry* e = take(key);
    if (!e) return def;
    if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
    if (e->value == "false" || e->value == "0" || e->value == "no") return false;
    fail(*e, key, "true or false");
  }

  std::string get_string(const std::string& key, const std::string& def) {
    const Entry* e = take(key);
    return e ? e->value : def;
  }

  std::vector<std::string> get_list(const std::string& key, std::vector<std::string> def) {
    const Entry* e = take(key);
    if (!e) return def;
    std::vector<std::string> out;
    std::stringstream ss(e->value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) fail(*e, key, "a comma-separated list without empty items");
      out.push_back(item);
    }
    if (out.empty()) fail(*e, key, "a non-empty list");
    return out;
  }

  std::vector<std::size_t> get_size_list(const std::string& key, std::vector<std::size_t> def) {
    const Entry* e = entries_ && entries_->count(key) ? &entries_->at(key) : nullptr;
    if (!e) return def;
    std::vector<std::size_t> out;
    for (const auto& s : get_list(key, {})) {
      std::size_t v = 0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        fail(*e, key, "a list of non-negative integers");
      }
      out.push_back(v);
    }
    return out;
  }

  /// Wraps a validation failure of an already-read key.
  [[noreturn]] void invalid(const std::string& key, const std::string& why) const {
    const std::size_t line = entries_ && entries_->count(key) ? entries_->at(key).line : 0;
    throw ConfigError(where() + key + ": " + why, line, key);
  }

  void finish() const {
    if (!entries_) return;
    for (const auto& [key, e] : *entries_) {
      if (!used_.count(key)) {
        throw ConfigError(where() + "unknown key '" + key + "'", e.line, key);
      }
    }
  }

 private:
  const Entry* take(const std::string& key) {
    used_.insert(key);
    if (!entries_) return nullptr;
    auto it = entries_->find(key);
    return it == entries_->end() ? nullptr : &it->second;
  }

  std::string where() const { return name_.empty() ? std::string() : "[" + name_ + "] "; }

  [[noreturn]] void fail(const Entry& e, const std::string& key, const std::string& expected) const {
    throw ConfigError(where() + key + ": expected " + expected + ", got '" + e.value + "'", e.line,
                      key);
  }

  std::string name_;
  const std::map<std::string, Entry>* entries_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Typed settings

struct RegressSettings {
  std::size_t n = 100;
  std::size_t d = 20;
  std::size_t n_meta = 50;
  double beta = 0.1;
  double noise = 0.1;
  std::vector<MethodKind> methods{MethodKind::sama, MethodKind::sama_na, MethodKind::neumann,
                                  MethodKind::cg, MethodKind::exact_ift};
  std::size_t meta_steps = 100;
  std::size_t unroll = 50;
  double base_lr = 0.0;  // 0: 1 / largest eigenvalue of the base Hessian
  OptimizerConfig meta_optimizer = OptimizerConfig::adam(200.0);
  double alpha = 1.0;
  std::size_t neumann_terms = 5;
  std::size_t cg_iters = 5;
  bool v_step = true;
};

struct ReweightSettings {
  tasks::ReweightConfig task;
  std::vector<MethodKind> methods{MethodKind::none, MethodKind::sama_na, MethodKind::sama};
  std::size_t epochs = 30;
  std::size_t unroll = 5;
  double alpha = 1.0;
  bool v_step = true;
  std::size_t neumann_terms = 5;
  std::size_t cg_iters = 5;
  double cg_damping = 0.1;  // the classifier Hessian is indefinite
  std::size_t seeds = 1;
  std::size_t workers = 1;
  parallel::SyncMode sync = parallel::SyncMode::deferred;
};

struct BenchSettings {
  tasks::ReweightConfig task;
  std::vector<MethodKind> methods{MethodKind::sama, MethodKind::sama_na, MethodKind::neumann,
                                  MethodKind::cg};
  std::vector<std::size_t> unrolls{1, 10, 100};
  std::vector<std::size_t> workers{1};
  parallel::SyncMode sync = parallel::SyncMode::deferred;
  std::size_t warmup = 3;
  std::size_t meta_steps = 10;
  double alpha = 1.0;
  std::size_t neumann_terms = 5;
  std::size_t cg_iters = 5;
  double cg_damping = 0.1;
};

struct GradcheckSettings {
  std::size_t cases = 300;
  std::size_t adapt_cases = 1000;
  double tolerance = 1e-5;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "-";
  RegressSettings regress;
  ReweightSettings reweight;
  BenchSettings bench;
  GradcheckSettings gradcheck;
};

namespace detail {

inline std::vector<MethodKind> read_methods(Section& s, const std::vector<MethodKind>& def) {
  std::vector<std::string> names;
  for (auto k : def) names.push_back(to_string(k));
  std::vector<MethodKind> out;
  for (const auto& name : s.get_list("methods", names)) {
    try {
      out.push_back(parse_method(name));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      s.invalid("methods", e.what());
    }
  }
  return out;
}

inline OptimizerConfig read_optimizer(Section& s, const std::string& prefix, OptimizerConfig def) {
  OptimizerConfig c = def;
  const std::string kind = s.get_string(prefix + "optimizer", to_string(def.kind));
  try {
    c.kind = parse_optimizer_kind(kind);
  } catch (const Error& e) {
    s.invalid(prefix + "optimizer", e.what());
  }
  c.lr = s.get_double(prefix + "lr", def.lr);
  c.momentum = s.get_double(prefix + "momentum", def.momentum);
  c.beta1 = s.get_double(prefix + "beta1", def.beta1);
  c.beta2 = s.get_double(prefix + "beta2", def.beta2);
  c.eps = s.get_double(prefix + "eps", def.eps);
  c.weight_decay = s.get_double(prefix + "weight_decay", def.weight_decay);
  c.bias_correction = s.get_bool(prefix + "bias_correction", def.bias_correction);
  try {
    c.validate();
  } catch (const Error& e) {
    s.invalid(prefix + "lr", e.what());
  }
  return c;
}

inline tasks::ReweightConfig read_task(Section& s, tasks::ReweightConfig c) {
  c.n = s.get_size("n", c.n);
  c.d = s.get_size("d", c.d);
  c.classes = s.get_size("classes", c.classes);
  c.rho = s.get_double("rho", c.rho);
  c.m = s.get_size("m", c.m);
  c.n_test = s.get_size("n_test", c.n_test);
  c.separation = s.get_double("separation", c.separation);
  c.hidden = s.get_size("hidden", c.hidden);
  c.weight_hidden = s.get_size("weight_hidden", c.weight_hidden);
  c.use_uncertainty = s.get_bool("use_uncertainty", c.use_uncertainty);
  c.ema_decay = s.get_double("ema_decay", c.ema_decay);
  c.batch = s.get_size("batch", c.batch);
  c.base_optimizer = read_optimizer(s, "base_", c.base_optimizer);
  c.meta_optimizer = read_optimizer(s, "meta_", c.meta_optimizer);
  if (c.classes < 2) s.invalid("classes", "need at least 2 classes");
  if (c.classes > c.d) s.invalid("classes", "must not exceed d");
  if (!(c.rho >= 0.0 && c.rho < 1.0)) s.invalid("rho", "must lie in [0, 1)");
  if (c.m < c.classes) s.invalid("m", "need at least one meta sample per class");
  if (c.batch == 0) s.invalid("batch", "must be >= 1");
  if (c.hidden == 0) s.invalid("hidden", "must be >= 1");
  if (c.weight_hidden == 0) s.invalid("weight_hidden", "must be >= 1");
  if (!(c.ema_decay >= 0.0 && c.ema_decay < 1.0)) s.invalid("ema_decay", "must lie in [0, 1)");
  return c;
}

inline parallel::SyncMode read_sync(Section& s, parallel::SyncMode def) {
  const std::string v = s.get_string("sync", parallel::to_string(def));
  try {
    return parallel::parse_sync_mode(v);
  } catch (const Error& e) {
    s.invalid("sync", e.what());
  }
}

template <class T>
void require_positive(Section& s, const std::string& key, T v) {
  if (!(v > T{})) s.invalid(key, "must be positive");
}

}  // namespace detail

inline ExperimentConfig from_raw(const RawConfig& raw) {
  static const std::set<std::string> known{"", "regress", "reweight", "bench", "gradcheck"};
  for (const auto& [name, line] : raw.section_lines) {
    if (!known.count(name)) throw ConfigError("unknown section [" + name + "]", line, name);
  }
  auto section = [&](const std::string& name) {
    auto it = raw.sections.find(name);
    return Section(name, it == raw.sections.end() ? nullptr : &it->second);
  };
  ExperimentConfig c;

  Section g = section("");
  c.seed = g.get_u64("seed", c.seed);
  c.out = g.get_string("out", c.out);
  g.finish();

  {
    Section s = section("regress");
    auto& r = c.regress;
    r.n = s.get_size("n", r.n);
    r.d = s.get_size("d", r.d);
    r.n_meta = s.get_size("n_meta", r.n_meta);
    r.beta = s.get_double("beta", r.beta);
    r.noise = s.get_double("noise", r.noise);
    r.methods = detail::read_methods(s, r.methods);
    r.meta_steps = s.get_size("meta_steps", r.meta_steps);
    r.unroll = s.get_size("unroll", r.unroll);
    r.base_lr = s.get_double("base_lr", r.base_lr);
    r.meta_optimizer = detail::read_optimizer(s, "meta_", r.meta_optimizer);
    r.alpha = s.get_double("alpha", r.alpha);
    r.neumann_terms = s.get_size("neumann_terms", r.neumann_terms);
    r.cg_iters = s.get_size("cg_iters", r.cg_iters);
    r.v_step = s.get_bool("v_step", r.v_step);
    detail::require_positive(s, "n", r.n);
    detail::require_positive(s, "d", r.d);
    detail::require_positive(s, "n_meta", r.n_meta);
    detail::require_positive(s, "beta", r.beta);
    detail::require_positive(s, "unroll", r.unroll);
    detail::require_positive(s, "alpha", r.alpha);
    detail::require_positive(s, "neumann_terms", r.neumann_terms);
    detail::require_positive(s, "cg_iters", r.cg_iters);
    if (r.base_lr < 0.0) s.invalid("base_lr", "must be >= 0 (0 selects 1/lambda_max)");
    if (r.noise < 0.0) s.invalid("noise", "must be >= 0");
    for (auto m : r.methods) {
      if (m == MethodKind::none) s.invalid("methods", "regress has no 'none' method");
    }
    s.finish();
  }
  {
    Section s = section("reweight");
    auto& r = c.reweight;
    r.task = detail::read_task(s, r.task);
    r.methods = detail::read_methods(s, r.methods);
    r.epochs = s.get_size("epochs", r.epochs);
    r.unroll = s.get_size("unroll", r.unroll);
    r.alpha = s.get_double("alpha", r.alpha);
    r.v_step = s.get_bool("v_step", r.v_step);
    r.neumann_terms = s.get_size("neumann_terms", r.neumann_terms);
    r.cg_iters = s.get_size("cg_iters", r.cg_iters);
    r.cg_damping = s.get_double("cg_damping", r.cg_damping);
    r.seeds = s.get_size("seeds", r.seeds);
    r.workers = s.get_size("workers", r.workers);
    r.sync = detail::read_sync(s, r.sync);
    detail::require_positive(s, "unroll", r.unroll);
    detail::require_positive(s, "alpha", r.alpha);
    detail::require_positive(s, "seeds", r.seeds);
    detail::require_positive(s, "neumann_terms", r.neumann_terms);
    detail::require_positive(s, "cg_iters", r.cg_iters);
    if (r.cg_damping < 0.0) s.invalid("cg_damping", "must be >= 0");
    detail::require_positive(s, "workers", r.workers);
    for (auto m : r.methods) {
      if (m != MethodKind::none && m != MethodKind::sama && m != MethodKind::sama_na &&
          m != MethodKind::neumann && m != MethodKind::cg) {
        s.invalid("methods", std::string("method '") + to_string(m) + "' needs the regression task");
      }
      if (r.workers > 1 && (m == MethodKind::neumann || m == MethodKind::cg)) {
        s.invalid("methods", "only baseline, sama and sama_na run with workers > 1");
      }
    }
    s.finish();
  }
  {
    Section s = section("bench");
    auto& b = c.bench;
    tasks::ReweightConfig small;
    small.n_test = 0;
    b.task = detail::read_task(s, small);
    b.methods = detail::read_methods(s, b.methods);
    b.unrolls = s.get_size_list("unrolls", b.unrolls);
    b.workers = s.get_size_list("workers", b.workers);
    b.sync = detail::read_sync(s, b.sync);
    b.warmup = s.get_size("warmup", b.warmup);
    b.meta_steps = s.get_size("meta_steps", b.meta_steps);
    b.alpha = s.get_double("alpha", b.alpha);
    b.neumann_terms = s.get_size("neumann_terms", b.neumann_terms);
    b.cg_iters = s.get_size("cg_iters", b.cg_iters);
    b.cg_damping = s.get_double("cg_damping", b.cg_damping);
    detail::require_positive(s, "neumann_terms", b.neumann_terms);
    detail::require_positive(s, "cg_iters", b.cg_iters);
    if (b.cg_damping < 0.0) s.invalid("cg_damping", "must be >= 0");
    detail::require_positive(s, "meta_steps", b.meta_steps);
    detail::require_positive(s, "alpha", b.alpha);
    for (auto t : b.unrolls) detail::require_positive(s, "unrolls", t);
    for (auto k : b.workers) detail::require_positive(s, "workers", k);
    for (auto m : b.methods) {
      if (m == MethodKind::exact_ift || m == MethodKind::unrolled_exact) {
        s.invalid("methods", std::string("method '") + to_string(m) + "' needs the regression task");
      }
    }
    s.finish();
  }
  {
    Section s = section("gradcheck");
    auto& gc = c.gradcheck;
    gc.cases = s.get_size("cases", gc.cases);
    gc.adapt_cases = s.get_size("adapt_cases", gc.adapt_cases);
    gc.tolerance = s.get_double("tolerance", gc.tolerance);
    detail::require_positive(s, "tolerance", gc.tolerance);
    s.finish();
  }
  return c;
}

/// Seed precedence: flag, then SAMA_SEED, then the file, then 0.
inline std::uint64_t resolve_seed(std::uint64_t file_seed, std::optional<std::uint64_t> flag,
                                  const char* env) {
  if (flag) return *flag;
  if (env && *env) {
    const std::string s(env);
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
      throw ConfigError("SAMA_SEED: expected an unsigned integer, got '" + s + "'", 0, "SAMA_SEED");
    }
    return v;
  }
  return file_seed;
}

}  // namespace sama::config
