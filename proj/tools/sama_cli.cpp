// sama_cli: run the regression, reweighting, benchmark and gradcheck
// experiments from a config file.
//
// Exit codes: 0 success, 1 experiment failure, 2 config or usage error.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "sama/config.hpp"
#include "sama/experiments.hpp"

namespace {

using namespace sama;

constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_config = 2;

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string method;
};

/// "runs/x.csv" -> "runs/x<suffix>"; other names get the suffix appended.
std::string sibling(const std::string& out, const std::string& suffix) {
  const std::string ext = ".csv";
  if (out.size() > ext.size() && out.compare(out.size() - ext.size(), ext.size(), ext) == 0) {
    return out.substr(0, out.size() - ext.size()) + suffix;
  }
  return out + suffix;
}

class Output {
 public:
  explicit Output(const std::string& path) : path_(path) {
    if (path_ != "-") {
      file_.open(path_);
      if (!file_) throw Error("cannot open output file '" + path_ + "'");
    }
  }
  std::ostream& stream() { return path_ == "-" ? std::cout : file_; }
  bool is_stdout() const { return path_ == "-"; }

  void close() {
    if (path_ == "-") {
      std::cout.flush();
      return;
    }
    file_.close();
    if (!file_) throw Error("failed writing '" + path_ + "'");
  }

 private:
  std::string path_;
  std::ofstream file_;
};

void write_side_file(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open output file '" + path + "'");
  f << text;
  if (!f) throw Error("failed writing '" + path + "'");
}

config::ExperimentConfig load_config(const std::string& sub, const Flags& flags) {
  config::RawConfig raw = flags.config.empty() ? config::RawConfig{} : config::load(flags.config);
  raw.sections[""];
  auto override_key = [&](const std::string& key, const std::string& value, const char* flag) {
    if (sub == "gradcheck" || (sub == "regress" && key == "workers")) {
      throw ConfigError(std::string(flag) + " does not apply to '" + sub + "'", 0, key);
    }
    raw.sections[sub][key] = {value, 0};
  };
  if (!flags.method.empty()) override_key("methods", flags.method, "--method");
  if (flags.workers) override_key("workers", std::to_string(*flags.workers), "--workers");
  auto cfg = config::from_raw(raw);
  cfg.seed = config::resolve_seed(cfg.seed, flags.seed, std::getenv("SAMA_SEED"));
  if (!flags.out.empty()) cfg.out = flags.out;
  return cfg;
}

int run_regress(const config::ExperimentConfig& cfg) {
  const auto rows = experiments::run_regress(cfg.regress, cfg.seed);
  Output out(cfg.out);
  experiments::write_regress_csv(rows, out.stream());
  out.close();
  return exit_ok;
}

int run_reweight(const config::ExperimentConfig& cfg) {
  const auto result = experiments::run_reweight(cfg.reweight, cfg.seed);
  Output out(cfg.out);
  experiments::write_reweight_csv(result, out.stream());
  out.close();
  const std::string summary = experiments::reweight_summary(result).dump(2) + "\n";
  std::string comm;
  for (const auto& r : result.comm) comm += r.to_json_line() + "\n";
  if (out.is_stdout()) {
    std::cerr << summary << comm;
  } else {
    write_side_file(sibling(cfg.out, ".summary.json"), summary);
    if (!comm.empty()) write_side_file(sibling(cfg.out, ".comm.jsonl"), comm);
  }
  return exit_ok;
}

int run_bench(const config::ExperimentConfig& cfg) {
  const auto rows = experiments::run_bench(cfg.bench, cfg.seed);
  Output out(cfg.out);
  experiments::write_bench_csv(rows, out.stream());
  out.close();
  return exit_ok;
}

int run_gradcheck(const config::ExperimentConfig& cfg) {
  const auto result = experiments::run_gradcheck(cfg.gradcheck, cfg.seed);
  Output out(cfg.out);
  experiments::write_gradcheck_csv(result, out.stream());
  out.close();
  auto report = [](const char* suite, const gradcheck::SuiteReport& r) {
    std::cerr << suite << ": " << r.cases.size() << " cases, " << r.failures()
              << " failed, worst relative error " << experiments::fmt(r.worst()) << '\n';
    for (const auto& c : r.cases) {
      if (!c.passed) std::cerr << "  FAIL " << c.name << ": " << c.max_rel_error << '\n';
    }
  };
  report("autodiff", result.autodiff);
  report("adaptation", result.adaptation);
  return result.failures() == 0 ? exit_ok : exit_failure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel meta-gradient experiments"};
  app.require_subcommand(1);
  Flags flags;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  app.add_option("--config", flags.config, "Config file (key = value with [sections])");
  app.add_option("--out", flags.out, "Output CSV path, '-' for stdout");
  auto* seed_opt = app.add_option("--seed", seed, "Seed (overrides SAMA_SEED and the file)");
  auto* workers_opt = app.add_option("--workers", workers, "Number of simulated workers");
  app.add_option("--method", flags.method, "Run only this method");
  for (const auto* name : {"regress", "reweight", "bench", "gradcheck"}) {
    app.add_subcommand(name, std::string("Run the ") + name + " experiment")->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }
  if (*seed_opt) flags.seed = seed;
  if (*workers_opt) flags.workers = workers;
  const std::string sub = app.get_subcommands().front()->get_name();

  config::ExperimentConfig cfg;
  try {
    cfg = load_config(sub, flags);
  } catch (const ConfigError& e) {
    std::cerr << "config error";
    if (!flags.config.empty() && e.line() > 0) std::cerr << " at " << flags.config << ':' << e.line();
    if (!e.key().empty()) std::cerr << " (key '" << e.key() << "')";
    std::cerr << ": " << e.what() << '\n';
    return exit_config;
  }

  try {
    if (sub == "regress") return run_regress(cfg);
    if (sub == "reweight") return run_reweight(cfg);
    if (sub == "bench") return run_bench(cfg);
    return run_gradcheck(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const std::exception& e) {
    std::cerr << sub << " failed: " << e.what() << '\n';
    return exit_failure;
  }
}
