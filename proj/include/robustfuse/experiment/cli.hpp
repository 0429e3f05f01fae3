#pragma once

// Command-line front end: verify, run, sweep and motivate. Exit codes are fixed for scripting.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "robustfuse/error.hpp"
#include "robustfuse/experiment/config.hpp"
#include "robustfuse/experiment/runner.hpp"
#include "robustfuse/experiment/verify.hpp"
#include "robustfuse/linear_analysis.hpp"

namespace robustfuse::experiment {

enum ExitCode : int {
  exit_ok = 0,
  exit_other = 1,
  exit_config = 2,
  exit_verification = 3,
  exit_divergence = 4,
};

inline std::string format_report(const VerifyReport& r) {
  std::string out;
  char line[512];
  std::snprintf(line, sizeof line, "suite %s: %s (%.2f s)\n", r.suite.c_str(), r.ok() ? "PASS" : "FAIL", r.seconds);
  out += line;
  for (const auto& p : r.properties) {
    std::snprintf(line, sizeof line, "  [%s] %-48s max deviation %.3g (tol %.3g, %zu cases)%s%s\n",
                  p.pass ? "pass" : "FAIL", p.name.c_str(), p.max_deviation, p.tolerance, p.cases,
                  p.detail.empty() ? "" : "  ", p.detail.c_str());
    out += line;
  }
  return out;
}

// Error profile of the scalar model with shared weights (delta, c3 - delta) at c1 = c2 = 1,
// c3 = 10. The last column compares the worst source against the balanced split delta = c3/2.
inline std::string motivate_table(double sigma) {
  constexpr double c1 = 1.0, c2 = 1.0, c3 = 10.0;
  const auto balanced = linear::unbalanced_error_profile(c1, c2, c3, c3 / 2.0, sigma);
  const double balanced_worst = std::max(balanced.rms_source1, balanced.rms_source2);
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "c1 = %g, c2 = %g, c3 = %g, sigma = %g\n", c1, c2, c3, sigma);
  out += line;
  std::snprintf(line, sizeof line, "%8s %8s %8s %12s %12s %12s %16s\n", "delta", "g1", "g2", "rms_src1", "rms_src2",
                "src2/src1", "worst/balanced");
  out += line;
  for (const double delta : {0.0, 0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 9.9, 10.0}) {
    const auto p = linear::unbalanced_error_profile(c1, c2, c3, delta, sigma);
    const double worst = std::max(p.rms_source1, p.rms_source2);
    char ratio[32] = "-", vs[32] = "-";
    if (p.rms_source1 > 0.0) std::snprintf(ratio, sizeof ratio, "%.4f", p.rms_source2 / p.rms_source1);
    if (balanced_worst > 0.0) std::snprintf(vs, sizeof vs, "%.4f", worst / balanced_worst);
    std::snprintf(line, sizeof line, "%8.2f %8.2f %8.2f %12.4f %12.4f %12s %16s\n", delta, delta, c3 - delta,
                  p.rms_source1, p.rms_source2, ratio, vs);
    out += line;
  }
  return out;
}

struct RunFlags {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t trials = 0;
  std::vector<std::string> sets;
  std::size_t jobs = 1;
};

// Applies overrides in a fixed order: --set assignments, then --seed, --out, --trials.
inline ExperimentConfig resolve_config(const RunFlags& f) {
  ExperimentConfig cfg = load_config(f.config);
  for (const auto& s : f.sets) cfg = apply_assignment(cfg, s);
  if (!f.seeds.empty()) cfg.seeds = f.seeds;
  if (!f.out.empty()) cfg.output = f.out;
  if (f.trials) cfg.eval.trials = f.trials;
  cfg.validate();
  return cfg;
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"robustfuse: robust multi-source fusion experiments"};
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "run the analytical and gradient verification suites");
  std::string suite = "all";
  bool mutate = false;
  verify->add_option("--suite", suite, "linear, adversarial, gradients or all")
      ->check(CLI::IsMember({"linear", "adversarial", "gradients", "all"}));
  verify->add_flag("--mutate", mutate, "perturb the closed forms; the suites must then fail");

  RunFlags flags;
  auto add_run_flags = [&flags](CLI::App* cmd) {
    cmd->add_option("--config", flags.config, "experiment config (JSON)")->required();
    cmd->add_option("--seed", flags.seeds, "run seed; repeatable, replaces the config's seeds");
    cmd->add_option("--out", flags.out, "output directory");
    cmd->add_option("--trials", flags.trials, "evaluation trials per seed")->check(CLI::PositiveNumber);
    cmd->add_option("--set", flags.sets, "override a config key, e.g. --set train.lr=0.001");
    cmd->add_option("--jobs", flags.jobs, "worker threads")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "train and evaluate one configuration over its seeds");
  add_run_flags(run);
  auto* sweep = app.add_subcommand("sweep", "run every sweep variant (default: the four algorithms)");
  add_run_flags(sweep);

  auto* motivate = app.add_subcommand("motivate", "print the unbalanced shared-weight error table");
  double sigma = 1.0;
  motivate->add_option("--sigma", sigma, "noise scale")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_config;
  }

  try {
    if (*verify) {
      VerifyOptions opts;
      opts.mutate = mutate;
      bool ok = true;
      for (const auto& r : verify_all(suite, opts)) {
        out << format_report(r);
        ok = ok && r.ok();
      }
      out << (ok ? "verification passed\n" : "verification FAILED\n");
      return ok ? exit_ok : exit_verification;
    }
    if (*motivate) {
      out << motivate_table(sigma);
      return exit_ok;
    }
    const ExperimentConfig cfg = resolve_config(flags);
    const RunOptions opts{flags.jobs, true};
    bool diverged = false;
    if (*run) {
      diverged = run_experiment(cfg, opts).diverged();
    } else {
      for (const auto& r : run_sweep(cfg, opts)) diverged = diverged || r.diverged();
    }
    std::ifstream table(fs::path(cfg.output) / "table.txt");
    out << table.rdbuf();
    out << "results written to " << cfg.output << "\n";
    if (diverged) {
      err << "training diverged for at least one seed; see the FAILED markers under " << cfg.output << "\n";
      return exit_divergence;
    }
    return exit_ok;
  } catch (const config_error& e) {
    err << "configuration error: " << e.what() << "\n";
    return exit_config;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_other;
  }
}

}  // namespace robustfuse::experiment
