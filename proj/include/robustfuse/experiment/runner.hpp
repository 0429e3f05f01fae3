#pragma once

// Runs an ExperimentConfig: one directory per seed with summary.csv, report.json, trace.csv and
// checkpoint, then a single-threaded aggregation into summary.csv and table.txt at the root.
//
// Seed streams: the training loop is seeded with the run seed, the model initialization with
// derive_seed(seed, 1), and evaluation source i with derive_seed(eval.corruption[i].seed, seed).
// The dataset depends on task.seed only, so every run seed sees the same data.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "robustfuse/diff/checkpoint.hpp"
#include "robustfuse/experiment/config.hpp"
#include "robustfuse/metrics.hpp"
#include "robustfuse/model.hpp"
#include "robustfuse/stats.hpp"
#include "robustfuse/tasks.hpp"
#include "robustfuse/training.hpp"

namespace robustfuse::experiment {

namespace fs = std::filesystem;

inline std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  metrics::RobustnessReport report;
  training::TrainResult train;
  std::string checkpoint;
  std::optional<std::string> failure;  // set when training diverged
};

struct RunResult {
  std::string name;  // variant name; empty for a single run
  ExperimentConfig config;
  std::vector<double> tau;  // resolved evaluation scale per source
  std::vector<SeedOutcome> seeds;

  bool diverged() const {
    return std::any_of(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return s.failure.has_value(); });
  }
};

struct RunOptions {
  std::size_t jobs = 1;
  bool write = true;
};

inline training::TrainConfig resolved_train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  training::TrainConfig tc = cfg.effective_train();
  tc.seed = seed;
  return tc;
}

inline std::vector<corruption::CorruptionSpec> resolved_eval_specs(const ExperimentConfig& cfg,
                                                                   const tasks::Dataset& train,
                                                                   std::uint64_t seed) {
  auto specs = training::resolve_tau(cfg.eval.corruption, train);
  for (auto& s : specs) s.seed = derive_seed(s.seed, seed);
  return specs;
}

inline SeedOutcome run_seed(const ExperimentConfig& cfg, const tasks::TaskData& data, std::uint64_t seed) {
  SeedOutcome out;
  out.seed = seed;
  auto net = model::build_model(cfg.model, data.train, derive_seed(seed, 1));
  try {
    training::train_into(net, data.train, resolved_train_config(cfg, seed), {}, out.train);
  } catch (const training_error& e) {
    out.failure = e.what();
    return out;
  }
  const auto specs = resolved_eval_specs(cfg, data.train, seed);
  out.report = metrics::evaluate_robustness(net, data.val, specs, cfg.eval.trials, cfg.eval.confidence);
  std::ostringstream ck;
  diff::write_checkpoint(ck, net.params());
  out.checkpoint = ck.str();
  return out;
}

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

inline std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
  return s;
}

// Provenance block opening every CSV: resolved config, seeds and evaluation scales.
inline std::string csv_header(const std::vector<const RunResult*>& runs) {
  std::string h;
  for (const RunResult* r : runs) {
    const std::string label = r->name.empty() ? "" : " [" + r->name + "]";
    h += "# config" + label + ": " + to_json(r->config).dump() + "\n";
    h += "# seeds" + label + ": " + join_seeds(r->config.seeds) + "\n";
    std::string tau;
    for (std::size_t i = 0; i < r->tau.size(); ++i) tau += (i ? "," : "") + num(r->tau[i]);
    h += "# tau" + label + ": " + tau + "\n";
  }
  return h;
}

struct Row {
  std::string metric_kind;
  std::string source;
  double mean = 0.0;
  std::optional<double> low, high;
};

inline std::vector<Row> report_rows(const metrics::RobustnessReport& r) {
  std::vector<Row> rows;
  rows.push_back({"clean", "-", r.clean.mean, r.clean.low, r.clean.high});
  for (std::size_t i = 0; i < r.per_source.size(); ++i) {
    rows.push_back({"ssn", std::to_string(i + 1), r.per_source[i].mean, r.per_source[i].low, r.per_source[i].high});
  }
  rows.push_back({"asn", "all", r.asn.mean, r.asn.low, r.asn.high});
  rows.push_back({"ssn_min", "-", r.min_metric, std::nullopt, std::nullopt});
  rows.push_back({"ssn_maxdiff", "-", r.max_diff, std::nullopt, std::nullopt});
  return rows;
}

inline void write_row(std::ostream& os, const ExperimentConfig& cfg, const std::string& seed, const Row& row,
                      const std::string& variant) {
  os << training::to_string(cfg.train.algorithm) << ',' << fusion::to_string(cfg.model.fusion) << ',' << seed
     << ',' << row.metric_kind << ',' << row.source << ',' << num(row.mean) << ',' << opt_num(row.low) << ','
     << opt_num(row.high);
  if (!variant.empty()) os << ',' << variant;
  os << '\n';
}

inline constexpr const char* csv_columns = "algorithm,fusion,seed,metric_kind,source,mean,ci_low,ci_high";

struct Aggregate {
  Row median;
  Row mean;
};

// Aggregates each metric row across the seeds that finished training.
inline std::vector<Aggregate> aggregate(const RunResult& run) {
  std::vector<std::vector<Row>> per_seed;
  for (const auto& s : run.seeds) {
    if (!s.failure) per_seed.push_back(report_rows(s.report));
  }
  std::vector<Aggregate> out;
  if (per_seed.empty()) return out;
  for (std::size_t k = 0; k < per_seed.front().size(); ++k) {
    std::vector<double> xs;
    for (const auto& rows : per_seed) xs.push_back(rows[k].mean);
    const auto ci = stats::confidence_interval(xs, run.config.eval.confidence);
    const Row& proto = per_seed.front()[k];
    out.push_back({{proto.metric_kind, proto.source, stats::median(xs), std::nullopt, std::nullopt},
                   {proto.metric_kind, proto.source, ci.mean, ci.low, ci.high}});
  }
  return out;
}

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw error("cannot write '" + path.string() + "'");
}

inline nlohmann::ordered_json interval_json(const stats::Interval& iv) {
  return {{"mean", iv.mean},
          {"stddev", iv.stddev},
          {"ci_low", iv.low ? nlohmann::ordered_json(*iv.low) : nlohmann::ordered_json(nullptr)},
          {"ci_high", iv.high ? nlohmann::ordered_json(*iv.high) : nlohmann::ordered_json(nullptr)}};
}

inline void write_seed(const fs::path& dir, const RunResult& run, const SeedOutcome& s) {
  fs::create_directories(dir);
  const auto& cfg = run.config;
  std::ostringstream trace;
  training::write_trace_csv(trace, s.train.trace);
  write_file(dir / "trace.csv", trace.str());

  nlohmann::ordered_json rep = {{"seed", s.seed},
                                {"algorithm", training::to_string(cfg.train.algorithm)},
                                {"fusion", fusion::to_string(cfg.model.fusion)},
                                {"status", s.failure ? "diverged" : "ok"},
                                {"tau", run.tau},
                                {"iterations_completed", s.train.trace.size()},
                                {"forwards", s.train.forwards},
                                {"backwards", s.train.backwards}};
  if (s.failure) {
    rep["failure"] = *s.failure;
    write_file(dir / "FAILED", *s.failure + "\n");
  } else {
    const auto& r = s.report;
    rep["trials"] = r.trials;
    rep["confidence"] = r.confidence;
    rep["clean"] = interval_json(r.clean);
    rep["per_source"] = nlohmann::ordered_json::array();
    for (const auto& iv : r.per_source) rep["per_source"].push_back(interval_json(iv));
    rep["asn"] = interval_json(r.asn);
    rep["ssn_min"] = r.min_metric;
    rep["ssn_maxdiff"] = r.max_diff;
    write_file(dir / "checkpoint", s.checkpoint);
    if (fs::exists(dir / "FAILED")) fs::remove(dir / "FAILED");
  }
  write_file(dir / "report.json", rep.dump(2) + "\n");

  std::ostringstream csv;
  csv << csv_header({&run}) << csv_columns << '\n';
  if (!s.failure) {
    for (const auto& row : report_rows(s.report)) write_row(csv, cfg, std::to_string(s.seed), row, "");
  }
  write_file(dir / "summary.csv", csv.str());
}

inline std::string summary_csv(const std::vector<const RunResult*>& runs) {
  const bool sweep = runs.size() > 1 || !runs.front()->name.empty();
  std::ostringstream csv;
  csv << csv_header(runs) << csv_columns << (sweep ? ",variant" : "") << '\n';
  for (const RunResult* run : runs) {
    for (const auto& s : run->seeds) {
      if (s.failure) continue;
      for (const auto& row : report_rows(s.report)) write_row(csv, run->config, std::to_string(s.seed), row, run->name);
    }
    for (const auto& a : aggregate(*run)) write_row(csv, run->config, "median", a.median, run->name);
    for (const auto& a : aggregate(*run)) write_row(csv, run->config, "mean", a.mean, run->name);
  }
  return csv.str();
}

// Rows are runs; column groups are clean / ASN / SSN-min / SSN-maxdiff, each as the median
// over seeds and the mean with its confidence half-width.
inline std::string summary_table(const std::vector<const RunResult*>& runs) {
  const auto& first = runs.front()->config;
  const bool classification = first.task.kind == tasks::TaskKind::conv_classification;
  std::ostringstream os;
  os << "metric: " << (classification ? "accuracy" : "negative MSE") << " (higher is better; maxdiff lower is better)\n";
  os << "cells: median (mean +- " << fixed(100.0 * first.eval.confidence, 0) << "% CI half-width) over seeds\n\n";
  char line[512];
  std::snprintf(line, sizeof line, "%-14s %-7s %5s | %-28s | %-28s | %-28s | %-28s\n", "algorithm", "fusion",
                "seeds", "clean", "ASN", "SSN-min", "SSN-maxdiff");
  os << line;
  os << std::string(std::string(line).size() - 1, '-') << '\n';
  for (const RunResult* run : runs) {
    const auto agg = aggregate(*run);
    std::map<std::string, std::string> cell;
    for (const auto& a : agg) {
      if (a.median.metric_kind == "ssn") continue;
      const double hw = a.mean.low ? a.mean.mean - *a.mean.low : 0.0;
      cell[a.median.metric_kind] = fixed(a.median.mean, 4) + " (" + fixed(a.mean.mean, 4) + " +- " + fixed(hw, 4) + ")";
    }
    std::size_t ok = 0;
    for (const auto& s : run->seeds) ok += s.failure ? 0 : 1;
    const std::string label = run->name.empty() ? training::to_string(run->config.train.algorithm) : run->name;
    const std::string seeds = std::to_string(ok) + "/" + std::to_string(run->seeds.size());
    std::snprintf(line, sizeof line, "%-14s %-7s %5s | %-28s | %-28s | %-28s | %-28s\n", label.c_str(),
                  fusion::to_string(run->config.model.fusion).c_str(), seeds.c_str(), cell["clean"].c_str(),
                  cell["asn"].c_str(), cell["ssn_min"].c_str(), cell["ssn_maxdiff"].c_str());
    os << line;
  }
  return os.str();
}

struct Job {
  std::size_t run;
  std::size_t seed;
};

// Executes jobs on up to `jobs` worker threads; the first exception is rethrown after all
// workers stop.
template <class Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        next = count;
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, count));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

inline std::vector<RunResult> execute(std::vector<RunResult> runs, const fs::path& root, const RunOptions& opts) {
  std::vector<tasks::TaskData> data;
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    runs[r].config.validate();
    data.push_back(tasks::make_task(runs[r].config.task));
    for (const auto& s : training::resolve_tau(runs[r].config.eval.corruption, data.back().train)) {
      runs[r].tau.push_back(s.tau);
    }
    runs[r].seeds.resize(runs[r].config.seeds.size());
    for (std::size_t s = 0; s < runs[r].seeds.size(); ++s) jobs.push_back({r, s});
  }
  auto run_dir = [&](const RunResult& run) { return run.name.empty() ? root : root / run.name; };
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t k) {
    RunResult& run = runs[jobs[k].run];
    SeedOutcome& out = run.seeds[jobs[k].seed];
    out = run_seed(run.config, data[jobs[k].run], run.config.seeds[jobs[k].seed]);
    if (opts.write) write_seed(run_dir(run) / ("seed_" + std::to_string(out.seed)), run, out);
  });
  if (opts.write) {
    for (const auto& run : runs) {
      if (run.name.empty()) continue;
      write_file(run_dir(run) / "config.json", serialize_config(run.config));
      write_file(run_dir(run) / "summary.csv", summary_csv({&run}));
      write_file(run_dir(run) / "table.txt", summary_table({&run}));
    }
    std::vector<const RunResult*> all;
    for (const auto& run : runs) all.push_back(&run);
    fs::create_directories(root);
    write_file(root / "summary.csv", summary_csv(all));
    write_file(root / "table.txt", summary_table(all));
  }
  return runs;
}

}  // namespace detail

// Trains and evaluates every seed of `cfg` under cfg.output.
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  ExperimentConfig base = cfg;
  base.sweep.clear();
  if (opts.write) {
    fs::create_directories(cfg.output);
    detail::write_file(fs::path(cfg.output) / "config.json", serialize_config(cfg));
  }
  auto runs = detail::execute({RunResult{"", base, {}, {}}}, cfg.output, opts);
  return std::move(runs.front());
}

// The four training algorithms, used when a config declares no sweep variants.
inline std::vector<SweepVariant> default_variants() {
  std::vector<SweepVariant> out;
  for (const char* a : {"clean", "asn", "ssn", "ssn_alt"}) out.push_back({a, {{"train.algorithm", a}}});
  return out;
}

// Runs every sweep variant (default: the four algorithms) into cfg.output/<variant>/, with a
// combined summary.csv and table.txt at the root.
inline std::vector<RunResult> run_sweep(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  const auto variants = cfg.sweep.empty() ? default_variants() : cfg.sweep;
  std::vector<RunResult> runs;
  for (const auto& v : variants) runs.push_back({v.name, apply_variant(cfg, v), {}, {}});
  if (opts.write) {
    fs::create_directories(cfg.output);
    detail::write_file(fs::path(cfg.output) / "config.json", serialize_config(cfg));
  }
  return detail::execute(std::move(runs), cfg.output, opts);
}

}  // namespace robustfuse::experiment
