#pragma once

// Robustness evaluation: clean, single-source (one source corrupted at a time), and all-source
// corrupted metrics, repeated over independently seeded trials.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "robustfuse/corruption.hpp"
#include "robustfuse/error.hpp"
#include "robustfuse/model.hpp"
#include "robustfuse/stats.hpp"
#include "robustfuse/tasks.hpp"

namespace robustfuse::metrics {

using corruption::CorruptionSpec;
using stats::Interval;

struct RobustnessReport {
  Interval clean;
  std::vector<Interval> per_source;  // source i corrupted alone
  Interval asn;                      // every source corrupted
  double min_metric = 0.0;
  double max_diff = 0.0;
  std::size_t trials = 1;
  double confidence = 0.95;

  // Recomputes min and max-diff from the per-source means.
  void summarize() {
    min_metric = per_source.empty() ? 0.0 : per_source.front().mean;
    max_diff = 0.0;
    for (std::size_t i = 0; i < per_source.size(); ++i) {
      min_metric = std::min(min_metric, per_source[i].mean);
      for (std::size_t j = i + 1; j < per_source.size(); ++j) {
        max_diff = std::max(max_diff, std::abs(per_source[i].mean - per_source[j].mean));
      }
    }
  }
};

// Stream seed for one (base, trial, source) triple; source == n_sources is the all-source pass.
inline std::uint64_t trial_seed(std::uint64_t base, std::size_t trial, std::size_t source) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(source)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Copy of `data` with source `only` corrupted, or every source when `only` is empty.
inline tasks::Dataset corrupt_sources(const tasks::Dataset& data,
                                      std::span<const CorruptionSpec> specs,
                                      std::optional<std::size_t> only, std::mt19937_64& rng) {
  tasks::Dataset out = data;
  for (std::size_t i = 0; i < out.sources.size(); ++i) {
    if (!only || *only == i) out.sources[i] = corruption::corrupt(data.sources[i], specs[i], rng);
  }
  return out;
}

// `specs[i]` corrupts source i; each spec's seed is the base of its trial streams.
inline RobustnessReport evaluate_robustness(const model::FusionNet& net, const tasks::Dataset& val,
                                            std::span<const CorruptionSpec> specs,
                                            std::size_t trials, double confidence) {
  if (trials < 1) throw config_error("eval.trials must be >= 1");
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw config_error("eval.confidence must be in (0, 1)");
  }
  const std::size_t ns = val.n_sources();
  if (specs.size() != ns) {
    throw config_error("eval.corruption: expected " + std::to_string(ns) + " specs, got " +
                       std::to_string(specs.size()));
  }

  RobustnessReport report;
  report.trials = trials;
  report.confidence = confidence;

  const double clean = net.metric(val);
  const std::vector<double> clean_runs(trials, clean);
  report.clean = stats::confidence_interval(clean_runs, confidence);

  std::vector<std::vector<double>> single(ns);
  std::vector<double> all;
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t i = 0; i < ns; ++i) {
      if (specs[i].kind == corruption::CorruptionKind::none) {
        single[i].push_back(clean);
        continue;
      }
      std::mt19937_64 rng(trial_seed(specs[i].seed, t, i));
      single[i].push_back(net.metric(corrupt_sources(val, specs, i, rng)));
    }
    std::mt19937_64 rng(trial_seed(specs[0].seed, t, ns));
    all.push_back(net.metric(corrupt_sources(val, specs, std::nullopt, rng)));
  }
  for (auto& runs : single) report.per_source.push_back(stats::confidence_interval(runs, confidence));
  report.asn = stats::confidence_interval(all, confidence);
  report.summarize();
  return report;
}

}  // namespace robustfuse::metrics
