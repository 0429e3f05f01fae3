#pragma once

// Training loops. Iterations are numbered from 1; odd iterations see corrupted batches and
// even iterations see clean ones, for every robust algorithm:
//   asn      every source corrupted
//   ssn      each source corrupted in turn (same batch), the max-loss branch is re-run for the
//            gradient with the same noise realization
//   ssn_alt  source (floor(i / 2) mod n_s) + 1 corrupted
// Batch order and corruption noise come from separate streams, so degenerate corruption
// reproduces clean training bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "robustfuse/corruption.hpp"
#include "robustfuse/diff/graph.hpp"
#include "robustfuse/diff/optim.hpp"
#include "robustfuse/error.hpp"
#include "robustfuse/model.hpp"
#include "robustfuse/tasks.hpp"

namespace robustfuse::training {

using corruption::CorruptionKind;
using corruption::CorruptionSpec;
using diff::TagFilter;

enum class Algorithm { clean, asn, ssn, ssn_alt };
enum class Mode { from_scratch, fine_tune };

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "clean") return Algorithm::clean;
  if (s == "asn") return Algorithm::asn;
  if (s == "ssn") return Algorithm::ssn;
  if (s == "ssn_alt") return Algorithm::ssn_alt;
  throw config_error("unknown training algorithm '" + s + "'");
}

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::clean: return "clean";
    case Algorithm::asn: return "asn";
    case Algorithm::ssn: return "ssn";
    case Algorithm::ssn_alt: return "ssn_alt";
  }
  return "clean";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "from_scratch") return Mode::from_scratch;
  if (s == "fine_tune") return Mode::fine_tune;
  throw config_error("unknown training mode '" + s + "'");
}

inline std::string to_string(Mode m) { return m == Mode::fine_tune ? "fine_tune" : "from_scratch"; }

struct TrainConfig {
  Algorithm algorithm = Algorithm::clean;
  std::size_t iterations = 4000;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::optional<double> lr_final;  // linear decay from lr when set
  std::vector<CorruptionSpec> corruption;  // one per source
  Mode mode = Mode::from_scratch;
  std::size_t n_clean = 0;
  std::size_t n_tune = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate(std::size_t n_sources) const {
    if (batch_size < 1) throw config_error("train.batch_size must be >= 1");
    if (!(lr > 0.0)) throw config_error("train.lr must be positive");
    if (lr_final && !(*lr_final > 0.0)) throw config_error("train.lr_final must be positive");
    if (algorithm != Algorithm::clean && corruption.size() != n_sources) {
      throw config_error("train.corruption: expected " + std::to_string(n_sources) +
                         " specs, got " + std::to_string(corruption.size()));
    }
    for (const auto& c : corruption) c.validate();
    if (mode == Mode::fine_tune && n_clean + n_tune != iterations) {
      throw config_error("train: fine_tune requires n_clean + n_tune == iterations");
    }
  }
};

// Marker values for TraceRow::corrupted_source besides 1-based source indices.
inline constexpr int no_source = 0;
inline constexpr int all_sources = -1;

struct TraceRow {
  std::size_t iteration = 0;
  std::string phase;  // "clean" or "corrupt", prefixed with "tune:" in fine-tune phase 2
  int corrupted_source = no_source;
  double loss = 0.0;
};

struct TrainHooks {
  // Called once per corruption draw with the 1-based source index.
  std::function<void(std::size_t iteration, std::size_t source)> on_corrupt;
  // TrainSSN only: branch losses of the scan, the chosen 0-based index, and the loss of the
  // recomputed branch.
  std::function<void(std::size_t iteration, const std::vector<double>& branch_losses,
                     std::size_t chosen, double recomputed)>
      on_ssn_scan;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  std::size_t forwards = 0;
  std::size_t backwards = 0;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "iteration,phase,corrupted_source,loss\n";
  for (const auto& r : trace) {
    os << r.iteration << ',' << r.phase << ',';
    if (r.corrupted_source == no_source) {
      os << "none";
    } else if (r.corrupted_source == all_sources) {
      os << "all";
    } else {
      os << r.corrupted_source;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", r.loss);
    os << ',' << buf << '\n';
  }
}

// TrainSSNAlt rotation: 1-based source corrupted at iteration i.
inline std::size_t ssn_alt_source(std::size_t iteration, std::size_t n_sources) {
  return (iteration / 2) % n_sources + 1;
}

// Returns a copy of the specs with unresolved reference scales set from the clean data.
inline std::vector<CorruptionSpec> resolve_tau(std::vector<CorruptionSpec> specs,
                                               const tasks::Dataset& data) {
  for (std::size_t i = 0; i < specs.size() && i < data.n_sources(); ++i) {
    if (specs[i].tau <= 0.0) specs[i].tau = corruption::empirical_tau(data.sources[i]);
  }
  return specs;
}

namespace detail {

// Mini-batches drawn without replacement from reshuffled epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : order_(n), batch_(std::min(batch, n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    pos_ = n;
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::vector<std::size_t> rows(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return rows;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_;
  std::mt19937_64 rng_;
};

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    stream};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

class Loop {
 public:
  Loop(model::FusionNet& net, const tasks::Dataset& data, const TrainConfig& cfg,
       const TrainHooks& hooks, TrainResult& result)
      : net_(net),
        data_(data),
        cfg_(cfg),
        hooks_(hooks),
        result_(result),
        specs_(resolve_tau(cfg.corruption, data)),
        sampler_(data.size(), cfg.batch_size, stream_seed(cfg.seed, 1)),
        noise_(stream_seed(cfg.seed, 2)),
        adam_(diff::AdamOptions{cfg.lr}) {}

  // Runs `count` iterations of `algo`, numbered from 1 within this phase.
  void run(Algorithm algo, std::size_t count, TagFilter tags, const std::string& prefix) {
    for (std::size_t local = 1; local <= count; ++local) {
      ++global_;
      if (cfg_.lr_final && cfg_.iterations > 1) {
        const double frac = static_cast<double>(global_ - 1) / static_cast<double>(cfg_.iterations - 1);
        adam_.set_lr(cfg_.lr + (*cfg_.lr_final - cfg_.lr) * frac);
      }
      const auto rows = sampler_.next();
      const tasks::Dataset batch = data_.batch(rows);
      const bool corrupt_now = algo != Algorithm::clean && local % 2 == 1;
      TraceRow row{global_, prefix + (corrupt_now ? "corrupt" : "clean"), no_source, 0.0};
      if (!corrupt_now) {
        row.loss = step(batch.sources, batch, tags);
      } else {
        switch (algo) {
          case Algorithm::asn: {
            auto sources = batch.sources;
            for (std::size_t j = 0; j < sources.size(); ++j) sources[j] = corrupt(batch, j);
            row.corrupted_source = all_sources;
            row.loss = step(sources, batch, tags);
            break;
          }
          case Algorithm::ssn_alt: {
            const std::size_t j = ssn_alt_source(local, batch.n_sources()) - 1;
            auto sources = batch.sources;
            sources[j] = corrupt(batch, j);
            row.corrupted_source = static_cast<int>(j + 1);
            row.loss = step(sources, batch, tags);
            break;
          }
          case Algorithm::ssn: {
            const std::size_t ns = batch.n_sources();
            std::vector<diff::Tensor> noisy;
            std::vector<double> losses;
            for (std::size_t j = 0; j < ns; ++j) noisy.push_back(corrupt(batch, j));
            for (std::size_t j = 0; j < ns; ++j) {
              auto sources = batch.sources;
              sources[j] = noisy[j];
              diff::Graph g(&net_.params());
              losses.push_back(g.value(net_.loss(g, net_.forward(g, sources), batch))[0]);
              ++result_.forwards;
            }
            // First maximum wins, so ties go to the lowest index.
            const auto chosen = static_cast<std::size_t>(
                std::max_element(losses.begin(), losses.end()) - losses.begin());
            auto sources = batch.sources;
            sources[chosen] = noisy[chosen];
            row.corrupted_source = static_cast<int>(chosen + 1);
            row.loss = step(sources, batch, tags);
            if (hooks_.on_ssn_scan) hooks_.on_ssn_scan(global_, losses, chosen, row.loss);
            break;
          }
          case Algorithm::clean: break;
        }
      }
      result_.trace.push_back(std::move(row));
    }
  }

  std::size_t completed() const noexcept { return global_; }

 private:
  diff::Tensor corrupt(const tasks::Dataset& batch, std::size_t j) {
    if (hooks_.on_corrupt) hooks_.on_corrupt(global_, j + 1);
    return corruption::corrupt(batch.sources[j], specs_[j], noise_);
  }

  double step(const std::vector<diff::Tensor>& sources, const tasks::Dataset& batch, TagFilter tags) {
    auto& params = net_.params();
    params.zero_grad();
    diff::Graph g(&params);
    const auto loss = net_.loss(g, net_.forward(g, sources), batch);
    const double value = g.value(loss)[0];
    ++result_.forwards;
    if (!std::isfinite(value)) {
      throw training_error("training diverged: non-finite loss", static_cast<long>(global_));
    }
    g.backward(loss);
    ++result_.backwards;
    adam_.step(params, tags);
    return value;
  }

  model::FusionNet& net_;
  const tasks::Dataset& data_;
  const TrainConfig& cfg_;
  const TrainHooks& hooks_;
  TrainResult& result_;
  std::vector<CorruptionSpec> specs_;
  BatchSampler sampler_;
  std::mt19937_64 noise_;
  diff::Adam adam_;
  std::size_t global_ = 0;
};

}  // namespace detail

// Runs cfg.algorithm (in cfg.mode) on `net`, appending to `result` as it goes so the trace up
// to a divergence survives the training_error.
inline void train_into(model::FusionNet& net, const tasks::Dataset& data, const TrainConfig& cfg,
                       const TrainHooks& hooks, TrainResult& result) {
  cfg.validate(data.n_sources());
  if (data.size() == 0) throw config_error("train: empty training set");
  detail::Loop loop(net, data, cfg, hooks, result);
  if (cfg.mode == Mode::from_scratch) {
    loop.run(cfg.algorithm, cfg.iterations, TagFilter::all(), "");
    return;
  }
  const auto& params = net.params();
  if (params.count(diff::ParamTag::extractor) == 0 ||
      params.count(diff::ParamTag::fusion) + params.count(diff::ParamTag::head) == 0) {
    throw config_error("fine_tune: model needs extractor parameters and fusion/head parameters");
  }
  loop.run(Algorithm::clean, cfg.n_clean, TagFilter::all(), "");
  loop.run(cfg.algorithm, cfg.n_tune, TagFilter::fusion_and_head(), "tune:");
}

inline TrainResult train(model::FusionNet& net, const tasks::Dataset& data, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  TrainResult result;
  train_into(net, data, cfg, hooks, result);
  return result;
}

namespace detail {
inline TrainResult train_as(Algorithm expected, model::FusionNet& net, const tasks::Dataset& data,
                            const TrainConfig& cfg, const TrainHooks& hooks) {
  if (cfg.algorithm != expected) {
    throw config_error("train.algorithm is '" + to_string(cfg.algorithm) + "', expected '" +
                       to_string(expected) + "'");
  }
  return train(net, data, cfg, hooks);
}
}  // namespace detail

inline TrainResult train_clean(model::FusionNet& net, const tasks::Dataset& data,
                               const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return detail::train_as(Algorithm::clean, net, data, cfg, hooks);
}

inline TrainResult train_asn(model::FusionNet& net, const tasks::Dataset& data,
                             const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return detail::train_as(Algorithm::asn, net, data, cfg, hooks);
}

inline TrainResult train_ssn(model::FusionNet& net, const tasks::Dataset& data,
                             const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return detail::train_as(Algorithm::ssn, net, data, cfg, hooks);
}

inline TrainResult train_ssn_alt(model::FusionNet& net, const tasks::Dataset& data,
                                 const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return detail::train_as(Algorithm::ssn_alt, net, data, cfg, hooks);
}

inline TrainResult fine_tune(model::FusionNet& net, const tasks::Dataset& data,
                             const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (cfg.mode != Mode::fine_tune) throw config_error("fine_tune: train.mode must be fine_tune");
  return train(net, data, cfg, hooks);
}

}  // namespace robustfuse::training
