#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"

namespace robustfuse::corruption {

using diff::Tensor;

enum class CorruptionKind { none, gaussian, downsample };

inline CorruptionKind parse_corruption_kind(const std::string& s) {
  if (s == "none") return CorruptionKind::none;
  if (s == "gaussian") return CorruptionKind::gaussian;
  if (s == "downsample") return CorruptionKind::downsample;
  throw config_error("unknown corruption kind '" + s + "'");
}

inline std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::gaussian: return "gaussian";
    case CorruptionKind::downsample: return "downsample";
  }
  return "none";
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::none;
  double tau = 0.0;  // reference scale; <= 0 means "resolve from the clean training data"
  double factor = 0.75;
  double keep_ratio = 0.25;
  std::size_t axis = 1;  // axis of the tensor being corrupted (1 = rows of an N x H x W x C batch)
  std::uint64_t seed = 0;
  bool per_sample_noise = true;  // false: one noise draw shared by every sample of a batch

  void validate() const {
    if (!(factor >= 0.0)) throw config_error("corruption factor must be >= 0");
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
      throw config_error("corruption keep_ratio must be in (0, 1]");
    }
  }

  double noise_stddev() const { return factor * tau; }
  std::size_t stride() const { return static_cast<std::size_t>(std::lround(1.0 / keep_ratio)); }

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

namespace detail {

inline void gaussian(Tensor& x, const CorruptionSpec& spec, std::mt19937_64& rng) {
  if (spec.factor == 0.0) return;
  if (!(spec.tau > 0.0)) {
    throw precondition_error("gaussian corruption: tau has not been resolved");
  }
  const double sd = spec.noise_stddev();
  std::normal_distribution<double> normal(0.0, sd);
  auto values = x.data();
  if (spec.per_sample_noise || x.rank() < 2) {
    for (auto& v : values) v += normal(rng);
    return;
  }
  const std::size_t per = x.size() / x.dim(0);
  std::vector<double> noise(per);
  for (auto& n : noise) n = normal(rng);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += noise[i % per];
}

inline void downsample(Tensor& x, const CorruptionSpec& spec) {
  if (spec.axis >= x.rank()) {
    throw shape_error("downsample: axis " + std::to_string(spec.axis) + " out of range for " +
                      diff::shape_string(x.shape()));
  }
  const std::size_t stride = spec.stride();
  std::size_t inner = 1;
  for (std::size_t a = spec.axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t len = x.dim(spec.axis);
  const std::size_t outer = x.size() / (inner * len);
  auto values = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < len; ++i) {
      if (i % stride == 0) continue;
      std::fill_n(values.begin() + static_cast<std::ptrdiff_t>((o * len + i) * inner), inner, 0.0);
    }
  }
}

}  // namespace detail

// Applies the corruption drawing randomness from `rng`.
inline Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Tensor out = x;
  switch (spec.kind) {
    case CorruptionKind::none: break;
    case CorruptionKind::gaussian: detail::gaussian(out, spec, rng); break;
    case CorruptionKind::downsample: detail::downsample(out, spec); break;
  }
  return out;
}

// Deterministic in (x, spec): the noise stream is seeded from spec.seed.
inline Tensor corrupt(const Tensor& x, const CorruptionSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  return corrupt(x, spec, rng);
}

// Population standard deviation of all entries, the default per-source reference scale.
inline double empirical_tau(const Tensor& x) {
  if (x.empty()) return 0.0;
  double mean = 0.0;
  for (double v : x.values()) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x.values()) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(x.size()));
}

}  // namespace robustfuse::corruption
