#pragma once

// Fusion of per-source convolutional feature maps: element-wise mean, channel concatenation,
// and the latent ensemble layer (1x1 convolution over the stacked channels, an activation,
// and an l1 penalty on the mixing weights).

#include <algorithm>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "robustfuse/diff/graph.hpp"
#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"

namespace robustfuse::fusion {

using diff::Activation;
using diff::Graph;
using diff::NodeId;
using diff::Shape;
using diff::Tensor;

enum class FusionKind { mean, concat, lel };

inline FusionKind parse_fusion_kind(const std::string& s) {
  if (s == "mean") return FusionKind::mean;
  if (s == "concat") return FusionKind::concat;
  if (s == "lel") return FusionKind::lel;
  throw config_error("unknown fusion kind '" + s + "'");
}

inline std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::mean: return "mean";
    case FusionKind::concat: return "concat";
    case FusionKind::lel: return "lel";
  }
  return "mean";
}

// Per-source feature maps, each a x b x d_i (optionally with a leading batch axis).
struct FeatureStack {
  std::vector<Tensor> sources;

  void validate() const {
    if (sources.empty()) throw shape_error("feature stack is empty");
    const auto& first = sources.front().shape();
    if (first.size() < 2) throw shape_error("feature maps need a channel axis");
    for (const auto& s : sources) {
      const auto& sh = s.shape();
      if (sh.size() != first.size() || !std::equal(sh.begin(), sh.end() - 1, first.begin()) ||
          sh.back() < 1) {
        throw shape_error("feature stack: spatial dims differ (" + diff::shape_string(sh) +
                          " vs " + diff::shape_string(first) + ")");
      }
    }
  }

  std::vector<std::size_t> depths() const {
    std::vector<std::size_t> d;
    for (const auto& s : sources) d.push_back(s.shape().back());
    return d;
  }
  std::size_t d_sum() const {
    std::size_t n = 0;
    for (auto d : depths()) n += d;
    return n;
  }
  std::size_t d_hat() const {
    const auto d = depths();
    return *std::max_element(d.begin(), d.end());
  }
};

struct LELParams {
  Tensor weights;  // d_hat x d_sum, row j mixes the stacked channels into output channel j
  double l1_coeff = 0.01;
  std::optional<std::size_t> sparsity_target{};
  Activation phi = Activation::relu;

  void validate() const {
    if (weights.rank() != 2) throw shape_error("LEL weights must be a matrix");
    if (!(l1_coeff >= 0.0)) throw config_error("LEL l1 coefficient must be nonnegative");
    for (double w : weights.values()) {
      if (!std::isfinite(w)) throw config_error("LEL weights must be finite");
    }
  }
};

inline std::size_t sum_depths(std::span<const std::size_t> depths) {
  std::size_t n = 0;
  for (auto d : depths) n += d;
  return n;
}

// Weights under which the LEL (with identity activation) reproduces mean fusion: output
// channel j averages channel j of every source that has one.
inline Tensor mean_equivalent_weights(std::span<const std::size_t> depths) {
  const std::size_t d_hat = *std::max_element(depths.begin(), depths.end());
  const std::size_t d_sum = sum_depths(depths);
  Tensor w({d_hat, d_sum});
  for (std::size_t j = 0; j < d_hat; ++j) {
    std::size_t holders = 0;
    for (auto d : depths) holders += j < d ? 1 : 0;
    std::size_t offset = 0;
    for (auto d : depths) {
      if (j < d) w[j * d_sum + offset + j] = 1.0 / static_cast<double>(holders);
      offset += d;
    }
  }
  return w;
}

inline Tensor lel_initial_weights(std::span<const std::size_t> depths, std::mt19937_64& rng,
                                  double jitter = 0.01) {
  Tensor w = mean_equivalent_weights(depths);
  std::uniform_real_distribution<double> u(-jitter, jitter);
  for (auto& v : w.values()) v += u(rng);
  return w;
}

// Graph-level fusion ops over per-source feature nodes.

inline NodeId fuse_mean(Graph& g, std::span<const NodeId> sources) {
  const auto& first = g.value(sources[0]).shape();
  for (NodeId s : sources) {
    if (g.value(s).shape() != first) {
      throw shape_error("fuse_mean: source depths must be equal (" +
                        diff::shape_string(g.value(s).shape()) + " vs " +
                        diff::shape_string(first) + ")");
    }
  }
  return g.mean_of(sources);
}

inline NodeId fuse_concat(Graph& g, std::span<const NodeId> sources) {
  return g.concat_channels(sources);
}

inline NodeId fuse_lel(Graph& g, std::span<const NodeId> sources, NodeId weights,
                       Activation phi = Activation::relu) {
  const NodeId stacked = g.concat_channels(sources);
  const auto& w = g.value(weights);
  if (w.rank() != 2 || w.dim(1) != g.value(stacked).shape().back()) {
    throw shape_error("fuse_lel: weights " + diff::shape_string(w.shape()) + " do not match " +
                      std::to_string(g.value(stacked).shape().back()) + " stacked channels");
  }
  return g.activate(g.dense(stacked, weights), phi);
}

inline NodeId lel_penalty(Graph& g, NodeId weights, double l1_coeff) {
  return g.l1_penalty(weights, l1_coeff);
}

// Eager wrappers over a FeatureStack.

namespace detail {
template <class Op>
Tensor eager(const FeatureStack& stack, Op&& op) {
  stack.validate();
  Graph g;
  std::vector<NodeId> ids;
  for (const auto& s : stack.sources) ids.push_back(g.input(s));
  return g.value(op(g, std::span<const NodeId>(ids)));
}
}  // namespace detail

inline Tensor fuse_mean(const FeatureStack& stack) {
  return detail::eager(stack, [](Graph& g, std::span<const NodeId> ids) { return fuse_mean(g, ids); });
}

inline Tensor fuse_concat(const FeatureStack& stack) {
  return detail::eager(stack,
                       [](Graph& g, std::span<const NodeId> ids) { return fuse_concat(g, ids); });
}

inline Tensor fuse_lel(const FeatureStack& stack, const LELParams& params) {
  params.validate();
  if (params.weights.dim(1) != stack.d_sum()) {
    throw shape_error("fuse_lel: weights have " + std::to_string(params.weights.dim(1)) +
                      " columns for " + std::to_string(stack.d_sum()) + " stacked channels");
  }
  return detail::eager(stack, [&](Graph& g, std::span<const NodeId> ids) {
    return fuse_lel(g, ids, g.input(params.weights), params.phi);
  });
}

// Number of weights with |w| > threshold in each output channel's mixing row.
inline std::vector<std::size_t> lel_sparsity_report(const Tensor& weights, double threshold = 1e-3) {
  if (!(threshold > 0.0)) throw precondition_error("sparsity threshold must be positive");
  if (weights.rank() != 2) throw shape_error("LEL weights must be a matrix");
  const std::size_t rows = weights.dim(0), cols = weights.dim(1);
  std::vector<std::size_t> counts(rows, 0);
  for (std::size_t j = 0; j < rows; ++j) {
    for (std::size_t k = 0; k < cols; ++k) {
      if (std::abs(weights[j * cols + k]) > threshold) ++counts[j];
    }
  }
  return counts;
}

inline std::vector<std::size_t> lel_sparsity_report(const LELParams& params, double threshold = 1e-3) {
  return lel_sparsity_report(params.weights, threshold);
}

}  // namespace robustfuse::fusion
