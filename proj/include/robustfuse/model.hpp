#pragma once

// Toy-scale fusion network: per-source 1x1-conv extractors, a fusion layer, spatial mean
// pooling, and a dense head.
//
// Parameter names and tags:
//   src<i>.conv<l>.w / .b   extractor
//   fusion.lel.w            fusion
//   head.dense<l>.w / .b    head

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "robustfuse/diff/graph.hpp"
#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"
#include "robustfuse/fusion_layers.hpp"
#include "robustfuse/tasks.hpp"

namespace robustfuse::model {

using diff::Activation;
using diff::Graph;
using diff::NodeId;
using diff::ParameterRegistry;
using diff::ParamTag;
using diff::Shape;
using diff::Tensor;
using fusion::FusionKind;

struct ModelSpec {
  std::vector<std::vector<std::size_t>> extractor;  // hidden widths per source
  FusionKind fusion = FusionKind::mean;
  std::vector<std::size_t> head;  // hidden widths after pooling
  bool head_bias = true;
  Activation activation = Activation::relu;
  double lel_l1 = 0.01;
  Activation lel_activation = Activation::relu;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor w({fan_out, fan_in});
  for (auto& v : w.values()) v = u(rng);
  return w;
}

class FusionNet {
 public:
  // `inputs` holds the per-sample shape (H, W, C) of every source.
  FusionNet(ModelSpec spec, std::vector<Shape> inputs, std::size_t outputs, bool classification,
            std::uint64_t seed)
      : spec_(std::move(spec)),
        inputs_(std::move(inputs)),
        outputs_(outputs),
        classification_(classification) {
    if (inputs_.empty()) throw config_error("model: at least one source is required");
    if (spec_.extractor.empty()) spec_.extractor.resize(inputs_.size());
    if (spec_.extractor.size() != inputs_.size()) {
      throw config_error("model.extractor: expected " + std::to_string(inputs_.size()) +
                         " per-source width lists");
    }
    for (const auto& s : inputs_) {
      if (s.size() != 3) throw shape_error("model: per-sample source shape must be H x W x C");
    }
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < inputs_.size(); ++i) {
      std::size_t width = inputs_[i][2];
      for (std::size_t l = 0; l < spec_.extractor[i].size(); ++l) {
        const std::size_t next = spec_.extractor[i][l];
        const std::string prefix = "src" + std::to_string(i + 1) + ".conv" + std::to_string(l);
        params_.add(prefix + ".w", ParamTag::extractor, glorot_uniform(next, width, rng));
        params_.add(prefix + ".b", ParamTag::extractor, Tensor({next}));
        width = next;
      }
      feature_depths_.push_back(width);
    }

    std::size_t fused = 0;
    switch (spec_.fusion) {
      case FusionKind::mean:
        for (auto d : feature_depths_) {
          if (d != feature_depths_.front()) {
            throw config_error("model.fusion: mean fusion requires equal feature depths");
          }
        }
        fused = feature_depths_.front();
        break;
      case FusionKind::concat: fused = fusion::sum_depths(feature_depths_); break;
      case FusionKind::lel:
        params_.add("fusion.lel.w", ParamTag::fusion,
                    fusion::lel_initial_weights(feature_depths_, rng));
        fused = params_.at("fusion.lel.w").value.dim(0);
        break;
    }

    std::size_t width = fused;
    for (std::size_t l = 0; l <= spec_.head.size(); ++l) {
      const bool last = l == spec_.head.size();
      const std::size_t next = last ? outputs_ : spec_.head[l];
      const std::string prefix = "head.dense" + std::to_string(l);
      params_.add(prefix + ".w", ParamTag::head, glorot_uniform(next, width, rng));
      if (spec_.head_bias) params_.add(prefix + ".b", ParamTag::head, Tensor({next}));
      width = next;
    }
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  ParameterRegistry& params() noexcept { return params_; }
  const ParameterRegistry& params() const noexcept { return params_; }
  std::size_t n_sources() const noexcept { return inputs_.size(); }
  const std::vector<std::size_t>& feature_depths() const noexcept { return feature_depths_; }
  bool classification() const noexcept { return classification_; }

  // Records the forward pass for a batch; returns the N x outputs node.
  NodeId forward(Graph& g, std::span<const Tensor> sources) const {
    if (sources.size() != inputs_.size()) {
      throw shape_error("model: expected " + std::to_string(inputs_.size()) + " sources, got " +
                        std::to_string(sources.size()));
    }
    std::vector<NodeId> features;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const auto& sh = sources[i].shape();
      if (sh.size() != 4 || !std::equal(sh.begin() + 1, sh.end(), inputs_[i].begin())) {
        throw shape_error("node " + std::to_string(g.size()) + " (input src" +
                          std::to_string(i + 1) + "): got " + diff::shape_string(sh) +
                          ", declared N x " + diff::shape_string(inputs_[i]));
      }
      NodeId x = g.input(sources[i], "src" + std::to_string(i + 1));
      for (std::size_t l = 0; l < spec_.extractor[i].size(); ++l) {
        const std::string prefix = "src" + std::to_string(i + 1) + ".conv" + std::to_string(l);
        x = g.activate(g.conv1x1(x, g.parameter(prefix + ".w"), g.parameter(prefix + ".b")),
                       spec_.activation);
      }
      features.push_back(x);
    }

    NodeId fused = 0;
    switch (spec_.fusion) {
      case FusionKind::mean: fused = fusion::fuse_mean(g, features); break;
      case FusionKind::concat: fused = fusion::fuse_concat(g, features); break;
      case FusionKind::lel:
        fused = fusion::fuse_lel(g, features, g.parameter("fusion.lel.w"), spec_.lel_activation);
        break;
    }

    NodeId h = g.mean_pool(fused);
    for (std::size_t l = 0; l <= spec_.head.size(); ++l) {
      const std::string prefix = "head.dense" + std::to_string(l);
      const auto b = spec_.head_bias ? std::optional<NodeId>(g.parameter(prefix + ".b"))
                                     : std::nullopt;
      h = g.dense(h, g.parameter(prefix + ".w"), b);
      if (l < spec_.head.size()) h = g.activate(h, spec_.activation);
    }
    return h;
  }

  // Task loss plus the LEL sparsity penalty.
  NodeId loss(Graph& g, NodeId output, const tasks::Dataset& batch) const {
    NodeId l = classification_ ? g.softmax_cross_entropy(output, batch.labels)
                               : g.mse(output, g.input(batch.targets, "targets"));
    if (spec_.fusion == FusionKind::lel && spec_.lel_l1 > 0.0) {
      l = g.add(l, fusion::lel_penalty(g, g.parameter("fusion.lel.w"), spec_.lel_l1));
    }
    return l;
  }

  Tensor predict(std::span<const Tensor> sources) const {
    Graph g(const_cast<ParameterRegistry*>(&params_));
    return g.value(forward(g, sources));
  }

  // Accuracy for classification, negative MSE for regression (higher is better for both).
  double metric(const tasks::Dataset& data, std::size_t batch = 256) const {
    double acc = 0.0;
    const std::size_t n = data.size();
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const auto chunk = data.slice(begin, begin + batch);
      const Tensor out = predict(chunk.sources);
      const std::size_t rows = chunk.size(), k = out.size() / rows;
      for (std::size_t r = 0; r < rows; ++r) {
        if (classification_) {
          const double* row = out.raw() + r * k;
          const auto best = static_cast<int>(std::max_element(row, row + k) - row);
          acc += best == chunk.labels[r] ? 1.0 : 0.0;
        } else {
          const double e = out[r] - chunk.targets[r];
          acc -= e * e;
        }
      }
    }
    return acc / static_cast<double>(n);
  }

 private:
  ModelSpec spec_;
  std::vector<Shape> inputs_;
  std::size_t outputs_;
  bool classification_;
  ParameterRegistry params_;
  std::vector<std::size_t> feature_depths_;
};

inline FusionNet build_model(const ModelSpec& spec, const tasks::Dataset& data, std::uint64_t seed) {
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < data.n_sources(); ++i) shapes.push_back(data.sample_shape(i));
  std::size_t outputs = 1;
  if (data.classification) {
    outputs = static_cast<std::size_t>(*std::max_element(data.labels.begin(), data.labels.end())) + 1;
  }
  return FusionNet(spec, std::move(shapes), outputs, data.classification, seed);
}

}  // namespace robustfuse::model
