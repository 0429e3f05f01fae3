#pragma once

// Synthetic multi-source tasks. Every source is stored as an N x H x W x C tensor; vector-valued
// sources use H = W = 1.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"
#include "robustfuse/linear_analysis.hpp"

namespace robustfuse::tasks {

using diff::Shape;
using diff::Tensor;

enum class TaskKind { linear_regression, nonlinear_regression, conv_classification };

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "linear_regression" || s == "linear") return TaskKind::linear_regression;
  if (s == "nonlinear_regression" || s == "nonlinear") return TaskKind::nonlinear_regression;
  if (s == "conv_classification" || s == "conv") return TaskKind::conv_classification;
  throw config_error("unknown task kind '" + s + "'");
}

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::linear_regression: return "linear_regression";
    case TaskKind::nonlinear_regression: return "nonlinear_regression";
    case TaskKind::conv_classification: return "conv_classification";
  }
  return "linear_regression";
}

struct SyntheticTask {
  TaskKind kind = TaskKind::linear_regression;
  std::size_t n_train = 4000;
  std::size_t n_val = 1000;
  std::uint64_t seed = 1;

  // Regression tasks: latent weights (sigma unused) and the latent law.
  linear::LatentSpec latent{linear::Vector::Ones(1), linear::Vector::Ones(1),
                            linear::Vector::Ones(1), 1.0};
  linear::LatentDistribution distribution = linear::LatentDistribution::standard_normal;
  std::vector<std::size_t> source_dims;  // nonlinear: per-source output width (default d_i + d3)

  // Classification task: two a x b x d_i views of a shared class pattern.
  std::size_t height = 8;
  std::size_t width = 8;
  std::vector<std::size_t> channels{4, 6};
  std::size_t n_classes = 4;
  std::vector<double> signal{0.5, 1.0};  // per-view gain on the shared pattern
  double presence = 0.5;                 // probability a pixel carries the class pattern
  double shared_noise = 0.3;             // latent noise common to both views
  double private_noise = 1.0;            // per-view noise

  friend bool operator==(const SyntheticTask&, const SyntheticTask&) = default;

  std::size_t n_sources() const {
    return kind == TaskKind::conv_classification ? channels.size() : 2;
  }

  void validate() const {
    if (n_train < 1 || n_val < 1) throw config_error("task: n_train and n_val must be >= 1");
    switch (kind) {
      case TaskKind::linear_regression: latent.validate(); break;
      case TaskKind::nonlinear_regression:
        latent.validate();
        if (!source_dims.empty() && source_dims.size() != 2) {
          throw config_error("task.source_dims: expected two entries");
        }
        break;
      case TaskKind::conv_classification:
        if (height < 1 || width < 1) throw config_error("task: height and width must be >= 1");
        if (channels.empty()) throw config_error("task.channels: need at least one source");
        for (auto c : channels) {
          if (c < 1) throw config_error("task.channels: every depth must be >= 1");
        }
        if (signal.size() != channels.size()) {
          throw config_error("task.signal: one gain per source required");
        }
        if (n_classes < 2) throw config_error("task.n_classes must be >= 2");
        if (presence < 0.0 || presence > 1.0) throw config_error("task.presence must be in [0, 1]");
        break;
    }
  }
};

struct Dataset {
  std::vector<Tensor> sources;  // each N x H x W x C
  Tensor targets;               // regression: N x 1
  std::vector<int> labels;      // classification
  bool classification = false;

  std::size_t size() const { return sources.empty() ? 0 : sources.front().dim(0); }
  std::size_t n_sources() const { return sources.size(); }

  // Per-sample shape (H, W, C) of source i.
  Shape sample_shape(std::size_t i) const {
    const auto& s = sources.at(i).shape();
    return Shape(s.begin() + 1, s.end());
  }

  Dataset batch(std::span<const std::size_t> rows) const {
    Dataset out;
    out.classification = classification;
    for (const auto& src : sources) out.sources.push_back(gather(src, rows));
    if (!targets.empty()) out.targets = gather(targets, rows);
    if (classification) {
      for (auto r : rows) out.labels.push_back(labels[r]);
    }
    return out;
  }

  Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> rows;
    for (auto r = begin; r < std::min(end, size()); ++r) rows.push_back(r);
    return batch(rows);
  }

 private:
  static Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
    Shape shape = t.shape();
    const std::size_t per = t.size() / shape[0];
    shape[0] = rows.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(t.raw() + rows[i] * per, per, out.raw() + i * per);
    }
    return out;
  }
};

struct TaskData {
  Dataset train;
  Dataset val;
};

inline Dataset from_linear(const linear::LinearDataset& d) {
  Dataset out;
  const auto n = static_cast<std::size_t>(d.n);
  auto as_map = [n](const linear::Matrix& m) {
    const auto cols = static_cast<std::size_t>(m.cols());
    Tensor t({n, 1, 1, cols});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        t[r * cols + c] = m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      }
    }
    return t;
  };
  out.sources = {as_map(d.x1), as_map(d.x2)};
  out.targets = Tensor({n, 1});
  for (std::size_t r = 0; r < n; ++r) out.targets[r] = d.y(static_cast<Eigen::Index>(r));
  return out;
}

namespace detail {

inline Dataset make_nonlinear(const SyntheticTask& task, std::size_t n, std::uint64_t seed,
                              const std::vector<linear::Matrix>& mixers) {
  // Latents come from the linear construction; sources pass [z_private; z_shared] through a
  // fixed random map and tanh.
  const auto base = linear::generate_linear_data(task.latent, static_cast<Eigen::Index>(n),
                                                 task.distribution, seed);
  Dataset out;
  for (std::size_t i = 0; i < 2; ++i) {
    const linear::Matrix& x = i == 0 ? base.x1 : base.x2;
    const linear::Matrix mapped = (x * mixers[i].transpose()).array().tanh().matrix();
    const auto cols = static_cast<std::size_t>(mapped.cols());
    Tensor t({n, 1, 1, cols});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        t[r * cols + c] = mapped(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      }
    }
    out.sources.push_back(std::move(t));
  }
  out.targets = Tensor({n, 1});
  for (std::size_t r = 0; r < n; ++r) out.targets[r] = base.y(static_cast<Eigen::Index>(r));
  return out;
}

inline Dataset make_conv(const SyntheticTask& task, std::size_t n, std::mt19937_64& rng,
                         const std::vector<linear::Matrix>& mixers) {
  const std::size_t hw = task.height * task.width, k = task.n_classes;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(k) - 1);
  std::bernoulli_distribution on(task.presence);

  Dataset out;
  out.classification = true;
  for (auto c : task.channels) out.sources.emplace_back(Shape{n, task.height, task.width, c});
  out.labels.resize(n);
  std::vector<double> shared(hw * k);
  for (std::size_t s = 0; s < n; ++s) {
    const int label = cls(rng);
    out.labels[s] = label;
    for (std::size_t p = 0; p < hw; ++p) {
      const bool lit = on(rng);
      for (std::size_t c = 0; c < k; ++c) {
        shared[p * k + c] = (lit && static_cast<int>(c) == label ? 1.0 : 0.0) +
                            task.shared_noise * normal(rng);
      }
    }
    for (std::size_t i = 0; i < task.channels.size(); ++i) {
      const std::size_t d = task.channels[i];
      const linear::Matrix& mix = mixers[i];
      double* dst = out.sources[i].raw() + s * hw * d;
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t j = 0; j < d; ++j) {
          double v = 0.0;
          for (std::size_t c = 0; c < k; ++c) {
            v += mix(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) * shared[p * k + c];
          }
          dst[p * d + j] = task.signal[i] * v + task.private_noise * normal(rng);
        }
      }
    }
  }
  return out;
}

inline linear::Matrix random_mixer(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  linear::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
  }
  // Unit-norm rows keep every channel on the same scale.
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).normalize();
  return m;
}

}  // namespace detail

inline TaskData make_task(const SyntheticTask& task) {
  task.validate();
  TaskData out;
  switch (task.kind) {
    case TaskKind::linear_regression: {
      out.train = from_linear(linear::generate_linear_data(
          task.latent, static_cast<Eigen::Index>(task.n_train), task.distribution, task.seed));
      out.val = from_linear(linear::generate_linear_data(
          task.latent, static_cast<Eigen::Index>(task.n_val), task.distribution, task.seed + 1));
      break;
    }
    case TaskKind::nonlinear_regression: {
      std::mt19937_64 rng(task.seed ^ 0x9e3779b97f4a7c15ULL);
      const std::size_t in1 = static_cast<std::size_t>(task.latent.d1() + task.latent.d3());
      const std::size_t in2 = static_cast<std::size_t>(task.latent.d2() + task.latent.d3());
      const std::size_t out1 = task.source_dims.empty() ? in1 : task.source_dims[0];
      const std::size_t out2 = task.source_dims.empty() ? in2 : task.source_dims[1];
      std::vector<linear::Matrix> mixers{detail::random_mixer(out1, in1, rng),
                                         detail::random_mixer(out2, in2, rng)};
      out.train = detail::make_nonlinear(task, task.n_train, task.seed, mixers);
      out.val = detail::make_nonlinear(task, task.n_val, task.seed + 1, mixers);
      break;
    }
    case TaskKind::conv_classification: {
      std::mt19937_64 rng(task.seed);
      std::vector<linear::Matrix> mixers;
      for (auto d : task.channels) mixers.push_back(detail::random_mixer(d, task.n_classes, rng));
      out.train = detail::make_conv(task, task.n_train, rng, mixers);
      out.val = detail::make_conv(task, task.n_val, rng, mixers);
      break;
    }
  }
  return out;
}

}  // namespace robustfuse::tasks
