#pragma once

// Tape-based reverse-mode differentiation. Nodes are appended as operations are applied, so
// the tape is always in topological order; backward walks it in reverse.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"

namespace robustfuse::diff {

using NodeId = std::size_t;

enum class Activation { relu, identity, tanh };

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  throw config_error("unknown activation '" + s + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
  }
  return "relu";
}

class Graph {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  explicit Graph(ParameterRegistry* params = nullptr) : params_(params) {}

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return node(id).value; }
  const std::string& op(NodeId id) const { return node(id).op; }

  // Gradient of the last backward's loss with respect to a node (zeros if unreached).
  std::vector<double> grad(NodeId id) const {
    const auto& n = node(id);
    return n.grad.empty() ? std::vector<double>(n.value.size(), 0.0) : n.grad;
  }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  NodeId input(Tensor value, std::string name = "input", bool requires_grad = false) {
    const NodeId id = push(std::move(name), std::move(value), nullptr);
    nodes_[id].needs_grad = requires_grad;
    return id;
  }

  NodeId parameter(std::string_view name) {
    if (!params_) throw state_error("graph has no parameter registry");
    const std::size_t idx = params_->index(name);
    const NodeId id = push("param:" + std::string(name), (*params_)[idx].value, nullptr);
    nodes_[id].param = idx;
    nodes_[id].needs_grad = true;
    return id;
  }

  // y = x W^T + b over the last axis; x [..., in], W [out, in], b [out].
  NodeId dense(NodeId x, NodeId w, std::optional<NodeId> b = std::nullopt) {
    return linear_last_axis("dense", x, w, b);
  }

  // 1x1 convolution over an N x H x W x C feature map.
  NodeId conv1x1(NodeId x, NodeId w, std::optional<NodeId> b = std::nullopt) {
    if (value(x).rank() != 4) {
      throw shape_error(where(nodes_.size(), "conv1x1") + "expects a rank-4 input, got " +
                        shape_string(value(x).shape()));
    }
    return linear_last_axis("conv1x1", x, w, b);
  }

  NodeId activate(NodeId x, Activation act) {
    switch (act) {
      case Activation::relu: return relu(x);
      case Activation::tanh: return tanh(x);
      case Activation::identity: return x;
    }
    return x;
  }

  NodeId relu(NodeId x) {
    Tensor out = value(x);
    // NaN passes through so divergence stays visible in the loss.
    for (auto& v : out.values()) v = v < 0.0 ? 0.0 : v;
    return push("relu", std::move(out), [x](Graph& g, NodeId self) {
      const auto& in = g.value(x).values();
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (in[i] > 0.0) gx[i] += gy[i];
      }
    }, {x});
  }

  NodeId tanh(NodeId x) {
    Tensor out = value(x);
    for (auto& v : out.values()) v = std::tanh(v);
    return push("tanh", std::move(out), [x](Graph& g, NodeId self) {
      const auto& y = g.value(self).values();
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
    }, {x});
  }

  // Mean over the spatial axes: N x H x W x C -> N x C.
  NodeId mean_pool(NodeId x) {
    const Tensor& in = value(x);
    if (in.rank() != 4) {
      throw shape_error(where(nodes_.size(), "mean_pool") + "expects a rank-4 input, got " +
                        shape_string(in.shape()));
    }
    const std::size_t n = in.dim(0), hw = in.dim(1) * in.dim(2), c = in.dim(3);
    Tensor out({n, c});
    for (std::size_t s = 0; s < n; ++s) {
      Eigen::Map<const RowMatrix> block(in.raw() + s * hw * c, static_cast<Eigen::Index>(hw),
                                        static_cast<Eigen::Index>(c));
      Eigen::Map<Eigen::RowVectorXd> row(out.raw() + s * c, static_cast<Eigen::Index>(c));
      row = block.colwise().mean();
    }
    return push("mean_pool", std::move(out), [x, n, hw, c](Graph& g, NodeId self) {
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad_buffer(x);
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < hw; ++p) {
          double* dst = gx.data() + (s * hw + p) * c;
          const double* src = gy.data() + s * c;
          for (std::size_t k = 0; k < c; ++k) dst[k] += src[k] * inv;
        }
      }
    }, {x});
  }

  // Concatenates along the last axis; leading dimensions must agree.
  NodeId concat_channels(std::span<const NodeId> xs) {
    if (xs.empty()) throw shape_error(where(nodes_.size(), "concat") + "no inputs");
    const Shape lead = leading_shape(xs[0]);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (NodeId x : xs) {
      if (leading_shape(x) != lead) {
        throw shape_error(where(nodes_.size(), "concat") + "leading dims " +
                          shape_string(value(x).shape()) + " vs " +
                          shape_string(value(xs[0]).shape()));
      }
      widths.push_back(value(x).shape().back());
      total += widths.back();
    }
    Shape shape = value(xs[0]).shape();
    shape.back() = total;
    Tensor out(shape);
    const std::size_t rows = shape_size(lead);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Tensor& in = value(xs[i]);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(in.raw() + r * widths[i], widths[i], out.raw() + r * total + offset);
      }
      offset += widths[i];
    }
    std::vector<NodeId> parents(xs.begin(), xs.end());
    return push("concat", std::move(out), [parents, widths, rows, total](Graph& g, NodeId self) {
      const auto& gy = g.nodes_[self].grad;
      std::size_t off = 0;
      for (std::size_t i = 0; i < parents.size(); ++i) {
        auto& gx = g.grad_buffer(parents[i]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < widths[i]; ++k) gx[r * widths[i] + k] += gy[r * total + off + k];
        }
        off += widths[i];
      }
    }, std::span<const NodeId>(parents));
  }

  // Element-wise mean of equally shaped inputs.
  NodeId mean_of(std::span<const NodeId> xs) {
    if (xs.empty()) throw shape_error(where(nodes_.size(), "mean") + "no inputs");
    const Shape& shape = value(xs[0]).shape();
    for (NodeId x : xs) {
      if (value(x).shape() != shape) {
        throw shape_error(where(nodes_.size(), "mean") + "shape " +
                          shape_string(value(x).shape()) + " vs " + shape_string(shape));
      }
    }
    Tensor out(shape);
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (NodeId x : xs) {
      const auto& in = value(x).values();
      for (std::size_t i = 0; i < in.size(); ++i) out[i] += in[i] * inv;
    }
    std::vector<NodeId> parents(xs.begin(), xs.end());
    return push("mean", std::move(out), [parents, inv](Graph& g, NodeId self) {
      const auto& gy = g.nodes_[self].grad;
      for (NodeId p : parents) {
        auto& gx = g.grad_buffer(p);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * inv;
      }
    }, std::span<const NodeId>(parents));
  }

  NodeId add(NodeId a, NodeId b) {
    if (value(a).size() != value(b).size()) {
      throw shape_error(where(nodes_.size(), "add") + shape_string(value(a).shape()) + " vs " +
                        shape_string(value(b).shape()));
    }
    Tensor out = value(a);
    const auto& vb = value(b).values();
    for (std::size_t i = 0; i < vb.size(); ++i) out[i] += vb[i];
    return push("add", std::move(out), [a, b](Graph& g, NodeId self) {
      const auto gy = g.nodes_[self].grad;
      for (NodeId p : {a, b}) {
        auto& gx = g.grad_buffer(p);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
    }, {a, b});
  }

  NodeId scale(NodeId x, double factor) {
    Tensor out = value(x);
    for (auto& v : out.values()) v *= factor;
    return push("scale", std::move(out), [x, factor](Graph& g, NodeId self) {
      const auto& gy = g.nodes_[self].grad;
      auto& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
    }, {x});
  }

  // Mean squared error over all elements.
  NodeId mse(NodeId pred, NodeId target) {
    const auto& p = value(pred).values();
    const auto& t = value(target).values();
    if (p.size() != t.size()) {
      throw shape_error(where(nodes_.size(), "mse") + shape_string(value(pred).shape()) + " vs " +
                        shape_string(value(target).shape()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] - t[i]) * (p[i] - t[i]);
    const double inv = 1.0 / static_cast<double>(p.size());
    return push("mse", Tensor({1}, {sum * inv}), [pred, target, inv](Graph& g, NodeId self) {
      const double gy = g.nodes_[self].grad[0];
      const auto& pv = g.value(pred).values();
      const auto& tv = g.value(target).values();
      auto& gp = g.grad_buffer(pred);
      for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += gy * 2.0 * (pv[i] - tv[i]) * inv;
      if (!g.needs(target)) return;
      auto& gt = g.grad_buffer(target);
      for (std::size_t i = 0; i < pv.size(); ++i) gt[i] -= gy * 2.0 * (pv[i] - tv[i]) * inv;
    }, {pred, target});
  }

  // Mean of log(1 + exp(-y s)) with labels in {-1, +1}.
  NodeId logistic_loss(NodeId scores, std::span<const int> labels) {
    const auto& s = value(scores).values();
    if (s.size() != labels.size()) {
      throw shape_error(where(nodes_.size(), "logistic") + "score/label count mismatch");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double m = labels[i] * s[i];
      sum += std::max(-m, 0.0) + std::log1p(std::exp(-std::abs(m)));
    }
    const double inv = 1.0 / static_cast<double>(s.size());
    std::vector<int> y(labels.begin(), labels.end());
    return push("logistic", Tensor({1}, {sum * inv}), [scores, y, inv](Graph& g, NodeId self) {
      const double gy = g.nodes_[self].grad[0];
      const auto& sv = g.value(scores).values();
      auto& gs = g.grad_buffer(scores);
      for (std::size_t i = 0; i < sv.size(); ++i) {
        const double m = y[i] * sv[i];
        // d/dm log(1 + e^-m) = -1 / (1 + e^m)
        const double dm = m >= 0.0 ? -std::exp(-m) / (1.0 + std::exp(-m)) : -1.0 / (1.0 + std::exp(m));
        gs[i] += gy * dm * y[i] * inv;
      }
    }, {scores});
  }

  // Mean softmax cross-entropy of N x K logits against integer class labels.
  NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels) {
    const Tensor& z = value(logits);
    if (z.rank() != 2 || z.dim(0) != labels.size()) {
      throw shape_error(where(nodes_.size(), "softmax_xent") + "logits " +
                        shape_string(z.shape()) + " for " + std::to_string(labels.size()) +
                        " labels");
    }
    const std::size_t n = z.dim(0), k = z.dim(1);
    std::vector<double> probs(n * k);
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double* row = z.raw() + r * k;
      const double mx = *std::max_element(row, row + k);
      double denom = 0.0;
      for (std::size_t c = 0; c < k; ++c) denom += std::exp(row[c] - mx);
      for (std::size_t c = 0; c < k; ++c) probs[r * k + c] = std::exp(row[c] - mx) / denom;
      const auto label = static_cast<std::size_t>(labels[r]);
      if (labels[r] < 0 || label >= k) {
        throw shape_error(where(nodes_.size(), "softmax_xent") + "label out of range");
      }
      sum += -(row[label] - mx - std::log(denom));
    }
    const double inv = 1.0 / static_cast<double>(n);
    std::vector<int> y(labels.begin(), labels.end());
    return push("softmax_xent", Tensor({1}, {sum * inv}),
                [logits, probs = std::move(probs), y, n, k, inv](Graph& g, NodeId self) {
                  const double gy = g.nodes_[self].grad[0];
                  auto& gz = g.grad_buffer(logits);
                  for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < k; ++c) {
                      const double target = static_cast<std::size_t>(y[r]) == c ? 1.0 : 0.0;
                      gz[r * k + c] += gy * (probs[r * k + c] - target) * inv;
                    }
                  }
                }, {logits});
  }

  // lambda * ||w||_1 with subgradient lambda * sgn(w), sgn(0) = 0.
  NodeId l1_penalty(NodeId w, double lambda) {
    double sum = 0.0;
    for (double v : value(w).values()) sum += std::abs(v);
    return push("l1", Tensor({1}, {lambda * sum}), [w, lambda](Graph& g, NodeId self) {
      const double gy = g.nodes_[self].grad[0];
      const auto& wv = g.value(w).values();
      auto& gw = g.grad_buffer(w);
      for (std::size_t i = 0; i < wv.size(); ++i) {
        const double s = wv[i] > 0.0 ? 1.0 : (wv[i] < 0.0 ? -1.0 : 0.0);
        gw[i] += gy * lambda * s;
      }
    }, {w});
  }

  // 0.5 * ||w||^2
  NodeId half_squared_norm(NodeId w) {
    double sum = 0.0;
    for (double v : value(w).values()) sum += v * v;
    return push("half_sq", Tensor({1}, {0.5 * sum}), [w](Graph& g, NodeId self) {
      const double gy = g.nodes_[self].grad[0];
      const auto& wv = g.value(w).values();
      auto& gw = g.grad_buffer(w);
      for (std::size_t i = 0; i < wv.size(); ++i) gw[i] += gy * wv[i];
    }, {w});
  }

  // Populates gradients of every node reachable from `loss` and accumulates them into the
  // parameter registry.
  void backward(NodeId loss) {
    if (nodes_.empty() || loss >= nodes_.size()) {
      throw state_error("backward called before forward (node " + std::to_string(loss) + ")");
    }
    if (value(loss).size() != 1) {
      throw precondition_error("backward: loss node " + std::to_string(loss) + " is not scalar");
    }
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss)[0] = 1.0;
    for (NodeId id = loss + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.needs_grad) continue;
      if (n.backprop) n.backprop(*this, id);
      if (n.param) {
        auto dst = (*params_)[*n.param].value.grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
    backward_done_ = true;
  }

  bool backward_done() const noexcept { return backward_done_; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<double> grad;
    std::function<void(Graph&, NodeId)> backprop;
    std::optional<std::size_t> param;
    bool needs_grad = false;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) {
      throw state_error("node " + std::to_string(id) + " does not exist");
    }
    return nodes_[id];
  }

  static std::string where(NodeId id, const std::string& op) {
    return "node " + std::to_string(id) + " (" + op + "): ";
  }

  Shape leading_shape(NodeId x) const {
    Shape s = value(x).shape();
    if (s.empty()) throw shape_error("scalar has no channel axis");
    s.pop_back();
    return s;
  }

  std::vector<double>& grad_buffer(NodeId id) {
    auto& g = nodes_[id].grad;
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return g;
  }

  NodeId push(std::string op, Tensor value, std::function<void(Graph&, NodeId)> backprop,
              std::span<const NodeId> parents = {}) {
    bool needs = false;
    for (NodeId p : parents) needs = needs || nodes_[p].needs_grad;
    nodes_.push_back(
        {std::move(op), std::move(value), {}, std::move(backprop), std::nullopt, needs});
    backward_done_ = false;
    return nodes_.size() - 1;
  }

  NodeId push(std::string op, Tensor value, std::function<void(Graph&, NodeId)> backprop,
              std::initializer_list<NodeId> parents) {
    return push(std::move(op), std::move(value), std::move(backprop),
                std::span<const NodeId>(parents.begin(), parents.size()));
  }

  bool needs(NodeId id) const { return nodes_[id].needs_grad; }

  NodeId linear_last_axis(const char* op, NodeId x, NodeId w, std::optional<NodeId> b) {
    const Tensor& in = value(x);
    const Tensor& wt = value(w);
    if (in.rank() == 0 || wt.rank() != 2 || wt.dim(1) != in.shape().back()) {
      throw shape_error(where(nodes_.size(), op) + "input " + shape_string(in.shape()) +
                        " incompatible with weight " + shape_string(wt.shape()));
    }
    const auto in_dim = static_cast<Eigen::Index>(wt.dim(1));
    const auto out_dim = static_cast<Eigen::Index>(wt.dim(0));
    if (b && value(*b).size() != static_cast<std::size_t>(out_dim)) {
      throw shape_error(where(nodes_.size(), op) + "bias " + shape_string(value(*b).shape()) +
                        " for " + std::to_string(out_dim) + " outputs");
    }
    const auto rows = static_cast<Eigen::Index>(in.size() / static_cast<std::size_t>(in_dim));
    Shape shape = in.shape();
    shape.back() = static_cast<std::size_t>(out_dim);
    Tensor out(shape);
    Eigen::Map<const RowMatrix> X(in.raw(), rows, in_dim);
    Eigen::Map<const RowMatrix> W(wt.raw(), out_dim, in_dim);
    Eigen::Map<RowMatrix> Y(out.raw(), rows, out_dim);
    Y.noalias() = X * W.transpose();
    if (b) {
      Eigen::Map<const Eigen::RowVectorXd> bias(value(*b).raw(), out_dim);
      Y.rowwise() += bias;
    }
    std::vector<NodeId> deps{x, w};
    if (b) deps.push_back(*b);
    return push(op, std::move(out), [x, w, b, rows, in_dim, out_dim](Graph& g, NodeId self) {
      Eigen::Map<const RowMatrix> dY(g.nodes_[self].grad.data(), rows, out_dim);
      Eigen::Map<const RowMatrix> Xv(g.value(x).raw(), rows, in_dim);
      Eigen::Map<const RowMatrix> Wv(g.value(w).raw(), out_dim, in_dim);
      if (g.needs(x)) {
        Eigen::Map<RowMatrix> dX(g.grad_buffer(x).data(), rows, in_dim);
        dX.noalias() += dY * Wv;
      }
      if (g.needs(w)) {
        Eigen::Map<RowMatrix> dW(g.grad_buffer(w).data(), out_dim, in_dim);
        dW.noalias() += dY.transpose() * Xv;
      }
      if (b && g.needs(*b)) {
        Eigen::Map<Eigen::RowVectorXd> db(g.grad_buffer(*b).data(), out_dim);
        db += dY.colwise().sum();
      }
    }, std::span<const NodeId>(deps));
  }

  std::vector<Node> nodes_;
  ParameterRegistry* params_ = nullptr;
  bool backward_done_ = false;
};

}  // namespace robustfuse::diff
