#pragma once

// Randomized verification suites: closed forms against independent numeric oracles, and
// every differentiable layer against central finite differences.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "robustfuse/adversarial_analysis.hpp"
#include "robustfuse/diff/gradcheck.hpp"
#include "robustfuse/diff/graph.hpp"
#include "robustfuse/error.hpp"
#include "robustfuse/fusion_layers.hpp"
#include "robustfuse/linear_analysis.hpp"
#include "robustfuse/model.hpp"

namespace robustfuse::experiment {

struct PropertyResult {
  std::string name;
  bool pass = true;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  std::size_t cases = 0;
  std::string detail;
};

struct VerifyReport {
  std::string suite;
  std::vector<PropertyResult> properties;
  double seconds = 0.0;

  bool ok() const {
    return std::all_of(properties.begin(), properties.end(),
                       [](const PropertyResult& p) { return p.pass; });
  }
};

struct VerifyOptions {
  std::size_t specs = 100;
  std::uint64_t seed = 20190611;
  std::size_t grad_instances = 20;
  // Perturbs the closed forms by a relative 1e-4 so the agreement checks must fail.
  bool mutate = false;
};

// d_i in {1, 2, 3}, entries uniform on [-2, 2], sigma in {0.5, 1, 2}.
inline linear::LatentSpec random_latent_spec(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 3);
  std::uniform_real_distribution<double> entry(-2.0, 2.0);
  const double sigmas[] = {0.5, 1.0, 2.0};
  auto draw = [&] {
    linear::Vector v(dim(rng));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = entry(rng);
    return v;
  };
  linear::LatentSpec s;
  s.beta1 = draw();
  s.beta2 = draw();
  s.beta3 = draw();
  s.sigma = sigmas[std::uniform_int_distribution<int>(0, 2)(rng)];
  return s;
}

namespace detail {

class Property {
 public:
  Property(std::string name, double tolerance) {
    r_.name = std::move(name);
    r_.tolerance = tolerance;
  }
  void observe(double deviation) {
    ++r_.cases;
    if (!(deviation <= r_.max_deviation)) r_.max_deviation = deviation;
  }
  PropertyResult finish(std::string detail = {}) {
    r_.pass = r_.max_deviation <= r_.tolerance;
    r_.detail = std::move(detail);
    return r_;
  }

 private:
  PropertyResult r_;
};

inline double mutation(bool on) { return on ? 1.0 + 1e-4 : 1.0; }

template <class F>
VerifyReport timed(std::string suite, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  VerifyReport r{std::move(suite), body(), 0.0};
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

inline VerifyReport verify_linear(const VerifyOptions& opts = {}) {
  return detail::timed("linear", [&] {
    std::mt19937_64 rng(opts.seed);
    detail::Property agree("maxssn closed form vs oracle (relative)", 1e-6);
    detail::Property balance("balanced-case per-source losses equal", 1e-9);
    detail::Property feasible("g1 + g2 = beta3", 1e-12);
    detail::Property gap("gap >= lower bound (shortfall)", 1e-9);
    detail::Property scaling("sigma scaling t^2 (relative)", 1e-12);
    std::size_t dominance_branch = 0, ratio_branch = 0;
    for (std::size_t k = 0; k < opts.specs; ++k) {
      const auto s = random_latent_spec(rng);
      const auto closed = linear::solve_maxssn(s);
      const double closed_loss = closed.loss * detail::mutation(opts.mutate);
      const auto oracle = linear::oracle_minimax(s);
      agree.observe(std::abs(closed_loss - oracle.loss) / (1.0 + std::abs(oracle.loss)));

      const auto sol = linear::FusionSolution::error_free_with(s, closed.g1);
      if (closed.which == linear::MaxSsnCase::balanced) {
        balance.observe(std::abs(linear::expected_ssn_loss(s, sol, 1) -
                                 linear::expected_ssn_loss(s, sol, 2)));
      }
      const auto asn = linear::solve_asn_least_squares(s);
      feasible.observe(std::max((closed.g1 + closed.g2 - s.beta3).cwiseAbs().maxCoeff(),
                                (asn.g1 + asn.g2 - s.beta3).cwiseAbs().maxCoeff()));

      const auto g = linear::maxssn_gap_bound(s);
      gap.observe(std::max(0.0, g.lower_bound - g.actual_gap));
      (g.dominance_branch ? dominance_branch : ratio_branch) += 1;

      linear::LatentSpec scaled = s;
      scaled.sigma = 2.5 * s.sigma;
      scaling.observe(std::abs(linear::solve_maxssn(scaled).loss - 6.25 * closed.loss) /
                      (1.0 + 6.25 * closed.loss));
    }
    auto gap_result = gap.finish("dominance branch " + std::to_string(dominance_branch) +
                                 ", ratio branch " + std::to_string(ratio_branch));
    gap_result.pass = gap_result.pass && dominance_branch > 0 && ratio_branch > 0;
    return std::vector<PropertyResult>{agree.finish(), balance.finish(), feasible.finish(),
                                       gap_result, scaling.finish()};
  });
}

// Twenty specs whose ratio |c2 - c1| / ||beta3||_1 runs 0.1, 0.2, ..., 2.0.
inline std::vector<adversarial::AdvSpec> threshold_straddling_specs() {
  std::vector<adversarial::AdvSpec> out;
  for (int k = 1; k <= 20; ++k) {
    const double r = 0.1 * k;
    linear::Vector b1(2), b2(1), b3(2);
    b1 << 0.5, -0.5;
    b3 << 1.5, -0.5;
    b2 << -(1.0 + 2.0 * r);
    // Alternate which source dominates.
    if (k % 2 == 0) std::swap(b1, b2);
    out.push_back({b1, b2, b3, 1.0});
  }
  return out;
}

inline VerifyReport verify_adversarial(const VerifyOptions& opts = {}) {
  return detail::timed("adversarial", [&] {
    std::mt19937_64 rng(opts.seed + 1);
    detail::Property agree("l1 closed form vs oracle", 1e-6);
    detail::Property balance("balanced-case l1 balance and alpha in [0,1]", 1e-9);
    for (std::size_t k = 0; k < opts.specs; ++k) {
      const auto ls = random_latent_spec(rng);
      const adversarial::AdvSpec s{ls.beta1, ls.beta2, ls.beta3, 1.0};
      const auto closed = adversarial::solve_maxssn_adv(s);
      const auto oracle = adversarial::oracle_minimax_l1(s);
      agree.observe(std::abs(closed.gamma * detail::mutation(opts.mutate) - oracle.gamma));
      if (closed.which == adversarial::AdvCase::balanced) {
        const double lhs = s.beta1.lpNorm<1>() + closed.g1.lpNorm<1>();
        const double rhs = s.beta2.lpNorm<1>() + closed.g2.lpNorm<1>();
        const double outside = std::max({0.0, -closed.alpha.minCoeff(), closed.alpha.maxCoeff() - 1.0});
        balance.observe(std::max(std::abs(lhs - rhs), outside));
      }
    }

    detail::Property equal("equality when ratio <= 1", 1e-9);
    std::size_t strict = 0, strict_ok = 0;
    for (const auto& s : threshold_straddling_specs()) {
      const auto gc = adversarial::adv_gap_condition(s);
      const double c1 = s.beta1.lpNorm<1>(), c2 = s.beta2.lpNorm<1>();
      const double ratio = std::abs(c2 - c1) / s.beta3.lpNorm<1>();
      const double star = gc.maxssn_adv_star * detail::mutation(opts.mutate);
      if (ratio <= 1.0 + 1e-12) {
        equal.observe(std::abs(gc.maxssn_adv_prime - star) + (gc.strict_gap ? 1.0 : 0.0));
      } else {
        ++strict;
        if (gc.strict_gap && gc.maxssn_adv_prime - star > 1e-9) ++strict_ok;
      }
    }
    PropertyResult gap_result{"strict gap when ratio > 1", strict_ok == strict && strict > 0,
                              static_cast<double>(strict - strict_ok), 0.0, strict,
                              std::to_string(strict_ok) + "/" + std::to_string(strict) +
                                  " specs with positive gap"};
    return std::vector<PropertyResult>{agree.finish(), balance.finish(), equal.finish(), gap_result};
  });
}

namespace detail {

inline diff::Tensor random_tensor(diff::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  diff::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Records the case's scalar loss on `g`, reading parameters from the case's own registry.
using Builder = std::function<diff::NodeId(diff::Graph&, const diff::ParameterRegistry&)>;

// Reduces any node to a scalar through a fixed random target.
inline diff::NodeId to_scalar(diff::Graph& g, diff::NodeId x, const diff::Tensor& target) {
  return g.mse(x, g.input(target, "target"));
}

}  // namespace detail

struct LayerCase {
  std::string layer;
  diff::ParameterRegistry params;
  detail::Builder build;
};

// A fresh random instance of every layer type, with at most ~200 parameters each.
inline std::vector<LayerCase> gradient_cases(std::mt19937_64& rng) {
  using detail::pick;
  using detail::random_tensor;
  using diff::Graph;
  using diff::NodeId;
  using diff::ParamTag;
  std::vector<LayerCase> out;
  auto add = [&](std::string name) -> LayerCase& {
    out.push_back({std::move(name), {}, {}});
    return out.back();
  };

  {
    auto& c = add("dense");
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 5), o = pick(rng, 1, 4);
    c.params.add("x", ParamTag::head, random_tensor({n, in}, rng));
    c.params.add("w", ParamTag::head, random_tensor({o, in}, rng));
    c.params.add("b", ParamTag::head, random_tensor({o}, rng));
    auto target = random_tensor({n, o}, rng);
    c.build = [target](Graph& g, const diff::ParameterRegistry&) {
      return detail::to_scalar(g, g.dense(g.parameter("x"), g.parameter("w"), g.parameter("b")), target);
    };
  }
  {
    auto& c = add("conv1x1");
    const std::size_t n = pick(rng, 1, 2), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
    const std::size_t in = pick(rng, 1, 4), o = pick(rng, 1, 4);
    c.params.add("x", ParamTag::extractor, random_tensor({n, h, w, in}, rng));
    c.params.add("w", ParamTag::extractor, random_tensor({o, in}, rng));
    c.params.add("b", ParamTag::extractor, random_tensor({o}, rng));
    auto target = random_tensor({n, h, w, o}, rng);
    c.build = [target](Graph& g, const diff::ParameterRegistry&) {
      return detail::to_scalar(g, g.conv1x1(g.parameter("x"), g.parameter("w"), g.parameter("b")), target);
    };
  }
  for (const auto* act : {"relu", "tanh"}) {
    auto& c = add(act);
    const std::size_t n = pick(rng, 1, 20);
    c.params.add("x", ParamTag::head, random_tensor({n}, rng, 2.0));
    auto target = random_tensor({n}, rng);
    const auto a = diff::parse_activation(act);
    c.build = [target, a](Graph& g, const diff::ParameterRegistry&) { return detail::to_scalar(g, g.activate(g.parameter("x"), a), target); };
  }
  {
    auto& c = add("mean_pool");
    const std::size_t n = pick(rng, 1, 3), h = pick(rng, 1, 4), w = pick(rng, 1, 4), ch = pick(rng, 1, 4);
    c.params.add("x", ParamTag::head, random_tensor({n, h, w, ch}, rng));
    auto target = random_tensor({n, ch}, rng);
    c.build = [target](Graph& g, const diff::ParameterRegistry&) { return detail::to_scalar(g, g.mean_pool(g.parameter("x")), target); };
  }
  {
    auto& c = add("add_scale");
    const std::size_t n = pick(rng, 1, 10);
    c.params.add("a", ParamTag::head, random_tensor({n}, rng));
    c.params.add("b", ParamTag::head, random_tensor({n}, rng));
    auto target = random_tensor({n}, rng);
    const double k = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
    c.build = [target, k](Graph& g, const diff::ParameterRegistry&) {
      return detail::to_scalar(g, g.scale(g.add(g.parameter("a"), g.parameter("b")), k), target);
    };
  }
  {
    auto& c = add("mse");
    const std::size_t n = pick(rng, 1, 12);
    c.params.add("pred", ParamTag::head, random_tensor({n}, rng));
    c.params.add("target", ParamTag::head, random_tensor({n}, rng));
    c.build = [](Graph& g, const diff::ParameterRegistry&) { return g.mse(g.parameter("pred"), g.parameter("target")); };
  }
  {
    auto& c = add("logistic");
    const std::size_t n = pick(rng, 1, 12);
    c.params.add("s", ParamTag::head, random_tensor({n}, rng, 4.0));
    std::vector<int> y(n);
    for (auto& v : y) v = pick(rng, 0, 1) ? 1 : -1;
    c.build = [y](Graph& g, const diff::ParameterRegistry&) { return g.logistic_loss(g.parameter("s"), y); };
  }
  {
    auto& c = add("softmax_xent");
    const std::size_t n = pick(rng, 1, 6), k = pick(rng, 2, 5);
    c.params.add("z", ParamTag::head, random_tensor({n, k}, rng, 3.0));
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(pick(rng, 0, k - 1));
    c.build = [y](Graph& g, const diff::ParameterRegistry&) { return g.softmax_cross_entropy(g.parameter("z"), y); };
  }
  {
    auto& c = add("l1");
    const std::size_t n = pick(rng, 1, 20);
    c.params.add("w", ParamTag::fusion, random_tensor({n}, rng));
    const double lambda = std::uniform_real_distribution<double>(0.001, 1.0)(rng);
    c.build = [lambda](Graph& g, const diff::ParameterRegistry&) { return g.l1_penalty(g.parameter("w"), lambda); };
  }
  {
    auto& c = add("half_squared_norm");
    c.params.add("w", ParamTag::head, random_tensor({pick(rng, 1, 20)}, rng));
    c.build = [](Graph& g, const diff::ParameterRegistry&) { return g.half_squared_norm(g.parameter("w")); };
  }

  // Fusion ops over two or three source maps sharing spatial dims.
  const auto fusion_case = [&](const std::string& name, bool equal_depths) -> LayerCase& {
    auto& c = add(name);
    const std::size_t n = pick(rng, 1, 2), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
    const std::size_t ns = pick(rng, 2, 3), base = pick(rng, 1, 4);
    for (std::size_t i = 0; i < ns; ++i) {
      const std::size_t d = equal_depths ? base : pick(rng, 1, 4);
      c.params.add("z" + std::to_string(i), ParamTag::extractor, random_tensor({n, h, w, d}, rng));
    }
    return c;
  };
  const auto source_ids = [](Graph& g, const diff::ParameterRegistry& params) {
    std::vector<NodeId> ids;
    for (const auto& p : params) {
      if (p.tag == ParamTag::extractor) ids.push_back(g.parameter(p.name));
    }
    return ids;
  };
  {
    auto& c = fusion_case("fuse_mean", true);
    const auto& first = c.params[0].value.shape();
    auto target = random_tensor(first, rng);
    c.build = [target, source_ids](Graph& g, const diff::ParameterRegistry& params) {
      return detail::to_scalar(g, fusion::fuse_mean(g, source_ids(g, params)), target);
    };
  }
  {
    auto& c = fusion_case("fuse_concat", false);
    std::vector<std::size_t> depths;
    for (const auto& p : c.params) depths.push_back(p.value.shape().back());
    diff::Shape shape = c.params[0].value.shape();
    shape.back() = fusion::sum_depths(depths);
    auto target = random_tensor(shape, rng);
    c.build = [target, source_ids](Graph& g, const diff::ParameterRegistry& params) {
      return detail::to_scalar(g, fusion::fuse_concat(g, source_ids(g, params)), target);
    };
  }
  {
    auto& c = fusion_case("fuse_lel", false);
    std::vector<std::size_t> depths;
    for (const auto& p : c.params) depths.push_back(p.value.shape().back());
    const std::size_t d_hat = *std::max_element(depths.begin(), depths.end());
    const std::size_t d_sum = fusion::sum_depths(depths);
    c.params.add("lel.w", ParamTag::fusion, random_tensor({d_hat, d_sum}, rng));
    diff::Shape shape = c.params[0].value.shape();
    shape.back() = d_hat;
    auto target = random_tensor(shape, rng);
    const double l1 = std::uniform_real_distribution<double>(0.0, 0.1)(rng);
    c.build = [target, source_ids, l1](Graph& g, const diff::ParameterRegistry& params) {
      const NodeId w = g.parameter("lel.w");
      const NodeId fused = fusion::fuse_lel(g, source_ids(g, params), w);
      return g.add(detail::to_scalar(g, fused, target), fusion::lel_penalty(g, w, l1));
    };
  }
  return out;
}

inline VerifyReport verify_gradients(const VerifyOptions& opts = {}) {
  return detail::timed("gradients", [&] {
    std::mt19937_64 rng(opts.seed + 2);
    std::vector<std::string> order;
    std::vector<detail::Property> props;
    auto property = [&](const std::string& layer) -> std::size_t {
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] == layer) return i;
      }
      order.push_back(layer);
      props.emplace_back("finite differences: " + layer, 1e-4);
      return order.size() - 1;
    };
    std::size_t skipped = 0;
    for (std::size_t inst = 0; inst < opts.grad_instances; ++inst) {
      auto cases = gradient_cases(rng);
      for (auto& c : cases) {
        const auto r = diff::check_gradients(
            c.params, [&](diff::Graph& g) { return c.build(g, c.params); });
        const std::size_t i = property(c.layer);
        props[i].observe(r.max_rel_error);
        skipped += r.skipped_near_kink;
      }
      // Composed graph: a whole fusion network with its training loss.
      const std::size_t i = property("composed network (lel)");
      model::ModelSpec spec;
      spec.fusion = fusion::FusionKind::lel;
      spec.extractor = {{3}, {2}};
      spec.head = {3};
      spec.activation = diff::Activation::tanh;
      model::FusionNet net(spec, {{2, 2, 2}, {2, 2, 3}}, 3, true, rng());
      tasks::Dataset batch;
      batch.classification = true;
      batch.sources = {detail::random_tensor({2, 2, 2, 2}, rng), detail::random_tensor({2, 2, 2, 3}, rng)};
      batch.labels = {static_cast<int>(detail::pick(rng, 0, 2)), static_cast<int>(detail::pick(rng, 0, 2))};
      const auto r = diff::check_gradients(net.params(), [&](diff::Graph& g) {
        return net.loss(g, net.forward(g, batch.sources), batch);
      });
      props[i].observe(r.max_rel_error);
      skipped += r.skipped_near_kink;
    }
    std::vector<PropertyResult> out;
    for (auto& p : props) out.push_back(p.finish());
    if (!out.empty()) out.back().detail = std::to_string(skipped) + " coordinates skipped at kinks";
    return out;
  });
}

inline VerifyReport verify_suite(const std::string& suite, const VerifyOptions& opts = {}) {
  if (suite == "linear") return verify_linear(opts);
  if (suite == "adversarial") return verify_adversarial(opts);
  if (suite == "gradients") return verify_gradients(opts);
  throw config_error("unknown verification suite '" + suite + "'");
}

inline std::vector<VerifyReport> verify_all(const std::string& suite, const VerifyOptions& opts = {}) {
  if (suite != "all") return {verify_suite(suite, opts)};
  return {verify_linear(opts), verify_adversarial(opts), verify_gradients(opts)};
}

}  // namespace robustfuse::experiment
