#pragma once

// Single-source robustness of the linear fusion classifier sgn(f_dir) against
// fast-gradient-sign attacks with an l-infinity budget.

#include <algorithm>
#include <cmath>
#include <string>

#include "robustfuse/error.hpp"
#include "robustfuse/linear_analysis.hpp"

namespace robustfuse::adversarial {

using linear::FusionSolution;
using linear::Vector;

struct AdvSpec {
  Vector beta1;
  Vector beta2;
  Vector beta3;
  double epsilon = 1.0;

  void validate() const {
    if (beta1.size() < 1 || beta2.size() < 1 || beta3.size() < 1) {
      throw config_error("adversarial spec: every beta must have at least one entry");
    }
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
      throw config_error("adversarial spec: epsilon must be finite and nonnegative");
    }
    if (!beta1.allFinite() || !beta2.allFinite() || !beta3.allFinite()) {
      throw config_error("adversarial spec: beta entries must be finite");
    }
  }
};

enum class AdvCase { source2_dominant = 1, source1_dominant = 2, balanced = 3 };

struct AdvSolution {
  double gamma = 0.0;  // optimum of the reduced problem before the epsilon factor
  Vector g1;
  Vector g2;
  Vector alpha;  // g1 = alpha .* beta3
  AdvCase which = AdvCase::balanced;
};

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// l(x) = log(1 + exp(-x))
inline double logistic_loss(double margin) {
  return std::max(-margin, 0.0) + std::log1p(std::exp(-std::abs(margin)));
}

// Classifier decision; a zero score is classified as +1.
inline int classify(double score) { return score >= 0.0 ? 1 : -1; }

struct FgsPerturbation {
  Vector eta1;
  Vector eta2;
};

inline FgsPerturbation fgs_attack(const FusionSolution& sol, int label, double epsilon) {
  if (label != 1 && label != -1) {
    throw precondition_error("fgs_attack: label must be -1 or +1");
  }
  if (epsilon < 0.0) {
    throw precondition_error("fgs_attack: epsilon must be nonnegative");
  }
  const double scale = -epsilon * label;
  auto signs = [scale](const Vector& w, const Vector& g) {
    Vector out(w.size() + g.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) out(i) = scale * sgn(w(i));
    for (Eigen::Index i = 0; i < g.size(); ++i) out(w.size() + i) = scale * sgn(g(i));
    return out;
  };
  return {signs(sol.w1, sol.g1), signs(sol.w2, sol.g2)};
}

inline double adv_reduced_objective(const FusionSolution& sol, double epsilon) {
  const double a = sol.w1.lpNorm<1>() + sol.g1.lpNorm<1>();
  const double b = sol.w2.lpNorm<1>() + sol.g2.lpNorm<1>();
  return epsilon * std::max(a, b);
}

inline AdvSolution solve_maxssn_adv(const AdvSpec& spec) {
  spec.validate();
  const auto d3 = spec.beta3.size();
  const double c1 = spec.beta1.lpNorm<1>();
  const double c2 = spec.beta2.lpNorm<1>();
  const double v1 = spec.beta3.lpNorm<1>();

  AdvSolution out;
  if (c1 + v1 <= c2) {
    out.gamma = c2;
    out.alpha = Vector::Ones(d3);
    out.which = AdvCase::source2_dominant;
  } else if (c2 + v1 <= c1) {
    out.gamma = c1;
    out.alpha = Vector::Zero(d3);
    out.which = AdvCase::source1_dominant;
  } else {
    out.gamma = 0.5 * (c1 + c2 + v1);
    out.alpha = Vector::Constant(d3, (out.gamma - c1) / v1);
    out.which = AdvCase::balanced;
  }
  out.g1 = out.alpha.cwiseProduct(spec.beta3);
  out.g2 = spec.beta3 - out.g1;
  return out;
}

struct AdvGap {
  bool strict_gap = false;
  double maxssn_adv_star = 0.0;
  double maxssn_adv_prime = 0.0;
  Vector prime_alpha;
};

// Compares the single-source optimum against the model trained on attacks to all sources at
// once. Every split g1 = alpha .* beta3 with alpha in [0,1] minimizes the all-source objective;
// when a balancing split exists inside that family it is chosen, otherwise the canonical
// alpha = 1/2 split is evaluated.
inline AdvGap adv_gap_condition(const AdvSpec& spec) {
  const auto star = solve_maxssn_adv(spec);
  const double c1 = spec.beta1.lpNorm<1>();
  const double c2 = spec.beta2.lpNorm<1>();
  const double v1 = spec.beta3.lpNorm<1>();
  const auto d3 = spec.beta3.size();

  AdvGap out;
  out.maxssn_adv_star = spec.epsilon * star.gamma;
  if (v1 == 0.0) {
    out.prime_alpha = Vector::Constant(d3, 0.5);
    out.maxssn_adv_prime = out.maxssn_adv_star;
    return out;
  }
  const double balancing = (0.5 * (c1 + c2 + v1) - c1) / v1;
  const bool balanced = balancing >= 0.0 && balancing <= 1.0;
  out.prime_alpha = Vector::Constant(d3, balanced ? balancing : 0.5);
  const Vector g1 = out.prime_alpha.cwiseProduct(spec.beta3);
  const Vector g2 = spec.beta3 - g1;
  out.maxssn_adv_prime = spec.epsilon * std::max(c1 + g1.lpNorm<1>(), c2 + g2.lpNorm<1>());
  out.strict_gap = std::abs(c2 - c1) / v1 > 1.0;
  return out;
}

struct L1OracleOptions {
  double resolution = 0.0;  // grid step; <= 0 selects ||beta3||_inf / 50
  std::size_t max_grid_points = 1'000'000;
  int max_sweeps = 200;
  double certify_tolerance = 1e-9;
};

struct L1OracleResult {
  double gamma = 0.0;
  Vector g1;
  double dual_bound = 0.0;
};

namespace detail {

// Minimizes a convex function of one variable on [lo, hi] by ternary search.
template <class F>
double ternary_min(F&& f, double lo, double hi, int iters = 200) {
  for (int k = 0; k < iters && hi - lo > 1e-15 * (1.0 + std::abs(lo) + std::abs(hi)); ++k) {
    const double m1 = lo + (hi - lo) / 3.0;
    const double m2 = hi - (hi - lo) / 3.0;
    if (f(m1) <= f(m2)) {
      hi = m2;
    } else {
      lo = m1;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Numerical minimax of max{c1 + ||g||_1, c2 + ||g - beta3||_1}: grid over the box between 0 and
// beta3, exact-line coordinate descent, and a dual lower bound over the multiplier.
inline L1OracleResult oracle_minimax_l1(const AdvSpec& spec, const L1OracleOptions& opts = {}) {
  spec.validate();
  const auto d = spec.beta3.size();
  const Vector& v = spec.beta3;
  const double c1 = spec.beta1.lpNorm<1>();
  const double c2 = spec.beta2.lpNorm<1>();
  auto objective = [&](const Vector& g) {
    return std::max(c1 + g.lpNorm<1>(), c2 + (g - v).lpNorm<1>());
  };

  Vector best = Vector::Zero(d);
  double best_val = objective(best);
  const double vmax = v.lpNorm<Eigen::Infinity>();
  if (vmax > 0.0) {
    const double step = opts.resolution > 0.0 ? opts.resolution : vmax / 50.0;
    auto per_axis = static_cast<std::size_t>(std::floor(vmax / step)) + 1;
    const auto cap = static_cast<std::size_t>(
        std::floor(std::pow(static_cast<double>(opts.max_grid_points), 1.0 / static_cast<double>(d))));
    per_axis = std::max<std::size_t>(std::min(per_axis, cap), 2);
    // Coordinate i ranges over [min(0, v_i), max(0, v_i)].
    std::vector<std::size_t> idx(static_cast<std::size_t>(d), 0);
    Vector g = Vector::Zero(d);
    while (true) {
      for (Eigen::Index k = 0; k < d; ++k) {
        g(k) = v(k) * static_cast<double>(idx[static_cast<std::size_t>(k)]) /
               static_cast<double>(per_axis - 1);
      }
      if (const double val = objective(g); val < best_val) {
        best_val = val;
        best = g;
      }
      Eigen::Index k = 0;
      for (; k < d; ++k) {
        if (++idx[static_cast<std::size_t>(k)] < per_axis) break;
        idx[static_cast<std::size_t>(k)] = 0;
      }
      if (k == d) break;
    }

    g = best;
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
      const double before = best_val;
      for (Eigen::Index k = 0; k < d; ++k) {
        const double lo = std::min(0.0, v(k)) - vmax;
        const double hi = std::max(0.0, v(k)) + vmax;
        auto along = [&](double t) {
          Vector trial = g;
          trial(k) = t;
          return objective(trial);
        };
        g(k) = detail::ternary_min(along, lo, hi);
        if (const double val = objective(g); val < best_val) {
          best_val = val;
          best = g;
        } else {
          g = best;
        }
      }
      if (before - best_val <= 1e-15) break;
    }
  }

  // Dual: the Lagrangian separates per coordinate and each piece attains its minimum at a
  // breakpoint (0 or v_i).
  auto dual_at = [&](double l) {
    double q = l * c1 + (1.0 - l) * c2;
    for (Eigen::Index k = 0; k < d; ++k) {
      const double at_zero = (1.0 - l) * std::abs(v(k));
      const double at_v = l * std::abs(v(k));
      q += std::min(at_zero, at_v);
    }
    return q;
  };
  const double lambda = linear::detail::golden_section_max(dual_at, 200);
  const double dual = std::max({dual_at(lambda), dual_at(0.0), dual_at(0.5), dual_at(1.0)});
  if (best_val - dual > opts.certify_tolerance * (1.0 + std::abs(best_val))) {
    throw convergence_error("oracle_minimax_l1: primal " + std::to_string(best_val) +
                            " vs dual " + std::to_string(dual) + " not certified");
  }
  return {best_val, best, dual};
}

}  // namespace robustfuse::adversarial
