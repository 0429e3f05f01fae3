#pragma once

// Two-source linear fusion model:
//   x1 = [z1; z3], x2 = [z2; z3], y = beta1'z1 + beta2'z2 + beta3'z3
// and the single-source-noise (MaxSSN) optimum over the shared weights g1, g2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "robustfuse/error.hpp"

namespace robustfuse::linear {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double feasibility_tolerance = 1e-12;

struct LatentSpec {
  Vector beta1;
  Vector beta2;
  Vector beta3;
  double sigma = 1.0;

  Eigen::Index d1() const { return beta1.size(); }
  Eigen::Index d2() const { return beta2.size(); }
  Eigen::Index d3() const { return beta3.size(); }

  void validate() const {
    if (d1() < 1 || d2() < 1 || d3() < 1) {
      throw config_error("latent spec: every beta must have at least one entry");
    }
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
      throw config_error("latent spec: sigma must be finite and nonnegative");
    }
    if (!beta1.allFinite() || !beta2.allFinite() || !beta3.allFinite()) {
      throw config_error("latent spec: beta entries must be finite");
    }
  }

  friend bool operator==(const LatentSpec& a, const LatentSpec& b) {
    auto same = [](const Vector& x, const Vector& y) { return x.size() == y.size() && x == y; };
    return same(a.beta1, b.beta1) && same(a.beta2, b.beta2) && same(a.beta3, b.beta3) &&
           a.sigma == b.sigma;
  }
};

struct FusionSolution {
  Vector w1;
  Vector w2;
  Vector g1;
  Vector g2;

  // h1 = [w1; g1], h2 = [w2; g2]
  Vector h1() const {
    Vector h(w1.size() + g1.size());
    h << w1, g1;
    return h;
  }
  Vector h2() const {
    Vector h(w2.size() + g2.size());
    h << w2, g2;
    return h;
  }

  bool error_free(const LatentSpec& spec, double tol = feasibility_tolerance) const {
    if (w1.size() != spec.d1() || w2.size() != spec.d2() || g1.size() != spec.d3() ||
        g2.size() != spec.d3()) {
      return false;
    }
    return (w1 - spec.beta1).cwiseAbs().maxCoeff() <= tol &&
           (w2 - spec.beta2).cwiseAbs().maxCoeff() <= tol &&
           (g1 + g2 - spec.beta3).cwiseAbs().maxCoeff() <= tol;
  }

  static FusionSolution error_free_with(const LatentSpec& spec, const Vector& g1) {
    return FusionSolution{spec.beta1, spec.beta2, g1, spec.beta3 - g1};
  }
};

struct LinearDataset {
  Eigen::Index n = 0;
  Matrix x1;  // n x (d1 + d3)
  Matrix x2;  // n x (d2 + d3)
  Vector y;
  std::uint64_t seed = 0;
};

enum class LatentDistribution { standard_normal, uniform };

inline LatentDistribution parse_latent_distribution(std::string_view id) {
  if (id == "normal" || id == "standard_normal" || id.empty()) {
    return LatentDistribution::standard_normal;
  }
  if (id == "uniform") {
    return LatentDistribution::uniform;
  }
  throw config_error("unsupported latent distribution '" + std::string(id) + "'");
}

inline std::string to_string(LatentDistribution d) {
  return d == LatentDistribution::uniform ? "uniform" : "normal";
}

inline LinearDataset generate_linear_data(const LatentSpec& spec, Eigen::Index n,
                                          LatentDistribution dist, std::uint64_t seed) {
  spec.validate();
  if (n < 1) {
    throw config_error("generate_linear_data: n must be >= 1");
  }
  const auto d1 = spec.d1(), d2 = spec.d2(), d3 = spec.d3();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  auto draw = [&] { return dist == LatentDistribution::uniform ? uniform(rng) : normal(rng); };

  LinearDataset data;
  data.n = n;
  data.seed = seed;
  data.x1.resize(n, d1 + d3);
  data.x2.resize(n, d2 + d3);
  data.y.resize(n);
  Vector z1(d1), z2(d2), z3(d3);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (auto i = 0; i < d1; ++i) z1(i) = draw();
    for (auto i = 0; i < d2; ++i) z2(i) = draw();
    for (auto i = 0; i < d3; ++i) z3(i) = draw();
    data.x1.row(r) << z1.transpose(), z3.transpose();
    data.x2.row(r) << z2.transpose(), z3.transpose();
    data.y(r) = spec.beta1.dot(z1) + spec.beta2.dot(z2) + spec.beta3.dot(z3);
  }
  return data;
}

inline double predict_fdir(const FusionSolution& sol, const Vector& x1, const Vector& x2) {
  if (x1.size() != sol.w1.size() + sol.g1.size() || x2.size() != sol.w2.size() + sol.g2.size()) {
    throw shape_error("predict_fdir: source dimensions do not match the solution");
  }
  return sol.h1().dot(x1) + sol.h2().dot(x2);
}

// sigma^2 (||beta_s||^2 + ||g_s||^2); valid only on the error-free family.
inline double expected_ssn_loss(const LatentSpec& spec, const FusionSolution& sol, int source) {
  if (source != 1 && source != 2) {
    throw precondition_error("expected_ssn_loss: source must be 1 or 2");
  }
  if (!sol.error_free(spec)) {
    throw precondition_error("expected_ssn_loss: solution is not error-free");
  }
  const double s2 = spec.sigma * spec.sigma;
  return source == 1 ? s2 * (spec.beta1.squaredNorm() + sol.g1.squaredNorm())
                     : s2 * (spec.beta2.squaredNorm() + sol.g2.squaredNorm());
}

enum class MaxSsnCase { source2_dominant = 1, source1_dominant = 2, balanced = 3 };

struct MaxSsnSolution {
  double loss = 0.0;
  Vector g1;
  Vector g2;
  MaxSsnCase which = MaxSsnCase::balanced;
};

inline MaxSsnSolution solve_maxssn(const LatentSpec& spec) {
  spec.validate();
  const double s2 = spec.sigma * spec.sigma;
  const double c1 = spec.beta1.squaredNorm();
  const double c2 = spec.beta2.squaredNorm();
  const double v2 = spec.beta3.squaredNorm();
  const Vector zero = Vector::Zero(spec.d3());

  // Ties on a case boundary resolve to the dominance case.
  if (c1 + v2 <= c2) {
    return {s2 * c2, spec.beta3, zero, MaxSsnCase::source2_dominant};
  }
  if (c2 + v2 <= c1) {
    return {s2 * c1, zero, spec.beta3, MaxSsnCase::source1_dominant};
  }
  // Reaching here implies |c2 - c1| < v2, so v2 > 0.
  const double diff = c2 - c1;
  const double t = 0.5 * (1.0 + diff / v2);
  MaxSsnSolution out;
  out.loss = s2 * (0.5 * (c1 + c2) + 0.25 * v2 + diff * diff / (4.0 * v2));
  out.g1 = t * spec.beta3;
  out.g2 = spec.beta3 - out.g1;
  out.which = MaxSsnCase::balanced;
  return out;
}

struct AsnSolution {
  double asn_loss = 0.0;
  Vector g1;
  Vector g2;
  double induced_maxssn_loss = 0.0;
};

// Minimizer of the all-source-noise expected loss: g1 = g2 = beta3 / 2.
inline AsnSolution solve_asn_least_squares(const LatentSpec& spec) {
  spec.validate();
  const double s2 = spec.sigma * spec.sigma;
  const double c1 = spec.beta1.squaredNorm();
  const double c2 = spec.beta2.squaredNorm();
  const double v2 = spec.beta3.squaredNorm();
  AsnSolution out;
  out.g1 = 0.5 * spec.beta3;
  out.g2 = spec.beta3 - out.g1;
  out.asn_loss = s2 * (c1 + c2 + 0.5 * v2);
  out.induced_maxssn_loss = s2 * std::max(c1 + 0.25 * v2, c2 + 0.25 * v2);
  return out;
}

struct GapBound {
  double actual_gap = 0.0;
  double lower_bound = 0.0;
  bool dominance_branch = false;  // |c2 - c1| / ||beta3||^2 >= 1
};

inline GapBound maxssn_gap_bound(const LatentSpec& spec) {
  const auto ssn = solve_maxssn(spec);
  const auto asn = solve_asn_least_squares(spec);
  const double s2 = spec.sigma * spec.sigma;
  const double spread = std::abs(spec.beta2.squaredNorm() - spec.beta1.squaredNorm());
  const double v2 = spec.beta3.squaredNorm();
  GapBound out;
  out.actual_gap = asn.induced_maxssn_loss - ssn.loss;
  out.dominance_branch = v2 == 0.0 || spread >= v2;
  out.lower_bound = out.dominance_branch ? s2 * 0.25 * v2 : s2 * 0.25 * spread;
  return out;
}

struct OracleOptions {
  double resolution = 0.0;  // grid step per coordinate; <= 0 selects ||beta3|| / 100
  int refine_iters = 200;
  std::size_t max_grid_points = 1'000'000;
  double certify_tolerance = 1e-9;  // relative primal/dual gap accepted
};

struct OracleResult {
  double loss = 0.0;
  Vector g1;
  Vector g2;
  double dual_bound = 0.0;
  std::size_t grid_points = 0;
};

namespace detail {

// Visits every point of a d-dimensional axis-aligned grid.
template <class Visit>
void for_each_grid_point(Eigen::Index dims, const Vector& lo, double step, std::size_t per_axis,
                         Visit&& visit) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(dims), 0);
  Vector point = lo;
  while (true) {
    visit(point);
    Eigen::Index k = 0;
    for (; k < dims; ++k) {
      auto& i = idx[static_cast<std::size_t>(k)];
      if (++i < per_axis) {
        point(k) = lo(k) + static_cast<double>(i) * step;
        break;
      }
      i = 0;
      point(k) = lo(k);
    }
    if (k == dims) return;
  }
}

// Maximizes a concave function on [0, 1] by golden-section search.
template <class F>
double golden_section_max(F&& f, int iters) {
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.0, b = 1.0;
  double c = b - invphi * (b - a), d = a + invphi * (b - a);
  double fc = f(c), fd = f(d);
  for (int k = 0; k < iters && b - a > 1e-15; ++k) {
    if (fc < fd) {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = f(d);
    } else {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = f(c);
    }
  }
  return 0.5 * (a + b);
}

}  // namespace detail

// Numerical minimax of max{s^2(c1 + ||g||^2), s^2(c2 + ||g - beta3||^2)} without the case
// analysis: coarse grid, diminishing-step subgradient descent, then a Lagrangian dual
// (golden section over the multiplier, gradient descent inside) that lower-bounds the optimum.
inline OracleResult oracle_minimax(const LatentSpec& spec, const OracleOptions& opts = {}) {
  spec.validate();
  const auto d = spec.d3();
  const Vector& v = spec.beta3;
  const double c1 = spec.beta1.squaredNorm();
  const double c2 = spec.beta2.squaredNorm();
  const double vnorm = v.norm();
  auto objective = [&](const Vector& g) {
    return std::max(c1 + g.squaredNorm(), c2 + (g - v).squaredNorm());
  };

  OracleResult out;
  Vector best = Vector::Zero(d);
  double best_val = objective(best);

  if (vnorm > 0.0) {
    double step = opts.resolution > 0.0 ? opts.resolution : vnorm / 100.0;
    auto per_axis = static_cast<std::size_t>(std::floor(3.0 * vnorm / step)) + 1;
    const auto cap = static_cast<std::size_t>(
        std::floor(std::pow(static_cast<double>(opts.max_grid_points), 1.0 / static_cast<double>(d))));
    if (per_axis > cap) {
      per_axis = std::max<std::size_t>(cap, 2);
      step = 3.0 * vnorm / static_cast<double>(per_axis - 1);
    }
    const Vector lo = Vector::Constant(d, -vnorm);
    detail::for_each_grid_point(d, lo, step, per_axis, [&](const Vector& g) {
      ++out.grid_points;
      const double val = objective(g);
      if (val < best_val) {
        best_val = val;
        best = g;
      }
    });

    Vector g = best;
    for (int k = 1; k <= opts.refine_iters; ++k) {
      const bool first_active = c1 + g.squaredNorm() >= c2 + (g - v).squaredNorm();
      Vector sub = first_active ? Vector(2.0 * g) : Vector(2.0 * (g - v));
      const double n = sub.norm();
      if (n == 0.0) break;
      g -= (step / k) * sub / n;
      const double val = objective(g);
      if (val < best_val) {
        best_val = val;
        best = g;
      }
    }
  }

  // Dual: q(l) = min_g l*f1(g) + (1-l)*f2(g), concave in l.
  Vector inner_g = Vector::Zero(d);
  auto inner_min = [&](double l) {
    Vector g = inner_g;
    for (int it = 0; it < 100; ++it) {
      Vector grad = 2.0 * l * g + 2.0 * (1.0 - l) * (g - v);
      if (grad.norm() < 1e-15 * (1.0 + vnorm)) break;
      g -= 0.5 * grad;  // the Lagrangian has Hessian 2I
    }
    inner_g = g;
    return l * (c1 + g.squaredNorm()) + (1.0 - l) * (c2 + (g - v).squaredNorm());
  };
  const double lambda = detail::golden_section_max(inner_min, std::max(opts.refine_iters, 80));
  const double dual = std::max({inner_min(lambda), inner_min(0.0), inner_min(1.0)});
  // The dual peak is flat, so lambda is only accurate to ~sqrt(eps). Along the Lagrangian
  // minimizers f1 - f2 is nonincreasing in l; bisecting its sign recovers the primal point.
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-17; ++it) {
    const double mid = 0.5 * (lo + hi);
    inner_min(mid);
    const double h = (c1 + inner_g.squaredNorm()) - (c2 + (inner_g - v).squaredNorm());
    (h > 0.0 ? lo : hi) = mid;
  }
  for (const double l : {lambda, lo, hi}) {
    inner_min(l);
    if (const double val = objective(inner_g); val < best_val) {
      best_val = val;
      best = inner_g;
    }
  }

  const double s2 = spec.sigma * spec.sigma;
  if (best_val - dual > opts.certify_tolerance * (1.0 + std::abs(best_val))) {
    throw convergence_error("oracle_minimax: primal " + std::to_string(best_val) + " vs dual " +
                            std::to_string(dual) + " not certified");
  }
  out.loss = s2 * best_val;
  out.dual_bound = s2 * dual;
  out.g1 = best;
  out.g2 = v - best;
  return out;
}

struct ErrorProfile {
  double rms_source1 = 0.0;
  double rms_source2 = 0.0;
};

// Scalar model with unbalanced shared weights g1 = delta, g2 = c3 - delta.
inline ErrorProfile unbalanced_error_profile(double c1, double c2, double c3, double delta,
                                             double sigma) {
  return {sigma * std::sqrt(c1 * c1 + delta * delta),
          sigma * std::sqrt(c2 * c2 + (c3 - delta) * (c3 - delta))};
}

}  // namespace robustfuse::linear
