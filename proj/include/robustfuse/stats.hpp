#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "robustfuse/error.hpp"

namespace robustfuse::stats {

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double stddev(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Two-sided Student-t critical value for the given confidence and degrees of freedom.
inline double t_critical(double confidence, double dof) {
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw config_error("confidence must be in (0, 1)");
  }
  boost::math::students_t dist(dof);
  return boost::math::quantile(dist, 0.5 + 0.5 * confidence);
}

struct Interval {
  double mean = 0.0;
  double stddev = 0.0;
  std::optional<double> low;  // empty when fewer than two values exist
  std::optional<double> high;

  double half_width() const { return low ? mean - *low : 0.0; }
};

inline Interval confidence_interval(std::span<const double> xs, double confidence) {
  Interval out;
  out.mean = mean(xs);
  out.stddev = stddev(xs);
  if (xs.size() >= 2) {
    const double h = t_critical(confidence, static_cast<double>(xs.size() - 1)) * out.stddev /
                     std::sqrt(static_cast<double>(xs.size()));
    out.low = out.mean - h;
    out.high = out.mean + h;
  }
  return out;
}

}  // namespace robustfuse::stats
