#pragma once

#include <initializer_list>
#include <random>

#include "robustfuse/adversarial_analysis.hpp"
#include "robustfuse/linear_analysis.hpp"

namespace robustfuse::testing {

inline linear::Vector vec(std::initializer_list<double> xs) {
  linear::Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

// d_i in {1, 2, 3}, entries uniform on [-2, 2], sigma in {0.5, 1, 2}.
inline linear::LatentSpec random_spec(std::mt19937_64& rng) {
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

inline adversarial::AdvSpec random_adv_spec(std::mt19937_64& rng, double epsilon = 1.0) {
  const auto s = random_spec(rng);
  return {s.beta1, s.beta2, s.beta3, epsilon};
}

}  // namespace robustfuse::testing
