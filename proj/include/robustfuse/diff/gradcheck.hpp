#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "robustfuse/diff/graph.hpp"

namespace robustfuse::diff {

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tolerance = 1e-4;
  double denom_floor = 1e-2;  // relative error is taken against max(|a|, |n|, floor)
  double kink_tolerance = 1e-3;
};

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t skipped_near_kink = 0;
  double max_rel_error = 0.0;
  std::string worst;
  bool ok = true;
};

// Compares analytic parameter gradients against central finite differences. `build` records
// the loss on a fresh graph and returns its node. Coordinates where the two one-sided
// differences disagree sit on a kink (ReLU, |.|) and are skipped.
template <class Build>
GradCheckResult check_gradients(ParameterRegistry& params, Build&& build,
                                const GradCheckOptions& opts = {}) {
  auto eval = [&] {
    Graph g(&params);
    const NodeId loss = build(g);
    return g.value(loss)[0];
  };
  params.zero_grad();
  {
    Graph g(&params);
    g.backward(build(g));
  }
  const double f0 = eval();
  GradCheckResult out;
  for (auto& p : params) {
    const std::vector<double> analytic(p.value.grad().begin(), p.value.grad().end());
    auto w = p.value.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + opts.step;
      const double fp = eval();
      w[i] = orig - opts.step;
      const double fm = eval();
      w[i] = orig;
      const double fwd = (fp - f0) / opts.step;
      const double bwd = (f0 - fm) / opts.step;
      const double central = (fp - fm) / (2.0 * opts.step);
      const double scale = std::max({std::abs(fwd), std::abs(bwd), 1.0});
      if (std::abs(fwd - bwd) > opts.kink_tolerance * scale) {
        ++out.skipped_near_kink;
        continue;
      }
      ++out.checked;
      const double a = analytic[i];
      const double err = std::abs(a - central);
      const double denom = std::max(std::abs(a), std::abs(central));
      const double rel = err / std::max(denom, opts.denom_floor);
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  out.ok = out.max_rel_error <= opts.rel_tolerance;
  return out;
}

}  // namespace robustfuse::diff
