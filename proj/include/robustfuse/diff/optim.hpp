#pragma once

#include <cmath>
#include <vector>

#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"

namespace robustfuse::diff {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with per-parameter moment state and step counters. Parameters outside the tag filter
// are left untouched, including their optimizer state.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) { check_lr(opts_.lr); }

  double lr() const noexcept { return opts_.lr; }
  void set_lr(double lr) {
    check_lr(lr);
    opts_.lr = lr;
  }

  void step(ParameterRegistry& params, TagFilter tags = TagFilter::all()) {
    if (state_.size() < params.size()) state_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!tags.contains(p.tag)) continue;
      auto& st = state_[i];
      const std::size_t n = p.value.size();
      if (st.m.size() != n) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
        st.t = 0;
      }
      ++st.t;
      const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(st.t));
      const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(st.t));
      auto w = p.value.data();
      auto g = p.value.grad();
      for (std::size_t k = 0; k < n; ++k) {
        st.m[k] = opts_.beta1 * st.m[k] + (1.0 - opts_.beta1) * g[k];
        st.v[k] = opts_.beta2 * st.v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
        const double mhat = st.m[k] / c1;
        const double vhat = st.v[k] / c2;
        w[k] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
      }
    }
  }

 private:
  static void check_lr(double lr) {
    if (!(lr > 0.0)) throw config_error("learning rate must be positive");
  }

  struct State {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
  };

  AdamOptions opts_;
  std::vector<State> state_;
};

class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {
    if (!(lr > 0.0)) throw config_error("learning rate must be positive");
  }

  void step(ParameterRegistry& params, TagFilter tags = TagFilter::all()) {
    for (auto& p : params) {
      if (!tags.contains(p.tag)) continue;
      auto w = p.value.data();
      auto g = p.value.grad();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr_ * g[k];
    }
  }

 private:
  double lr_;
};

}  // namespace robustfuse::diff
