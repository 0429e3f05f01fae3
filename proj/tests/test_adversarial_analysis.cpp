#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "robustfuse/adversarial_analysis.hpp"
#include "test_util.hpp"

namespace {

using namespace robustfuse;
using namespace robustfuse::adversarial;
using robustfuse::testing::random_adv_spec;
using robustfuse::testing::vec;

double logistic_of(const FusionSolution& sol, const Vector& x1, const Vector& x2, int y) {
  return logistic_loss(y * linear::predict_fdir(sol, x1, x2));
}

Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

TEST(Fgs, ZeroBudgetAndSignExample) {
  const FusionSolution sol{vec({1, -2}), vec({4}), vec({3}), vec({0})};
  const auto z = fgs_attack(sol, 1, 0.0);
  EXPECT_EQ(z.eta1.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(z.eta2.cwiseAbs().maxCoeff(), 0.0);

  const auto a = fgs_attack(sol, 1, 0.5);
  EXPECT_EQ(a.eta1, vec({-0.5, 0.5, -0.5}));
  // sgn(0) = 0 leaves the zero-weight coordinate untouched
  EXPECT_EQ(a.eta2, vec({-0.5, 0.0}));
  EXPECT_EQ(fgs_attack(sol, -1, 0.5).eta1, vec({0.5, -0.5, 0.5}));
}

TEST(Fgs, RejectsBadLabelAndBudget) {
  const FusionSolution sol{vec({1}), vec({1}), vec({1}), vec({1})};
  EXPECT_THROW(fgs_attack(sol, 0, 0.1), precondition_error);
  EXPECT_THROW(fgs_attack(sol, 1, -0.1), precondition_error);
}

TEST(Fgs, NeverDecreasesLogisticLoss) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 1000; ++k) {
    const FusionSolution sol{random_vector(rng, 2, 2), random_vector(rng, 1, 2),
                             random_vector(rng, 2, 2), random_vector(rng, 2, 2)};
    const Vector x1 = random_vector(rng, 4, 3), x2 = random_vector(rng, 3, 3);
    const int y = k % 2 ? 1 : -1;
    const auto eta = fgs_attack(sol, y, 0.3);
    EXPECT_GE(logistic_of(sol, x1 + eta.eta1, x2 + eta.eta2, y), logistic_of(sol, x1, x2, y));
  }
}

TEST(Fgs, DominatesRandomPerturbationsInBudget) {
  std::mt19937_64 rng(6);
  const double eps = 0.25;
  for (int k = 0; k < 1000; ++k) {
    const FusionSolution sol{random_vector(rng, 1, 2), random_vector(rng, 2, 2),
                             random_vector(rng, 2, 2), random_vector(rng, 2, 2)};
    const Vector x1 = random_vector(rng, 3, 3), x2 = random_vector(rng, 4, 3);
    const int y = k % 2 ? 1 : -1;
    const auto eta = fgs_attack(sol, y, eps);
    const double fgs = logistic_of(sol, x1 + eta.eta1, x2 + eta.eta2, y);
    for (int r = 0; r < 50; ++r) {
      const Vector d1 = random_vector(rng, 3, eps), d2 = random_vector(rng, 4, eps);
      EXPECT_LE(logistic_of(sol, x1 + d1, x2 + d2, y), fgs + 1e-12);
    }
  }
}

TEST(Logistic, StrictlyDecreasingOnGrid) {
  double prev = logistic_loss(-20.0);
  for (int i = 1; i <= 40000; ++i) {
    const double x = -20.0 + 1e-3 * i;
    const double cur = logistic_loss(x);
    ASSERT_LT(cur, prev) << "at " << x;
    prev = cur;
  }
}

TEST(Logistic, ClassifyZeroAsPositive) {
  EXPECT_EQ(classify(0.0), 1);
  EXPECT_EQ(classify(-1e-300), -1);
  EXPECT_EQ(sgn(0.0), 0.0);
}

TEST(ReducedObjective, Values) {
  const FusionSolution zero{vec({0}), vec({0}), vec({0}), vec({0})};
  EXPECT_EQ(adv_reduced_objective(zero, 3.0), 0.0);
  const FusionSolution sol{vec({1}), vec({2}), vec({2}), vec({0})};
  EXPECT_EQ(adv_reduced_objective(sol, 1.0), 3.0);
  EXPECT_EQ(adv_reduced_objective(sol, 2.0), 6.0);
}

TEST(SolveMaxssnAdv, Source2Dominant) {
  const auto r = solve_maxssn_adv({vec({1}), vec({5}), vec({2}), 1.0});
  EXPECT_EQ(r.which, AdvCase::source2_dominant);
  EXPECT_EQ(r.gamma, 5.0);
  EXPECT_EQ(r.g1, vec({2}));
  EXPECT_EQ(r.g2, vec({0}));
}

TEST(SolveMaxssnAdv, NoSharedFeature) {
  const auto r = solve_maxssn_adv({vec({1, -1}), vec({2}), vec({0}), 1.0});
  EXPECT_EQ(r.gamma, 2.0);
  EXPECT_EQ(r.g1, vec({0}));
  EXPECT_EQ(r.g2, vec({0}));
}

TEST(SolveMaxssnAdv, BalancedExample) {
  const auto r = solve_maxssn_adv({vec({1}), vec({2}), vec({4}), 1.0});
  EXPECT_EQ(r.which, AdvCase::balanced);
  EXPECT_DOUBLE_EQ(r.gamma, 3.5);
  EXPECT_DOUBLE_EQ(r.alpha(0), 0.625);
  EXPECT_DOUBLE_EQ(r.g1.lpNorm<1>(), 2.5);
  EXPECT_DOUBLE_EQ(1 + r.g1.lpNorm<1>(), 2 + r.g2.lpNorm<1>());
}

TEST(SolveMaxssnAdv, InvariantsOnRandomSpecs) {
  std::mt19937_64 rng(31);
  for (int k = 0; k < 200; ++k) {
    const auto s = random_adv_spec(rng);
    const auto r = solve_maxssn_adv(s);
    EXPECT_LE((r.g1 + r.g2 - s.beta3).cwiseAbs().maxCoeff(), 1e-12);
    const double c1 = s.beta1.lpNorm<1>(), c2 = s.beta2.lpNorm<1>();
    if (r.which == AdvCase::balanced) {
      EXPECT_NEAR(r.g1.lpNorm<1>() + r.g2.lpNorm<1>(), s.beta3.lpNorm<1>(), 1e-9);
      EXPECT_GE(r.alpha.minCoeff(), 0.0);
      EXPECT_LE(r.alpha.maxCoeff(), 1.0);
      EXPECT_NEAR(c1 + r.g1.lpNorm<1>(), c2 + r.g2.lpNorm<1>(), 1e-9);
    }
  }
}

TEST(SolveMaxssnAdv, MiddleCaseAlphaDegeneracy) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int tested = 0;
  while (tested < 30) {
    const auto s = random_adv_spec(rng);
    const auto r = solve_maxssn_adv(s);
    if (r.which != AdvCase::balanced || s.beta3.size() < 2) continue;
    ++tested;
    const double target = r.gamma - s.beta1.lpNorm<1>();
    const Vector v = s.beta3.cwiseAbs();
    for (int k = 0; k < 20; ++k) {
      // Random alpha in [0,1]^d3 rescaled so that sum alpha_i |v_i| hits the target.
      Vector a(v.size());
      for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = u(rng);
      double mass = a.dot(v);
      for (int it = 0; it < 60 && std::abs(mass - target) > 1e-13; ++it) {
        if (mass < target) {
          a = a + (Vector::Ones(a.size()) - a) * ((target - mass) / (v.dot(Vector::Ones(a.size()) - a)));
        } else {
          a = a * (target / mass);
        }
        mass = a.dot(v);
      }
      ASSERT_NEAR(mass, target, 1e-9);
      const Vector g1 = a.cwiseProduct(s.beta3);
      const FusionSolution sol{s.beta1, s.beta2, g1, s.beta3 - g1};
      EXPECT_NEAR(adv_reduced_objective(sol, 1.0), r.gamma, 1e-9);
    }
  }
}

TEST(GapCondition, Examples) {
  const auto eq = adv_gap_condition({vec({1}), vec({2}), vec({4}), 1.0});
  EXPECT_FALSE(eq.strict_gap);
  EXPECT_DOUBLE_EQ(eq.maxssn_adv_star, 3.5);
  EXPECT_DOUBLE_EQ(eq.maxssn_adv_prime, 3.5);

  const auto gap = adv_gap_condition({vec({1}), vec({5}), vec({2}), 1.0});
  EXPECT_TRUE(gap.strict_gap);
  EXPECT_DOUBLE_EQ(gap.maxssn_adv_star, 5.0);
  EXPECT_DOUBLE_EQ(gap.maxssn_adv_prime, 6.0);

  const auto zero = adv_gap_condition({vec({1}), vec({5}), vec({2}), 0.0});
  EXPECT_EQ(zero.maxssn_adv_star, 0.0);
  EXPECT_EQ(zero.maxssn_adv_prime, 0.0);

  const auto flat = adv_gap_condition({vec({1}), vec({5}), vec({0}), 1.0});
  EXPECT_FALSE(flat.strict_gap);
  EXPECT_EQ(flat.maxssn_adv_star, flat.maxssn_adv_prime);
}

TEST(L1Oracle, Examples) {
  EXPECT_NEAR(oracle_minimax_l1({vec({1}), vec({5}), vec({2}), 1.0}).gamma, 5.0, 1e-6);
  EXPECT_NEAR(oracle_minimax_l1({vec({1}), vec({2}), vec({4}), 1.0}).gamma, 3.5, 1e-6);
  EXPECT_NEAR(oracle_minimax_l1({vec({1}), vec({1}), vec({2}), 1.0}).gamma, 2.0, 1e-6);
}

TEST(L1Oracle, AgreesWithClosedForm) {
  std::mt19937_64 rng(33);
  for (int k = 0; k < 50; ++k) {
    const auto s = random_adv_spec(rng);
    const auto o = oracle_minimax_l1(s);
    EXPECT_NEAR(o.gamma, solve_maxssn_adv(s).gamma, 1e-6) << "spec " << k;
    EXPECT_LE(o.dual_bound, o.gamma + 1e-12);
  }
}

}  // namespace
