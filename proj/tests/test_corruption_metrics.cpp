#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "robustfuse/corruption.hpp"
#include "robustfuse/metrics.hpp"
#include "robustfuse/model.hpp"
#include "robustfuse/stats.hpp"
#include "robustfuse/tasks.hpp"
#include "robustfuse/training.hpp"

namespace {

using namespace robustfuse;
using corruption::CorruptionKind;
using corruption::CorruptionSpec;
using diff::Shape;
using diff::Tensor;

Tensor ramp(Shape shape) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0 + static_cast<double>(i % 17);
  return t;
}

CorruptionSpec gaussian_spec(double tau, double factor = 0.75, std::uint64_t seed = 1) {
  CorruptionSpec s;
  s.kind = CorruptionKind::gaussian;
  s.tau = tau;
  s.factor = factor;
  s.seed = seed;
  return s;
}

CorruptionSpec downsample_spec() {
  CorruptionSpec s;
  s.kind = CorruptionKind::downsample;
  return s;
}

TEST(Corrupt, NoneAndZeroFactorAreIdentity) {
  const Tensor x = ramp({2, 8, 8, 3});
  EXPECT_EQ(corruption::corrupt(x, CorruptionSpec{}), x);
  EXPECT_EQ(corruption::corrupt(x, gaussian_spec(1.0, 0.0)), x);
}

TEST(Corrupt, SpecValidation) {
  const Tensor x = ramp({1, 2, 2, 1});
  auto bad = gaussian_spec(1.0, -0.5);
  EXPECT_THROW(corruption::corrupt(x, bad), config_error);
  auto ratio = downsample_spec();
  ratio.keep_ratio = 0.0;
  EXPECT_THROW(corruption::corrupt(x, ratio), config_error);
  ratio.keep_ratio = 1.5;
  EXPECT_THROW(corruption::corrupt(x, ratio), config_error);
  EXPECT_THROW(corruption::corrupt(x, gaussian_spec(0.0)), precondition_error);
}

TEST(Corrupt, DownsampleKeepsRowsZeroAndFour) {
  const Tensor x = ramp({2, 8, 3, 2});
  const Tensor y = corruption::corrupt(x, downsample_spec());
  const std::size_t row = 3 * 2;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t k = 0; k < row; ++k) {
        const std::size_t i = (n * 8 + r) * row + k;
        if (r == 0 || r == 4) {
          EXPECT_EQ(y[i], x[i]);
        } else {
          EXPECT_EQ(y[i], 0.0);
        }
      }
    }
  }
}

TEST(Corrupt, DownsampleOtherAxesAndRatios) {
  const Tensor x = ramp({1, 4, 6, 1});
  auto spec = downsample_spec();
  spec.axis = 2;
  spec.keep_ratio = 1.0 / 3.0;
  const Tensor y = corruption::corrupt(x, spec);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_EQ(y[r * 6 + c], c % 3 == 0 ? x[r * 6 + c] : 0.0);
    }
  }
  spec.keep_ratio = 1.0;
  EXPECT_EQ(corruption::corrupt(x, spec), x);
  spec.axis = 4;
  EXPECT_THROW(corruption::corrupt(x, spec), shape_error);
}

TEST(Corrupt, DownsampleIsIdempotent) {
  const Tensor x = ramp({3, 8, 8, 2});
  const Tensor once = corruption::corrupt(x, downsample_spec());
  EXPECT_EQ(corruption::corrupt(once, downsample_spec()), once);
}

TEST(Corrupt, DeterministicPerSeed) {
  const Tensor x = ramp({2, 4, 4, 3});
  EXPECT_EQ(corruption::corrupt(x, gaussian_spec(1.0, 0.75, 5)),
            corruption::corrupt(x, gaussian_spec(1.0, 0.75, 5)));
  EXPECT_NE(corruption::corrupt(x, gaussian_spec(1.0, 0.75, 5)),
            corruption::corrupt(x, gaussian_spec(1.0, 0.75, 6)));
}

TEST(Corrupt, GaussianVarianceOverMillionDraws) {
  const double tau = 2.0;
  const Tensor x({10000, 10, 10, 1});
  const Tensor y = corruption::corrupt(x, gaussian_spec(tau, 0.75, 17));
  std::vector<double> v(y.data().begin(), y.data().end());
  ASSERT_EQ(v.size(), 1'000'000u);
  const double sd = stats::stddev(v);
  const double target = (0.75 * tau) * (0.75 * tau);
  EXPECT_NEAR(sd * sd / target, 1.0, 0.01);
  EXPECT_NEAR(stats::mean(v), 0.0, 5.0 * 0.75 * tau / 1000.0);
}

TEST(Corrupt, PerBatchNoiseRepeatsAcrossSamples) {
  const Tensor x({4, 2, 2, 1});
  auto spec = gaussian_spec(1.0);
  spec.per_sample_noise = false;
  const Tensor y = corruption::corrupt(x, spec);
  for (std::size_t n = 1; n < 4; ++n) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y[n * 4 + k], y[k]);
  }
}

TEST(Corrupt, EmpiricalTauIsPopulationStddev) {
  EXPECT_DOUBLE_EQ(corruption::empirical_tau(Tensor({4}, {1, 3, 1, 3})), 1.0);
  EXPECT_EQ(corruption::empirical_tau(Tensor({3}, {2, 2, 2})), 0.0);
}

TEST(Tasks, LinearTaskDelegatesToGenerator) {
  tasks::SyntheticTask task;
  task.n_train = 50;
  task.n_val = 20;
  task.seed = 9;
  task.latent = {linear::Vector::Constant(2, 1.0), linear::Vector::Constant(1, -1.0),
                 linear::Vector::Constant(3, 0.5), 1.0};
  const auto data = tasks::make_task(task);
  const auto ref = linear::generate_linear_data(task.latent, 50,
                                                linear::LatentDistribution::standard_normal, 9);
  ASSERT_EQ(data.train.sources[0].shape(), (Shape{50, 1, 1, 5}));
  ASSERT_EQ(data.train.sources[1].shape(), (Shape{50, 1, 1, 4}));
  for (Eigen::Index r = 0; r < 50; ++r) {
    for (Eigen::Index c = 0; c < 5; ++c) EXPECT_EQ(data.train.sources[0][r * 5 + c], ref.x1(r, c));
    for (Eigen::Index c = 0; c < 4; ++c) EXPECT_EQ(data.train.sources[1][r * 4 + c], ref.x2(r, c));
    EXPECT_EQ(data.train.targets[r], ref.y(r));
  }
  EXPECT_EQ(data.val.size(), 20u);
}

TEST(Tasks, ConvShapesAndDeterminism) {
  tasks::SyntheticTask task;
  task.kind = tasks::TaskKind::conv_classification;
  task.n_train = 30;
  task.n_val = 10;
  const auto a = tasks::make_task(task);
  EXPECT_EQ(a.train.sources[0].shape(), (Shape{30, 8, 8, 4}));
  EXPECT_EQ(a.train.sources[1].shape(), (Shape{30, 8, 8, 6}));
  EXPECT_TRUE(a.train.classification);
  EXPECT_EQ(a.train.labels.size(), 30u);
  for (int y : a.train.labels) {
    EXPECT_GE(y, 0);
    EXPECT_LT(y, 4);
  }
  const auto b = tasks::make_task(task);
  EXPECT_EQ(a.train.sources[1], b.train.sources[1]);
  EXPECT_EQ(a.val.labels, b.val.labels);
}

TEST(Tasks, NonlinearSourcesAreBounded) {
  tasks::SyntheticTask task;
  task.kind = tasks::TaskKind::nonlinear_regression;
  task.n_train = 40;
  task.source_dims = {5, 7};
  const auto d = tasks::make_task(task);
  EXPECT_EQ(d.train.sources[0].shape(), (Shape{40, 1, 1, 5}));
  EXPECT_EQ(d.train.sources[1].shape(), (Shape{40, 1, 1, 7}));
  for (double v : d.train.sources[1].data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Tasks, InvalidTasksAreConfigErrors) {
  tasks::SyntheticTask task;
  task.n_train = 0;
  EXPECT_THROW(tasks::make_task(task), config_error);
  task.n_train = 10;
  task.kind = tasks::TaskKind::conv_classification;
  task.signal = {1.0};
  EXPECT_THROW(tasks::make_task(task), config_error);
  EXPECT_THROW(tasks::parse_task_kind("lidar_detection"), config_error);
}

TEST(Tasks, SharedPatternRecoverableFromSourceOneAlone) {
  tasks::SyntheticTask task;
  task.kind = tasks::TaskKind::conv_classification;
  task.n_train = 2000;
  task.n_val = 1000;
  task.presence = 0.2;
  task.private_noise = 1.5;
  const auto full = tasks::make_task(task);
  auto only_first = [](tasks::Dataset d) {
    d.sources.resize(1);
    return d;
  };
  const auto train = only_first(full.train), val = only_first(full.val);
  model::ModelSpec spec;
  spec.extractor = {{4}};
  spec.head = {16};
  auto probe = model::build_model(spec, train, 4);
  training::TrainConfig cfg;
  cfg.algorithm = training::Algorithm::clean;
  cfg.iterations = 1500;
  cfg.lr = 3e-3;
  cfg.seed = 4;
  training::train(probe, train, cfg);
  // Chance is 1/4; three standard errors above it at n = 1000 is about 0.29.
  EXPECT_GT(probe.metric(val), 0.30);
}

TEST(Stats, StudentTQuantileMatchesTable) {
  EXPECT_NEAR(stats::t_critical(0.95, 4), 2.776, 5e-4);
  EXPECT_NEAR(stats::t_critical(0.95, 1), 12.706, 5e-4);
  EXPECT_NEAR(stats::t_critical(0.99, 10), 3.169, 5e-4);
  EXPECT_THROW(stats::t_critical(1.0, 4), config_error);
}

TEST(Stats, ConfidenceIntervalOfFiveValues) {
  const std::vector<double> xs{1, 2, 3, 4, 5};
  const auto ci = stats::confidence_interval(xs, 0.95);
  EXPECT_DOUBLE_EQ(ci.mean, 3.0);
  EXPECT_DOUBLE_EQ(ci.stddev, std::sqrt(2.5));
  ASSERT_TRUE(ci.low && ci.high);
  EXPECT_NEAR(ci.half_width(), 2.776 * std::sqrt(2.5) / std::sqrt(5.0), 1e-3);
  const auto single = stats::confidence_interval(std::vector<double>{7.0}, 0.95);
  EXPECT_FALSE(single.low.has_value());
  EXPECT_EQ(stats::median({3, 1, 2, 10}), 2.5);
}

struct ReportFixture : ::testing::Test {
  void SetUp() override {
    tasks::SyntheticTask task;
    task.kind = tasks::TaskKind::conv_classification;
    task.n_train = 200;
    task.n_val = 300;
    data = tasks::make_task(task);
    model::ModelSpec spec;
    spec.extractor = {{4}, {4}};
    spec.head = {8};
    net.emplace(model::build_model(spec, data.train, 2));
    training::TrainConfig cfg;
    cfg.algorithm = training::Algorithm::clean;
    cfg.iterations = 200;
    cfg.lr = 3e-3;
    training::train(*net, data.train, cfg);
  }

  std::vector<CorruptionSpec> gaussian_specs() const {
    auto specs = training::resolve_tau({gaussian_spec(0.0, 0.75, 11), gaussian_spec(0.0, 0.75, 12)},
                                       data.train);
    return specs;
  }

  tasks::TaskData data;
  std::optional<model::FusionNet> net;
};

TEST_F(ReportFixture, NoneSpecsReproduceClean) {
  const std::vector<CorruptionSpec> specs(2);
  const auto r = metrics::evaluate_robustness(*net, data.val, specs, 3, 0.95);
  for (const auto& s : r.per_source) EXPECT_EQ(s.mean, r.clean.mean);
  EXPECT_EQ(r.max_diff, 0.0);
  EXPECT_EQ(r.min_metric, r.clean.mean);
}

TEST_F(ReportFixture, InvariantsAndStudentTWidths) {
  const auto specs = gaussian_specs();
  const auto r = metrics::evaluate_robustness(*net, data.val, specs, 5, 0.95);
  ASSERT_EQ(r.per_source.size(), 2u);
  double lo = r.per_source[0].mean;
  for (const auto& s : r.per_source) {
    EXPECT_LE(r.min_metric, s.mean);
    lo = std::min(lo, s.mean);
    ASSERT_TRUE(s.low.has_value());
    EXPECT_NEAR(s.half_width(), 2.776 * s.stddev / std::sqrt(5.0), 1e-3 * (s.stddev + 1e-12));
  }
  EXPECT_EQ(r.min_metric, lo);
  EXPECT_EQ(r.max_diff, std::abs(r.per_source[0].mean - r.per_source[1].mean));
  EXPECT_GE(r.max_diff, 0.0);
  EXPECT_NEAR(r.clean.stddev, 0.0, 1e-12);

  const auto again = metrics::evaluate_robustness(*net, data.val, specs, 5, 0.95);
  EXPECT_EQ(again.per_source[1].mean, r.per_source[1].mean);
  EXPECT_EQ(again.asn.mean, r.asn.mean);
}

TEST_F(ReportFixture, SingleTrialHasNoInterval) {
  const auto r = metrics::evaluate_robustness(*net, data.val, gaussian_specs(), 1, 0.95);
  EXPECT_FALSE(r.per_source[0].low.has_value());
  EXPECT_FALSE(r.asn.low.has_value());
}

TEST_F(ReportFixture, RejectsBadArguments) {
  const auto specs = gaussian_specs();
  EXPECT_THROW(metrics::evaluate_robustness(*net, data.val, specs, 0, 0.95), config_error);
  EXPECT_THROW(metrics::evaluate_robustness(*net, data.val, specs, 3, 1.0), config_error);
  const std::vector<CorruptionSpec> one(1);
  EXPECT_THROW(metrics::evaluate_robustness(*net, data.val, one, 3, 0.95), config_error);
}

TEST_F(ReportFixture, ModelIgnoringSourceTwoIsUnaffectedByIt) {
  // Zero weights and bias on source 2's extractor make its features identically zero.
  for (const char* name : {"src2.conv0.w", "src2.conv0.b"}) {
    for (auto& v : net->params().at(name).value.values()) v = 0.0;
  }
  const auto r = metrics::evaluate_robustness(*net, data.val, gaussian_specs(), 3, 0.95);
  EXPECT_EQ(r.per_source[1].mean, r.clean.mean);
  EXPECT_EQ(r.per_source[1].stddev, 0.0);
}

}  // namespace
