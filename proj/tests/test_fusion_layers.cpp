#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "robustfuse/diff/gradcheck.hpp"
#include "robustfuse/experiment/verify.hpp"
#include "robustfuse/fusion_layers.hpp"
#include "robustfuse/model.hpp"
#include "robustfuse/stats.hpp"
#include "robustfuse/tasks.hpp"
#include "robustfuse/training.hpp"

namespace {

using namespace robustfuse;
using namespace robustfuse::fusion;
using diff::Activation;
using diff::Shape;
using diff::Tensor;

Tensor random_map(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Channel c of pixel p in an a x b x d map stored row-major.
double at(const Tensor& t, std::size_t p, std::size_t c) { return t[p * t.shape().back() + c]; }

TEST(FuseMean, SingleSourceIsIdentity) {
  std::mt19937_64 rng(1);
  const Tensor z = random_map({3, 2, 4}, rng);
  EXPECT_EQ(fuse_mean(FeatureStack{{z}}), z);
}

TEST(FuseMean, ZeroSourceHalvesTheOther) {
  std::mt19937_64 rng(2);
  const Tensor z = random_map({2, 2, 3}, rng);
  const Tensor out = fuse_mean(FeatureStack{{z, Tensor(z.shape())}});
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(out[i], z[i] / 2.0);
}

TEST(FuseMean, UnequalDepthsAreShapeError) {
  EXPECT_THROW(fuse_mean(FeatureStack{{Tensor({2, 2, 4}), Tensor({2, 2, 6})}}), shape_error);
}

TEST(FeatureStackTest, SpatialMismatchIsShapeError) {
  const FeatureStack s{{Tensor({2, 2, 4}), Tensor({2, 3, 4})}};
  EXPECT_THROW(s.validate(), shape_error);
  EXPECT_THROW(FeatureStack{}.validate(), shape_error);
  const FeatureStack ok{{Tensor({2, 2, 4}), Tensor({2, 2, 6})}};
  EXPECT_EQ(ok.d_sum(), 10u);
  EXPECT_EQ(ok.d_hat(), 6u);
}

TEST(FuseConcat, DepthAndChannelSelection) {
  std::mt19937_64 rng(3);
  const Tensor a = random_map({2, 3, 2}, rng), b = random_map({2, 3, 3}, rng);
  const Tensor out = fuse_concat(FeatureStack{{a, b}});
  EXPECT_EQ(out.shape(), (Shape{2, 3, 5}));
  EXPECT_EQ(diff::slice_channels(out, 0, 2), a);
  EXPECT_EQ(diff::slice_channels(out, 2, 3), b);

  const Tensor swapped = fuse_concat(FeatureStack{{b, a}});
  EXPECT_EQ(diff::slice_channels(swapped, 0, 3), b);
  EXPECT_EQ(diff::slice_channels(swapped, 3, 2), a);
}

TEST(FuseLel, SelectorWeightsPickChannels) {
  std::mt19937_64 rng(4);
  const Tensor a = random_map({2, 2, 2}, rng, 0.0, 1.0), b = random_map({2, 2, 3}, rng, 0.0, 1.0);
  // d_hat = 3 rows over d_sum = 5 stacked channels: pick stacked 4, 0, 2.
  Tensor w({3, 5});
  w[0 * 5 + 4] = 1.0;
  w[1 * 5 + 0] = 1.0;
  w[2 * 5 + 2] = 1.0;
  const Tensor out = fuse_lel(FeatureStack{{a, b}}, LELParams{w});
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_EQ(at(out, p, 0), at(b, p, 2));
    EXPECT_EQ(at(out, p, 1), at(a, p, 0));
    EXPECT_EQ(at(out, p, 2), at(b, p, 0));
  }
  EXPECT_EQ(lel_sparsity_report(w), (std::vector<std::size_t>{1, 1, 1}));
}

TEST(FuseLel, OutputDepthIsMaxDepth) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 20; ++k) {
    const std::size_t d1 = 1 + rng() % 6, d2 = 1 + rng() % 6;
    const FeatureStack s{{random_map({2, 2, d1}, rng), random_map({2, 2, d2}, rng)}};
    const Tensor w = random_map({std::max(d1, d2), d1 + d2}, rng);
    EXPECT_EQ(fuse_lel(s, LELParams{w}).shape(), (Shape{2, 2, std::max(d1, d2)}));
  }
  const FeatureStack s46{{Tensor({8, 8, 4}), Tensor({8, 8, 6})}};
  EXPECT_EQ(fuse_lel(s46, LELParams{Tensor({6, 10})}).shape().back(), 6u);
}

TEST(FuseLel, ZeroWeightsGiveZeroOutput) {
  std::mt19937_64 rng(6);
  const FeatureStack s{{random_map({3, 3, 4}, rng, -5, 5), random_map({3, 3, 6}, rng, -5, 5)}};
  const Tensor zero({6, 10});
  for (auto phi : {Activation::relu, Activation::identity, Activation::tanh}) {
    const Tensor out = fuse_lel(s, LELParams{zero, 0.01, std::nullopt, phi});
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(lel_sparsity_report(zero), std::vector<std::size_t>(6, 0));
}

TEST(FuseLel, DimensionMismatchIsShapeError) {
  const FeatureStack s{{Tensor({2, 2, 4}), Tensor({2, 2, 6})}};
  EXPECT_THROW(fuse_lel(s, LELParams{Tensor({6, 9})}), shape_error);
  EXPECT_THROW(fuse_lel(s, LELParams{Tensor({60})}), shape_error);
}

TEST(FuseLel, RejectsBadParams) {
  const FeatureStack s{{Tensor({2, 2, 1}), Tensor({2, 2, 1})}};
  EXPECT_THROW(fuse_lel(s, LELParams{Tensor({1, 2}), -0.1}), config_error);
  EXPECT_THROW(fuse_lel(s, LELParams{Tensor({1, 2}, {1.0, NAN})}), config_error);
  EXPECT_THROW(lel_sparsity_report(Tensor({1, 2}), 0.0), precondition_error);
}

TEST(FuseLel, MeanEquivalenceWithIdentityActivation) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 50; ++k) {
    const std::size_t ns = 1 + rng() % 4, d = 1 + rng() % 5;
    FeatureStack s;
    for (std::size_t i = 0; i < ns; ++i) s.sources.push_back(random_map({3, 2, d}, rng, -3, 3));
    const auto depths = s.depths();
    const Tensor lel = fuse_lel(s, LELParams{mean_equivalent_weights(depths), 0.0, std::nullopt,
                                             Activation::identity});
    const Tensor mean = fuse_mean(s);
    ASSERT_EQ(lel.shape(), mean.shape());
    for (std::size_t i = 0; i < lel.size(); ++i) EXPECT_NEAR(lel[i], mean[i], 1e-12);
  }
}

TEST(FuseLel, CrossChannelMixing) {
  // Output channel 0 depends on source-1 channel 1 and source-2 channels 0 and 2 at once,
  // which element-wise mean fusion cannot express.
  const std::size_t d1 = 3, d2 = 3;
  Tensor w({3, d1 + d2});
  w[0 * 6 + 1] = 0.5;
  w[0 * 6 + d1 + 0] = -2.0;
  w[0 * 6 + d1 + 2] = 1.5;
  std::mt19937_64 rng(8);
  const Tensor a = random_map({2, 2, d1}, rng), b = random_map({2, 2, d2}, rng);
  const LELParams params{w, 0.0, std::nullopt, Activation::identity};
  const Tensor base = fuse_lel(FeatureStack{{a, b}}, params);

  auto bumped = [&](bool first, std::size_t channel) {
    Tensor a2 = a, b2 = b;
    Tensor& t = first ? a2 : b2;
    t[channel] += 1.0;  // pixel 0
    return fuse_lel(FeatureStack{{a2, b2}}, params)[0] - base[0];
  };
  EXPECT_NEAR(bumped(true, 1), 0.5, 1e-12);
  EXPECT_NEAR(bumped(false, 0), -2.0, 1e-12);
  EXPECT_NEAR(bumped(false, 2), 1.5, 1e-12);
  EXPECT_NEAR(bumped(true, 0), 0.0, 1e-12);
}

TEST(FuseLel, InitialWeightsAreJitteredMeanPattern) {
  std::mt19937_64 rng(9);
  const std::vector<std::size_t> depths{4, 6};
  const Tensor w = lel_initial_weights(depths, rng);
  const Tensor m = mean_equivalent_weights(depths);
  ASSERT_EQ(w.shape(), (Shape{6, 10}));
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_LE(std::abs(w[i] - m[i]), 0.01);
  // Channels 4 and 5 exist only in source 2, so they pass through with weight 1.
  EXPECT_EQ(m[4 * 10 + 4 + 4], 1.0);
  EXPECT_EQ(m[0 * 10 + 0], 0.5);
  EXPECT_EQ(m[0 * 10 + 4], 0.5);
}

TEST(FusionGradients, AllThreeOpsPassFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (int inst = 0; inst < 20; ++inst) {
    for (auto& c : experiment::gradient_cases(rng)) {
      if (!c.layer.starts_with("fuse_")) continue;
      const auto r = diff::check_gradients(c.params, [&](diff::Graph& g) { return c.build(g, c.params); });
      EXPECT_TRUE(r.ok) << c.layer << " " << r.worst << " " << r.max_rel_error;
    }
  }
}

TEST(FusionGradients, LelPenaltyMatchesL1) {
  diff::ParameterRegistry params;
  params.add("w", diff::ParamTag::fusion, Tensor({2, 2}, {1.0, -2.0, 0.0, 0.5}));
  diff::Graph g(&params);
  const auto loss = lel_penalty(g, g.parameter("w"), 0.01);
  EXPECT_DOUBLE_EQ(g.value(loss)[0], 0.035);
}

TEST(LelTraining, L1SparsifiesOnConvTask) {
  tasks::SyntheticTask task;
  task.kind = tasks::TaskKind::conv_classification;
  task.n_train = 1000;
  task.n_val = 10;
  task.presence = 0.2;
  task.private_noise = 1.5;
  const auto data = tasks::make_task(task);
  model::ModelSpec spec;
  spec.fusion = FusionKind::lel;
  spec.extractor = {{4}, {6}};
  spec.head = {16};
  auto net = model::build_model(spec, data.train, 3);
  training::TrainConfig cfg;
  cfg.algorithm = training::Algorithm::clean;
  cfg.iterations = 1500;
  cfg.lr = 3e-3;
  cfg.seed = 3;
  training::train(net, data.train, cfg);
  const auto counts = lel_sparsity_report(net.params().at("fusion.lel.w").value);
  std::vector<double> as_double(counts.begin(), counts.end());
  EXPECT_LT(stats::median(as_double), 10.0);
}

}  // namespace
