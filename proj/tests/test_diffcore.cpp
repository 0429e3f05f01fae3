#include <cmath>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "robustfuse/diff/checkpoint.hpp"
#include "robustfuse/diff/gradcheck.hpp"
#include "robustfuse/diff/graph.hpp"
#include "robustfuse/diff/optim.hpp"
#include "robustfuse/experiment/verify.hpp"
#include "robustfuse/model.hpp"

namespace {

using namespace robustfuse;
using namespace robustfuse::diff;

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), shape_error);
  EXPECT_THROW(t.reshaped({4}), shape_error);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
  t.enable_grad();
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Tensor, ConstGradWithoutBufferIsStateError) {
  const Tensor t({2});
  EXPECT_THROW(t.grad(), state_error);
}

TEST(Forward, IdentityGraph) {
  Graph g;
  const Tensor x({3}, {1.0, -2.0, 0.5});
  const NodeId id = g.input(x);
  EXPECT_EQ(g.value(id), x);
}

TEST(Forward, DenseWithIdentityWeight) {
  Graph g;
  const Tensor x({2, 3}, {1, 2, 3, -4, 5, -6});
  const NodeId out = g.dense(g.input(x), g.input(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})),
                             g.input(Tensor({3})));
  EXPECT_EQ(values_of(g.value(out)), values_of(x));
}

TEST(Forward, Relu) {
  Graph g;
  const NodeId out = g.relu(g.input(Tensor({3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(values_of(g.value(out)), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Forward, ShapeMismatchNamesNode) {
  Graph g;
  const NodeId x = g.input(Tensor({2, 3}));
  const NodeId w = g.input(Tensor({4, 2}));
  try {
    g.dense(x, w);
    FAIL() << "expected shape_error";
  } catch (const shape_error& e) {
    EXPECT_NE(std::string(e.what()).find("node"), std::string::npos) << e.what();
  }
}

TEST(Forward, ForwardReferenceIsRejected) {
  Graph g;
  const NodeId x = g.input(Tensor({2}));
  EXPECT_THROW(g.add(x, x + 5), state_error);
}

TEST(Forward, ConvIsDensePerPixel) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor x({2, 3, 2, 4}), w({5, 4}), b({5});
  for (auto* t : {&x, &w, &b}) {
    for (auto& v : t->values()) v = u(rng);
  }
  Graph g;
  const NodeId conv = g.conv1x1(g.input(x), g.input(w), g.input(b));
  const NodeId dense = g.dense(g.input(x.reshaped({12, 4})), g.input(w), g.input(b));
  EXPECT_EQ(g.value(conv).shape(), (Shape{2, 3, 2, 5}));
  EXPECT_EQ(values_of(g.value(conv)), values_of(g.value(dense)));
}

TEST(Forward, MeanPoolAveragesSpatialPositions) {
  Graph g;
  // N=1, H=1, W=2, C=2
  const NodeId out = g.mean_pool(g.input(Tensor({1, 1, 2, 2}, {1, 10, 3, 20})));
  EXPECT_EQ(values_of(g.value(out)), (std::vector<double>{2, 15}));
}

TEST(Forward, SoftmaxCrossEntropyValue) {
  Graph g;
  const std::vector<int> y{0};
  const NodeId out = g.softmax_cross_entropy(g.input(Tensor({1, 2}, {0.0, 0.0})), y);
  EXPECT_NEAR(g.value(out)[0], std::log(2.0), 1e-15);
}

TEST(Backward, HalfSquaredNorm) {
  ParameterRegistry params;
  params.add("w", ParamTag::head, Tensor({2}, {3.0, -4.0}));
  Graph g(&params);
  g.backward(g.half_squared_norm(g.parameter("w")));
  EXPECT_EQ(params[0].value.grad()[0], 3.0);
  EXPECT_EQ(params[0].value.grad()[1], -4.0);
}

TEST(Backward, L1SubgradientIsZeroAtZero) {
  ParameterRegistry params;
  params.add("w", ParamTag::fusion, Tensor({3}, {2.0, 0.0, -5.0}));
  Graph g(&params);
  g.backward(g.l1_penalty(g.parameter("w"), 0.01));
  const auto grad = params[0].value.grad();
  EXPECT_EQ(grad[0], 0.01);
  EXPECT_EQ(grad[1], 0.0);
  EXPECT_EQ(grad[2], -0.01);
}

TEST(Backward, BeforeForwardIsStateError) {
  Graph g;
  EXPECT_THROW(g.backward(0), state_error);
}

TEST(Backward, NonScalarLossIsRejected) {
  Graph g;
  const NodeId x = g.input(Tensor({2}, {1, 2}), "x", true);
  EXPECT_THROW(g.backward(x), precondition_error);
}

TEST(Backward, GradientsAccumulateAcrossPasses) {
  ParameterRegistry params;
  params.add("w", ParamTag::head, Tensor({1}, {2.0}));
  for (int pass = 0; pass < 2; ++pass) {
    Graph g(&params);
    g.backward(g.half_squared_norm(g.parameter("w")));
  }
  EXPECT_EQ(params[0].value.grad()[0], 4.0);
  params.zero_grad();
  EXPECT_EQ(params[0].value.grad()[0], 0.0);
}

TEST(GradCheck, EveryLayerOverTwentyInstantiations) {
  std::mt19937_64 rng(11);
  for (int inst = 0; inst < 20; ++inst) {
    for (auto& c : experiment::gradient_cases(rng)) {
      ASSERT_LE(c.params.total_values(), 200u) << c.layer;
      const auto r = check_gradients(c.params, [&](Graph& g) { return c.build(g, c.params); });
      EXPECT_TRUE(r.ok) << c.layer << " instance " << inst << " worst " << r.worst << " rel "
                        << r.max_rel_error;
      EXPECT_GT(r.checked, 0u) << c.layer;
    }
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // The first build feeds backward; later builds feed the differences with a tripled loss.
  ParameterRegistry params;
  params.add("w", ParamTag::head, Tensor({2}, {0.7, -0.3}));
  int calls = 0;
  const auto r = check_gradients(params, [&](Graph& g) {
    const double k = calls++ == 0 ? 1.0 : 3.0;
    return g.scale(g.half_squared_norm(g.parameter("w")), k);
  });
  EXPECT_FALSE(r.ok);
}

TEST(GradCheck, ComposedFusionNetwork) {
  std::mt19937_64 rng(12);
  for (auto fk : {fusion::FusionKind::mean, fusion::FusionKind::concat, fusion::FusionKind::lel}) {
    model::ModelSpec spec;
    spec.fusion = fk;
    spec.extractor = {{3}, {3}};
    spec.head = {4};
    spec.activation = Activation::tanh;
    spec.lel_activation = Activation::tanh;
    model::FusionNet net(spec, {{2, 2, 2}, {2, 2, 3}}, 3, true, 99);
    tasks::Dataset batch;
    batch.classification = true;
    batch.sources = {experiment::detail::random_tensor({3, 2, 2, 2}, rng),
                     experiment::detail::random_tensor({3, 2, 2, 3}, rng)};
    batch.labels = {0, 2, 1};
    const auto r = check_gradients(net.params(), [&](Graph& g) {
      return net.loss(g, net.forward(g, batch.sources), batch);
    });
    EXPECT_TRUE(r.ok) << fusion::to_string(fk) << " " << r.worst << " " << r.max_rel_error;
  }
}

TEST(Adam, RejectsNonPositiveLearningRate) {
  EXPECT_THROW(Adam(AdamOptions{0.0}), config_error);
  EXPECT_THROW(Adam(AdamOptions{-1.0}), config_error);
  Adam a;
  EXPECT_THROW(a.set_lr(0.0), config_error);
  EXPECT_THROW(Sgd(0.0), config_error);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterRegistry params;
  params.add("w", ParamTag::head, Tensor({3}, {1.0, -2.0, 0.25}));
  params.zero_grad();
  Adam adam(AdamOptions{0.1});
  for (int k = 0; k < 10; ++k) adam.step(params);
  EXPECT_EQ(values_of(params[0].value), (std::vector<double>{1.0, -2.0, 0.25}));
}

TEST(Adam, SingleStepDescendsOnSquare) {
  ParameterRegistry params;
  params.add("w", ParamTag::head, Tensor({1}, {1.0}));
  {
    Graph g(&params);
    const NodeId w = g.parameter("w");
    g.backward(g.scale(g.half_squared_norm(w), 2.0));  // f(w) = w^2
  }
  Adam adam(AdamOptions{0.1});
  adam.step(params);
  EXPECT_LT(params[0].value[0], 1.0);
  // The first bias-corrected step has magnitude lr.
  EXPECT_NEAR(params[0].value[0], 0.9, 1e-7);
}

TEST(Adam, TagFilterFreezesOtherPartitions) {
  ParameterRegistry params;
  params.add("e", ParamTag::extractor, Tensor({2}, {0.5, -0.5}));
  params.add("f", ParamTag::fusion, Tensor({2}, {0.5, -0.5}));
  params.add("h", ParamTag::head, Tensor({2}, {0.5, -0.5}));
  const auto before = values_of(params[0].value);
  Adam adam(AdamOptions{0.01});
  for (int k = 0; k < 100; ++k) {
    params.zero_grad();
    Graph g(&params);
    NodeId loss = g.half_squared_norm(g.parameter("e"));
    loss = g.add(loss, g.half_squared_norm(g.parameter("f")));
    loss = g.add(loss, g.half_squared_norm(g.parameter("h")));
    g.backward(loss);
    adam.step(params, TagFilter::only(ParamTag::fusion));
  }
  EXPECT_EQ(values_of(params[0].value), before);
  EXPECT_EQ(values_of(params[2].value), before);
  EXPECT_LT(std::abs(params[1].value[0]), 0.5);
}

TEST(Registry, TagPartitionIsExhaustiveAndNamesUnique) {
  model::ModelSpec spec;
  spec.fusion = fusion::FusionKind::lel;
  spec.extractor = {{3}, {4}};
  spec.head = {5};
  model::FusionNet net(spec, {{2, 2, 1}, {2, 2, 2}}, 2, true, 1);
  const auto& p = net.params();
  EXPECT_EQ(p.count(ParamTag::extractor) + p.count(ParamTag::fusion) + p.count(ParamTag::head),
            p.size());
  EXPECT_EQ(p.count(ParamTag::fusion), 1u);
  ParameterRegistry r;
  r.add("a", ParamTag::head, Tensor({1}));
  EXPECT_THROW(r.add("a", ParamTag::fusion, Tensor({1})), config_error);
  EXPECT_THROW(r.at("missing"), config_error);
}

TEST(Init, GlorotUniformBoundsAndZeroBias) {
  std::mt19937_64 rng(4);
  const Tensor w = model::glorot_uniform(30, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  double lo = 0, hi = 0;
  for (double v : w.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_GE(lo, -bound);
  EXPECT_LE(hi, bound);
  EXPECT_LT(lo, -0.9 * bound);
  EXPECT_GT(hi, 0.9 * bound);

  model::ModelSpec spec;
  spec.extractor = {{3}, {3}};
  model::FusionNet net(spec, {{1, 1, 2}, {1, 1, 2}}, 1, false, 5);
  for (const auto& p : net.params()) {
    if (p.name.ends_with(".b")) {
      for (double v : p.value.data()) EXPECT_EQ(v, 0.0) << p.name;
    }
  }
}

ParameterRegistry train_steps(std::uint64_t seed, int steps) {
  model::ModelSpec spec;
  spec.fusion = fusion::FusionKind::lel;
  spec.extractor = {{3}, {2}};
  spec.head = {4};
  model::FusionNet net(spec, {{2, 2, 2}, {2, 2, 3}}, 3, true, seed);
  std::mt19937_64 rng(seed + 1);
  tasks::Dataset batch;
  batch.classification = true;
  batch.sources = {experiment::detail::random_tensor({4, 2, 2, 2}, rng),
                   experiment::detail::random_tensor({4, 2, 2, 3}, rng)};
  batch.labels = {0, 1, 2, 1};
  Adam adam(AdamOptions{0.01});
  for (int k = 0; k < steps; ++k) {
    net.params().zero_grad();
    Graph g(&net.params());
    g.backward(net.loss(g, net.forward(g, batch.sources), batch));
    adam.step(net.params());
  }
  return net.params();
}

TEST(Determinism, IdenticalSeedsGiveBitIdenticalParameters) {
  const auto a = train_steps(21, 25);
  const auto b = train_steps(21, 25);
  const auto c = train_steps(22, 25);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(values_of(a[i].value), values_of(b[i].value)) << a[i].name;
    differs = differs || values_of(a[i].value) != values_of(c[i].value);
  }
  EXPECT_TRUE(differs);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto params = train_steps(8, 5);
  std::stringstream ss;
  write_checkpoint(ss, params);
  const auto back = read_checkpoint(ss);
  ASSERT_EQ(back.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(back[i].name, params[i].name);
    EXPECT_EQ(back[i].tag, params[i].tag);
    EXPECT_EQ(back[i].value, params[i].value);
  }

  auto target = train_steps(9, 5);
  restore_checkpoint(target, back);
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(target[i].value, params[i].value);
}

TEST(Checkpoint, RejectsMalformedInput) {
  std::stringstream bad("not-a-checkpoint 1\n");
  EXPECT_THROW(read_checkpoint(bad), config_error);
  std::stringstream truncated("robustfuse-checkpoint 1\ncount 1\nparam w head 1 3\n0x1p+0 0x1p+1\n");
  EXPECT_THROW(read_checkpoint(truncated), config_error);

  ParameterRegistry a, b;
  a.add("w", ParamTag::head, Tensor({2}));
  b.add("w", ParamTag::head, Tensor({3}));
  EXPECT_THROW(restore_checkpoint(a, b), shape_error);
}

}  // namespace
