#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "model_invariants.hpp"
#include "stgcn/datagen.hpp"
#include "stgcn/errors.hpp"
#include "stgcn/grad_check.hpp"
#include "stgcn/model.hpp"
#include "test_support.hpp"

namespace stgcn {
namespace {

using testing::random_batch;
using testing::random_connected_graph;
using testing::random_model_case;
using testing::random_tensor;

ad::Var constant(Tensor t) { return ad::Var::constant(std::move(t)); }

ChebFilterBank bank_for(const Topology& t, int order) { return build_cheb_bank(build_laplacian(t), order); }

Topology two_bus() { return Topology::from_edges(2, {{0, 1, 1.0}}); }

SvsSample constant_sample(std::size_t steps, std::size_t buses, double v, double p, double q, Label label) {
  SvsSample s;
  s.V = Tensor({steps, buses}, v);
  s.P = Tensor({steps, buses}, p);
  s.Q = Tensor({steps, buses}, q);
  s.label = label;
  return s;
}

// ---------------------------------------------------------------------------
// Graph convolution

TEST(GraphConv, OrderZeroIdentityEmbeddingHalvesInput) {
  const auto bank = bank_for(random_connected_graph(6, 1), 0);
  const std::size_t c = 3;
  Tensor theta({1, c, 2 * c});
  for (std::size_t i = 0; i < c; ++i) theta.at({0, i, i}) = 1.0;
  const auto x = random_tensor({2, 4, 6, c}, 7);
  const auto y = graph_conv(constant(x), bank, constant(theta));
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(y.value()[k], 0.5 * x[k], 1e-15);
}

TEST(GraphConv, TwoBusFirstOrderTerm) {
  const auto bank = bank_for(two_bus(), 1);
  const auto theta = Tensor({2, 1, 1}, std::vector<double>{0.0, 1.0});
  const auto x = Tensor({1, 1, 2, 1}, std::vector<double>{1.0, 0.0});
  const auto y = graph_conv_linear(constant(x), bank, constant(theta));
  EXPECT_NEAR(y.value()[0], 0.0, 1e-12);
  EXPECT_NEAR(y.value()[1], -1.0, 1e-12);
}

TEST(GraphConv, MatchesDenseChebyshevSum) {
  const auto topo = random_connected_graph(7, 3);
  const auto bank = bank_for(topo, 3);
  const auto x = random_tensor({2, 3, 7, 2}, 11);
  const auto theta = random_tensor({4, 2, 5}, 12);
  const auto y = graph_conv_linear(constant(x), bank, constant(theta));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 3; ++t) {
      Eigen::MatrixXd xt(7, 2);
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t c = 0; c < 2; ++c) xt(i, c) = x.at({b, t, i, c});
      Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(7, 5);
      for (std::size_t k = 0; k < 4; ++k) {
        Eigen::MatrixXd th(2, 5);
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t f = 0; f < 5; ++f) th(c, f) = theta.at({k, c, f});
        expected += testing::dense(bank.term(k)) * xt * th;
      }
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t f = 0; f < 5; ++f) EXPECT_NEAR(y.value().at({b, t, i, f}), expected(i, f), 1e-12);
    }
  }
}

TEST(GraphConv, ImpulseStaysWithinKHops) {
  const auto topo = generate_topology(TopologyKind::Ring, 10, 0);
  for (int order = 1; order <= 3; ++order) {
    const auto bank = bank_for(topo, order);
    Tensor x({1, 1, 10, 1});
    x[4] = 1.0;
    const auto y = graph_conv_linear(constant(x), bank, constant(random_tensor({static_cast<std::size_t>(order + 1), 1, 2}, 5)));
    const auto reach = khop_pattern(topo, order);
    for (std::size_t i = 0; i < 10; ++i) {
      if (!reach(4, i)) {
        EXPECT_EQ(y.value()[i * 2], 0.0);
        EXPECT_EQ(y.value()[i * 2 + 1], 0.0);
      }
    }
  }
}

TEST(GraphConv, RejectsMismatchedShapes) {
  const auto bank = bank_for(random_connected_graph(5, 2), 2);
  EXPECT_THROW(graph_conv(constant(Tensor({1, 2, 4, 1})), bank, constant(Tensor({3, 1, 2}))), TopologyMismatch);
  EXPECT_THROW(graph_conv(constant(Tensor({1, 2, 5, 1})), bank, constant(Tensor({2, 1, 2}))), ShapeMismatch);
  EXPECT_THROW(graph_conv(constant(Tensor({1, 2, 5, 2})), bank, constant(Tensor({3, 1, 2}))), ShapeMismatch);
  EXPECT_THROW(graph_conv(constant(Tensor({2, 5, 1})), bank, constant(Tensor({3, 1, 2}))), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Temporal convolution

TEST(TemporalConv, UnitKernelIdentityHalvesInput) {
  const std::size_t h = 3;
  Tensor kernel({1, h, 2 * h});
  for (std::size_t i = 0; i < h; ++i) kernel.at({0, i, i}) = 1.0;
  const auto x = random_tensor({2, 5, 4, h}, 3);
  const auto y = temporal_conv(constant(x), constant(kernel));
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(y.value()[k], 0.5 * x[k], 1e-15);
}

TEST(TemporalConv, ConstantSignalIsConstantAwayFromEdges) {
  const auto kernel = random_tensor({3, 2, 4}, 9);
  Tensor x({1, 6, 3, 2});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 2; ++c) x.at({0, t, i, c}) = 0.3 * static_cast<double>(i) - 0.2 * static_cast<double>(c) + 0.7;
  const auto y = temporal_conv(constant(x), constant(kernel));
  for (std::size_t t = 2; t < 5; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t f = 0; f < 2; ++f) EXPECT_NEAR(y.value().at({0, t, i, f}), y.value().at({0, 1, i, f}), 1e-14);
}

TEST(TemporalConv, MixesOnlyTime) {
  const auto kernel = random_tensor({3, 2, 4}, 4);
  const auto x = random_tensor({1, 5, 4, 2}, 5);
  auto moved = x;
  for (std::size_t t = 0; t < 5; ++t) moved.at({0, t, 2, 0}) += 1.0;
  const auto a = temporal_conv(constant(x), constant(kernel)).value();
  const auto b = temporal_conv(constant(moved), constant(kernel)).value();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i : {0, 1, 3})
      for (std::size_t f = 0; f < 2; ++f) EXPECT_EQ(a.at({0, t, i, f}), b.at({0, t, i, f}));
}

// ---------------------------------------------------------------------------
// Spatio-temporal block

struct BlockFixture {
  ModelConfig cfg;
  ModelParams params;
  ChebFilterBank bank;

  explicit BlockFixture(std::uint64_t seed) {
    cfg.buses = 6;
    cfg.window = 5;
    cfg.hidden = 3;
    cfg.blocks = 1;
    params = ModelParams::initialize(cfg, seed);
    bank = bank_for(random_connected_graph(6, seed), cfg.cheb_order);
  }
  BlockParams bound() const { return block_params(bind_constant(params), 0); }
};

ChannelTensors inputs_of(const Batch& b) {
  return {constant(b.inputs[0]), constant(b.inputs[1]), constant(b.inputs[2])};
}

TEST(StBlock, ZeroInputGivesNormShift) {
  BlockFixture f(3);
  Rng rng(0);
  const Batch zero = random_batch(2, 5, 6, 1);
  ChannelTensors x;
  for (std::size_t c = 0; c < 3; ++c) x[c] = constant(Tensor(zero.inputs[c].shape()));
  const auto y = st_block(x, f.bank, f.bound(), 0.0, false, rng);
  for (auto ch : kChannels) {
    const auto ci = static_cast<std::size_t>(ch);
    const auto& shift = f.params.get(ModelParams::norm_shift_name(0, ch)).value;
    for (std::size_t k = 0; k < y[ci].value().size(); ++k) EXPECT_NEAR(y[ci].value()[k], shift[k % 3], 1e-15);
  }
  for (auto ch : kChannels) f.params.get(ModelParams::norm_shift_name(0, ch)).value.fill(0.0);
  const auto z = st_block(x, f.bank, f.bound(), 0.0, false, rng);
  for (std::size_t c = 0; c < 3; ++c)
    for (double v : z[c].value().data()) EXPECT_EQ(v, 0.0);
}

TEST(StBlock, InferenceIsDeterministic) {
  BlockFixture f(4);
  const auto x = inputs_of(random_batch(2, 5, 6, 2));
  Rng r1(1), r2(99);
  const auto a = st_block(x, f.bank, f.bound(), 0.5, false, r1);
  const auto b = st_block(x, f.bank, f.bound(), 0.5, false, r2);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(a[c].value() == b[c].value());
}

TEST(StBlock, TrainingDropoutFollowsSeed) {
  BlockFixture f(5);
  const auto x = inputs_of(random_batch(2, 5, 6, 3));
  Rng r1(7), r2(7), r3(8);
  const auto a = st_block(x, f.bank, f.bound(), 0.5, true, r1);
  const auto b = st_block(x, f.bank, f.bound(), 0.5, true, r2);
  const auto c = st_block(x, f.bank, f.bound(), 0.5, true, r3);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(a[k].value() == b[k].value());
  EXPECT_FALSE(a[0].value() == c[0].value());
}

TEST(StBlock, OutputShapeIsHidden) {
  BlockFixture f(6);
  Rng rng(0);
  const auto y = st_block(inputs_of(random_batch(2, 5, 6, 4)), f.bank, f.bound(), 0.0, false, rng);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y[c].shape(), (Shape{2, 5, 6, 3}));
}

// ---------------------------------------------------------------------------
// Fusion

ChannelTensors random_channels(std::uint64_t seed) {
  return {constant(random_tensor({2, 3, 4, 2}, seed)), constant(random_tensor({2, 3, 4, 2}, seed + 1)),
          constant(random_tensor({2, 3, 4, 2}, seed + 2))};
}

TEST(Fusion, SingleBlockIsIdentity) {
  const auto a = random_channels(1);
  const auto f = fuse_blocks({a});
  for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(f[c].value() == a[c].value());
}

TEST(Fusion, ZeroBlockAddsNothing) {
  const auto a = random_channels(2);
  ChannelTensors zero;
  for (std::size_t c = 0; c < 3; ++c) zero[c] = constant(Tensor(a[c].shape()));
  const auto f = fuse_blocks({a, zero});
  for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(f[c].value() == a[c].value());
}

TEST(Fusion, SumsBlocks) {
  const auto a = random_channels(3), b = random_channels(6), d = random_channels(9);
  const auto f = fuse_blocks({a, b, d});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < f[c].value().size(); ++k)
      EXPECT_NEAR(f[c].value()[k], a[c].value()[k] + b[c].value()[k] + d[c].value()[k], 1e-15);
  EXPECT_THROW(fuse_blocks({}), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Node layer

ad::Var scalar(double v) { return constant(Tensor::scalar(v)); }

TEST(NodeLayer, ZeroWeightsGiveZero) {
  const auto s = node_layer(random_channels(4), scalar(0.0), scalar(0.0), scalar(0.0));
  EXPECT_EQ(s.shape(), (Shape{2, 4}));
  for (double v : s.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(NodeLayer, OpposedBusesNormalizeToOne) {
  const double a = 1.7;
  ChannelTensors fused;
  for (std::size_t c = 0; c < 3; ++c) fused[c] = constant(Tensor({1, 4, 2, 3}));
  Tensor v({1, 4, 2, 3});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t h = 0; h < 3; ++h) {
      v.at({0, t, 0, h}) = a;
      v.at({0, t, 1, h}) = -a;
    }
  fused[static_cast<std::size_t>(Channel::V)] = constant(v);
  const auto s = node_layer(fused, scalar(0.0), scalar(0.0), scalar(1.0));
  EXPECT_NEAR(s.value()[0], 1.0, 1e-5);
  EXPECT_NEAR(s.value()[1], 1.0, 1e-5);
}

TEST(NodeLayer, WeightsCombineChannelMeans) {
  const auto fused = random_channels(5);
  const auto s = node_layer(fused, scalar(0.3), scalar(-0.8), scalar(1.1));
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> mix(4, 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
      for (auto [ch, w] : {std::pair{Channel::P, 0.3}, std::pair{Channel::Q, -0.8}, std::pair{Channel::V, 1.1}}) {
        double m = 0.0;
        for (std::size_t t = 0; t < 3; ++t)
          for (std::size_t h = 0; h < 2; ++h) m += fused[static_cast<std::size_t>(ch)].value().at({b, t, i, h});
        mix[i] += w * m / 6.0;
      }
    }
    double mean = 0.0, var = 0.0;
    for (double x : mix) mean += x / 4.0;
    for (double x : mix) var += (x - mean) * (x - mean) / 4.0;
    for (std::size_t i = 0; i < 4; ++i)
      EXPECT_NEAR(s.value()[b * 4 + i], std::abs((mix[i] - mean) / std::sqrt(var + kLayerNormEps)), 1e-12);
  }
}

TEST(NodeLayer, NonNegative) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = node_layer(random_channels(seed * 7), scalar(0.5 - 0.02 * static_cast<double>(seed)), scalar(0.4),
                              scalar(-0.3));
    for (double v : s.value().data()) EXPECT_GE(v, 0.0);
  }
}

// ---------------------------------------------------------------------------
// System layer

TEST(SystemLayer, ZeroAssignmentGivesEvenOdds) {
  const auto out = system_layer(constant(random_tensor({3, 5}, 1)), constant(Tensor({2, 5})));
  for (double p : out.probs.value().data()) EXPECT_NEAR(p, 0.5, 1e-15);
  for (double s : out.influence.value().data()) EXPECT_EQ(s, 0.0);
}

TEST(SystemLayer, ZeroNodeRepresentationGivesEvenOdds) {
  const auto out = system_layer(constant(Tensor({2, 4})), constant(random_tensor({2, 4}, 2)));
  for (double p : out.probs.value().data()) EXPECT_NEAR(p, 0.5, 1e-15);
}

TEST(SystemLayer, SingleBusExample) {
  const auto out = system_layer(constant(Tensor({1, 1}, std::vector<double>{2.0})),
                                constant(Tensor({2, 1}, std::vector<double>{1.0, -1.0})));
  EXPECT_NEAR(out.probs.value()[0], 0.8210, 1e-4);
  EXPECT_NEAR(out.probs.value()[1], 0.1790, 1e-4);
  EXPECT_NEAR(out.influence.value()[0], std::tanh(1.0), 1e-12);
}

TEST(SystemLayer, InfluenceIsAssignmentDifference) {
  const auto sb = random_tensor({2, 6}, 3);
  const auto out = system_layer(constant(random_tensor({1, 6}, 4)), constant(sb));
  for (std::size_t i = 0; i < 6; ++i) {
    const double a = std::exp(sb.at({0, i})), b = std::exp(sb.at({1, i}));
    EXPECT_NEAR(out.influence.value()[i], (a - b) / (a + b), 1e-12);
    EXPECT_LE(std::abs(out.influence.value()[i]), 1.0);
  }
}

TEST(SystemLayer, RejectsMismatchedShapes) {
  EXPECT_THROW(system_layer(constant(Tensor({1, 4})), constant(Tensor({2, 5}))), ShapeMismatch);
  EXPECT_THROW(system_layer(constant(Tensor({1, 4})), constant(Tensor({3, 4}))), ShapeMismatch);
}

TEST(Prediction, StableWinsTies) {
  EXPECT_EQ(predict_from_probs(0.5, 0.5), Label::Stable);
  EXPECT_EQ(predict_from_probs(0.4, 0.6), Label::Unstable);
  EXPECT_EQ(predict_from_probs(0.9, 0.1), Label::Stable);
}

// ---------------------------------------------------------------------------
// Parameters and configuration

TEST(ModelParams, GoldenScalarCount) {
  const ModelConfig defaults;
  EXPECT_EQ(ModelParams::expected_scalar_count(defaults), 10775u);
  EXPECT_EQ(ModelParams::initialize(defaults, 1).scalar_count(), 10775u);
  ModelConfig tiny;
  tiny.cheb_order = 1;
  tiny.blocks = 1;
  tiny.hidden = 1;
  tiny.kernel_t = 1;
  tiny.buses = 2;
  EXPECT_EQ(ModelParams::expected_scalar_count(tiny), 31u);
  EXPECT_EQ(ModelParams::initialize(tiny, 1).scalar_count(), 31u);
}

TEST(ModelParams, LayoutMatchesIndexHelpers) {
  ModelConfig cfg;
  cfg.blocks = 3;
  const auto p = ModelParams::initialize(cfg, 2);
  EXPECT_EQ(p.size(), 3u * 3u * 4u + 4u);
  std::set<std::string> names;
  for (const auto& q : p.all()) names.insert(q.name);
  EXPECT_EQ(names.size(), p.size());
  for (int j = 0; j < 3; ++j) {
    for (auto c : kChannels) {
      EXPECT_EQ(p.index_of(ModelParams::theta_name(j, c)), ModelParams::theta_index(j, c));
      EXPECT_EQ(p.index_of(ModelParams::tkernel_name(j, c)), ModelParams::tkernel_index(j, c));
      EXPECT_EQ(p.index_of(ModelParams::norm_scale_name(j, c)), ModelParams::norm_scale_index(j, c));
      EXPECT_EQ(p.index_of(ModelParams::norm_shift_name(j, c)), ModelParams::norm_shift_index(j, c));
      const std::size_t cin = j == 0 ? 1 : 8;
      EXPECT_EQ(p.get(ModelParams::theta_name(j, c)).value.shape(), (Shape{3, cin, 16}));
      EXPECT_EQ(p.get(ModelParams::tkernel_name(j, c)).value.shape(), (Shape{3, 8, 16}));
    }
  }
  EXPECT_EQ(p.index_of("system.Sb"), ModelParams::sb_index(cfg));
  EXPECT_EQ(p.index_of("node.psi_V"), ModelParams::psi_index(cfg, Channel::V));
  EXPECT_THROW(p.index_of("block9.V.theta"), InvalidConfig);
}

TEST(ModelParams, InitializationIsSeededAndBounded) {
  const ModelConfig cfg;
  const auto a = ModelParams::initialize(cfg, 5);
  const auto b = ModelParams::initialize(cfg, 5);
  const auto c = ModelParams::initialize(cfg, 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a.all()[i].value == b.all()[i].value);
    differs = differs || !(a.all()[i].value == c.all()[i].value);
  }
  EXPECT_TRUE(differs);
  const auto& theta = a.get(ModelParams::theta_name(1, Channel::P)).value;
  const double limit = std::sqrt(6.0 / (3.0 * 8.0 + 16.0));
  for (double v : theta.data()) EXPECT_LE(std::abs(v), limit);
  for (auto ch : kChannels) EXPECT_DOUBLE_EQ(a.all()[ModelParams::psi_index(cfg, ch)].value[0], 1.0 / 3.0);
  for (double v : a.get("system.Sb").value.data()) EXPECT_EQ(v, 0.0);
}

TEST(ModelConfig, Validation) {
  auto bad = [](auto mutate) {
    ModelConfig cfg;
    mutate(cfg);
    return cfg;
  };
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_THROW(bad([](ModelConfig& c) { c.cheb_order = 0; }).validate(), InvalidConfig);
  EXPECT_THROW(bad([](ModelConfig& c) { c.blocks = 0; }).validate(), InvalidConfig);
  EXPECT_THROW(bad([](ModelConfig& c) { c.hidden = 0; }).validate(), InvalidConfig);
  EXPECT_THROW(bad([](ModelConfig& c) { c.kernel_t = 2; }).validate(), InvalidConfig);
  EXPECT_THROW(bad([](ModelConfig& c) { c.dropout = 1.0; }).validate(), InvalidConfig);
  EXPECT_THROW(bad([](ModelConfig& c) { c.window = 1; }).validate(), InvalidConfig);
}

// ---------------------------------------------------------------------------
// Samples, normalization and batches

TEST(SvsSample, Validation) {
  EXPECT_NO_THROW(constant_sample(3, 2, 1.0, 0.1, 0.2, Label::Stable).validate());
  auto s = constant_sample(3, 2, 1.0, 0.1, 0.2, Label::Stable);
  s.P = Tensor({3, 3});
  EXPECT_THROW(s.validate(), DimensionMismatch);
  EXPECT_THROW(constant_sample(1, 2, 1.0, 0.1, 0.2, Label::Stable).validate(), DimensionMismatch);
  auto nan = constant_sample(3, 2, 1.0, 0.1, 0.2, Label::Stable);
  nan.Q[4] = std::nan("");
  EXPECT_THROW(nan.validate(), NonFiniteValue);
}

TEST(NormStats, FitsPerChannelMoments) {
  const std::vector<SvsSample> samples{constant_sample(2, 2, 1.0, 0.0, 5.0, Label::Stable),
                                       constant_sample(2, 2, 0.5, 2.0, 5.0, Label::Unstable)};
  const auto n = NormStats::fit(samples);
  EXPECT_DOUBLE_EQ(n.mean[0], 0.75);
  EXPECT_DOUBLE_EQ(n.scale[0], 0.25);
  EXPECT_DOUBLE_EQ(n.mean[1], 1.0);
  EXPECT_DOUBLE_EQ(n.scale[1], 1.0);
  EXPECT_DOUBLE_EQ(n.mean[2], 5.0);
  EXPECT_DOUBLE_EQ(n.scale[2], 1.0);  // constant channel
}

TEST(Batch, StandardizesInputs) {
  const auto a = constant_sample(3, 2, 1.0, 0.0, 5.0, Label::Stable);
  const auto b = constant_sample(3, 2, 0.5, 2.0, 4.0, Label::Unstable);
  NormStats norm;
  norm.mean = {0.75, 1.0, 4.5};
  norm.scale = {0.25, 1.0, 0.5};
  const auto batch = make_batch({&a, &b}, norm);
  EXPECT_EQ(batch.labels, (std::vector<int>{0, 1}));
  EXPECT_EQ(batch.inputs[0].shape(), (Shape{2, 3, 2, 1}));
  EXPECT_DOUBLE_EQ(batch.inputs[0][0], 1.0);
  EXPECT_DOUBLE_EQ(batch.inputs[0][6], -1.0);
  EXPECT_DOUBLE_EQ(batch.inputs[1][6], 1.0);
  EXPECT_DOUBLE_EQ(batch.inputs[2][0], 1.0);
  const auto c = constant_sample(4, 2, 1.0, 0.0, 5.0, Label::Stable);
  EXPECT_THROW(make_batch({&a, &c}, norm), DimensionMismatch);
  EXPECT_THROW(make_batch({}, norm), EmptyDataset);
}

// ---------------------------------------------------------------------------
// Full network

TEST(Stgcn, RejectsMismatchedTopologyAndInputs) {
  ModelConfig cfg;
  cfg.buses = 5;
  cfg.window = 4;
  EXPECT_THROW(Stgcn(cfg, random_connected_graph(6, 1)), TopologyMismatch);
  const Stgcn net(cfg, random_connected_graph(5, 1));
  const auto params = ModelParams::initialize(cfg, 1);
  const NormStats norm;
  EXPECT_THROW(net.assess(constant_sample(4, 6, 1.0, 0.0, 0.0, Label::Stable), params, norm), TopologyMismatch);
  EXPECT_THROW(net.assess(constant_sample(5, 5, 1.0, 0.0, 0.0, Label::Stable), params, norm), DimensionMismatch);
  auto nan = constant_sample(4, 5, 1.0, 0.0, 0.0, Label::Stable);
  nan.V[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(net.assess(nan, params, norm), NonFiniteValue);
}

TEST(Stgcn, UntrainedLossIsNearLogTwo) {
  ModelConfig cfg;
  cfg.buses = 10;
  cfg.window = 12;
  const Stgcn net(cfg, generate_topology(TopologyKind::RingChords, 10, 3));
  const auto batch = random_batch(100, 12, 10, 8);
  auto params = ModelParams::initialize(cfg, 4);
  Rng unused(0);
  const double exact = Stgcn::loss(net.forward(batch, bind_constant(params), false, unused), batch).value()[0];
  EXPECT_NEAR(exact, std::numbers::ln2, 1e-12);  // Sb = 0 assigns every bus evenly
  Rng rng(12);
  for (auto& v : params.get("system.Sb").value.data()) v = 0.1 * rng.normal();
  const double mc = Stgcn::loss(net.forward(batch, bind_constant(params), false, unused), batch).value()[0];
  EXPECT_NEAR(mc, std::numbers::ln2, 0.2);
}

TEST(Stgcn, ForwardShapesAndAssessment) {
  const auto mc = random_model_case(3);
  const Stgcn net(mc.cfg, mc.topology);
  const auto out = testing::infer(net, mc.params, mc.batch);
  const std::size_t b = mc.batch.size(), n = mc.cfg.buses;
  EXPECT_EQ(out.logits.shape(), (Shape{b, 2}));
  EXPECT_EQ(out.snode.shape(), (Shape{b, n}));
  EXPECT_EQ(out.influence.shape(), (Shape{n}));
  EXPECT_EQ(out.block_outputs.size(), static_cast<std::size_t>(mc.cfg.blocks));
  const auto r = out.assessment(0);
  EXPECT_NEAR(r.probs[0] + r.probs[1], 1.0, 1e-12);
  EXPECT_EQ(r.predicted, predict_from_probs(r.probs[0], r.probs[1]));
  EXPECT_EQ(r.influence.size(), n);
  EXPECT_EQ(r.node_repr.size(), n);
}

TEST(Stgcn, AssessMatchesBatchedForward) {
  ModelConfig cfg;
  cfg.buses = 4;
  cfg.window = 6;
  cfg.blocks = 2;
  const auto topo = random_connected_graph(4, 2);
  const Stgcn net(cfg, topo);
  auto params = ModelParams::initialize(cfg, 3);
  for (auto& v : params.get("system.Sb").value.data()) v = 0.4;
  params.get("system.Sb").value[1] = -0.9;
  SvsSample s;
  s.V = random_tensor({6, 4}, 1, 0.1);
  s.P = random_tensor({6, 4}, 2);
  s.Q = random_tensor({6, 4}, 3);
  const NormStats norm;
  const auto r = net.assess(s, params, norm);
  const auto out = testing::infer(net, params, make_batch({&s}, norm));
  EXPECT_EQ(r.probs[0], out.probs.value()[0]);
  EXPECT_EQ(r.node_repr, out.snode.value().values());
}

TEST(Stgcn, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    ModelConfig cfg;
    cfg.buses = 5;
    cfg.window = 6;
    cfg.hidden = 2;
    cfg.blocks = 2;
    cfg.dropout = 0.0;
    const Stgcn net(cfg, random_connected_graph(5, seed));
    auto params = ModelParams::initialize(cfg, seed);
    Rng rng(seed + 50);
    for (auto& v : params.get("system.Sb").value.data()) v = rng.normal();
    for (auto c : kChannels) params.all()[ModelParams::psi_index(cfg, c)].value[0] = rng.uniform(0.5, 1.5);
    const auto batch = random_batch(3, 6, 5, seed + 20);
    std::vector<Parameter*> ptrs;
    for (auto& p : params.all()) ptrs.push_back(&p);
    const auto report = grad_check(
        [&](const std::vector<ad::Var>& leaves) {
          Rng unused(0);
          return Stgcn::loss(net.forward(batch, BoundParams{leaves}, false, unused), batch);
        },
        ptrs, 1e-5, 1e-4);
    EXPECT_TRUE(report.passed()) << "seed " << seed << " max rel " << report.max_rel_error();
  }
}

// ---------------------------------------------------------------------------
// Invariants over random configurations

TEST(ModelInvariants, ChannelSeparation) {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    EXPECT_EQ(testing::check_channel_separation(random_model_case(seed)), "");
  }
}

TEST(ModelInvariants, BlockLocality) {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    const auto mc = random_model_case(seed);
    EXPECT_EQ(testing::check_block_locality(mc, seed % mc.cfg.buses), "");
  }
}

TEST(ModelInvariants, PermutationEquivariance) {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    EXPECT_EQ(testing::check_permutation_equivariance(random_model_case(seed), seed + 77), "");
  }
}

TEST(ModelInvariants, ProbabilityNormalization) {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    EXPECT_EQ(testing::check_probability_normalization(random_model_case(seed)), "");
  }
}

TEST(ModelInvariants, ArgmaxInvariantUnderPositiveScaling) {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    EXPECT_EQ(testing::check_argmax_invariance(random_model_case(seed)), "");
  }
}

}  // namespace
}  // namespace stgcn
