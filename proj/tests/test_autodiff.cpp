#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "stgcn/autodiff.hpp"
#include "stgcn/errors.hpp"
#include "stgcn/grad_check.hpp"
#include "test_support.hpp"

namespace stgcn {
namespace {

using testing::random_tensor;
using Fn = std::function<ad::Var(const std::vector<ad::Var>&)>;

// Projects f onto a fixed random cotangent and compares reverse-mode input
// gradients with plain central differences (step h).
double max_primitive_error(const Fn& f, std::vector<Tensor> inputs, std::uint64_t seed, double h = 1e-5) {
  std::vector<ad::Var> consts;
  for (const auto& t : inputs) consts.push_back(ad::Var::constant(t));
  const Tensor cot = random_tensor(f(consts).shape(), seed ^ 0x5eed);
  auto project = [&](const std::vector<Tensor>& xs) {
    std::vector<ad::Var> vs;
    for (const auto& t : xs) vs.push_back(ad::Var::constant(t));
    const auto y = f(vs);
    double s = 0.0;
    for (std::size_t i = 0; i < y.value().size(); ++i) s += y.value()[i] * cot[i];
    return s;
  };

  std::vector<Tensor> grads;
  for (const auto& t : inputs) grads.emplace_back(t.shape());
  std::vector<ad::Var> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(ad::Var::leaf(inputs[i], &grads[i]));
  f(leaves).backward(cot);

  double worst = 0.0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t k = 0; k < inputs[a].size(); ++k) {
      const double orig = inputs[a][k];
      inputs[a][k] = orig + h;
      const double up = project(inputs);
      inputs[a][k] = orig - h;
      const double down = project(inputs);
      inputs[a][k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[a][k];
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-3});
      worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
  }
  return worst;
}

std::shared_ptr<const SparseMatrix> small_sparse() {
  auto s = std::make_shared<SparseMatrix>(4, 4);
  s->insert(0, 0) = 0.5;
  s->insert(0, 2) = -1.0;
  s->insert(1, 1) = 2.0;
  s->insert(2, 0) = -1.0;
  s->insert(3, 1) = 0.25;
  s->insert(3, 3) = 1.5;
  s->makeCompressed();
  return s;
}

// ---------------------------------------------------------------------------
// Values

TEST(Primitives, SoftmaxUniform) {
  const auto y = ad::softmax(ad::Var::constant(Tensor({2}, {0.0, 0.0})), 0);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Primitives, SigmoidAndGlu) {
  EXPECT_DOUBLE_EQ(ad::sigmoid(ad::Var::constant(Tensor::scalar(0.0))).value()[0], 0.5);
  // GLU over last axis [a | gate] with gate 0 gives a / 2.
  const auto y = ad::glu(ad::Var::constant(Tensor({2, 2}, {3.0, 0.0, -4.0, 0.0})));
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 1.5);
  EXPECT_DOUBLE_EQ(y.value()[1], -2.0);
}

TEST(Primitives, SigmoidExtremes) {
  const auto y = ad::sigmoid(ad::Var::constant(Tensor({2}, {-800.0, 800.0})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 1.0);
}

TEST(Primitives, GluMatchesComposition) {
  const Tensor x = random_tensor({3, 4, 6}, 1);
  const auto xv = ad::Var::constant(x);
  const auto fused = ad::glu(xv);
  const auto composed = ad::elementwise_mul(ad::slice(xv, -1, 0, 3), ad::sigmoid(ad::slice(xv, -1, 3, 6)));
  EXPECT_LT(max_abs_diff(fused.value(), composed.value()), 1e-15);
}

TEST(Primitives, ConvIdentityKernel) {
  const auto y = ad::conv1d_same_1d(ad::Var::constant(Tensor({3}, {1, 2, 3})), ad::Var::constant(Tensor({1}, {1})));
  EXPECT_EQ(y.value().values(), (std::vector<double>{1, 2, 3}));
}

TEST(Primitives, ConvCenteredDifference) {
  // Cross-correlation with [1, 0, -1]: y[t] = x[t-1] - x[t+1], zero outside.
  const auto y =
      ad::conv1d_same_1d(ad::Var::constant(Tensor({4}, {1, 2, 4, 8})), ad::Var::constant(Tensor({3}, {1, 0, -1})));
  EXPECT_EQ(y.value().values(), (std::vector<double>{-2, -3, -6, 4}));
}

TEST(Primitives, ConvMatchesDirectLoop) {
  const Tensor x = random_tensor({2, 7, 3, 2}, 4);
  const Tensor w = random_tensor({5, 2, 3}, 5);
  const auto y = ad::conv1d_same(ad::Var::constant(x), ad::Var::constant(w));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 7; ++t) {
      for (std::size_t m = 0; m < 3; ++m) {
        for (std::size_t o = 0; o < 3; ++o) {
          double s = 0.0;
          for (std::size_t k = 0; k < 5; ++k) {
            const long ts = static_cast<long>(t + k) - 2;
            if (ts < 0 || ts >= 7) continue;
            for (std::size_t c = 0; c < 2; ++c) s += x.at({b, static_cast<std::size_t>(ts), m, c}) * w.at({k, c, o});
          }
          EXPECT_NEAR(y.value().at({b, t, m, o}), s, 1e-12);
        }
      }
    }
  }
}

TEST(Primitives, SparseMatchesDense) {
  const auto s = small_sparse();
  const Tensor x = random_tensor({3, 4, 2}, 9);
  const auto y = ad::sparse_dense_matmul(s, ad::Var::constant(x));
  const Eigen::MatrixXd sd(*s);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t c = 0; c < 2; ++c) {
        double v = 0.0;
        for (std::size_t j = 0; j < 4; ++j) v += sd(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * x.at({b, j, c});
        EXPECT_NEAR(y.value().at({b, i, c}), v, 1e-14);
      }
    }
  }
}

TEST(Primitives, MeanOverAxisRemovesAxis) {
  const auto y = ad::mean_over_axis(ad::Var::constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6})), 1);
  EXPECT_EQ(y.shape(), (Shape{2}));
  EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 5.0);
}

TEST(Primitives, AbsSubgradientAtZero) {
  Tensor g({3});
  const auto x = ad::Var::leaf(Tensor({3}, {-2.0, 0.0, 3.0}), &g);
  const auto y = ad::abs_forward(x);
  EXPECT_EQ(y.value().values(), (std::vector<double>{2.0, 0.0, 3.0}));
  y.backward(Tensor({3}, 1.0));
  EXPECT_EQ(g.values(), (std::vector<double>{-1.0, 0.0, 1.0}));
}

TEST(Primitives, LayerNormOfZerosIsZero) {
  const auto y = ad::layer_norm(ad::Var::constant(Tensor({2, 4})), -1, 1e-5);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Primitives, CrossEntropyUniform) {
  const auto l = ad::cross_entropy(ad::Var::constant(Tensor({2, 2})), {0, 1});
  EXPECT_NEAR(l.value()[0], std::log(2.0), 1e-15);
}

TEST(Primitives, DropoutInferenceIsIdentity) {
  Rng rng(1);
  const auto x = ad::Var::constant(random_tensor({10}, 2));
  EXPECT_EQ(ad::dropout(x, 0.5, false, rng).value(), x.value());
  EXPECT_EQ(ad::dropout(x, 0.0, true, rng).value(), x.value());
}

TEST(Primitives, DropoutRateValidated) {
  Rng rng(1);
  const auto x = ad::Var::constant(Tensor({3}, 1.0));
  EXPECT_THROW(ad::dropout(x, 1.0, true, rng), InvalidConfig);
  EXPECT_THROW(ad::dropout(x, -0.1, true, rng), InvalidConfig);
  EXPECT_THROW(ad::layer_norm(x, 0, 0.0), InvalidConfig);
}

// ---------------------------------------------------------------------------
// Errors

TEST(Errors, ShapeMismatches) {
  const auto a = ad::Var::constant(Tensor({2, 3}));
  const auto b = ad::Var::constant(Tensor({2, 3}));
  EXPECT_THROW(ad::matmul(a, b), ShapeMismatch);
  EXPECT_THROW(ad::add(a, ad::Var::constant(Tensor({3, 2}))), ShapeMismatch);
  EXPECT_THROW(ad::elementwise_mul(a, ad::Var::constant(Tensor({6}))), ShapeMismatch);
  EXPECT_THROW(ad::concat({a, ad::Var::constant(Tensor({3, 3}))}, 1), ShapeMismatch);
  EXPECT_THROW(ad::slice(a, 1, 2, 5), ShapeMismatch);
  EXPECT_THROW(ad::reshape(a, {4}), ShapeMismatch);
  EXPECT_THROW(ad::conv1d_same(ad::Var::constant(Tensor({1, 4, 1, 1})), ad::Var::constant(Tensor({2, 1, 1}))),
               ShapeMismatch);
  EXPECT_THROW(ad::glu(a), ShapeMismatch);
  EXPECT_THROW(ad::cross_entropy(a, {0}), ShapeMismatch);
}

TEST(Errors, NonFiniteNamesOp) {
  const auto big = ad::Var::constant(Tensor({1, 1}, 1e200));
  try {
    ad::matmul(big, big);
    FAIL();
  } catch (const NonFiniteValue& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(ad::scalar_mul(big, 1e200), NonFiniteValue);
}

// ---------------------------------------------------------------------------
// Finite differences for every primitive

constexpr double kPrimTol = 1e-5;

TEST(FiniteDiff, Matmul) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::matmul(v[0], v[1]); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({4, 3}, 1), random_tensor({3, 5}, 2)}, 3), kPrimTol);
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 3, 4}, 4), random_tensor({4, 2}, 5)}, 6), kPrimTol);
}

TEST(FiniteDiff, SparseDenseMatmul) {
  const auto s = small_sparse();
  auto f = [s](const std::vector<ad::Var>& v) { return ad::sparse_dense_matmul(s, v[0]); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 4, 3}, 7)}, 8), kPrimTol);
}

TEST(FiniteDiff, AddAndScalarMul) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::scalar_mul(ad::add(v[0], v[1]), -2.5); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({3, 3}, 9), random_tensor({3, 3}, 10)}, 11), kPrimTol);
}

TEST(FiniteDiff, ScaleBy) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::scale_by(v[0], v[1]); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({5}, 12), random_tensor({1}, 13)}, 14), kPrimTol);
}

TEST(FiniteDiff, ConcatSlice) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::slice(ad::concat({v[0], v[1]}, 1), 1, 1, 4); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 2, 3}, 15), random_tensor({2, 3, 3}, 16)}, 17), kPrimTol);
  auto g = [](const std::vector<ad::Var>& v) { return ad::concat({v[0], v[1]}, -1); };
  EXPECT_LT(max_primitive_error(g, {random_tensor({2, 2}, 18), random_tensor({2, 1}, 19)}, 20), kPrimTol);
}

TEST(FiniteDiff, ReshapeTranspose) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::transpose(ad::reshape(v[0], {3, 4})); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 6}, 21)}, 22), kPrimTol);
}

TEST(FiniteDiff, Conv1dSame) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::conv1d_same(v[0], v[1]); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 6, 3, 2}, 23), random_tensor({3, 2, 4}, 24)}, 25), kPrimTol);
}

TEST(FiniteDiff, Sigmoid) {
  EXPECT_LT(max_primitive_error([](const auto& v) { return ad::sigmoid(v[0]); }, {random_tensor({10}, 26, 3.0)}, 27),
            kPrimTol);
}

TEST(FiniteDiff, ElementwiseMul) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::elementwise_mul(v[0], v[1]); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({3, 4}, 28), random_tensor({3, 4}, 29)}, 30), kPrimTol);
}

TEST(FiniteDiff, LayerNorm) {
  auto last = [](const std::vector<ad::Var>& v) { return ad::layer_norm(v[0], -1, 1e-5); };
  EXPECT_LT(max_primitive_error(last, {random_tensor({3, 5}, 31)}, 32), kPrimTol);
  auto middle = [](const std::vector<ad::Var>& v) { return ad::layer_norm(v[0], 1, 1e-5); };
  EXPECT_LT(max_primitive_error(middle, {random_tensor({2, 4, 3}, 33)}, 34), kPrimTol);
}

TEST(FiniteDiff, ScaleShift) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::scale_shift(v[0], v[1], v[2]); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 3, 4}, 35), random_tensor({4}, 36), random_tensor({4}, 37)}, 38),
            kPrimTol);
}

TEST(FiniteDiff, MeanOverAxis) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::mean_over_axis(v[0], 1); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({2, 3, 4}, 39)}, 40), kPrimTol);
}

TEST(FiniteDiff, AbsAwayFromZero) {
  Tensor x = random_tensor({12}, 41);
  for (auto& v : x.data()) v += v >= 0 ? 0.1 : -0.1;
  EXPECT_LT(max_primitive_error([](const auto& v) { return ad::abs_forward(v[0]); }, {x}, 42), kPrimTol);
}

TEST(FiniteDiff, Softmax) {
  auto rows = [](const std::vector<ad::Var>& v) { return ad::softmax(v[0], 1); };
  EXPECT_LT(max_primitive_error(rows, {random_tensor({3, 4}, 43)}, 44), kPrimTol);
  auto cols = [](const std::vector<ad::Var>& v) { return ad::softmax(v[0], 0); };
  EXPECT_LT(max_primitive_error(cols, {random_tensor({2, 5}, 45)}, 46), kPrimTol);
}

TEST(FiniteDiff, DropoutFixedMask) {
  auto f = [](const std::vector<ad::Var>& v) {
    Rng rng(99);
    return ad::dropout(v[0], 0.3, true, rng);
  };
  EXPECT_LT(max_primitive_error(f, {random_tensor({20}, 47)}, 48), kPrimTol);
}

TEST(FiniteDiff, SumAllCrossEntropyGlu) {
  EXPECT_LT(max_primitive_error([](const auto& v) { return ad::sum_all(v[0]); }, {random_tensor({7}, 49)}, 50),
            kPrimTol);
  auto ce = [](const std::vector<ad::Var>& v) { return ad::cross_entropy(v[0], {1, 0, 1}); };
  EXPECT_LT(max_primitive_error(ce, {random_tensor({3, 2}, 51)}, 52), kPrimTol);
  EXPECT_LT(max_primitive_error([](const auto& v) { return ad::glu(v[0]); }, {random_tensor({3, 6}, 53)}, 54), kPrimTol);
}

// Composition: gradient of a chain matches differences of the chain.
TEST(FiniteDiff, ChainComposition) {
  auto f = [](const std::vector<ad::Var>& v) {
    auto h = ad::glu(ad::conv1d_same(v[0], v[1]));
    h = ad::layer_norm(h, -1, 1e-5);
    auto m = ad::mean_over_axis(ad::mean_over_axis(h, 3), 1);
    return ad::softmax(ad::abs_forward(ad::add(m, v[2])), 1);
  };
  for (std::uint64_t s = 0; s < 5; ++s) {
    EXPECT_LT(max_primitive_error(f,
                                  {random_tensor({2, 5, 3, 2}, 60 + s), random_tensor({3, 2, 6}, 70 + s),
                                   random_tensor({2, 3}, 80 + s, 5.0)},
                                  90 + s),
              1e-4);
  }
}

TEST(FiniteDiff, SharedSubexpressionAccumulates) {
  auto f = [](const std::vector<ad::Var>& v) { return ad::elementwise_mul(v[0], ad::add(v[0], v[0])); };
  EXPECT_LT(max_primitive_error(f, {random_tensor({4}, 91)}, 92), kPrimTol);
}

// ---------------------------------------------------------------------------
// Properties

TEST(Properties, SoftmaxIsDistribution) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto y = ad::softmax(ad::Var::constant(random_tensor({4, 6}, s, 20.0)), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_GT(y.value().at({r, c}), 0.0);
        sum += y.value().at({r, c});
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Properties, LayerNormMoments) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Tensor x = random_tensor({3, 16}, s, 10.0);
    const auto y = ad::layer_norm(ad::Var::constant(x), -1, 1e-5);
    for (std::size_t r = 0; r < 3; ++r) {
      double in_mean = 0.0, in_var = 0.0, mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < 16; ++c) {
        in_mean += x.at({r, c}) / 16.0;
        mean += y.value().at({r, c}) / 16.0;
      }
      for (std::size_t c = 0; c < 16; ++c) {
        in_var += std::pow(x.at({r, c}) - in_mean, 2) / 16.0;
        var += std::pow(y.value().at({r, c}) - mean, 2) / 16.0;
      }
      EXPECT_LT(std::abs(mean), 1e-9);
      // eps shrinks the variance to in_var / (in_var + eps).
      EXPECT_NEAR(var, in_var / (in_var + 1e-5), 1e-12);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(Properties, DropoutExpectation) {
  const Tensor x = random_tensor({8}, 3);
  const int draws = 20000;
  const double rate = 0.3;
  Rng rng(11);
  std::vector<double> sum(8, 0.0);
  for (int d = 0; d < draws; ++d) {
    const auto y = ad::dropout(ad::Var::constant(x), rate, true, rng);
    for (std::size_t i = 0; i < 8; ++i) sum[i] += y.value()[i];
  }
  for (std::size_t i = 0; i < 8; ++i) {
    // Per draw the output is x/(1-r) w.p. 1-r, else 0: sd = |x| sqrt(r/(1-r)).
    const double se = std::abs(x[i]) * std::sqrt(rate / (1 - rate)) / std::sqrt(draws);
    EXPECT_NEAR(sum[i] / draws, x[i], 3 * se + 1e-12);
  }
}

TEST(Properties, DropoutZeroFraction) {
  Rng rng(5);
  const auto y = ad::dropout(ad::Var::constant(Tensor({100000}, 1.0)), 0.25, true, rng);
  const auto zeros = std::count(y.value().data().begin(), y.value().data().end(), 0.0);
  EXPECT_NEAR(static_cast<double>(zeros) / 100000.0, 0.25, 0.005);
  for (double v : y.value().data()) EXPECT_TRUE(v == 0.0 || v == 1.0 / 0.75);
}

TEST(Properties, DeterministicForwardBackward) {
  auto run = [] {
    Tensor gx({2, 5, 3, 2}), gw({3, 2, 4});
    Rng rng(42);
    auto x = ad::Var::leaf(random_tensor({2, 5, 3, 2}, 1), &gx);
    auto w = ad::Var::leaf(random_tensor({3, 2, 4}, 2), &gw);
    auto y = ad::dropout(ad::glu(ad::conv1d_same(x, w)), 0.5, true, rng);
    ad::sum_all(y).backward();
    return std::make_tuple(y.value(), gx, gw);
  };
  EXPECT_EQ(run(), run());
}

TEST(Properties, BackwardTwiceAccumulatesIntoSink) {
  Tensor g({2});
  const auto x = ad::Var::leaf(Tensor({2}, {1.0, 2.0}), &g);
  const auto y = ad::sum_all(ad::elementwise_mul(x, x));
  y.backward();
  y.backward();
  EXPECT_EQ(g.values(), (std::vector<double>{4.0, 8.0}));
}

// ---------------------------------------------------------------------------
// grad_check

TEST(GradCheck, Square) {
  Parameter p("x", Tensor::scalar(3.0));
  std::vector<Parameter*> ps{&p};
  const auto report = grad_check(
      [](const std::vector<ad::Var>& v) { return ad::sum_all(ad::elementwise_mul(v[0], v[0])); }, ps, 1e-5, 1e-8);
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_TRUE(report.passed());
  EXPECT_LT(report.entries[0].max_abs_error, 6.0 * 1e-8);
}

TEST(GradCheck, CrossEntropyUniformLogits) {
  // d CE / d logits = (p - y) / B with p = [0.5, 0.5].
  Parameter p("logits", Tensor({1, 2}));
  Tensor g({1, 2});
  ad::cross_entropy(ad::Var::leaf(p.value, &g), {1}).backward();
  EXPECT_NEAR(g[0], 0.5, 1e-15);
  EXPECT_NEAR(g[1], -0.5, 1e-15);
  std::vector<Parameter*> ps{&p};
  const auto report =
      grad_check([](const std::vector<ad::Var>& v) { return ad::cross_entropy(v[0], {1}); }, ps, 1e-5, 1e-8);
  EXPECT_TRUE(report.passed());
}

TEST(GradCheck, FlagsWrongGradient) {
  // abs at exactly 0: subgradient 0 vs numeric 0 passes; a kink offset breaks it.
  Parameter p("x", Tensor({1}, {1e-7}));
  std::vector<Parameter*> ps{&p};
  const auto report =
      grad_check([](const std::vector<ad::Var>& v) { return ad::sum_all(ad::abs_forward(v[0])); }, ps, 1e-5, 1e-4);
  EXPECT_FALSE(report.passed());
  EXPECT_GT(report.max_rel_error(), 0.5);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9, 1e-5), 1e-4);
}

TEST(GradCheck, RejectsBadStep) {
  Parameter p("x", Tensor::scalar(1.0));
  std::vector<Parameter*> ps{&p};
  EXPECT_THROW(grad_check([](const auto& v) { return v[0]; }, ps, 0.0, 1e-4), InvalidConfig);
}

}  // namespace
}  // namespace stgcn
