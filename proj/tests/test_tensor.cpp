#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_support.hpp"

using namespace cgdm;
using namespace cgdm::testing;

TEST(Matmul, IdentityTimesMatrix) {
  Rng rng(3);
  const Tensor b = random_tensor(rng, Shape{3, 4});
  const Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const Tensor c = matmul(eye, b);
  EXPECT_TRUE(bit_equal(c, b));
}

TEST(Matmul, OneByOne) {
  const Tensor c = matmul(Tensor::matrix({{2}}), Tensor::matrix({{3}}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(c[0], 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  const Tensor a = random_tensor(rng, Shape{4, 5});
  const Tensor b = random_tensor(rng, Shape{5, 3});
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), acc, 1e-12);
    }
  }
}

TEST(Matmul, InnerMismatchIsDimensionError) {
  EXPECT_THROW(matmul(Tensor::zeros(Shape{2, 3}), Tensor::zeros(Shape{2, 3})), DimensionError);
}

TEST(Elementwise, Examples) {
  expect_values_near(relu(Tensor::vector({-1, 0, 2})), {0, 0, 2}, 0.0);
  EXPECT_EQ(sum(Tensor::zeros(Shape{3, 2})).item(), 0.0);
  EXPECT_DOUBLE_EQ(mean(Tensor::vector({1, 2, 3, 4})).item(), 2.5);
  expect_values_near(add(Tensor::vector({1, 2}), Tensor::vector({3, 5})), {4, 7}, 0.0);
  expect_values_near(sub(Tensor::vector({1, 2}), Tensor::vector({3, 5})), {-2, -3}, 0.0);
  expect_values_near(mul(Tensor::vector({1, 2}), Tensor::vector({3, 5})), {3, 10}, 0.0);
  expect_values_near(neg(Tensor::vector({1, -2})), {-1, 2}, 0.0);
  expect_values_near(exp(Tensor::vector({0.0, 1.0})), {1.0, std::numbers::e}, 1e-15);
  expect_values_near(log(Tensor::vector({1.0, std::numbers::e})), {0.0, 1.0}, 1e-15);
  expect_values_near(concat({Tensor::vector({1, 2}), Tensor::matrix({{3, 4}})}), {1, 2, 3, 4}, 0.0);
  EXPECT_EQ(reshape(Tensor::vector({1, 2, 3, 4, 5, 6}), Shape{2, 3}).shape(), (Shape{2, 3}));
}

TEST(Elementwise, DomainErrors) {
  EXPECT_THROW(log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::vector({-2.0})), DomainError);
  EXPECT_THROW(sqrt(Tensor::vector({-1e-3})), DomainError);
  EXPECT_THROW(div(Tensor::vector({1.0}), Tensor::vector({0.0})), DomainError);
  EXPECT_THROW(reshape(Tensor::zeros(Shape{2, 3}), Shape{4}), DimensionError);
  EXPECT_THROW(add(Tensor::zeros(Shape{2, 3}), Tensor::zeros(Shape{3, 2})), DimensionError);
}

TEST(Elementwise, Broadcasting) {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  expect_values_near(add(m, Tensor::vector({10, 20})), {11, 22, 13, 24}, 0.0);
  expect_values_near(mul(m, Tensor::scalar(2.0)), {2, 4, 6, 8}, 0.0);
  expect_values_near(sub(Tensor::scalar(1.0), m), {0, -1, -2, -3}, 0.0);
}

TEST(LogSoftmax, ZeroLogits) {
  expect_values_near(log_softmax(Tensor::matrix({{0, 0}})), {-std::log(2.0), -std::log(2.0)}, 1e-15);
}

TEST(LogSoftmax, ShiftInvariance) {
  for (double c : {-700.0, -3.0, 0.0, 5.5, 800.0}) {
    const Tensor out = log_softmax(Tensor::matrix({{c, c, c}}));
    expect_values_near(out, {-std::log(3.0), -std::log(3.0), -std::log(3.0)}, 1e-12);
  }
}

TEST(LogSoftmax, MatchesDirectFormula) {
  const Tensor out = log_softmax(Tensor::matrix({{1, 2, 3}}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  expect_values_near(out, {std::log(std::exp(1.0) / z), std::log(std::exp(2.0) / z), std::log(std::exp(3.0) / z)},
                     1e-12);
}

TEST(LogSoftmax, RowsNormalizeAndIgnoreConstantShift) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor(rng, Shape{4, 5}, -30.0, 30.0);
    const Tensor out = log_softmax(logits);
    const Tensor shifted = log_softmax(add(logits, Tensor::scalar(rng.uniform(-50.0, 50.0))));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 5; ++c) total += std::exp(out.at(r, c));
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], shifted[i], 1e-10);
  }
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  const Tensor x = g.leaf(Tensor::vector({0.3, -2.0, 7.0}));
  expect_values_near(backward(sum(x), {x})[0], {1, 1, 1}, 0.0);
}

TEST(Backward, DotSelf) {
  Graph g;
  const Tensor x = g.leaf(Tensor::vector({1, 2}));
  expect_values_near(backward(dot(x, x), {x})[0], {2, 4}, 0.0);
}

TEST(Backward, NonScalarIsContractError) {
  Graph g;
  const Tensor x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(backward(mul(x, x), {x}), ContractError);
}

TEST(Backward, AbsentParameterGetsZeroGradient) {
  Graph g;
  const Tensor x = g.leaf(Tensor::vector({1, 2}));
  const Tensor unused = g.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  const GradMap grads = backward(sum(x), {x, unused});
  EXPECT_EQ(grads[1].shape(), unused.shape());
  expect_values_near(grads[1], {0, 0, 0, 0}, 0.0);
  EXPECT_EQ(grads.at(unused).numel(), 4u);
}

TEST(Backward, GradientShapeMatchesParameter) {
  Rng rng(2);
  Graph g;
  const Tensor w = g.leaf(random_tensor(rng, Shape{3, 2}));
  const Tensor x = random_tensor(rng, Shape{4, 2});
  const GradMap grads = backward(sum(matmul(x, transpose(w))), {w});
  EXPECT_EQ(grads[0].shape(), w.shape());
}

TEST(Backward, MixedTapesAreRejected) {
  Graph g1, g2;
  const Tensor a = g1.leaf(Tensor::vector({1.0}));
  const Tensor b = g2.leaf(Tensor::vector({2.0}));
  EXPECT_THROW(add(a, b), ContractError);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor(rng, Shape{6, 3});
    const Tensor w1 = random_tensor(rng, Shape{4, 3});
    const Tensor b1 = random_tensor(rng, Shape{4});
    const Tensor w2 = random_tensor(rng, Shape{2, 4});
    const std::vector<int> y{0, 1, 1, 0, 1, 0};
    auto loss = [&](const Tensor& W1, const Tensor& B1, const Tensor& W2) {
      const Tensor h = exp(scale(add(matmul(x, transpose(W1)), B1), 0.5));
      return cross_entropy(matmul(h, transpose(W2)), y);
    };
    Graph g;
    const Tensor lw1 = g.leaf(w1), lb1 = g.leaf(b1), lw2 = g.leaf(w2);
    const GradMap grads = backward(loss(lw1, lb1, lw2), {lw1, lb1, lw2});
    expect_gradient_close(grads[0], numeric_gradient([&](const Tensor& t) { return loss(t, b1, w2).item(); }, w1));
    expect_gradient_close(grads[1], numeric_gradient([&](const Tensor& t) { return loss(w1, t, w2).item(); }, b1));
    expect_gradient_close(grads[2], numeric_gradient([&](const Tensor& t) { return loss(w1, b1, t).item(); }, w2));
  }
}

// Every primitive: d/dx sum(op(x) * r) against central differences at 10 points.
struct PrimitiveCase {
  const char* name;
  Shape shape;
  std::function<Tensor(const Tensor&)> op;
  std::function<Tensor(Rng&, const Shape&)> sample;
};

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

static std::vector<PrimitiveCase> primitive_cases() {
  auto any = [](Rng& r, const Shape& s) { return random_tensor(r, s, -2.0, 2.0); };
  auto positive = [](Rng& r, const Shape& s) { return random_tensor(r, s, 0.2, 3.0); };
  auto off_zero = [](Rng& r, const Shape& s) { return random_away_from_zero(r, s); };
  const Tensor c = Tensor::matrix({{0.5, -1.0, 2.0}, {1.5, 0.25, -0.75}});
  const Tensor m = Tensor::matrix({{1.0, -2.0}, {0.5, 0.3}, {-1.2, 0.8}});
  return {
      {"neg", Shape{2, 3}, [](const Tensor& x) { return neg(x); }, any},
      {"scale", Shape{2, 3}, [](const Tensor& x) { return scale(x, -1.7); }, any},
      {"add", Shape{2, 3}, [c](const Tensor& x) { return add(x, mul(x, c)); }, any},
      {"add_row_broadcast", Shape{3}, [c](const Tensor& x) { return add(c, x); }, any},
      {"sub", Shape{2, 3}, [c](const Tensor& x) { return sub(c, mul(x, x)); }, any},
      {"mul", Shape{2, 3}, [c](const Tensor& x) { return mul(mul(x, c), x); }, any},
      {"mul_scalar_broadcast", Shape{1}, [c](const Tensor& x) { return mul(c, x); }, any},
      {"div", Shape{2, 3}, [c](const Tensor& x) { return div(c, x); }, off_zero},
      {"div_numerator", Shape{2, 3}, [c](const Tensor& x) { return div(x, add(c, Tensor::scalar(3.0))); }, any},
      {"exp", Shape{2, 3}, [](const Tensor& x) { return exp(x); }, any},
      {"log", Shape{2, 3}, [](const Tensor& x) { return log(x); }, positive},
      {"sqrt", Shape{2, 3}, [](const Tensor& x) { return sqrt(x); }, positive},
      {"relu", Shape{2, 3}, [](const Tensor& x) { return relu(x); }, off_zero},
      {"abs", Shape{2, 3}, [](const Tensor& x) { return abs(x); }, off_zero},
      {"sum", Shape{2, 3}, [](const Tensor& x) { return mul(sum(x), sum(x)); }, any},
      {"mean", Shape{2, 3}, [](const Tensor& x) { return exp(mean(x)); }, any},
      {"sum_rows", Shape{2, 3}, [](const Tensor& x) { return mul(sum_rows(x), sum_rows(x)); }, any},
      {"sum_cols", Shape{2, 3}, [](const Tensor& x) { return mul(sum_cols(x), sum_cols(x)); }, any},
      {"reshape", Shape{2, 3}, [m](const Tensor& x) { return matmul(reshape(x, Shape{3, 2}), transpose(m)); }, any},
      {"slice", Shape{6}, [](const Tensor& x) { return mul(slice(x, 1, 3), slice(x, 3, 3)); }, any},
      {"concat", Shape{2, 3}, [](const Tensor& x) { return mul(concat({x, x}), concat({x, exp(x)})); }, any},
      {"transpose", Shape{2, 3}, [m](const Tensor& x) { return mul(transpose(x), m); }, any},
      {"matmul_left", Shape{2, 3}, [m](const Tensor& x) { return matmul(x, m); }, any},
      {"matmul_right", Shape{3, 2}, [c](const Tensor& x) { return matmul(c, mul(x, x)); }, any},
      {"expand_rows", Shape{3}, [c](const Tensor& x) { return mul(expand_rows(x, 2), c); }, any},
      {"expand_cols", Shape{2}, [c](const Tensor& x) { return mul(expand_cols(x, 3), c); }, any},
      {"dot", Shape{4}, [](const Tensor& x) { return mul(dot(x, x), dot(x, exp(x))); }, any},
      {"l2_norm", Shape{4}, [](const Tensor& x) { return l2_norm(x); }, off_zero},
      {"log_softmax", Shape{2, 3}, [](const Tensor& x) { return log_softmax(x); }, any},
      {"softmax", Shape{2, 3}, [](const Tensor& x) { return softmax(x); }, any},
  };
}

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const PrimitiveCase pc = primitive_cases().at(static_cast<std::size_t>(GetParam()));
  SCOPED_TRACE(pc.name);
  Rng rng(derive_seed(99, static_cast<std::uint64_t>(GetParam())));
  for (int point = 0; point < 10; ++point) {
    const Tensor x = pc.sample(rng, pc.shape);
    const Tensor probe = pc.op(x);
    const Tensor r = random_tensor(rng, probe.shape());
    auto f = [&](const Tensor& t) { return sum(mul(pc.op(t), r)).item(); };
    Graph g;
    const Tensor lx = g.leaf(x);
    const Tensor grad = backward(sum(mul(pc.op(lx), r)), {lx})[0];
    expect_gradient_close(grad, numeric_gradient(f, x));
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range(0, static_cast<int>(primitive_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(primitive_cases().at(static_cast<std::size_t>(info.param)).name);
                         });

TEST(SecondDerivative, Cube) {
  const Tensor d2 = second_derivative([](const Tensor& x) { return sum(mul(x, mul(x, x))); }, Tensor::vector({2.0}));
  EXPECT_NEAR(d2[0], 12.0, 1e-12);
}

TEST(SecondDerivative, SumOfSquares) {
  const Tensor d2 =
      second_derivative([](const Tensor& x) { return sum(mul(x, x)); }, Tensor::vector({-1.0, 0.5, 3.0}));
  expect_values_near(d2, {2, 2, 2}, 1e-12);
}

TEST(SecondDerivative, PolynomialMatchesAnalytic) {
  // f = sum(x^4 - 3 x^3 + 2 x), f'' = 12 x^2 - 18 x per coordinate.
  Rng rng(8);
  const Tensor x = random_tensor(rng, Shape{6}, -2.0, 2.0);
  const Tensor d2 = second_derivative(
      [](const Tensor& t) {
        const Tensor t2 = mul(t, t);
        return sum(add(sub(mul(t2, t2), scale(mul(t2, t), 3.0)), scale(t, 2.0)));
      },
      x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(d2[i], 12 * x[i] * x[i] - 18 * x[i], 1e-8);
}

TEST(SecondDerivative, ThroughExpLogAndDivision) {
  // f = sum(exp(x) + log(x) + 1/x): f'' = exp(x) - 1/x^2 + 2/x^3.
  const Tensor x = Tensor::vector({0.4, 1.3, 2.2});
  const Tensor d2 = second_derivative(
      [](const Tensor& t) { return sum(add(add(exp(t), log(t)), div(Tensor::scalar(1.0), t))); }, x);
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x[i];
    EXPECT_NEAR(d2[i], std::exp(v) - 1 / (v * v) + 2 / (v * v * v), 1e-8);
  }
}

// N(g, f) = (dL/df)^2 with L = (f g x - y)^2: the inner gradient is evaluated
// analytically and then differenced in g.
TEST(SecondDerivative, MixedDerivativeOfInnerGradientNorm) {
  const double x = 1.5, y = 0.3;
  auto inner_norm = [&](double g, double f) {
    const double d = 2.0 * (f * g * x - y) * g * x;
    return d * d;
  };
  for (auto [g0, f0] : {std::pair{0.7, -0.4}, std::pair{-1.1, 0.9}, std::pair{0.2, 2.0}}) {
    Graph graph;
    const Tensor g = graph.leaf(Tensor::vector({g0}));
    const Tensor f = graph.leaf(Tensor::vector({f0}));
    const Tensor r = sub(scale(mul(f, g), x), Tensor::scalar(y));
    const Tensor loss = sum(mul(r, r));
    const Tensor df = backward(loss, {f}, true)[0];
    const Tensor dg = backward(sum(mul(df, df)), {g})[0];
    const double h = 1e-4;
    const double numeric = (inner_norm(g0 + h, f0) - inner_norm(g0 - h, f0)) / (2 * h);
    EXPECT_LT(std::abs(dg[0] - numeric) / std::max(1e-6, std::abs(numeric)), 1e-3);
  }
}

TEST(SecondDerivative, GradientOfGradientIsOnGraphWithCreateGraph) {
  Graph g;
  const Tensor x = g.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor first = backward(sum(mul(x, mul(x, x))), {x}, true)[0];
  EXPECT_TRUE(first.attached());
  const Tensor plain = backward(sum(mul(x, mul(x, x))), {x}, false)[0];
  EXPECT_FALSE(plain.attached());
}

TEST(Graph, InputsPrecedeNodes) {
  Rng rng(4);
  Graph g;
  const Tensor w = g.leaf(random_tensor(rng, Shape{3, 2}));
  const Tensor x = random_tensor(rng, Shape{5, 2});
  const Tensor loss = cross_entropy(matmul(x, transpose(w)), std::vector<int>{0, 1, 2, 1, 0});
  (void)backward(loss, {w}, true);
  ASSERT_GT(g.size(), 3u);
  for (std::size_t id = 0; id < g.size(); ++id) {
    for (std::size_t in : g.inputs_of(id)) EXPECT_LT(in, id) << g.op_name(id);
  }
}

TEST(Graph, ConstantsDoNotRecord) {
  const Tensor a = Tensor::vector({1, 2});
  const Tensor b = mul(a, a);
  EXPECT_FALSE(b.attached());
}

TEST(Graph, DeterministicValues) {
  auto run = [] {
    Rng rng(17);
    Graph g;
    const Tensor w = g.leaf(random_tensor(rng, Shape{4, 3}));
    const Tensor x = random_tensor(rng, Shape{8, 3});
    const Tensor loss = cross_entropy(matmul(x, transpose(w)), std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3});
    return backward(loss, {w})[0];
  };
  EXPECT_TRUE(bit_equal(run(), run()));
}

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), ContractError);
  EXPECT_TRUE(all_finite(Tensor::vector({1, 2})));
  EXPECT_FALSE(all_finite(Tensor::vector({1, INFINITY})));
}
