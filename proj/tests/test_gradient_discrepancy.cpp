#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "test_support.hpp"

using namespace cgdm;
using namespace cgdm::testing;

namespace {

struct Heads {
  Mlp g, f1, f2;
};

Heads random_setup(std::uint64_t seed, std::size_t d_in, std::size_t d_feat, std::size_t k, bool linear_heads) {
  Heads s;
  s.g = init_mlp({d_in, 6, d_feat}, derive_seed(seed, 1), Activation::relu, Activation::relu);
  const std::vector<std::size_t> dims = linear_heads ? std::vector<std::size_t>{d_feat, k}
                                                     : std::vector<std::size_t>{d_feat, 5, k};
  s.f1 = init_mlp(dims, derive_seed(seed, 2));
  s.f2 = init_mlp(dims, derive_seed(seed, 3));
  return s;
}

PseudoLabelSet pseudo_from(const std::vector<int>& labels, const std::vector<double>& weights) {
  PseudoLabelSet p;
  for (std::size_t i = 0; i < labels.size(); ++i) p.entries.push_back({labels[i], weights[i], 0.0});
  return p;
}

GradVector vec(std::vector<double> v) { return GradVector{Tensor::vector(std::move(v))}; }

void expect_same(const GradVector& a, const GradVector& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.flat[i], b.flat[i], tol) << "entry " << i;
}

}  // namespace

TEST(SourceGradient, StationaryAtSaturatedMinimum) {
  // Generator is the identity; heads map each one-hot feature to its class with huge margin.
  const Mlp g = identity_net(2);
  const Mlp f = linear(Tensor::matrix({{60, -60}, {-60, 60}}), Tensor::zeros(Shape{2}));
  const DomainBatch batch{Tensor::matrix({{1, 0}, {0, 1}, {1, 0}}), std::vector<int>{0, 1, 0}, {}};
  const GradVector gs = source_gradient(g, f, f, batch, false);
  EXPECT_LT(l2_norm(gs.flat).item(), 1e-6);
}

TEST(SourceGradient, DuplicatedBatchGivesSameGradient) {
  const Heads s = random_setup(1, 3, 4, 3, false);
  Rng rng(2);
  const Tensor x = random_tensor(rng, Shape{5, 3});
  const std::vector<int> y{0, 1, 2, 2, 1};
  const DomainBatch once{x, y, {}};
  std::vector<int> y2 = y;
  y2.insert(y2.end(), y.begin(), y.end());
  const DomainBatch twice{gather_rows(x, {0, 1, 2, 3, 4, 0, 1, 2, 3, 4}), y2, {}};
  expect_same(source_gradient(s.g, s.f1, s.f2, once, false), source_gradient(s.g, s.f1, s.f2, twice, false), 1e-14);
}

TEST(SourceGradient, PermutationInvariant) {
  const Heads s = random_setup(3, 3, 4, 3, false);
  Rng rng(3);
  const Tensor x = random_tensor(rng, Shape{6, 3});
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  std::vector<int> yp;
  for (std::size_t i : perm) yp.push_back(y[i]);
  expect_same(source_gradient(s.g, s.f1, s.f2, DomainBatch{x, y, {}}, false),
              source_gradient(s.g, s.f1, s.f2, DomainBatch{gather_rows(x, perm), yp, {}}, false), 1e-14);
}

TEST(SourceGradient, LengthIsClassifierParameterCount) {
  const Heads s = random_setup(4, 3, 4, 3, false);
  Rng rng(4);
  const GradVector gs = source_gradient(s.g, s.f1, s.f2, DomainBatch{random_tensor(rng, Shape{2, 3}), std::vector<int>{0, 1}, {}}, false);
  EXPECT_EQ(gs.size(), s.f1.parameter_count() + s.f2.parameter_count());
}

TEST(SourceGradient, EmptyOrUnlabeledBatchIsContractError) {
  const Heads s = random_setup(5, 3, 4, 3, false);
  EXPECT_THROW(source_gradient(s.g, s.f1, s.f2, DomainBatch{Tensor::zeros(Shape{0, 3}), std::vector<int>{}, {}}, false),
               ContractError);
  EXPECT_THROW(source_gradient(s.g, s.f1, s.f2, DomainBatch{Tensor::zeros(Shape{2, 3}), std::nullopt, {}}, false),
               ContractError);
}

TEST(SourceGradient, LinearHeadMatchesClosedForm) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Heads s = random_setup(seed, 3, 4, 3, true);
    Rng rng(seed);
    const Tensor x = random_tensor(rng, Shape{7, 3});
    const std::vector<int> y{0, 1, 2, 0, 1, 2, 2};
    const GradVector gs = source_gradient(s.g, s.f1, s.f2, DomainBatch{x, y, {}}, false);
    const Tensor feat = forward(s.g, x);
    const std::vector<double> ones(7, 1.0);
    std::vector<double> expected;
    for (const Mlp* f : {&s.f1, &s.f2}) {
      for (double v : linear_head_gradient_oracle(feat, y, ones, f->layers()[0].weight, f->layers()[0].bias)) {
        expected.push_back(0.5 * v);
      }
    }
    expect_same(gs, vec(expected), 1e-10);
  }
}

TEST(TargetGradient, ReducesToSourceGradient) {
  const Heads s = random_setup(6, 3, 4, 3, false);
  Rng rng(6);
  const Tensor x = random_tensor(rng, Shape{5, 3});
  const std::vector<int> y{2, 1, 0, 0, 1};
  const GradVector gs = source_gradient(s.g, s.f1, s.f2, DomainBatch{x, y, {}}, false);
  const GradVector gt =
      target_gradient(s.g, s.f1, s.f2, DomainBatch{x, std::nullopt, {}}, pseudo_from(y, {1, 1, 1, 1, 1}), false);
  expect_same(gs, gt, 1e-15);
}

TEST(TargetGradient, LinearInWeights) {
  const Heads s = random_setup(7, 3, 4, 3, false);
  Rng rng(7);
  const DomainBatch batch{random_tensor(rng, Shape{4, 3}), std::nullopt, {}};
  const std::vector<int> y{0, 2, 1, 1};
  const std::vector<double> w{1.1, 1.4, 1.9, 1.25};
  std::vector<double> w3;
  for (double v : w) w3.push_back(1.5 * v);
  const GradVector a = target_gradient(s.g, s.f1, s.f2, batch, pseudo_from(y, w), false);
  const GradVector b = target_gradient(s.g, s.f1, s.f2, batch, pseudo_from(y, w3), false);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b.flat[i], 1.5 * a.flat[i], 1e-14);
}

TEST(TargetGradient, ThreeSampleLinearHeadClosedForm) {
  const Heads s = random_setup(8, 2, 3, 2, true);
  const Tensor x = Tensor::matrix({{0.5, -1.0}, {1.5, 0.2}, {-0.7, 0.9}});
  const std::vector<int> y{1, 0, 1};
  const std::vector<double> w{1.3, 1.8, 1.05};
  const GradVector gt = target_gradient(s.g, s.f1, s.f2, DomainBatch{x, std::nullopt, {}}, pseudo_from(y, w), false);
  const Tensor feat = forward(s.g, x);
  std::vector<double> expected;
  for (const Mlp* f : {&s.f1, &s.f2}) {
    for (double v : linear_head_gradient_oracle(feat, y, w, f->layers()[0].weight, f->layers()[0].bias)) {
      expected.push_back(0.5 * v);
    }
  }
  expect_same(gt, vec(expected), 1e-10);
}

TEST(TargetGradient, MissingPseudoLabelsIsContractError) {
  const Heads s = random_setup(9, 3, 4, 3, false);
  EXPECT_THROW(target_gradient(s.g, s.f1, s.f2, DomainBatch{Tensor::zeros(Shape{3, 3}), std::nullopt, {}},
                               pseudo_from({0, 1}, {1, 1}), false),
               ContractError);
}

TEST(GradientDiscrepancy, Examples) {
  const GradVector g = vec({0.3, -1.2, 2.0});
  EXPECT_NEAR(gradient_discrepancy_loss(g, g).item(), 0.0, 1e-12);
  EXPECT_NEAR(gradient_discrepancy_loss(vec({1, 0, 0}), vec({0, 3, 0})).item(), 1.0, 1e-12);
  EXPECT_NEAR(gradient_discrepancy_loss(g, vec({-0.3, 1.2, -2.0})).item(), 2.0, 1e-12);
}

TEST(GradientDiscrepancy, LengthMismatchIsDimensionError) {
  EXPECT_THROW(gradient_discrepancy_loss(vec({1, 2}), vec({1, 2, 3})), DimensionError);
}

TEST(GradientDiscrepancy, ZeroNormGivesZero) {
  EXPECT_EQ(gradient_discrepancy_loss(vec({0, 0, 0}), vec({1, 2, 3})).item(), 0.0);
  EXPECT_EQ(gradient_discrepancy_loss(vec({1, 2, 3}), vec({0, 0, 0})).item(), 0.0);
}

TEST(GradientDiscrepancy, ScaleInvariantAndSymmetric) {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    const Tensor a = random_tensor(rng, Shape{9}), b = random_tensor(rng, Shape{9});
    const double c = rng.uniform(1e-3, 1e3);
    EXPECT_NEAR(gradient_discrepancy_loss(GradVector{a}, GradVector{scale(a, c)}).item(), 0.0, 1e-12);
    EXPECT_NEAR(gradient_discrepancy_loss(GradVector{a}, GradVector{b}).item(),
                gradient_discrepancy_loss(GradVector{b}, GradVector{a}).item(), 1e-15);
  }
}

TEST(LinearHeadOracle, OneHotPredictionHasZeroGradient) {
  const Tensor feat = Tensor::matrix({{1, 0}, {0, 1}});
  const std::vector<double> g = linear_head_gradient_oracle(
      feat, std::vector<int>{0, 1}, std::vector<double>{1, 1}, Tensor::matrix({{1000, -1000}, {-1000, 1000}}),
      Tensor::zeros(Shape{2}));
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(LinearHeadOracle, SingleSampleHandValue) {
  const std::vector<double> g = linear_head_gradient_oracle(Tensor::matrix({{1}}), std::vector<int>{0},
                                                            std::vector<double>{1}, Tensor::zeros(Shape{2, 1}),
                                                            Tensor::zeros(Shape{2}));
  ASSERT_EQ(g.size(), 4u);
  EXPECT_DOUBLE_EQ(g[0], -0.5);  // dW row 0
  EXPECT_DOUBLE_EQ(g[1], 0.5);   // dW row 1
  EXPECT_DOUBLE_EQ(g[2], -0.5);  // db
  EXPECT_DOUBLE_EQ(g[3], 0.5);
}

TEST(ConditionalGradientLoss, IdenticalSingleClassBatchesGiveZero) {
  const Heads s = random_setup(11, 3, 4, 3, false);
  Rng rng(11);
  const Tensor x = random_tensor(rng, Shape{4, 3});
  const DomainBatch src{x, std::vector<int>{1, 1, 1, 1}, {}};
  const DomainBatch tgt{x, std::nullopt, {}};
  EXPECT_NEAR(
      conditional_gradient_loss(s.g, s.f1, s.f2, src, tgt, pseudo_from({1, 1, 1, 1}, {1, 1, 1, 1}), false).item(), 0.0,
      1e-10);
}

TEST(ConditionalGradientLoss, NoSharedClassWarnsAndGivesZero) {
  const Heads s = random_setup(12, 3, 4, 3, false);
  Rng rng(12);
  std::vector<std::string> warnings;
  const WarningSink previous = set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  const DomainBatch src{random_tensor(rng, Shape{2, 3}), std::vector<int>{0, 0}, {}};
  const DomainBatch tgt{random_tensor(rng, Shape{2, 3}), std::nullopt, {}};
  const double v = conditional_gradient_loss(s.g, s.f1, s.f2, src, tgt, pseudo_from({2, 1}, {1.5, 1.5}), false).item();
  set_warning_sink(previous);
  EXPECT_EQ(v, 0.0);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("no class"), std::string::npos);
}

TEST(ConditionalGradientLoss, MeanOverSharedClasses) {
  const Heads s = random_setup(13, 3, 4, 3, false);
  Rng rng(13);
  const Tensor xs = random_tensor(rng, Shape{6, 3}), xt = random_tensor(rng, Shape{5, 3});
  const std::vector<int> ys{0, 1, 0, 2, 1, 0};       // class 2 only in source
  const std::vector<int> yt{1, 0, 1, 1, 0};          // classes 0 and 1 shared
  const std::vector<double> wt{1.2, 1.5, 1.9, 1.1, 1.3};
  const double got =
      conditional_gradient_loss(s.g, s.f1, s.f2, DomainBatch{xs, ys, {}}, DomainBatch{xt, std::nullopt, {}},
                                pseudo_from(yt, wt), false)
          .item();

  // Per-class losses recomputed from explicitly filtered batches.
  auto class_loss = [&](int c) {
    std::vector<std::size_t> rs, rt;
    std::vector<int> ls, lt;
    std::vector<double> ws;
    for (std::size_t i = 0; i < ys.size(); ++i) {
      if (ys[i] == c) rs.push_back(i), ls.push_back(c);
    }
    for (std::size_t i = 0; i < yt.size(); ++i) {
      if (yt[i] == c) rt.push_back(i), lt.push_back(c), ws.push_back(wt[i]);
    }
    const GradVector gs = source_gradient(s.g, s.f1, s.f2, DomainBatch{gather_rows(xs, rs), ls, {}}, false);
    const GradVector gt =
        target_gradient(s.g, s.f1, s.f2, DomainBatch{gather_rows(xt, rt), std::nullopt, {}}, pseudo_from(lt, ws), false);
    const double dot_v = dot(gs.flat, gt.flat).item();
    return 1.0 - dot_v / (l2_norm(gs.flat).item() * l2_norm(gt.flat).item() + 1e-12);
  };
  const double a = class_loss(0), b = class_loss(1);
  EXPECT_NEAR(got, 0.5 * (a + b), 1e-12);
  EXPECT_GT(std::abs(a - b), 1e-6);
}

// d L_GD / d theta_g via double backward against differences of L_GD
// re-evaluated end to end.
TEST(GradientDiscrepancy, GeneratorGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    const Mlp g0 = linear(random_tensor(rng, Shape{3, 2}), random_tensor(rng, Shape{3}));
    const Mlp f1 = linear(random_tensor(rng, Shape{2, 3}), random_tensor(rng, Shape{2}));
    const Mlp f2 = linear(random_tensor(rng, Shape{2, 3}), random_tensor(rng, Shape{2}));
    const DomainBatch src{random_tensor(rng, Shape{5, 2}), std::vector<int>{0, 1, 1, 0, 1}, {}};
    const DomainBatch tgt{random_tensor(rng, Shape{5, 2}), std::nullopt, {}};
    const PseudoLabelSet pl = pseudo_from({1, 1, 0, 0, 1}, {1.2, 1.7, 1.4, 1.9, 1.1});

    auto loss_at = [&](const Mlp& g, const Mlp& a, const Mlp& b, bool create_graph) {
      return gradient_discrepancy_loss(source_gradient(g, a, b, src, create_graph),
                                       target_gradient(g, a, b, tgt, pl, create_graph));
    };
    Graph graph;
    const Mlp g = g0.attach(graph);
    const GradMap grads = backward(loss_at(g, f1.attach(graph), f2.attach(graph), true), g.parameters());

    const std::vector<Tensor> params = g0.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto f = [&](const Tensor& t) {
        std::vector<Tensor> ps = params;
        ps[p] = t;
        Mlp gp = g0;
        gp.set_parameters(ps);
        return loss_at(gp, f1, f2, false).item();
      };
      expect_gradient_close(grads[p], numeric_gradient(f, params[p]), 1e-3);
    }
  }
}
