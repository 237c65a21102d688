#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "lopt/optimizers.hpp"
#include "test_util.hpp"

using namespace lopt;

namespace {

Tensor param_with_grad(std::vector<double> value, std::vector<double> grad) {
  Tensor p = Tensor::vector(std::move(value), true);
  auto g = p.grad_mut();
  std::copy(grad.begin(), grad.end(), g.begin());
  return p;
}

// Plain re-statement of the adam recurrences for one coordinate.
struct AdamRef {
  double m = 0, v = 0;
  int t = 0;
  double step(double param, double g, double lr, double wd = 0.0) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    return param * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

}  // namespace

TEST(Sgd, ClosedForm) {
  Tensor p = param_with_grad({1.0}, {2.0});
  Optimizer opt({OptimizerKind::sgd, 0.1}, {p});
  opt.step();
  EXPECT_NEAR(p.values()[0], 0.8, 1e-15);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  for (double g : {1e-3, 0.5, 2.0, -7.0, 1e4}) {
    Tensor p = param_with_grad({0.0}, {g});
    Optimizer opt({OptimizerKind::adam, 0.01}, {p});
    opt.step();
    EXPECT_NEAR(p.values()[0], -0.01 * (g > 0 ? 1.0 : -1.0), 1e-6) << g;
  }
}

TEST(Adam, FirstStepDependsOnlyOnSign) {
  Tensor a = param_with_grad({1.0, 1.0}, {0.3, -0.3});
  Tensor b = param_with_grad({1.0, 1.0}, {300.0, -0.003});
  Optimizer oa({OptimizerKind::adam, 0.05}, {a});
  Optimizer ob({OptimizerKind::adam, 0.05}, {b});
  oa.step();
  ob.step();
  EXPECT_LT(test::max_abs_diff(a.values(), b.values()), 1e-6);
}

TEST(Adam, ThreeStepsMatchReference) {
  const std::vector<double> grads{0.4, -1.1, 0.05};
  Tensor p = Tensor::vector({0.7}, true);
  Optimizer opt({OptimizerKind::adam, 0.02}, {p});
  AdamRef ref;
  double expect = 0.7;
  for (double g : grads) {
    p.grad_mut()[0] = g;
    opt.step();
    opt.zero_grad();
    expect = ref.step(expect, g, 0.02);
    EXPECT_NEAR(p.values()[0], expect, 1e-12);
  }
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(AdamW, ZeroGradientIsPureDecay) {
  Tensor p = param_with_grad({1.0}, {0.0});
  Optimizer opt({OptimizerKind::adamw, 1e-4, 0.9, 0.999, 1e-8, 0.1}, {p});
  opt.step();
  EXPECT_NEAR(1.0 - p.values()[0], 1e-5, 1e-15);
}

TEST(AdamW, MatchesReferenceWithDecay) {
  Tensor p = Tensor::vector({-0.4}, true);
  Optimizer opt({OptimizerKind::adamw, 0.01, 0.9, 0.999, 1e-8, 0.1}, {p});
  AdamRef ref;
  double expect = -0.4;
  for (double g : {0.2, 0.2, -0.9, 1.5}) {
    p.grad_mut()[0] = g;
    opt.step();
    opt.zero_grad();
    expect = ref.step(expect, g, 0.01, 0.1);
    EXPECT_NEAR(p.values()[0], expect, 1e-12);
  }
}

TEST(Optimizer, ZeroGradientLeavesSgdAndAdamBitIdentical) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    Tensor p = param_with_grad({0.123456789, -3.5}, {0.0, 0.0});
    const auto before = p.to_vector();
    Optimizer opt({kind, 0.1}, {p});
    opt.step();
    EXPECT_TRUE(test::bitwise_equal(before, p.values())) << to_string(kind);
  }
}

TEST(Optimizer, UnpopulatedGradientIsAContractError) {
  Tensor p = Tensor::vector({1.0}, true);
  Optimizer opt({OptimizerKind::adam, 0.1}, {p});
  EXPECT_THROW(opt.step(), ContractError);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Optimizer, AlwaysDescends) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamw}) {
    Tensor p = param_with_grad({0.0}, {3.0});
    Optimizer opt({kind, 0.1}, {p});
    opt.step();
    EXPECT_LT(p.values()[0], 0.0) << to_string(kind);
  }
}

TEST(Optimizer, NegativeLearningRateRejected) {
  Tensor p = Tensor::vector({1.0}, true);
  EXPECT_THROW(Optimizer({OptimizerKind::sgd, -0.1}, {p}), ConfigError);
}

TEST(Optimizer, RestoreValidatesShapes) {
  Tensor p = Tensor::vector({1.0, 2.0}, true);
  Optimizer opt({OptimizerKind::adam, 0.1}, {p});
  EXPECT_THROW(opt.restore(1, {{0.0}}, {{0.0}}), DimensionError);
  EXPECT_NO_THROW(opt.restore(4, {{0.1, 0.2}}, {{0.01, 0.02}}));
  EXPECT_EQ(opt.steps(), 4u);
}

TEST(OptimizerKind, ParseRoundTrip) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamw}) {
    EXPECT_EQ(parse_optimizer_kind(to_string(kind)), kind);
  }
  EXPECT_THROW((void)parse_optimizer_kind("rmsprop"), ConfigError);
}
