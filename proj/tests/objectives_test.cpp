#include <vector>

#include <gtest/gtest.h>

#include "lopt/gradcheck.hpp"
#include "lopt/inference.hpp"
#include "lopt/objectives.hpp"
#include "lopt/optimizers.hpp"
#include "test_util.hpp"

using namespace lopt;

namespace {

std::vector<double> grad_wrt_prediction(const Objective& obj, const std::vector<double>& y_hat,
                                        const Observation& obs) {
  Tensor p = Tensor::vector(y_hat, true);
  backward(obj.eval_loss(p, obs));
  return {p.grad().begin(), p.grad().end()};
}

}  // namespace

TEST(Objective, ZeroAtEquality) {
  const Observation obs(Tensor::vector({1.0, -2.0, 0.5}));
  EXPECT_EQ(Objective::l2().eval_loss(obs.y, obs).item(), 0.0);
}

TEST(Objective, HiddenMismatchIsInvisible) {
  const Mask mask{true, true, false, false};
  const Observation obs(Tensor::vector({1, 2, 3, 4}));
  const std::vector<double> y_hat{1, 2, 30, -40};
  const auto obj = Objective::l2(mask);
  EXPECT_EQ(obj.eval_loss(Tensor::vector(y_hat), obs).item(), 0.0);
  const auto g = grad_wrt_prediction(obj, y_hat, obs);
  EXPECT_EQ(g[2], 0.0);
  EXPECT_EQ(g[3], 0.0);
}

TEST(Objective, FeatureTermAddsToL2) {
  Rng rng = make_rng(4);
  const Tensor proj = make_feature_projection(6, 3, 4);
  const Observation obs(Tensor::vector(gaussian_vector(rng, 6)));
  const Tensor y_hat = Tensor::vector(gaussian_vector(rng, 6));
  NoGradGuard g;
  const double total = Objective::l2_plus_feature(proj).eval_loss(y_hat, obs).item();
  // Projected features by hand.
  std::vector<double> fa(3, 0.0);
  std::vector<double> fb(3, 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      fa[j] += y_hat.values()[i] * proj.values()[i * 3 + j];
      fb[j] += obs.y.values()[i] * proj.values()[i * 3 + j];
    }
  }
  double feat = 0.0;
  for (std::size_t j = 0; j < 3; ++j) feat += (fa[j] - fb[j]) * (fa[j] - fb[j]) / 3.0;
  double l2 = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    l2 += (y_hat.values()[i] - obs.y.values()[i]) * (y_hat.values()[i] - obs.y.values()[i]) / 6.0;
  }
  EXPECT_NEAR(total, l2 + feat, 1e-12);
}

TEST(Objective, AllHiddenMaskIsAnInputError) {
  EXPECT_THROW((void)Objective::l2(Mask{false, false}), InputError);
  EXPECT_THROW(Observation(Tensor::vector({1, 2}), Mask{false, false}), InputError);
}

TEST(Objective, NegativeDecayIsAConfigError) {
  EXPECT_THROW((void)Objective::task_plus_decay(-1.0), ConfigError);
}

TEST(Objective, ShapeMismatch) {
  const Observation obs(Tensor::vector({1, 2, 3}));
  EXPECT_THROW((void)Objective::l2().eval_loss(Tensor::vector({1, 2}), obs), DimensionError);
  EXPECT_THROW((void)Objective::l2(Mask{true, false}).eval_loss(Tensor::vector({1, 2, 3}), obs),
               DimensionError);
}

TEST(Objective, NonNegativeAndInvariantToHiddenTargets) {
  Rng rng = make_rng(9);
  const Mask mask{true, false, true, false, true};
  const auto obj = Objective::l2(mask);
  for (int trial = 0; trial < 20; ++trial) {
    const auto yv = gaussian_vector(rng, 5);
    auto yv2 = yv;
    yv2[1] += 10.0;
    yv2[3] -= 3.0;
    const Tensor y_hat = Tensor::vector(gaussian_vector(rng, 5));
    NoGradGuard g;
    const double a = obj.eval_loss(y_hat, Observation(Tensor::vector(yv))).item();
    const double b = obj.eval_loss(y_hat, Observation(Tensor::vector(yv2))).item();
    EXPECT_GE(a, 0.0);
    EXPECT_EQ(a, b);
  }
}

TEST(MaskSemantics, FullMaskLeavesGradientAlone) {
  const auto obj = Objective::l2(Mask{true, true, true});
  const Tensor g = Tensor::vector({0.1, -0.2, 0.3});
  EXPECT_EQ(apply_mask_semantics(obj, g).to_vector(), g.to_vector());
}

TEST(MaskSemantics, SingleObservedEntry) {
  const auto obj = Objective::l2(Mask{false, true, false, false});
  const auto out = apply_mask_semantics(obj, Tensor::vector({1, 2, 3, 4})).to_vector();
  EXPECT_EQ(out, (std::vector<double>{0, 2, 0, 0}));
}

TEST(MaskSemantics, Errors) {
  EXPECT_THROW((void)apply_mask_semantics(Objective::l2(), Tensor::vector({1})), ContractError);
  EXPECT_THROW((void)apply_mask_semantics(Objective::l2(Mask{true, false}), Tensor::vector({1, 2, 3})),
               DimensionError);
}

// Masking inside the loss and zeroing dL/dy afterwards must move z identically.
TEST(MaskSemantics, MatchesPostHocZeroing) {
  const Mask mask{true, false, true, true, false, false};
  const ForwardModel f(make_rugged_decoder({.dx = 2, .dy = 6, .features = 8, .seed = 13}));
  const auto theta = make_mapping_network(3, 8, 2, 13);
  Rng rng = make_rng(14);
  const Observation obs(Tensor::vector(gaussian_vector(rng, 6)));
  const auto z0 = gaussian_vector(rng, 3);
  const double lr = 0.05;

  // Path A: masked loss.
  std::vector<double> za = z0;
  // Path B: unmasked mse on y_hat, gradient at y_hat zeroed on hidden entries,
  // rescaled from 1/6 to 1/3 normalization, then pulled back through F and theta.
  std::vector<double> zb = z0;
  const auto obj = Objective::l2(mask);
  for (int step = 0; step < 5; ++step) {
    Tensor ta = Tensor::vector(za, true);
    Optimizer oa({OptimizerKind::sgd, lr}, {ta});
    backward(mapped_loss(theta, f, obj, obs, ta));
    oa.step();
    za = ta.to_vector();

    Tensor tb = Tensor::vector(zb, true);
    Tensor y_hat_leaf;
    std::vector<double> gy;
    {
      NoGradGuard g;
      y_hat_leaf = Tensor::vector(f.forward(mapping_forward(theta, Tensor::vector(zb))).to_vector(), true);
    }
    backward(mse(y_hat_leaf, obs.y));
    const Tensor masked = apply_mask_semantics(obj, Tensor::vector({y_hat_leaf.grad().begin(), y_hat_leaf.grad().end()}));
    gy = masked.to_vector();
    for (double& v : gy) v *= 6.0 / 3.0;
    const Tensor y_hat = f.forward(mapping_forward(theta, tb));
    backward(sum(mul(y_hat, Tensor::vector(gy))));
    Optimizer ob({OptimizerKind::sgd, lr}, {tb});
    ob.step();
    zb = tb.to_vector();
    EXPECT_LT(test::max_abs_diff(za, zb), 1e-12) << "step " << step;
  }
}

TEST(MaskLiteral, BitstringAndIndexList) {
  EXPECT_EQ(parse_mask("1010", 4), (Mask{true, false, true, false}));
  EXPECT_EQ(parse_mask("0,2", 4), (Mask{true, false, true, false}));
  EXPECT_TRUE(parse_mask("", 4).empty());
  EXPECT_THROW((void)parse_mask("101", 4), DimensionError);
  EXPECT_THROW((void)parse_mask("0000", 4), InputError);
  EXPECT_EQ(mask_to_string(Mask{true, false, true}), "101");
}

TEST(Objective, EveryKindMatchesFiniteDifferences) {
  GradCheckOptions opt;
  opt.seeds = 50;
  std::uint64_t stream = 500;
  for (const auto& c : pipeline_cases()) {
    if (c.name.rfind("objective_", 0) != 0) continue;
    const auto row = run_grad_case(c, opt, ++stream);
    EXPECT_TRUE(row.pass) << c.name << " " << row.max_rel_error;
  }
}
