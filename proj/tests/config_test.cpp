#include <cstdlib>
#include <string>

#include <gtest/gtest.h>

#include "lopt/commands.hpp"
#include "lopt/config.hpp"

using namespace lopt;

TEST(Config, EveryPresetResolves) {
  for (const auto& name : preset_names()) {
    const auto c = parse_config("preset = " + name + "\n");
    EXPECT_EQ(c.preset, name);
    EXPECT_EQ(c.train.seed, c.seed);
    EXPECT_EQ(c.infer.seed, c.seed);
  }
  EXPECT_EQ(preset_names().size(), 4u);
}

TEST(Config, RoundTrip) {
  for (const auto& name : preset_names()) {
    const auto a = parse_config("preset = " + name + "\nseed = 17\ntrain.B = 3\n");
    const auto text = a.serialize();
    const auto b = parse_config(text);
    EXPECT_EQ(b.serialize(), text) << name;
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.to_map(), b.to_map());
  }
}

TEST(Config, HashTracksContent) {
  const auto a = parse_config("seed = 1\n");
  const auto b = parse_config("seed = 2\n");
  EXPECT_NE(a.hash_hex(), b.hash_hex());
  EXPECT_EQ(a.hash_hex().size(), 16u);
}

TEST(Config, CommentsBlankLinesAndLastWins) {
  const auto c = parse_config("# header\n\ntrain.B = 3   # trailing\ntrain.B = 4\n");
  EXPECT_EQ(c.train.rounds, 4u);
}

TEST(Config, Errors) {
  EXPECT_THROW((void)parse_config("no.such.key = 1\n"), ConfigError);
  EXPECT_THROW((void)parse_config("preset = nope\n"), ConfigError);
  EXPECT_THROW((void)parse_config("train.B = -1\n"), ConfigError);
  EXPECT_THROW((void)parse_config("train.B = 0\n"), ConfigError);
  EXPECT_THROW((void)parse_config("infer.lr = fast\n"), ConfigError);
  EXPECT_THROW((void)parse_config("just words\n"), ConfigError);
  EXPECT_THROW((void)parse_config("train.mode = sometimes\n"), ConfigError);
  EXPECT_THROW((void)parse_config("model.inner = additive_correction\n"), ConfigError);
}

TEST(Config, MaskIsCheckedAgainstDy) {
  EXPECT_THROW((void)parse_config("objective.mask = 00000000\n"), InputError);
  EXPECT_THROW((void)parse_config("objective.mask = 0,9\n"), DimensionError);
  EXPECT_NO_THROW((void)parse_config("objective.mask = 11110000\n"));
}

TEST(Config, DeskDefaults) {
  const auto c = parse_config("");
  EXPECT_EQ(c.preset, "rugged-desk");
  EXPECT_EQ(c.model.dx, 2u);
  EXPECT_EQ(c.model.dy, 8u);
  EXPECT_EQ(c.theta.dz, 2 * c.model.dx);
  EXPECT_EQ(c.theta.hidden, 64u);
  EXPECT_EQ(c.train.rounds, 50u);
  EXPECT_EQ(c.train.samples, 64u);
  EXPECT_EQ(c.train.steps, 20u);
  EXPECT_EQ(c.train.init, InitPolicy::zero);
  EXPECT_EQ(c.theta.slope, 0.2);
}

TEST(Presets, GanLike) {
  const auto c = parse_config("preset = gan-like\n");
  EXPECT_EQ(c.theta.dz, c.model.dx);
  EXPECT_EQ(c.theta.hidden, 1024u);
  EXPECT_EQ(c.train.z_optimizer.kind, OptimizerKind::adam);
  EXPECT_EQ(c.train.z_optimizer.lr, 0.1);
  EXPECT_EQ(c.train.theta_optimizer.kind, OptimizerKind::adamw);
  EXPECT_EQ(c.train.theta_optimizer.lr, 1e-4);
  EXPECT_EQ(c.train.theta_optimizer.weight_decay, 0.1);
  EXPECT_EQ(c.train.steps, 20u);
  EXPECT_EQ(c.train.samples, 256u);
  EXPECT_EQ(c.train.rounds, 500u);
}

TEST(Presets, PoseLike) {
  const auto c = parse_config("preset = pose-like\n");
  EXPECT_EQ(c.theta.dz, 128u);
  EXPECT_EQ(c.model.dx, 32u);
  EXPECT_EQ(c.theta.hidden, 512u);
  EXPECT_EQ(c.train.z_optimizer.lr, 0.1);
  EXPECT_EQ(c.train.theta_optimizer.lr, 0.005);
  EXPECT_EQ(c.train.theta_optimizer.weight_decay, 0.1);
  EXPECT_EQ(c.train.steps, 200u);
  EXPECT_EQ(c.train.samples, 40960u);
  EXPECT_EQ(c.train.rounds, 500u);
}

TEST(Presets, DefenseLike) {
  const auto c = parse_config("preset = defense-like\n");
  EXPECT_EQ(c.theta.dz, 3072u);
  EXPECT_EQ(c.model.dx, 3072u);
  EXPECT_EQ(c.theta.hidden, 3072u);
  EXPECT_DOUBLE_EQ(c.train.z_optimizer.lr, 0.2 / 255.0);
  EXPECT_EQ(c.train.theta_optimizer.lr, 1e-4);
  EXPECT_EQ(c.train.theta_optimizer.weight_decay, 0.1);
  EXPECT_EQ(c.train.steps, 5u);
  EXPECT_EQ(c.train.samples, 5120u);
  EXPECT_EQ(c.train.rounds, 70u);
  EXPECT_EQ(c.objective.kind, ObjectiveKind::task_plus_decay);
  EXPECT_EQ(c.objective.decay, 1.0);
  EXPECT_EQ(c.infer.init, InitPolicy::gaussian);
  EXPECT_DOUBLE_EQ(c.infer.sigma, 8.0 / 255.0);
}

TEST(ConfigSource, OverridesAndEnvironmentSeed) {
  cli::ConfigSource src;
  src.preset = "rugged-desk";
  src.overrides = {"train.B=2", "seed=5"};
  ::unsetenv("LOPT_SEED");
  EXPECT_EQ(cli::assemble_config(src).seed, 5u);
  ::setenv("LOPT_SEED", "123", 1);
  const auto c = cli::assemble_config(src);
  ::unsetenv("LOPT_SEED");
  EXPECT_EQ(c.seed, 123u);
  EXPECT_EQ(c.train.rounds, 2u);
  src.overrides = {"train.B"};
  EXPECT_THROW((void)cli::assemble_config(src), ConfigError);
}
