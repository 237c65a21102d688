#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "lopt/oracle_suite.hpp"
#include "test_util.hpp"

using namespace lopt;
using namespace lopt::oracle;

TEST(GridMinimize, BowlAndTieBreak) {
  const auto gm = grid_minimize([](auto p) { return p[0] * p[0] + p[1] * p[1]; }, {{-1, -1}, {1, 1}}, 21);
  EXPECT_EQ(gm.value, 0.0);
  EXPECT_EQ(gm.argmin, (std::vector<double>{0.0, 0.0}));
  // flat function: first vertex wins
  const auto flat = grid_minimize([](auto) { return 1.0; }, {{-1, -1}, {1, 1}}, 11);
  EXPECT_EQ(flat.argmin, (std::vector<double>{-1.0, -1.0}));
}

TEST(GridMinimize, SnapsToNearestVertex) {
  const auto gm = grid_minimize([](auto p) { return std::abs(p[0] - 0.53) + std::abs(p[1] + 0.26); },
                                {{-1, -1}, {1, 1}}, 21);
  EXPECT_NEAR(gm.argmin[0], 0.5, 1e-12);
  EXPECT_NEAR(gm.argmin[1], -0.3, 1e-12);
}

TEST(GridMinimize, NanNeverWins) {
  const auto gm = grid_minimize([](auto p) { return p[0] < 0 ? std::nan("") : p[0]; }, {{-1}, {1}}, 11);
  EXPECT_EQ(gm.value, 0.0);
}

TEST(GridMinimize, RejectsCoarseGrids) {
  EXPECT_THROW((void)grid_minimize([](auto) { return 0.0; }, {{0}, {1}}, 10), InputError);
  EXPECT_THROW((void)grid_minimize([](auto) { return 0.0; }, {{0, 0}, {1}}, 11), DimensionError);
}

TEST(GridMinimize, ThreadsAgree) {
  const auto inst = rugged_instance_scalar();
  const Box box{{-1, -1}, {1, 1}};
  const auto a = grid_minimize(instance_loss(inst), box, 41, 1);
  const auto b = grid_minimize(instance_loss(inst), box, 41, 4);
  EXPECT_EQ(a.argmin, b.argmin);
  EXPECT_EQ(a.value, b.value);
}

TEST(FiniteDiff, LinearAndQuadratic) {
  const std::vector<double> x{0.3, -0.7};
  const auto lin = finite_diff([](auto p) { return 2.0 * p[0] - 5.0 * p[1]; }, x);
  EXPECT_NEAR(lin[0], 2.0, 1e-9);
  EXPECT_NEAR(lin[1], -5.0, 1e-9);
  const auto quad = finite_diff([](auto p) { return p[0] * p[0] + 3.0 * p[1] * p[1]; }, x);
  EXPECT_NEAR(quad[0], 0.6, 1e-8);
  EXPECT_NEAR(quad[1], -4.2, 1e-8);
}

TEST(FiniteDiff, NonFiniteSampleIsAnOracleError) {
  EXPECT_THROW((void)finite_diff([](auto p) { return 1.0 / (p[0] - 1e-5); }, std::vector<double>{0.0}),
               OracleError);
}

TEST(RelativeError, Floor) {
  EXPECT_EQ(relative_error(std::vector<double>{0.0}, std::vector<double>{0.0}), 0.0);
  EXPECT_NEAR(relative_error(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 0.0}), 1.0, 1e-15);
  EXPECT_THROW((void)relative_error(std::vector<double>{1.0}, std::vector<double>{}), DimensionError);
}

TEST(FixtureFile, WriteOnceAndRoundTrip) {
  test::TempDir dir("fixture");
  FixtureFile fx;
  fx.add({"thing", 9, {2}, {1.25, -3.5}, 1e-6, "2026-01-01T00:00:00Z"});
  EXPECT_THROW(fx.add({"thing", 9, {2}, {0.0, 0.0}, 1e-6, ""}), OracleError);
  fx.save(dir / "x.fixture");
  const auto back = FixtureFile::load(dir / "x.fixture");
  const auto r = back.get("thing");
  EXPECT_EQ(r.seed, 9u);
  EXPECT_EQ(r.dims, (std::vector<std::size_t>{2}));
  EXPECT_EQ(r.expected, (std::vector<double>{1.25, -3.5}));
  EXPECT_EQ(r.tolerance, 1e-6);
  EXPECT_EQ(r.created, "2026-01-01T00:00:00Z");
  EXPECT_THROW((void)back.get("other"), OracleError);
}

TEST(Fixtures, CommittedRecordsPresent) {
  const auto fx = FixtureFile::load(default_fixture_path());
  for (const char* name : {"rugged_dy1.grid_min", "rugged_desk.grid_min", "mini_decoder.seed42",
                           "pipeline_fd.20pts", "desk_ablation.20", "desk_efficiency",
                           "desk_landscape.spikes", "masked_diversity"}) {
    EXPECT_TRUE(fx.has(name)) << name;
  }
}

TEST(Fixtures, ScalarInstanceGridMinimum) {
  const auto fx = FixtureFile::load(default_fixture_path());
  const auto rec = fx.get("rugged_dy1.grid_min");
  const auto gm = instance_grid_minimum(rugged_instance_scalar(), 4);
  EXPECT_NEAR(gm.argmin[0], rec.expected[0], rec.tolerance);
  EXPECT_NEAR(gm.argmin[1], rec.expected[1], rec.tolerance);
  EXPECT_NEAR(gm.value, rec.expected[2], rec.tolerance);
}

TEST(OracleSuite, Passes) {
  const auto report = run_oracle_suite(default_fixture_path(), 4);
  EXPECT_TRUE(report.passed()) << report.format();
}
