#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "lopt/commands.hpp"
#include "test_util.hpp"

using namespace lopt;
using namespace lopt::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_files(const fs::path& dir, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename().string().rfind(prefix, 0) == 0) ++n;
  }
  return n;
}

TrainOptions tiny_train(const fs::path& out, std::vector<std::string> extra = {}) {
  TrainOptions t;
  t.source.preset = "rugged-desk";
  t.source.out_dir = out.string();
  t.source.overrides = {"train.B=1", "train.N=1", "train.T=1", "eval.heldout=3"};
  for (auto& s : extra) t.source.overrides.push_back(std::move(s));
  t.threads = 1;
  return t;
}

int run(auto&& fn) {
  std::ostringstream log;
  return guarded(log, [&] { return fn(log); });
}

}  // namespace

TEST(CliTrain, SmokeRun) {
  test::TempDir dir("cli_smoke");
  EXPECT_EQ(run([&](auto& log) { return cmd_train(tiny_train(dir.path()), log); }), kOk);
  EXPECT_TRUE(fs::exists(dir / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "config.txt"));
  EXPECT_TRUE(fs::exists(dir / "round_stats.csv"));
  const auto ck = load_checkpoint(dir / "final.ckpt");
  EXPECT_EQ(ck.rounds_done, 1u);
  EXPECT_EQ(ck.optimizer_steps, 1u);
  EXPECT_EQ(read_observations(dir / "heldout_obs.csv").size(), 3u);
}

TEST(CliTrain, ConfigFileRoundTripsThroughOutput) {
  test::TempDir dir("cli_cfgfile");
  ASSERT_EQ(run([&](auto& log) { return cmd_train(tiny_train(dir / "a"), log); }), kOk);
  TrainOptions t;
  t.source.config_path = (dir / "a" / "config.txt").string();
  t.source.out_dir = (dir / "b").string();
  t.threads = 1;
  ASSERT_EQ(run([&](auto& log) { return cmd_train(t, log); }), kOk);
  EXPECT_EQ(slurp(dir / "a" / "final.ckpt"), slurp(dir / "b" / "final.ckpt"));
  EXPECT_EQ(slurp(dir / "a" / "round_stats.csv"), slurp(dir / "b" / "round_stats.csv"));
}

TEST(CliTrain, IntermediateCheckpoints) {
  test::TempDir dir("cli_ckpt_every");
  auto t = tiny_train(dir.path(), {"train.B=4", "train.checkpoint_every=2"});
  ASSERT_EQ(run([&](auto& log) { return cmd_train(t, log); }), kOk);
  EXPECT_TRUE(fs::exists(dir / "checkpoint_round2.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "checkpoint_round4.ckpt"));
  EXPECT_EQ(load_checkpoint(dir / "checkpoint_round2.ckpt").rounds_done, 2u);
}

TEST(CliTrain, OnlineFlag) {
  test::TempDir dir("cli_online");
  auto t = tiny_train(dir.path(), {"train.B=2", "train.N=2", "train.T=3"});
  t.online = true;
  ASSERT_EQ(run([&](auto& log) { return cmd_train(t, log); }), kOk);
  const auto ck = load_checkpoint(dir / "final.ckpt");
  EXPECT_TRUE(ck.config.online);
  EXPECT_EQ(ck.optimizer_steps, 12u);
}

TEST(CliTrain, ErrorsMapToExitCodes) {
  test::TempDir dir("cli_errors");
  EXPECT_EQ(run([&](auto& log) { return cmd_train(tiny_train(dir.path(), {"no.such=1"}), log); }),
            kConfigError);
  EXPECT_EQ(run([&](auto& log) { return cmd_train(tiny_train("/proc/lopt_cannot_write"), log); }), kIoError);
  EXPECT_EQ(run([&](auto& log) { return cmd_train(tiny_train(dir.path(), {"train.z_lr=1e200", "train.T=5"}), log); }),
            kDivergence);
}

class CliInfer : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir("cli_infer");
    std::ostringstream log;
    ASSERT_EQ(cmd_train(tiny_train(dir_->path(), {"train.B=2", "train.N=4", "train.T=5"}), log), kOk);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path path(const std::string& s) { return *dir_ / s; }

  InferOptions options(const std::string& out) const {
    InferOptions o;
    o.checkpoint = path("final.ckpt").string();
    o.observations = path("heldout_obs.csv").string();
    o.out_dir = path(out).string();
    o.threads = 1;
    return o;
  }

  static inline test::TempDir* dir_ = nullptr;
};

TEST_F(CliInfer, MappedAndBaselineOutputs) {
  auto o = options("m");
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kOk);
  EXPECT_EQ(count_files(o.out_dir, "trace_mapped_obs"), 3u);
  EXPECT_TRUE(fs::exists(fs::path(o.out_dir) / "curve_mapped.csv"));
  EXPECT_TRUE(fs::exists(fs::path(o.out_dir) / "reconstructions_mapped.csv"));
  o.baseline = true;
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kOk);
  EXPECT_EQ(count_files(o.out_dir, "trace_baseline_obs"), 3u);
  const auto trace = slurp(fs::path(o.out_dir) / "trace_mapped_obs0.csv");
  EXPECT_EQ(trace.rfind("# config_hash=", 0), 0u);
  EXPECT_NE(trace.find("step,loss,z0,z1,z2,z3"), std::string::npos);
}

TEST_F(CliInfer, Hypotheses) {
  auto o = options("h");
  o.hypotheses = 4;
  o.init = "gaussian";
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kOk);
  EXPECT_EQ(count_files(o.out_dir, "trace_mapped_obs0_h"), 4u);
  EXPECT_EQ(count_files(o.out_dir, "trace_mapped_obs"), 12u);
}

TEST_F(CliInfer, SeveralHypothesesFromZeroInitIsAConfigError) {
  auto o = options("hz");
  o.hypotheses = 4;
  EXPECT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kConfigError);
}

TEST_F(CliInfer, ThreadCountDoesNotChangeBytes) {
  auto a = options("t1");
  auto b = options("t4");
  b.threads = 4;
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(a, log); }), kOk);
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(b, log); }), kOk);
  for (const auto& e : fs::directory_iterator(a.out_dir)) {
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(b.out_dir) / e.path().filename())) << e.path();
  }
}

TEST_F(CliInfer, ObservationDimensionMismatch) {
  std::ofstream(path("bad_dim.csv")) << "y0,y1,y2\n1,2,3\n";
  auto o = options("bad");
  o.observations = path("bad_dim.csv").string();
  EXPECT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kConfigError);
}

TEST_F(CliInfer, MalformedObservationsAreIoErrors) {
  std::ofstream(path("ragged.csv")) << "y0,y1\n1,2\n3\n";
  std::ofstream(path("noheader.csv")) << "1,2\n";
  std::ofstream(path("text.csv")) << "y0,y1\n1,abc\n";
  EXPECT_THROW((void)read_observations(path("ragged.csv")), IoError);
  EXPECT_THROW((void)read_observations(path("noheader.csv")), IoError);
  auto o = options("ragged");
  o.observations = path("ragged.csv").string();
  EXPECT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kIoError);
  EXPECT_NE(run([&](auto& log) { (void)read_observations(path("text.csv")); return kOk; }), kOk);
  EXPECT_EQ(run([&](auto& log) { (void)read_observations(path("missing.csv")); return kOk; }), kIoError);
}

TEST_F(CliInfer, Landscape) {
  LandscapeOptions l;
  l.checkpoint = path("final.ckpt").string();
  l.observations = path("heldout_obs.csv").string();
  l.out_dir = path("land").string();
  l.count = 2;
  l.resolution = 9;
  l.threads = 2;
  ASSERT_EQ(run([&](auto& log) { return cmd_landscape(l, log); }), kOk);
  EXPECT_EQ(count_files(l.out_dir, "landscape_x_obs"), 2u);
  EXPECT_EQ(count_files(l.out_dir, "landscape_z_obs"), 2u);
  std::istringstream grid(slurp(fs::path(l.out_dir) / "landscape_z_obs0.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(grid, line)) rows += !line.empty() && line[0] != '#';
  EXPECT_EQ(rows, 1u + 81u);
}

TEST(CliInferIdentity, IdentityThetaMatchesBaselineByteForByte) {
  test::TempDir dir("cli_identity");
  std::vector<double> eye{1.5, 0.0, 0.0, 1.5};
  const ForwardModel f(RuggedDecoder{Tensor::matrix(2, 1, {0.0, 0.0}), Tensor::vector({0.0}),
                                     Tensor::matrix(1, 2, {0.0, 0.0}), Tensor::matrix(2, 2, eye)});
  const auto cfg = parse_config("model.dx = 2\nmodel.dy = 2\ntheta.dz = 2\ninfer.steps = 30\ninfer.lr = 0.05\n");
  save_checkpoint(dir / "id.ckpt", cfg, f, identity_mapping(2), nullptr, 0);
  std::ofstream(dir / "obs.csv") << "y0,y1\n1,2\n0.5,0.25\n";
  InferOptions o;
  o.checkpoint = (dir / "id.ckpt").string();
  o.observations = (dir / "obs.csv").string();
  o.out_dir = (dir / "out").string();
  o.threads = 1;
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kOk);
  o.baseline = true;
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kOk);
  const fs::path out = o.out_dir;
  for (const char* obs : {"_obs0.csv", "_obs1.csv"}) {
    EXPECT_EQ(slurp(out / ("trace_mapped" + std::string(obs))), slurp(out / ("trace_baseline" + std::string(obs))));
  }
  EXPECT_EQ(slurp(out / "curve_mapped.csv"), slurp(out / "curve_baseline.csv"));
}

TEST(CliInferMasked, HypothesesDisagreeOnHiddenEntries) {
  test::TempDir dir("cli_masked");
  TrainOptions t;
  t.source.overrides = {"model.kind=mini_decoder", "model.dx=8", "model.dy=12", "theta.dz=16",
                        "model.fit_epochs=50",     "train.B=1",  "train.N=2",   "train.T=2",
                        "eval.heldout=2"};
  t.source.out_dir = dir.path().string();
  t.threads = 1;
  ASSERT_EQ(run([&](auto& log) { return cmd_train(t, log); }), kOk);
  InferOptions o;
  o.checkpoint = (dir / "final.ckpt").string();
  o.observations = (dir / "heldout_obs.csv").string();
  o.out_dir = (dir / "out").string();
  o.mask = "111111000000";
  o.hypotheses = 3;
  o.init = "gaussian";
  o.steps = 50;
  o.threads = 2;
  ASSERT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kOk);
  EXPECT_EQ(count_files(o.out_dir, "trace_mapped_obs"), 6u);

  // Hidden entries of the reconstructions: hypotheses should not coincide.
  std::istringstream rec(slurp(fs::path(o.out_dir) / "reconstructions_mapped.csv"));
  std::string line;
  std::vector<std::vector<double>> hidden;
  while (std::getline(rec, line)) {
    if (line.empty() || line[0] == '#' || line[0] == 'o') continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(std::stod(c));
    if (cells[0] != 0.0) continue;
    hidden.emplace_back(cells.end() - 6, cells.end());
  }
  ASSERT_EQ(hidden.size(), 3u);
  EXPECT_GT(test::max_abs_diff(hidden[0], hidden[1]), 0.0);

  o.mask = "0,12";
  EXPECT_EQ(run([&](auto& log) { return cmd_infer(o, log); }), kConfigError);
}

TEST(CliAblate, WritesEveryVariant) {
  test::TempDir dir("cli_ablate");
  AblateOptions a;
  a.source.overrides = {"train.B=1", "train.N=2", "train.T=2", "eval.heldout=2"};
  a.source.out_dir = dir.path().string();
  a.steps = {1, 3};
  a.threads = 2;
  ASSERT_EQ(run([&](auto& log) { return cmd_ablate(a, log); }), kOk);
  const auto csv = slurp(dir / "ablation.csv");
  for (const char* v : {"full,1,", "full,3,", "no_cd_no_buffer,3,", "random_theta,3,", "baseline,3,"}) {
    EXPECT_NE(csv.find(v), std::string::npos) << v;
  }
}

TEST(CliCheck, PassesAndDetectsPerturbation) {
  CheckOptions c;
  c.grad = true;
  c.seeds = 5;
  EXPECT_EQ(run([&](auto& log) { return cmd_check(c, log); }), kOk);
  c.perturb = "tanh:1.5";
  EXPECT_EQ(run([&](auto& log) { return cmd_check(c, log); }), kCheckFailed);
  c.perturb.reset();
  EXPECT_EQ(run([&](auto& log) { return cmd_check(c, log); }), kOk);
  c.perturb = "no_such_op";
  EXPECT_EQ(run([&](auto& log) { return cmd_check(c, log); }), kConfigError);
}

TEST(CliCheck, MissingFixtureFileIsAnIoError) {
  CheckOptions c;
  c.oracle = true;
  c.fixtures = "/nonexistent/oracle.fixture";
  EXPECT_EQ(run([&](auto& log) { return cmd_check(c, log); }), kIoError);
}
