#pragma once

// The seeded instances behind the committed fixtures, and the suite that
// re-checks them. Instance definitions live here so the fixture generator,
// `lopt check --oracle` and the tests all agree on them.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "lopt/config.hpp"
#include "lopt/gradcheck.hpp"
#include "lopt/inference.hpp"
#include "lopt/models.hpp"
#include "lopt/objectives.hpp"
#include "lopt/oracle.hpp"

namespace lopt::oracle {

inline std::filesystem::path default_fixture_path() {
#ifdef LOPT_FIXTURE_DIR
  return std::filesystem::path(LOPT_FIXTURE_DIR) / "oracle.fixture";
#else
  return "fixtures/oracle.fixture";
#endif
}

struct RuggedInstance {
  std::string name;
  ForwardModel model;
  Observation obs;
  Box box{{-4.0, -4.0}, {4.0, 4.0}};
  std::size_t resolution = 401;
};

// Off-grid ground truth shared by both instances.
inline const std::vector<double> kInstanceTruth{1.0123, -0.4871};

inline RuggedInstance make_instance(std::string name, RuggedDecoder decoder) {
  ForwardModel f(std::move(decoder));
  NoGradGuard guard;
  Observation obs(f.forward(Tensor::vector(kInstanceTruth)));
  return {std::move(name), std::move(f), std::move(obs)};
}

// Scalar-output instance (d_y = 1).
inline RuggedInstance rugged_instance_scalar() {
  return make_instance("rugged_dy1", make_rugged_decoder(RuggedOptions{
                                         .dx = 2, .dy = 1, .features = 12, .frequency = 4.0, .seed = 7}));
}

// The decoder of the rugged-desk preset.
inline RuggedInstance rugged_instance_desk() {
  const auto cfg = parse_config("preset = rugged-desk\n");
  return make_instance("rugged_desk", make_rugged_decoder(RuggedOptions{.dx = cfg.model.dx,
                                                                         .dy = cfg.model.dy,
                                                                         .features = cfg.model.features,
                                                                         .frequency = cfg.model.frequency,
                                                                         .amplitude = cfg.model.amplitude,
                                                                         .linear_gain = cfg.model.linear_gain,
                                                                         .seed = cfg.seed}));
}

inline PointFn instance_loss(const RuggedInstance& inst) {
  return [&inst](std::span<const double> p) {
    NoGradGuard guard;
    return pipeline_loss(inst.model, Objective::l2(), inst.obs, Tensor::vector({p.begin(), p.end()})).item();
  };
}

inline GridMinimum instance_grid_minimum(const RuggedInstance& inst, int threads = 1) {
  return grid_minimize(instance_loss(inst), inst.box, inst.resolution, threads);
}

struct MultistartResult {
  std::vector<std::vector<double>> finals;
  std::vector<double> losses;

  std::size_t within(double target, double tol) const {
    return static_cast<std::size_t>(
        std::count_if(losses.begin(), losses.end(), [&](double l) { return l <= target + tol; }));
  }
  std::size_t above(double target, double tol) const {
    return static_cast<std::size_t>(
        std::count_if(losses.begin(), losses.end(), [&](double l) { return l > target + tol; }));
  }
  // Greedy clustering of end points; a new cluster starts farther than
  // `radius` from every existing representative.
  std::size_t clusters(double radius) const {
    std::vector<const std::vector<double>*> reps;
    for (const auto& p : finals) {
      bool found = false;
      for (const auto* r : reps) {
        double d = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) d += (p[k] - (*r)[k]) * (p[k] - (*r)[k]);
        if (std::sqrt(d) <= radius) {
          found = true;
          break;
        }
      }
      if (!found) reps.push_back(&p);
    }
    return reps.size();
  }
};

// Plain descent on x from uniform starts in the instance box.
inline MultistartResult multistart(const RuggedInstance& inst, std::size_t starts = 50,
                                   std::uint64_t seed = 7, std::size_t steps = 300, double lr = 0.05) {
  Rng rng = make_rng(seed, {streams::z_init});
  MultistartResult r;
  InferenceConfig cfg;
  cfg.steps = steps;
  cfg.optimizer = {OptimizerKind::adam, lr};
  const Objective obj = Objective::l2();
  for (std::size_t s = 0; s < starts; ++s) {
    std::vector<double> x0(inst.box.lo.size());
    for (std::size_t k = 0; k < x0.size(); ++k) {
      x0[k] = std::uniform_real_distribution<double>(inst.box.lo[k], inst.box.hi[k])(rng);
    }
    auto trace = detail::run_descent(std::move(x0), cfg, [&](const Tensor& x) {
      return pipeline_loss(inst.model, obj, inst.obs, x);
    });
    r.finals.push_back(trace.records.back().point);
    r.losses.push_back(trace.final_loss);
  }
  return r;
}

// Mini decoder fitted on the packaged synthetic dataset.
struct MiniFitSetup {
  std::size_t samples = 256;
  std::size_t dx = 8;
  std::size_t dy = 32;
  std::size_t hidden = 32;
  std::size_t epochs = 1500;
  double lr = 0.01;
  std::uint64_t seed = 42;
};

inline double target_variance(const DecoderDataset& data) {
  const auto v = data.targets.values();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Suite

struct OracleCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct OracleReport {
  std::vector<OracleCheck> checks;

  bool passed() const {
    return !checks.empty() &&
           std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.pass; });
  }

  std::string format() const {
    std::ostringstream out;
    for (const auto& c : checks) {
      out << (c.pass ? "pass " : "FAIL ") << c.name << ": " << c.detail << '\n';
    }
    return out.str();
  }
};

namespace detail {

inline std::string fmt(double v) { return format_double(v); }

inline OracleCheck compare_grid_minimum(const FixtureFile& fx, const RuggedInstance& inst, int threads) {
  const auto rec = fx.get(inst.name + ".grid_min");
  const auto gm = instance_grid_minimum(inst, threads);
  const double tol = rec.tolerance;
  const bool ok = std::abs(gm.argmin[0] - rec.expected[0]) <= tol &&
                  std::abs(gm.argmin[1] - rec.expected[1]) <= tol &&
                  std::abs(gm.value - rec.expected[2]) <= tol;
  return {inst.name + " grid minimum matches fixture", ok,
          "argmin (" + fmt(gm.argmin[0]) + ", " + fmt(gm.argmin[1]) + ") value " + fmt(gm.value) +
              " vs recorded " + fmt(rec.expected[2])};
}

}  // namespace detail

inline OracleReport run_oracle_suite(const std::filesystem::path& fixture_path, int threads = 1) {
  using detail::fmt;
  OracleReport report;
  auto add = [&](std::string name, bool ok, std::string detail) {
    report.checks.push_back({std::move(name), ok, std::move(detail)});
  };

  {
    const auto gm = grid_minimize([](auto p) { return p[0] * p[0] + p[1] * p[1]; },
                                  {{-1, -1}, {1, 1}}, 21, threads);
    add("grid convex bowl", gm.value == 0.0 && gm.argmin[0] == 0.0 && gm.argmin[1] == 0.0,
        "value " + fmt(gm.value));
    const auto snap = grid_minimize(
        [](auto p) { return (p[0] - 0.53) * (p[0] - 0.53) + (p[1] - 0.47) * (p[1] - 0.47); },
        {{-1, -1}, {1, 1}}, 21, threads);
    add("grid snaps to nearest vertex",
        std::abs(snap.argmin[0] - 0.5) < 1e-12 && std::abs(snap.argmin[1] - 0.5) < 1e-12,
        "argmin (" + fmt(snap.argmin[0]) + ", " + fmt(snap.argmin[1]) + ")");
  }
  {
    const std::vector<double> a{1.5, -2.0, 0.25};
    const std::vector<double> x{0.3, 0.7, -1.1};
    const auto g = finite_diff([&](auto p) { return a[0] * p[0] + a[1] * p[1] + a[2] * p[2]; }, x);
    double err = 0.0;
    for (std::size_t i = 0; i < 3; ++i) err = std::max(err, std::abs(g[i] - a[i]));
    add("finite differences of a linear map", err < 1e-9, "max abs error " + fmt(err));
    const auto q = finite_diff([](auto p) { return p[0] * p[0] + p[1] * p[1] + p[2] * p[2]; }, x);
    double qerr = 0.0;
    for (std::size_t i = 0; i < 3; ++i) qerr = std::max(qerr, std::abs(q[i] - 2.0 * x[i]));
    add("finite differences of a squared norm", qerr < 1e-8, "max abs error " + fmt(qerr));
  }

  const FixtureFile fx = FixtureFile::load(fixture_path);
  const auto scalar = rugged_instance_scalar();
  const auto desk = rugged_instance_desk();
  report.checks.push_back(detail::compare_grid_minimum(fx, scalar, threads));
  report.checks.push_back(detail::compare_grid_minimum(fx, desk, threads));

  {
    const double gmin = fx.get("rugged_dy1.grid_min").expected[2];
    const auto ms = multistart(scalar);
    const std::size_t hit = ms.within(gmin, 1e-3);
    add("rugged_dy1 descent reaches the grid minimum in <= 40% of 50 starts",
        hit * 10 <= ms.losses.size() * 4, std::to_string(hit) + "/" + std::to_string(ms.losses.size()));
  }
  {
    const double gmin = fx.get("rugged_desk.grid_min").expected[2];
    const auto ms = multistart(desk);
    const std::size_t stuck = ms.above(gmin, 1e-2);
    add("rugged_desk: some start ends > 1e-2 above the grid minimum", stuck >= 1,
        std::to_string(stuck) + "/" + std::to_string(ms.losses.size()) + " stuck");
    const std::size_t k = ms.clusters(0.05);
    add("rugged_desk: at least two distinct local minima", k >= 2, std::to_string(k) + " clusters");
  }
  {
    const auto rec = fx.get("mini_decoder.seed42");
    const MiniFitSetup s;
    const auto data = make_decoder_dataset(s.samples, s.dx, s.dy, s.seed);
    const auto fit = fit_mini_decoder(data, s.hidden, s.epochs, s.lr, s.seed);
    add("mini decoder fit below recorded threshold", fit.final_loss <= rec.expected[1],
        "final mse " + fmt(fit.final_loss) + " threshold " + fmt(rec.expected[1]));
    add("mini decoder fit below 10% of target variance", fit.final_loss < 0.1 * target_variance(data),
        "variance " + fmt(target_variance(data)));
  }
  {
    const auto rec = fx.get("pipeline_fd.20pts");
    GradCheckOptions opt;
    opt.seeds = 20;
    double worst = 0.0;
    std::uint64_t stream = 100;
    for (const auto& c : pipeline_cases()) {
      worst = std::max(worst, run_grad_case(c, opt, ++stream).max_rel_error);
    }
    add("pipeline finite differences at 20 points", worst < rec.tolerance,
        "max relative error " + fmt(worst) + " (recorded " + fmt(rec.expected[0]) + ")");
  }
  return report;
}

}  // namespace lopt::oracle
