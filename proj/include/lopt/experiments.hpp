#pragma once

// Suite-level routines shared by the command line and the acceptance run:
// assembling an experiment from a config, paired X/Z landscapes, and the
// four-variant ablation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "lopt/analysis.hpp"
#include "lopt/config.hpp"
#include "lopt/inference.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

struct Experiment {
  ExperimentConfig config;
  std::shared_ptr<const ForwardModel> model;
  Objective objective = Objective::l2();
  MlpParams theta0;
};

inline Experiment build_experiment(const ExperimentConfig& c) {
  Experiment e;
  e.config = c;
  e.model = std::make_shared<const ForwardModel>(build_forward_model(c));
  e.objective = build_objective(c);
  e.theta0 = build_theta(c);
  return e;
}

inline std::vector<Observation> heldout_observations(const Experiment& e, std::size_t n) {
  return take(make_sampler(e.config, e.model, true), n);
}

inline TrainResult train_mapping(const Experiment& e, int threads, const RoundCallback& on_round = {}) {
  const auto source = make_sampler(e.config, e.model, false);
  if (e.config.online) {
    return online_train(e.theta0, *e.model, e.objective, source, e.config.train, on_round);
  }
  return coordinate_descent_train(e.theta0, *e.model, e.objective, source, e.config.train, threads,
                                  on_round);
}

// ---------------------------------------------------------------------------
// Landscapes

struct LandscapeSetup {
  PcaResult x_pca;
  PcaResult z_pca;
  double half_width_x = 0.0;
  double half_width_z = 0.0;
};

struct LandscapePair {
  LandscapeGrid x;
  LandscapeGrid z;
  std::size_t spikes_x = 0;
  std::size_t spikes_z = 0;
  double laplacian_x = 0.0;
  double laplacian_z = 0.0;
};

// PCA planes from the latents recovered by `pca_steps` of mapped inference on
// every observation: z_hat for the Z plane, x_hat = theta(z_hat) for the X
// plane. Each grid spans `width_factor` standard deviations along dir1.
inline LandscapeSetup landscape_setup(const MlpParams& theta, const ForwardModel& f,
                                      const Objective& obj, std::span<const Observation> observations,
                                      InferenceConfig cfg, std::size_t pca_steps = 20,
                                      double width_factor = 3.0, int threads = 1) {
  cfg.steps = pca_steps;
  const auto traces = infer_all(&theta, f, obj, observations, cfg, threads);
  std::vector<std::vector<double>> xs;
  std::vector<std::vector<double>> zs;
  for (const auto& t : traces) {
    xs.push_back(t.x_hat);
    zs.push_back(t.records.back().point);
  }
  LandscapeSetup s;
  s.x_pca = pca_directions(xs, true);
  s.z_pca = pca_directions(zs, true);
  s.half_width_x = width_factor * std::sqrt(s.x_pca.var1);
  s.half_width_z = width_factor * std::sqrt(s.z_pca.var1);
  if (!(s.half_width_x > 0.0) || !(s.half_width_z > 0.0)) {
    throw DegenerateDataError("recovered latents have zero spread; no landscape plane");
  }
  return s;
}

inline LandscapePair landscape_pair(const MlpParams& theta, const ForwardModel& f,
                                    const Objective& obj, const Observation& obs,
                                    const LandscapeSetup& s, std::size_t resolution = 41,
                                    int threads = 1) {
  const MlpParams th = detail::read_only(theta);
  auto at = [](std::span<const double> p) { return Tensor::vector({p.begin(), p.end()}); };
  LandscapePair out;
  out.x = landscape_grid([&](std::span<const double> p) { return pipeline_loss(f, obj, obs, at(p)).item(); },
                         s.x_pca.mean, s.x_pca.dir1, s.x_pca.dir2, s.half_width_x, resolution, threads);
  out.z = landscape_grid([&](std::span<const double> p) { return mapped_loss(th, f, obj, obs, at(p)).item(); },
                         s.z_pca.mean, s.z_pca.dir1, s.z_pca.dir2, s.half_width_z, resolution, threads);
  out.spikes_x = spike_count(out.x);
  out.spikes_z = spike_count(out.z);
  out.laplacian_x = mean_sq_laplacian(out.x);
  out.laplacian_z = mean_sq_laplacian(out.z);
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  AblationReport report;
  TrainResult full;
  TrainResult online;
};

// Trains the full (coordinate descent + buffer) and online variants from the
// same theta0 and evaluates them next to random_theta and the baseline.
inline AblationRun ablate(const Experiment& e, std::vector<Observation> observations,
                          std::vector<std::size_t> step_counts, int threads = 1) {
  const auto source = make_sampler(e.config, e.model, false);
  AblationRun run;
  run.full = coordinate_descent_train(e.theta0, *e.model, e.objective, source, e.config.train, threads);
  run.online = online_train(e.theta0, *e.model, e.objective, source, e.config.train);
  AblationSuite suite;
  suite.model = e.model.get();
  suite.objective = &e.objective;
  suite.observations = std::move(observations);
  suite.inference = e.config.infer;
  suite.step_counts = std::move(step_counts);
  suite.threads = threads;
  suite.variants = {{"full", true, &run.full.theta},
                    {"no_cd_no_buffer", true, &run.online.theta},
                    {"random_theta", true, &e.theta0},
                    {"baseline", false, nullptr}};
  run.report = run_ablation(suite);
  return run;
}

// ---------------------------------------------------------------------------
// Masked multi-hypothesis inference

struct DiversityResult {
  std::vector<double> unmasked_loss;            // per hypothesis, best first
  std::vector<std::vector<double>> hidden;      // F(x_hat) on the hidden entries
  double min_pairwise_hidden = 0.0;             // smallest L2 distance between two hypotheses
};

inline DiversityResult masked_diversity(const MlpParams& theta, const ForwardModel& f,
                                        const Objective& obj, const Observation& obs,
                                        const Mask& mask, const InferenceConfig& cfg,
                                        int threads = 1) {
  validate_mask(mask, obs.y.numel());
  const Objective masked = obj.with_mask(mask);
  const auto traces = infer_multi(theta, f, masked, obs, cfg, threads);
  DiversityResult r;
  NoGradGuard guard;
  for (const auto& t : traces) {
    r.unmasked_loss.push_back(t.final_loss);
    const auto y_hat = f.forward(Tensor::vector(t.x_hat)).to_vector();
    std::vector<double> hidden;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) hidden.push_back(y_hat[i]);
    }
    r.hidden.push_back(std::move(hidden));
  }
  r.min_pairwise_hidden = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < r.hidden.size(); ++a) {
    for (std::size_t b = a + 1; b < r.hidden.size(); ++b) {
      double d = 0.0;
      for (std::size_t k = 0; k < r.hidden[a].size(); ++k) {
        d += (r.hidden[a][k] - r.hidden[b][k]) * (r.hidden[a][k] - r.hidden[b][k]);
      }
      r.min_pairwise_hidden = std::min(r.min_pairwise_hidden, std::sqrt(d));
    }
  }
  return r;
}

// Mini decoder (8 -> 12) with a briefly trained theta, used for masked
// multi-hypothesis runs. Half of 12 outputs leaves 6 observed entries for 8
// unknowns, so the hidden half has a family of consistent completions.
inline ExperimentConfig masked_scenario_config() {
  return parse_config(
      "model.kind = mini_decoder\n"
      "model.dx = 8\n"
      "model.dy = 12\n"
      "theta.dz = 16\n"
      "prior.sigma = 1\n"
      "train.B = 10\n"
      "train.N = 32\n"
      "infer.steps = 500\n"
      "infer.lr = 0.1\n"
      "infer.init = gaussian\n"
      "infer.hypotheses = 8\n");
}

// First half of the entries observed, second half hidden.
inline Mask half_mask(std::size_t dy) {
  Mask m(dy, false);
  for (std::size_t i = 0; i < (dy + 1) / 2; ++i) m[i] = true;
  return m;
}

}  // namespace lopt
