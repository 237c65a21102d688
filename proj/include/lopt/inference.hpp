#pragma once

// Optimization-based inference: gradient descent on x through F (baseline)
// or on z through F(theta(z)) (mapped), with per-step traces.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/models.hpp"
#include "lopt/objectives.hpp"
#include "lopt/optimizers.hpp"
#include "lopt/parallel.hpp"
#include "lopt/rng.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

enum class InitPolicy { zero, gaussian };

inline std::string_view to_string(InitPolicy p) { return p == InitPolicy::zero ? "zero" : "gaussian"; }

inline InitPolicy parse_init_policy(std::string_view s) {
  if (s == "zero") return InitPolicy::zero;
  if (s == "gaussian") return InitPolicy::gaussian;
  throw ConfigError("unknown init policy '" + std::string(s) + "'");
}

struct InferenceConfig {
  std::size_t steps = 20;
  OptimizerConfig optimizer{OptimizerKind::adam, 0.1};
  InitPolicy init = InitPolicy::zero;
  double sigma = 1.0;  // gaussian init std
  std::size_t hypotheses = 1;
  std::uint64_t seed = 0;
  // A trace aborts once its loss exceeds this multiple of the step-0 loss.
  double divergence_factor = 1e6;

  void validate() const {
    if (steps < 1) throw ConfigError("inference needs at least one step");
    if (init == InitPolicy::gaussian && !(sigma > 0.0)) {
      throw ConfigError("gaussian init needs sigma > 0");
    }
    if (hypotheses < 1) throw ConfigError("hypothesis count must be >= 1");
  }
};

struct TraceRecord {
  std::size_t step = 0;
  std::vector<double> point;  // z for mapped runs, x for baseline runs
  double loss = 0.0;
};

struct InferenceTrace {
  std::vector<TraceRecord> records;  // steps + 1 entries, step 0 first
  std::vector<double> x_hat;
  double final_loss = 0.0;
  std::uint64_t seed = 0;

  std::vector<double> losses() const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.loss);
    return out;
  }
};

// L(F(x), y), plus the decay term on x for task_plus_decay objectives.
inline Tensor pipeline_loss(const ForwardModel& f, const Objective& obj, const Observation& obs,
                            const Tensor& x) {
  return obj.eval_loss(f.forward(x), obs, x);
}

inline Tensor mapped_loss(const MlpParams& theta, const ForwardModel& f, const Objective& obj,
                          const Observation& obs, const Tensor& z) {
  return pipeline_loss(f, obj, obs, mapping_forward(theta, z));
}

inline std::vector<double> initial_point(std::size_t dim, InitPolicy init, double sigma,
                                         std::uint64_t seed) {
  if (init == InitPolicy::zero) return std::vector<double>(dim, 0.0);
  Rng rng = make_rng(seed, {streams::z_init});
  return gaussian_vector(rng, dim, sigma);
}

namespace detail {

inline void check_loss(double loss, double loss0, std::size_t step, double factor) {
  if (!std::isfinite(loss)) {
    Tape::active().clear();
    throw DivergenceError("non-finite loss at step " + std::to_string(step), step);
  }
  if (step > 0 && loss0 > 0.0 && loss > factor * loss0) {
    Tape::active().clear();
    throw DivergenceError("loss exploded at step " + std::to_string(step), step);
  }
}

// Runs cfg.steps descent updates on a point starting at `init`, recording the
// loss before every update and once after the last.
template <typename LossFn>
InferenceTrace run_descent(std::vector<double> init, const InferenceConfig& cfg, LossFn&& loss_fn) {
  cfg.validate();
  InferenceTrace trace;
  trace.seed = cfg.seed;
  trace.records.reserve(cfg.steps + 1);
  Tensor point = Tensor::vector(std::move(init), true);
  Optimizer opt(cfg.optimizer, {point});
  double loss0 = 0.0;
  for (std::size_t t = 0;; ++t) {
    if (t == cfg.steps) {
      NoGradGuard guard;
      const double l = loss_fn(point).item();
      check_loss(l, loss0, t, cfg.divergence_factor);
      trace.records.push_back({t, point.to_vector(), l});
      trace.final_loss = l;
      break;
    }
    Tensor loss = loss_fn(point);
    const double l = loss.item();
    if (t == 0) loss0 = l;
    check_loss(l, loss0, t, cfg.divergence_factor);
    trace.records.push_back({t, point.to_vector(), l});
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
  return trace;
}

inline MlpParams read_only(const MlpParams& theta) {
  for (const auto& p : theta.parameters()) {
    if (p.requires_grad()) return theta.frozen();
  }
  return theta;
}

}  // namespace detail

// Descent directly on x.
inline InferenceTrace infer_baseline(const ForwardModel& f, const Objective& obj,
                                     const Observation& obs, const InferenceConfig& cfg) {
  if (f.output_dim() != obs.y.numel()) {
    throw DimensionError("model output dim " + std::to_string(f.output_dim()) +
                         " vs observation dim " + std::to_string(obs.y.numel()));
  }
  auto trace = detail::run_descent(initial_point(f.input_dim(), cfg.init, cfg.sigma, cfg.seed), cfg,
                                   [&](const Tensor& x) { return pipeline_loss(f, obj, obs, x); });
  trace.x_hat = trace.records.back().point;
  return trace;
}

// Descent on z through theta; x_hat = theta(z_hat). theta is never modified.
inline InferenceTrace infer_mapped(const MlpParams& theta, const ForwardModel& f,
                                   const Objective& obj, const Observation& obs,
                                   const InferenceConfig& cfg) {
  if (theta.out_dim() != f.input_dim()) {
    throw DimensionError("mapping output dim " + std::to_string(theta.out_dim()) +
                         " vs model input dim " + std::to_string(f.input_dim()));
  }
  if (f.output_dim() != obs.y.numel()) {
    throw DimensionError("model output dim " + std::to_string(f.output_dim()) +
                         " vs observation dim " + std::to_string(obs.y.numel()));
  }
  const MlpParams th = detail::read_only(theta);
  auto trace = detail::run_descent(initial_point(th.in_dim(), cfg.init, cfg.sigma, cfg.seed), cfg,
                                   [&](const Tensor& z) { return mapped_loss(th, f, obj, obs, z); });
  NoGradGuard guard;
  trace.x_hat = mapping_forward(th, Tensor::vector(trace.records.back().point)).to_vector();
  return trace;
}

// Seed of hypothesis h; hypothesis 0 uses the base seed itself.
inline std::uint64_t hypothesis_seed(std::uint64_t base, std::size_t h) {
  return h == 0 ? base : stream_seed(base, {streams::hypotheses, h});
}

// One mapped run per seed, sorted by final loss (ties keep seed order).
inline std::vector<InferenceTrace> infer_multi(const MlpParams& theta, const ForwardModel& f,
                                               const Objective& obj, const Observation& obs,
                                               const InferenceConfig& cfg,
                                               std::span<const std::uint64_t> seeds, int threads = 1) {
  cfg.validate();
  if (seeds.size() >= 2 && cfg.init == InitPolicy::zero) {
    throw ConfigError("multiple hypotheses need a random init policy; zero init makes them coincide");
  }
  const MlpParams th = detail::read_only(theta);
  std::vector<InferenceTrace> traces(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t h) {
    InferenceConfig c = cfg;
    c.seed = seeds[h];
    traces[h] = infer_mapped(th, f, obj, obs, c);
  });
  std::stable_sort(traces.begin(), traces.end(),
                   [](const auto& a, const auto& b) { return a.final_loss < b.final_loss; });
  return traces;
}

inline std::vector<InferenceTrace> infer_multi(const MlpParams& theta, const ForwardModel& f,
                                               const Objective& obj, const Observation& obs,
                                               const InferenceConfig& cfg, int threads = 1) {
  std::vector<std::uint64_t> seeds(cfg.hypotheses);
  for (std::size_t h = 0; h < seeds.size(); ++h) seeds[h] = hypothesis_seed(cfg.seed, h);
  return infer_multi(theta, f, obj, obs, cfg, seeds, threads);
}

// Runs inference on every observation (theta == nullptr selects the
// baseline). Observation i uses seed stream_seed(cfg.seed, {i}).
inline std::vector<InferenceTrace> infer_all(const MlpParams* theta, const ForwardModel& f,
                                             const Objective& obj,
                                             std::span<const Observation> observations,
                                             const InferenceConfig& cfg, int threads = 1) {
  std::vector<InferenceTrace> traces(observations.size());
  const MlpParams th = theta ? detail::read_only(*theta) : MlpParams{};
  parallel_for(observations.size(), threads, [&](std::size_t i) {
    InferenceConfig c = cfg;
    c.seed = stream_seed(cfg.seed, {i});
    traces[i] = theta ? infer_mapped(th, f, obj, observations[i], c)
                      : infer_baseline(f, obj, observations[i], c);
  });
  return traces;
}

}  // namespace lopt
