#pragma once

// Learning the mapping network by coordinate descent: collect descent
// trajectories in Z with theta frozen, then fit theta on uniformly replayed
// trajectory points with z frozen, and repeat.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/inference.hpp"
#include "lopt/models.hpp"
#include "lopt/objectives.hpp"
#include "lopt/optimizers.hpp"
#include "lopt/parallel.hpp"
#include "lopt/rng.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

struct TrainConfig {
  std::size_t rounds = 1;      // B
  std::size_t samples = 1;     // N, trajectories per buffer
  std::size_t steps = 1;       // T, descent steps per trajectory
  OptimizerConfig z_optimizer{OptimizerKind::adam, 0.1};
  OptimizerConfig theta_optimizer{OptimizerKind::adamw, 1e-4, 0.9, 0.999, 1e-8, 0.1};
  InitPolicy init = InitPolicy::zero;
  double sigma = 1.0;  // gaussian init std, also used for retries
  std::uint64_t seed = 0;
  double divergence_factor = 1e6;
  std::size_t max_retries = 8;

  void validate() const {
    if (rounds < 1 || samples < 1 || steps < 1) throw ConfigError("B, N and T must all be >= 1");
    if (!(z_optimizer.lr >= 0.0) || !(theta_optimizer.lr >= 0.0)) {
      throw ConfigError("learning rates must be >= 0");
    }
    if (init == InitPolicy::gaussian && !(sigma > 0.0)) throw ConfigError("gaussian init needs sigma > 0");
  }
};

// ---------------------------------------------------------------------------
// Observation sources

class ObservationSource {
 public:
  static constexpr std::size_t unbounded = std::numeric_limits<std::size_t>::max();

  virtual ~ObservationSource() = default;
  virtual std::size_t size() const = 0;
  // Must be safe to call concurrently.
  virtual Observation get(std::size_t index) const = 0;

  Observation at(std::size_t index) const {
    if (index >= size()) {
      throw InputError("observation source exhausted at index " + std::to_string(index) +
                       " (size " + std::to_string(size()) + ")");
    }
    return get(index);
  }
};

// y = F(x*) + noise with x* ~ N(0, prior_sigma^2 I); observation i is a pure
// function of (seed, stream, i).
class PriorSampler final : public ObservationSource {
 public:
  PriorSampler(std::shared_ptr<const ForwardModel> model, double prior_sigma, double noise_sigma,
               std::uint64_t seed, std::uint64_t stream = streams::train_obs, Mask mask = {})
      : model_(std::move(model)),
        prior_sigma_(prior_sigma),
        noise_sigma_(noise_sigma),
        seed_(seed),
        stream_(stream),
        mask_(std::move(mask)) {}

  std::size_t size() const override { return unbounded; }

  std::vector<double> truth(std::size_t index) const {
    Rng rng = make_rng(seed_, {stream_, index});
    return gaussian_vector(rng, model_->input_dim(), prior_sigma_);
  }

  Observation get(std::size_t index) const override {
    Rng rng = make_rng(seed_, {stream_, index});
    const auto x = gaussian_vector(rng, model_->input_dim(), prior_sigma_);
    NoGradGuard guard;
    auto y = model_->forward(Tensor::vector(x)).to_vector();
    if (noise_sigma_ > 0.0) {
      std::normal_distribution<double> noise(0.0, noise_sigma_);
      for (auto& v : y) v += noise(rng);
    }
    return Observation(Tensor::vector(std::move(y)), mask_);
  }

 private:
  std::shared_ptr<const ForwardModel> model_;
  double prior_sigma_;
  double noise_sigma_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  Mask mask_;
};

class FixedObservations final : public ObservationSource {
 public:
  explicit FixedObservations(std::vector<Observation> obs) : obs_(std::move(obs)) {}
  std::size_t size() const override { return obs_.size(); }
  Observation get(std::size_t index) const override { return obs_.at(index); }

 private:
  std::vector<Observation> obs_;
};

inline std::vector<Observation> take(const ObservationSource& src, std::size_t n,
                                     std::size_t offset = 0) {
  std::vector<Observation> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(src.at(offset + i));
  return out;
}

// ---------------------------------------------------------------------------
// Replay buffer

struct BufferEntry {
  std::vector<double> z;
  std::size_t trajectory = 0;  // index into ReplayBuffer::observations
  std::size_t step = 0;        // 1..T
  double loss = 0.0;           // L(F(theta(z)), y) under the collecting theta
};

struct ReplayBuffer {
  std::size_t round = 0;
  std::vector<Observation> observations;  // one per trajectory
  std::vector<BufferEntry> entries;       // trajectory-major, step order
  std::size_t retries = 0;

  std::size_t size() const { return entries.size(); }
  const Observation& observation_of(const BufferEntry& e) const { return observations.at(e.trajectory); }

  double mean_loss() const {
    double acc = 0.0;
    for (const auto& e : entries) acc += e.loss;
    return entries.empty() ? 0.0 : acc / static_cast<double>(entries.size());
  }
};

// Uniform sampling with replacement over buffer indices.
class BufferSampler {
 public:
  BufferSampler(std::size_t size, std::uint64_t seed, std::size_t round)
      : rng_(make_rng(seed, {streams::buffer_sampling, round})), dist_(0, size - 1) {
    if (size == 0) throw ContractError("sampling from an empty replay buffer");
  }
  std::size_t next() { return dist_(rng_); }

 private:
  Rng rng_;
  std::uniform_int_distribution<std::size_t> dist_;
};

namespace detail {

struct TrajectoryResult {
  std::vector<std::vector<double>> z;  // z_1..z_T
  std::vector<double> loss;            // loss at z_1..z_T
};

// T descent steps on z from z0 under a frozen theta.
inline TrajectoryResult run_trajectory(const MlpParams& theta, const ForwardModel& f,
                                       const Objective& obj, const Observation& obs,
                                       std::vector<double> z0, std::size_t steps,
                                       const OptimizerConfig& z_opt, double divergence_factor) {
  TrajectoryResult out;
  out.z.reserve(steps);
  out.loss.reserve(steps);
  Tensor z = Tensor::vector(std::move(z0), true);
  Optimizer opt(z_opt, {z});
  double loss0 = 0.0;
  for (std::size_t t = 1; t <= steps; ++t) {
    Tensor loss = mapped_loss(theta, f, obj, obs, z);
    const double l = loss.item();
    if (t == 1) loss0 = l;
    check_loss(l, loss0, t - 1, divergence_factor);
    if (t > 1) out.loss.push_back(l);
    backward(loss);
    opt.step();
    opt.zero_grad();
    out.z.push_back(z.to_vector());
  }
  NoGradGuard guard;
  const double last = mapped_loss(theta, f, obj, obs, z).item();
  check_loss(last, loss0, steps, divergence_factor);
  out.loss.push_back(last);
  return out;
}

}  // namespace detail

// Collection phase. Trajectory i of round b uses observation b*N + i.
// Diverging trajectories restart from a fresh seeded gaussian z0.
inline ReplayBuffer collect_trajectories(const MlpParams& theta, const ForwardModel& f,
                                         const Objective& obj, const ObservationSource& source,
                                         const TrainConfig& cfg, std::size_t round = 0,
                                         int threads = 1) {
  cfg.validate();
  const MlpParams th = detail::read_only(theta);
  ReplayBuffer buffer;
  buffer.round = round;
  buffer.observations.resize(cfg.samples);
  std::vector<detail::TrajectoryResult> results(cfg.samples);
  std::vector<std::size_t> retries(cfg.samples, 0);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    buffer.observations[i] = source.at(round * cfg.samples + i);
  }
  parallel_for(cfg.samples, threads, [&](std::size_t i) {
    const std::uint64_t seed = stream_seed(cfg.seed, {streams::z_init, round, i});
    for (std::size_t attempt = 0;; ++attempt) {
      auto z0 = attempt == 0
                    ? initial_point(th.in_dim(), cfg.init, cfg.sigma, seed)
                    : initial_point(th.in_dim(), InitPolicy::gaussian, cfg.sigma,
                                    stream_seed(cfg.seed, {streams::retry, round, i, attempt}));
      try {
        results[i] = detail::run_trajectory(th, f, obj, buffer.observations[i], std::move(z0),
                                            cfg.steps, cfg.z_optimizer, cfg.divergence_factor);
        retries[i] = attempt;
        return;
      } catch (const DivergenceError&) {
        if (attempt >= cfg.max_retries) throw DivergenceError("trajectory kept diverging", round);
      }
    }
  });
  buffer.entries.reserve(cfg.samples * cfg.steps);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    buffer.retries += retries[i];
    for (std::size_t t = 0; t < cfg.steps; ++t) {
      buffer.entries.push_back({std::move(results[i].z[t]), i, t + 1, results[i].loss[t]});
    }
  }
  return buffer;
}

inline double buffer_mean_loss(const MlpParams& theta, const ForwardModel& f, const Objective& obj,
                               const ReplayBuffer& buffer, int threads = 1) {
  const MlpParams th = detail::read_only(theta);
  std::vector<double> losses(buffer.size());
  parallel_for(buffer.size(), threads, [&](std::size_t k) {
    NoGradGuard guard;
    const auto& e = buffer.entries[k];
    losses[k] = mapped_loss(th, f, obj, buffer.observation_of(e), Tensor::vector(e.z)).item();
  });
  double acc = 0.0;
  for (double l : losses) acc += l;
  return losses.empty() ? 0.0 : acc / static_cast<double>(losses.size());
}

struct RoundStats {
  std::size_t round = 0;
  double collection_loss = 0.0;   // mean loss over buffered points, theta before the round
  double train_loss_after = 0.0;  // same points, theta after the round
  double sampled_loss = 0.0;      // mean loss of the sampled minibatches during the round
  std::size_t theta_updates = 0;
  std::size_t retries = 0;
};

// Training phase: N*T single-sample theta updates on uniformly drawn buffer
// entries. Buffered z values are never modified.
inline RoundStats train_theta_round(MlpParams& theta, Optimizer& theta_opt, const ReplayBuffer& buffer,
                                    const ForwardModel& f, const Objective& obj,
                                    const TrainConfig& cfg, int threads = 1) {
  if (buffer.size() == 0) throw ContractError("train_theta_round: empty replay buffer");
  RoundStats stats;
  stats.round = buffer.round;
  stats.collection_loss = buffer.mean_loss();
  stats.retries = buffer.retries;
  BufferSampler sampler(buffer.size(), cfg.seed, buffer.round);
  const std::size_t iterations = cfg.samples * cfg.steps;
  double acc = 0.0;
  for (std::size_t j = 0; j < iterations; ++j) {
    const auto& e = buffer.entries[sampler.next()];
    Tensor loss = mapped_loss(theta, f, obj, buffer.observation_of(e), Tensor::vector(e.z));
    const double l = loss.item();
    if (!std::isfinite(l)) {
      Tape::active().clear();
      throw DivergenceError("non-finite loss while training theta in round " +
                            std::to_string(buffer.round), buffer.round);
    }
    acc += l;
    backward(loss);
    theta_opt.step();
    theta_opt.zero_grad();
    ++stats.theta_updates;
  }
  stats.sampled_loss = acc / static_cast<double>(iterations);
  if (!theta.all_finite()) {
    throw DivergenceError("theta became non-finite in round " + std::to_string(buffer.round),
                          buffer.round);
  }
  stats.train_loss_after = buffer_mean_loss(theta, f, obj, buffer, threads);
  return stats;
}

struct TrainResult {
  MlpParams theta;
  std::unique_ptr<Optimizer> optimizer;  // holds handles to theta's tensors
  std::vector<RoundStats> rounds;
  std::size_t iterations = 0;  // theta updates (online: also z updates)
};

using RoundCallback =
    std::function<void(const RoundStats&, const MlpParams& theta, const Optimizer& theta_opt)>;

inline TrainResult coordinate_descent_train(const MlpParams& theta0, const ForwardModel& f,
                                            const Objective& obj, const ObservationSource& source,
                                            const TrainConfig& cfg, int threads = 1,
                                            const RoundCallback& on_round = {}) {
  cfg.validate();
  TrainResult result;
  result.theta = theta0.clone(true);
  result.optimizer = std::make_unique<Optimizer>(cfg.theta_optimizer, result.theta.parameters());
  for (std::size_t b = 0; b < cfg.rounds; ++b) {
    const ReplayBuffer buffer = collect_trajectories(result.theta, f, obj, source, cfg, b, threads);
    auto stats = train_theta_round(result.theta, *result.optimizer, buffer, f, obj, cfg, threads);
    result.iterations += stats.theta_updates;
    result.rounds.push_back(stats);
    if (on_round) on_round(stats, result.theta, *result.optimizer);
  }
  return result;
}

namespace detail {

// Temporarily marks theta's tensors as constants.
class FreezeGuard {
 public:
  explicit FreezeGuard(const MlpParams& theta) : params_(theta.parameters()) {
    for (auto& p : params_) p.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (auto& p : params_) p.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor> params_;
};

}  // namespace detail

// Online ablation: after every z step, one theta step on the new z. Uses the
// same observations and the same B*N*T theta-update budget as
// coordinate_descent_train. `visited`, when given, receives every z_t.
inline TrainResult online_train(const MlpParams& theta0, const ForwardModel& f, const Objective& obj,
                                const ObservationSource& source, const TrainConfig& cfg,
                                const RoundCallback& on_round = {},
                                std::vector<ReplayBuffer>* visited = nullptr) {
  cfg.validate();
  TrainResult result;
  result.theta = theta0.clone(true);
  result.optimizer = std::make_unique<Optimizer>(cfg.theta_optimizer, result.theta.parameters());
  for (std::size_t b = 0; b < cfg.rounds; ++b) {
    RoundStats stats;
    stats.round = b;
    ReplayBuffer record;
    record.round = b;
    double z_acc = 0.0;
    double theta_acc = 0.0;
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      const Observation obs = source.at(b * cfg.samples + i);
      record.observations.push_back(obs);
      const std::uint64_t seed = stream_seed(cfg.seed, {streams::z_init, b, i});
      Tensor z = Tensor::vector(initial_point(result.theta.in_dim(), cfg.init, cfg.sigma, seed), true);
      Optimizer z_opt(cfg.z_optimizer, {z});
      for (std::size_t t = 1; t <= cfg.steps; ++t) {
        {
          detail::FreezeGuard frozen(result.theta);
          Tensor loss = mapped_loss(result.theta, f, obj, obs, z);
          const double l = loss.item();
          if (!std::isfinite(l)) {
            Tape::active().clear();
            throw DivergenceError("non-finite loss in online training round " + std::to_string(b), b);
          }
          z_acc += l;
          backward(loss);
          z_opt.step();
          z_opt.zero_grad();
        }
        const Tensor z_const = z.detach();
        Tensor loss = mapped_loss(result.theta, f, obj, obs, z_const);
        const double l = loss.item();
        if (!std::isfinite(l)) {
          Tape::active().clear();
          throw DivergenceError("non-finite loss in online training round " + std::to_string(b), b);
        }
        theta_acc += l;
        backward(loss);
        result.optimizer->step();
        result.optimizer->zero_grad();
        ++stats.theta_updates;
        ++result.iterations;
        if (visited) record.entries.push_back({z_const.to_vector(), i, t, l});
      }
    }
    if (!result.theta.all_finite()) {
      throw DivergenceError("theta became non-finite in round " + std::to_string(b), b);
    }
    const double n = static_cast<double>(cfg.samples * cfg.steps);
    stats.collection_loss = z_acc / n;
    stats.sampled_loss = theta_acc / n;
    stats.train_loss_after = theta_acc / n;
    result.rounds.push_back(stats);
    if (visited) visited->push_back(std::move(record));
    if (on_round) on_round(stats, result.theta, *result.optimizer);
  }
  return result;
}

}  // namespace lopt
