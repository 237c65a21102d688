#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

enum class OptimizerKind { sgd, adam, adamw };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adamw: return "adamw";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // adamw only
};

// Update rule plus per-parameter moment buffers. Parameters are held by
// handle, so steps mutate the caller's tensors in place. Every update moves
// against the gradient.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params)
      : config_(config), params_(std::move(params)) {
    if (!(config_.lr >= 0.0)) throw ConfigError("optimizer learning rate must be >= 0");
    if (config_.kind != OptimizerKind::sgd) {
      first_.reserve(params_.size());
      second_.reserve(params_.size());
      for (const auto& p : params_) {
        first_.emplace_back(p.numel(), 0.0);
        second_.emplace_back(p.numel(), 0.0);
      }
    }
  }

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }

  void restore(std::uint64_t steps, std::vector<std::vector<double>> first,
               std::vector<std::vector<double>> second) {
    if (first.size() != first_.size() || second.size() != second_.size()) {
      throw DimensionError("optimizer state has the wrong number of moment buffers");
    }
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (first[i].size() != first_[i].size() || second[i].size() != second_[i].size()) {
        throw DimensionError("optimizer moment buffer " + std::to_string(i) +
                             " does not match its parameter");
      }
    }
    steps_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

  // Applies one update from the gradients currently stored on the params.
  void step() {
    for (const auto& p : params_) {
      if (!p.has_grad()) throw ContractError("optimizer step with unpopulated gradient");
    }
    ++steps_;
    const auto& c = config_;
    if (c.kind == OptimizerKind::sgd) {
      for (auto& p : params_) {
        auto v = p.values_mut();
        const auto g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c.lr * g[i];
      }
      return;
    }
    const double t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    const double decay = c.kind == OptimizerKind::adamw ? 1.0 - c.lr * c.weight_decay : 1.0;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto v = params_[k].values_mut();
      const auto g = params_[k].grad();
      auto& m = first_[k];
      auto& s = second_[k];
      for (std::size_t i = 0; i < v.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double shat = s[i] / bc2;
        if (c.kind == OptimizerKind::adamw) v[i] *= decay;
        v[i] -= c.lr * mhat / (std::sqrt(shat) + c.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace lopt
