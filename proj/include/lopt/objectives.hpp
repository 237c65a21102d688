#pragma once

// Inference objectives L(y_hat, y) and observation masks.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/rng.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

enum class ObjectiveKind { l2, l2_plus_feature, task_plus_decay };

inline std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::l2: return "l2";
    case ObjectiveKind::l2_plus_feature: return "l2_plus_feature";
    case ObjectiveKind::task_plus_decay: return "task_plus_decay";
  }
  return "?";
}

inline ObjectiveKind parse_objective_kind(std::string_view s) {
  if (s == "l2") return ObjectiveKind::l2;
  if (s == "l2_plus_feature") return ObjectiveKind::l2_plus_feature;
  if (s == "task_plus_decay") return ObjectiveKind::task_plus_decay;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

inline std::size_t count_observed(const Mask& mask) {
  std::size_t n = 0;
  for (bool b : mask) n += b ? 1 : 0;
  return n;
}

inline void validate_mask(const Mask& mask, std::size_t dy) {
  if (mask.empty()) return;
  if (mask.size() != dy) {
    throw DimensionError("mask of length " + std::to_string(mask.size()) +
                         " for observation of length " + std::to_string(dy));
  }
  if (count_observed(mask) == 0) throw InputError("mask hides every entry");
}

// Parses a bitstring ("1100", 1 = observed) or a comma-separated list of
// observed indices ("0,1,5"). An empty literal means fully observed.
inline Mask parse_mask(std::string_view literal, std::size_t dy) {
  if (literal.empty()) return {};
  const bool bitstring = literal.size() == dy &&
                         literal.find_first_not_of("01") == std::string_view::npos &&
                         literal.find(',') == std::string_view::npos;
  Mask mask(dy, false);
  if (bitstring) {
    for (std::size_t i = 0; i < dy; ++i) mask[i] = literal[i] == '1';
  } else {
    std::stringstream in{std::string(literal)};
    std::string tok;
    while (std::getline(in, tok, ',')) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError("bad mask entry '" + tok + "'");
      }
      if (idx >= dy) {
        throw DimensionError("mask index " + std::to_string(idx) + " out of range for length " +
                             std::to_string(dy));
      }
      mask[idx] = true;
    }
  }
  validate_mask(mask, dy);
  return mask;
}

inline std::string mask_to_string(const Mask& mask) {
  std::string s;
  for (bool b : mask) s += b ? '1' : '0';
  return s;
}

struct Observation {
  Tensor y;   // [dy]
  Mask mask;  // empty = fully observed

  Observation() = default;
  explicit Observation(Tensor values, Mask m = {}) : y(std::move(values)), mask(std::move(m)) {
    for (double v : y.values()) {
      if (!std::isfinite(v)) throw InputError("observation has a non-finite entry");
    }
    validate_mask(mask, y.numel());
  }
};

// Entries observed under both masks.
inline Mask combine_masks(const Mask& a, const Mask& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.size() != b.size()) throw DimensionError("masks of different lengths");
  Mask out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] && b[i];
  return out;
}

// Random Gaussian projection [dy x rows] standing in for a perceptual
// feature extractor.
inline Tensor make_feature_projection(std::size_t dy, std::size_t rows, std::uint64_t seed) {
  Rng rng = make_rng(seed, {streams::feature_projection});
  return Tensor::matrix(dy, rows, gaussian_vector(rng, dy * rows, 1.0 / std::sqrt(static_cast<double>(dy))));
}

class Objective {
 public:
  static Objective l2(Mask mask = {}) { return Objective(ObjectiveKind::l2, std::move(mask), {}, 0.0); }

  static Objective l2_plus_feature(Tensor projection, Mask mask = {}) {
    if (projection.rank() != 2) {
      throw DimensionError("feature projection must be a matrix, got " +
                           shape_str(projection.shape()));
    }
    return Objective(ObjectiveKind::l2_plus_feature, std::move(mask), std::move(projection), 0.0);
  }

  // Masked l2 task loss plus decay * ||correction||^2.
  static Objective task_plus_decay(double decay, Mask mask = {}) {
    return Objective(ObjectiveKind::task_plus_decay, std::move(mask), {}, decay);
  }

  ObjectiveKind kind() const { return kind_; }
  const Mask& mask() const { return mask_; }
  const Tensor& projection() const { return projection_; }
  double decay() const { return decay_; }

  Objective with_mask(Mask mask) const {
    Objective o = *this;
    o.mask_ = std::move(mask);
    if (!o.mask_.empty() && count_observed(o.mask_) == 0) throw InputError("mask hides every entry");
    return o;
  }

  // `correction` is the forward-model input; only task_plus_decay reads it.
  Tensor eval_loss(const Tensor& y_hat, const Observation& obs, const Tensor& correction = {}) const {
    if (y_hat.shape() != obs.y.shape()) {
      throw DimensionError("prediction " + shape_str(y_hat.shape()) + " vs observation " +
                           shape_str(obs.y.shape()));
    }
    const Mask mask = combine_masks(mask_, obs.mask);
    validate_mask(mask, obs.y.numel());
    Tensor loss = mask.empty() ? mse(y_hat, obs.y) : masked_mse(y_hat, obs.y, mask);
    switch (kind_) {
      case ObjectiveKind::l2:
        break;
      case ObjectiveKind::l2_plus_feature: {
        if (projection_.dim(0) != obs.y.numel()) {
          throw DimensionError("feature projection " + shape_str(projection_.shape()) +
                               " for observation " + shape_str(obs.y.shape()));
        }
        Tensor pred = y_hat;
        Tensor target = obs.y;
        if (!mask.empty()) {
          std::vector<double> m(mask.size());
          for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] ? 1.0 : 0.0;
          const Tensor keep = Tensor::vector(std::move(m));
          pred = mul(pred, keep);
          target = mul(target, keep);
        }
        loss = add(loss, mse(matmul(pred, projection_), matmul(target, projection_)));
        break;
      }
      case ObjectiveKind::task_plus_decay:
        if (!correction.defined()) {
          throw ContractError("task_plus_decay objective needs the correction tensor");
        }
        loss = add(loss, scale(l2_norm_sq(correction), decay_));
        break;
    }
    return loss;
  }

 private:
  Objective(ObjectiveKind kind, Mask mask, Tensor projection, double decay)
      : kind_(kind), mask_(std::move(mask)), projection_(std::move(projection)), decay_(decay) {
    if (!(decay_ >= 0.0)) throw ConfigError("decay weight must be >= 0");
    if (!mask_.empty() && count_observed(mask_) == 0) throw InputError("mask hides every entry");
  }

  ObjectiveKind kind_;
  Mask mask_;
  Tensor projection_;
  double decay_;
};

inline Tensor eval_loss(const Objective& obj, const Tensor& y_hat, const Observation& obs,
                        const Tensor& correction = {}) {
  return obj.eval_loss(y_hat, obs, correction);
}

// Zeroes gradient entries at hidden positions of the objective's mask.
inline Tensor apply_mask_semantics(const Objective& obj, const Tensor& grad_y) {
  const Mask& mask = obj.mask();
  if (mask.empty()) throw ContractError("apply_mask_semantics: objective has no mask");
  if (mask.size() != grad_y.numel()) {
    throw DimensionError("mask of length " + std::to_string(mask.size()) + " for gradient " +
                         shape_str(grad_y.shape()));
  }
  std::vector<double> g = grad_y.to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!mask[i]) g[i] = 0.0;
  }
  return Tensor(grad_y.shape(), std::move(g));
}

}  // namespace lopt
