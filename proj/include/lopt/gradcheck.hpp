#pragma once

// Tape gradients against central finite differences, one row per primitive
// op plus whole-pipeline rows (objective kinds, theta o F o L).

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "lopt/inference.hpp"
#include "lopt/models.hpp"
#include "lopt/objectives.hpp"
#include "lopt/oracle.hpp"
#include "lopt/rng.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

struct GradCheckOptions {
  std::size_t seeds = 100;
  double step = 1e-5;
  double tolerance = 1e-5;
  std::uint64_t base_seed = 0;
};

struct GradCheckRow {
  std::string name;
  std::size_t points = 0;
  double max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double tolerance = 0.0;

  bool passed() const {
    for (const auto& r : rows) {
      if (!r.pass) return false;
    }
    return !rows.empty();
  }

  std::string format() const {
    std::ostringstream out;
    out << "check,points,max_rel_error,tolerance,result\n";
    for (const auto& r : rows) {
      out << r.name << ',' << r.points << ',' << format_double(r.max_rel_error) << ','
          << format_double(tolerance) << ',' << (r.pass ? "pass" : "FAIL") << '\n';
    }
    return out.str();
  }
};

// A differentiable case: given its inputs (all requiring grad) returns a
// scalar loss. `make_inputs` draws the evaluation point for a seed.
struct GradCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  std::function<Tensor(const std::vector<Tensor>&)> loss;
};

namespace detail {

inline std::vector<Tensor> rebuild(const std::vector<Tensor>& like, std::span<const double> flat,
                                   bool requires_grad) {
  std::vector<Tensor> out;
  std::size_t pos = 0;
  for (const auto& t : like) {
    std::vector<double> v(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                          flat.begin() + static_cast<std::ptrdiff_t>(pos + t.numel()));
    pos += t.numel();
    out.emplace_back(t.shape(), std::move(v), requires_grad);
  }
  return out;
}

// Relative error of the tape gradient at one point.
inline double case_error(const GradCase& c, const std::vector<Tensor>& point, double step) {
  std::vector<double> flat;
  for (const auto& t : point) flat.insert(flat.end(), t.values().begin(), t.values().end());

  auto inputs = rebuild(point, flat, true);
  backward(c.loss(inputs));
  std::vector<double> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.insert(analytic.end(), t.grad().begin(), t.grad().end());
    } else {
      analytic.insert(analytic.end(), t.numel(), 0.0);
    }
  }

  const auto numeric = oracle::finite_diff(
      [&](std::span<const double> p) {
        NoGradGuard guard;
        return c.loss(rebuild(point, p, false)).item();
      },
      flat, step);
  return oracle::relative_error(analytic, numeric);
}

inline std::vector<double> away_from_zero(Rng& rng, std::size_t n, double margin) {
  std::vector<double> v = gaussian_vector(rng, n, 1.0);
  for (double& x : v) {
    if (std::abs(x) < margin) x = x < 0 ? -margin : margin;
  }
  return v;
}

inline Mask random_mask(Rng& rng, std::size_t n) {
  std::bernoulli_distribution coin(0.5);
  Mask m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = coin(rng);
  m[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = true;
  return m;
}

// sum(out * w) with fixed weights, so every output entry carries a distinct
// upstream gradient.
inline Tensor project(const Tensor& out, std::uint64_t tag) {
  Rng rng = make_rng(tag, {streams::gradcheck});
  return sum(mul(out, Tensor(out.shape(), gaussian_vector(rng, out.numel(), 1.0))));
}

inline MlpParams params_from(const std::vector<Tensor>& t, std::size_t first, double slope) {
  MlpParams p;
  p.slope = slope;
  for (std::size_t i = first; i + 1 < t.size(); i += 2) p.layers.push_back({t[i], t[i + 1]});
  return p;
}

inline std::vector<Tensor> point_with_theta(Rng& rng, std::size_t dz, std::size_t hidden,
                                            std::size_t dx) {
  std::vector<Tensor> in{Tensor::vector(gaussian_vector(rng, dz, 1.0))};
  const auto theta = make_mapping_network(dz, hidden, dx, rng());
  for (const auto& p : theta.parameters()) in.push_back(p.detach());
  return in;
}

}  // namespace detail

inline std::vector<GradCase> op_cases() {
  using detail::project;
  std::vector<GradCase> cases;
  auto vec = [](std::size_t n) {
    return [n](Rng& rng) { return std::vector<Tensor>{Tensor::vector(gaussian_vector(rng, n, 1.0))}; };
  };
  auto pair = [](std::size_t n) {
    return [n](Rng& rng) {
      return std::vector<Tensor>{Tensor::vector(gaussian_vector(rng, n, 1.0)),
                                 Tensor::vector(gaussian_vector(rng, n, 1.0))};
    };
  };

  cases.push_back({"matmul",
                   [](Rng& rng) {
                     return std::vector<Tensor>{Tensor::matrix(3, 4, gaussian_vector(rng, 12, 1.0)),
                                                Tensor::matrix(4, 2, gaussian_vector(rng, 8, 1.0))};
                   },
                   [](const auto& in) { return project(matmul(in[0], in[1]), 1); }});
  cases.push_back({"add",
                   [](Rng& rng) {
                     return std::vector<Tensor>{Tensor::matrix(3, 4, gaussian_vector(rng, 12, 1.0)),
                                                Tensor::vector(gaussian_vector(rng, 4, 1.0))};
                   },
                   [](const auto& in) { return project(add(in[0], in[1]), 2); }});
  cases.push_back({"scale", vec(6), [](const auto& in) { return project(scale(in[0], -1.7), 3); }});
  cases.push_back({"sub", pair(6), [](const auto& in) { return project(sub(in[0], in[1]), 4); }});
  cases.push_back({"mul", pair(6), [](const auto& in) { return project(mul(in[0], in[1]), 5); }});
  // Points keep a margin from the kink so the central difference never
  // straddles it.
  cases.push_back({"leaky_relu",
                   [](Rng& rng) {
                     return std::vector<Tensor>{Tensor::vector(detail::away_from_zero(rng, 8, 1e-3))};
                   },
                   [](const auto& in) { return project(leaky_relu(in[0], 0.2), 6); }});
  cases.push_back({"tanh", vec(8), [](const auto& in) { return project(tanh(in[0]), 7); }});
  cases.push_back({"sin", vec(8), [](const auto& in) { return project(sin(in[0]), 8); }});
  cases.push_back({"sum", vec(8), [](const auto& in) { return scale(sum(in[0]), 0.3); }});
  cases.push_back({"mse", pair(16), [](const auto& in) { return mse(in[0], in[1]); }});
  cases.push_back({"l2_norm_sq", vec(8), [](const auto& in) { return l2_norm_sq(in[0]); }});
  cases.push_back({"masked_mse", pair(16), [](const auto& in) {
                     static const Mask mask = [] {
                       Rng rng = make_rng(12, {streams::gradcheck});
                       return detail::random_mask(rng, 16);
                     }();
                     return masked_mse(in[0], in[1], mask);
                   }});
  return cases;
}

inline std::vector<GradCase> pipeline_cases() {
  std::vector<GradCase> cases;
  constexpr std::size_t dy = 8;

  // Objective kinds, gradient with respect to y_hat (and the correction).
  cases.push_back({"objective_l2_masked",
                   [](Rng& rng) {
                     return std::vector<Tensor>{Tensor::vector(gaussian_vector(rng, dy, 1.0))};
                   },
                   [](const auto& in) {
                     const Observation obs(Tensor::vector(std::vector<double>(dy, 0.5)),
                                           Mask{1, 0, 1, 1, 0, 1, 0, 1});
                     return Objective::l2().eval_loss(in[0], obs, in[0]);
                   }});
  cases.push_back({"objective_l2_plus_feature",
                   [](Rng& rng) {
                     return std::vector<Tensor>{Tensor::vector(gaussian_vector(rng, dy, 1.0))};
                   },
                   [](const auto& in) {
                     const auto obj = Objective::l2_plus_feature(make_feature_projection(dy, 4, 7));
                     const Observation obs(Tensor::vector(std::vector<double>(dy, -0.25)));
                     return obj.eval_loss(in[0], obs, in[0]);
                   }});
  cases.push_back({"objective_task_plus_decay",
                   [](Rng& rng) {
                     return std::vector<Tensor>{Tensor::vector(gaussian_vector(rng, dy, 1.0)),
                                                Tensor::vector(gaussian_vector(rng, 5, 1.0))};
                   },
                   [](const auto& in) {
                     const Observation obs(Tensor::vector(std::vector<double>(dy, 0.1)));
                     return Objective::task_plus_decay(0.7).eval_loss(in[0], obs, in[1]);
                   }});

  // theta o F o L with respect to z and every theta parameter.
  auto rugged = std::make_shared<const ForwardModel>(
      make_rugged_decoder(RuggedOptions{.dx = 2, .dy = dy, .features = 12, .seed = 5}));
  cases.push_back({"pipeline_rugged_l2",
                   [](Rng& rng) { return detail::point_with_theta(rng, 4, 16, 2); },
                   [rugged](const auto& in) {
                     const Observation obs(Tensor::vector(std::vector<double>(dy, 0.3)));
                     return mapped_loss(detail::params_from(in, 1, 0.2), *rugged, Objective::l2(),
                                        obs, in[0]);
                   }});

  MiniDecoder mini{.dx = 8, .dy = 32, .hidden = 16, .net = init_mlp({8, 16, 32}, 11, 0.2, false)};
  auto decoder = std::make_shared<const ForwardModel>(std::move(mini));
  cases.push_back({"pipeline_mini_l2_plus_feature",
                   [](Rng& rng) { return detail::point_with_theta(rng, 8, 16, 8); },
                   [decoder](const auto& in) {
                     const auto obj = Objective::l2_plus_feature(make_feature_projection(32, 16, 3));
                     const Observation obs(Tensor::vector(std::vector<double>(32, 0.2)));
                     return mapped_loss(detail::params_from(in, 1, 0.2), *decoder, obj, obs, in[0]);
                   }});

  auto inner = std::make_shared<const ForwardModel>(
      make_rugged_decoder(RuggedOptions{.dx = 6, .dy = dy, .features = 12, .seed = 9}));
  Rng anchor_rng = make_rng(9, {streams::model_weights, 99});
  auto additive = std::make_shared<const ForwardModel>(
      AdditiveCorrection{inner, Tensor::vector(gaussian_vector(anchor_rng, 6, 0.5))});
  cases.push_back({"pipeline_additive_decay",
                   [](Rng& rng) { return detail::point_with_theta(rng, 6, 16, 6); },
                   [additive](const auto& in) {
                     const Observation obs(Tensor::vector(std::vector<double>(dy, -0.4)));
                     return mapped_loss(detail::params_from(in, 1, 0.2), *additive,
                                        Objective::task_plus_decay(1.0), obs, in[0]);
                   }});
  return cases;
}

inline GradCheckRow run_grad_case(const GradCase& c, const GradCheckOptions& opt,
                                  std::uint64_t stream = 0) {
  GradCheckRow row;
  row.name = c.name;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    const std::uint64_t seed = opt.base_seed + s;
    Rng rng = make_rng(seed, {streams::gradcheck, stream});
    const double err = detail::case_error(c, c.make_inputs(rng), opt.step);
    ++row.points;
    if (!(err <= row.max_rel_error)) {
      row.max_rel_error = err;
      row.worst_seed = seed;
    }
  }
  row.pass = row.points > 0 && row.max_rel_error < opt.tolerance;
  return row;
}

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  std::uint64_t stream = 0;
  for (const auto& c : op_cases()) report.rows.push_back(run_grad_case(c, opt, ++stream));
  for (const auto& c : pipeline_cases()) report.rows.push_back(run_grad_case(c, opt, ++stream));
  return report;
}

}  // namespace lopt
