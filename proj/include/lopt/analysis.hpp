#pragma once

// Loss-landscape grids over PCA planes, smoothness metrics, convergence
// curves and the ablation harness.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/inference.hpp"
#include "lopt/models.hpp"
#include "lopt/objectives.hpp"
#include "lopt/parallel.hpp"

namespace lopt {

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  std::vector<double> mean;
  std::vector<double> dir1;  // unit, largest variance
  std::vector<double> dir2;  // unit, orthogonal to dir1
  double var1 = 0.0;
  double var2 = 0.0;
  bool degenerate = false;  // rank < 2; dir2 is an arbitrary orthogonal completion
};

namespace detail {

inline void fix_sign(std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v[best] < 0.0) {
    for (auto& x : v) x = -x;
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Unit vector orthogonal to `u`, from the standard basis vector with the
// largest residual.
inline std::vector<double> orthogonal_completion(const std::vector<double>& u) {
  std::vector<double> best;
  double best_norm = -1.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    std::vector<double> e(u.size(), 0.0);
    e[k] = 1.0;
    const double proj = u[k];
    for (std::size_t i = 0; i < e.size(); ++i) e[i] -= proj * u[i];
    const double n = std::sqrt(dot(e, e));
    if (n > best_norm + 1e-12) {
      best_norm = n;
      for (auto& x : e) x /= n;
      best = std::move(e);
    }
  }
  return best;
}

}  // namespace detail

// Top-2 eigenvectors of the sample covariance of `latents` (n rows of
// width d). Rank-deficient clouds throw DegenerateDataError unless
// `allow_degenerate`, in which case the result is flagged.
inline PcaResult pca_directions(const std::vector<std::vector<double>>& latents,
                                bool allow_degenerate = false) {
  const std::size_t n = latents.size();
  if (n < 3) throw InputError("pca_directions needs at least 3 points, got " + std::to_string(n));
  const std::size_t d = latents.front().size();
  if (d < 2) throw DimensionError("pca_directions needs dimension >= 2");
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (latents[i].size() != d) throw DimensionError("latent rows have different widths");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = latents[i][j];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw DegenerateDataError("eigendecomposition failed");

  PcaResult r;
  r.mean.assign(mean.data(), mean.data() + d);
  const auto& vals = eig.eigenvalues();  // ascending
  const auto& vecs = eig.eigenvectors();
  r.var1 = std::max(vals(d - 1), 0.0);
  r.var2 = std::max(vals(d - 2), 0.0);
  r.dir1.assign(vecs.col(d - 1).data(), vecs.col(d - 1).data() + d);
  r.dir2.assign(vecs.col(d - 2).data(), vecs.col(d - 2).data() + d);
  const double scale = std::max(r.var1, std::numeric_limits<double>::min());
  r.degenerate = r.var1 <= 0.0 || r.var2 <= 1e-12 * scale;
  if (r.degenerate) {
    if (!allow_degenerate) {
      throw DegenerateDataError("latent cloud has rank < 2 (second variance " +
                                std::to_string(r.var2) + ")");
    }
    if (r.var1 <= 0.0) {
      r.dir1.assign(d, 0.0);
      r.dir1[0] = 1.0;
    }
    detail::fix_sign(r.dir1);
    r.dir2 = detail::orthogonal_completion(r.dir1);
  } else {
    detail::fix_sign(r.dir1);
  }
  detail::fix_sign(r.dir2);
  return r;
}

// ---------------------------------------------------------------------------
// Landscape grids

struct LandscapeGrid {
  std::vector<double> center;
  std::vector<double> dir1;
  std::vector<double> dir2;
  double half_width = 0.0;
  std::size_t resolution = 0;
  std::vector<double> offsets;  // shared alpha/beta coordinates
  std::vector<double> loss;     // [alpha index * resolution + beta index]

  double at(std::size_t ia, std::size_t ib) const { return loss[ia * resolution + ib]; }
  std::size_t vertex_count() const { return loss.size(); }
};

using PointLoss = std::function<double(std::span<const double>)>;

// Loss at center + alpha*dir1 + beta*dir2 on a uniform res x res grid over
// [-half_width, half_width]^2. Non-finite losses are stored as-is.
// `loss_fn` must be safe to call concurrently when threads > 1.
inline LandscapeGrid landscape_grid(const PointLoss& loss_fn, std::vector<double> center,
                                    std::vector<double> dir1, std::vector<double> dir2,
                                    double half_width, std::size_t resolution, int threads = 1) {
  if (resolution < 3) throw InputError("landscape grid resolution must be >= 3");
  if (!(half_width > 0.0)) throw InputError("landscape half width must be > 0");
  if (dir1.size() != center.size() || dir2.size() != center.size()) {
    throw DimensionError("landscape directions do not match the center dimension");
  }
  constexpr double tol = 1e-10;
  if (std::abs(detail::dot(dir1, dir1) - 1.0) > tol || std::abs(detail::dot(dir2, dir2) - 1.0) > tol ||
      std::abs(detail::dot(dir1, dir2)) > tol) {
    throw InputError("landscape directions must be orthonormal");
  }
  LandscapeGrid g;
  g.center = std::move(center);
  g.dir1 = std::move(dir1);
  g.dir2 = std::move(dir2);
  g.half_width = half_width;
  g.resolution = resolution;
  g.offsets.resize(resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    g.offsets[i] = -half_width + 2.0 * half_width * static_cast<double>(i) /
                                     static_cast<double>(resolution - 1);
  }
  g.loss.assign(resolution * resolution, 0.0);
  parallel_for(g.loss.size(), threads, [&](std::size_t v) {
    NoGradGuard guard;
    const double a = g.offsets[v / resolution];
    const double b = g.offsets[v % resolution];
    std::vector<double> p(g.center.size());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = g.center[k] + a * g.dir1[k] + b * g.dir2[k];
    g.loss[v] = loss_fn(p);
  });
  return g;
}

// Interior vertices whose loss exceeds `factor` times the mean of their 8
// neighbours. Neighbourhoods with non-finite values are skipped.
inline std::size_t spike_count(const LandscapeGrid& g, double factor = 2.0) {
  std::size_t spikes = 0;
  const std::size_t r = g.resolution;
  for (std::size_t i = 1; i + 1 < r; ++i) {
    for (std::size_t j = 1; j + 1 < r; ++j) {
      double acc = 0.0;
      bool finite = std::isfinite(g.at(i, j));
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          if (di == 0 && dj == 0) continue;
          const double v = g.at(i + di, j + dj);
          finite = finite && std::isfinite(v);
          acc += v;
        }
      }
      if (finite && g.at(i, j) > factor * (acc / 8.0)) ++spikes;
    }
  }
  return spikes;
}

// Mean squared 5-point discrete Laplacian over interior vertices, in grid units.
inline double mean_sq_laplacian(const LandscapeGrid& g) {
  const std::size_t r = g.resolution;
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 1; i + 1 < r; ++i) {
    for (std::size_t j = 1; j + 1 < r; ++j) {
      const double lap = g.at(i - 1, j) + g.at(i + 1, j) + g.at(i, j - 1) + g.at(i, j + 1) - 4.0 * g.at(i, j);
      if (!std::isfinite(lap)) continue;
      acc += lap * lap;
      ++n;
    }
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

// Index of the grid minimum (first in row-major order on ties).
inline std::pair<std::size_t, std::size_t> grid_argmin(const LandscapeGrid& g) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < g.loss.size(); ++v) {
    if (g.loss[v] < g.loss[best]) best = v;
  }
  return {best / g.resolution, best % g.resolution};
}

// ---------------------------------------------------------------------------
// Convergence curves

struct CurveRow {
  std::size_t step = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

// Per-step mean and standard error of the mean across loss sequences.
inline std::vector<CurveRow> convergence_curves(const std::vector<std::vector<double>>& losses) {
  if (losses.empty()) throw InputError("convergence_curves: no traces");
  const std::size_t len = losses.front().size();
  for (const auto& l : losses) {
    if (l.size() != len) throw InputError("convergence_curves: traces have different lengths");
  }
  const double n = static_cast<double>(losses.size());
  std::vector<CurveRow> rows(len);
  for (std::size_t t = 0; t < len; ++t) {
    double mean = 0.0;
    for (const auto& l : losses) mean += l[t];
    mean /= n;
    double ss = 0.0;
    for (const auto& l : losses) ss += (l[t] - mean) * (l[t] - mean);
    const double se = losses.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
    rows[t] = {t, mean, se, losses.size()};
  }
  return rows;
}

inline std::vector<CurveRow> convergence_curves(const std::vector<InferenceTrace>& traces) {
  std::vector<std::vector<double>> losses;
  losses.reserve(traces.size());
  for (const auto& t : traces) losses.push_back(t.losses());
  return convergence_curves(losses);
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationVariant {
  std::string label;  // full | no_cd_no_buffer | random_theta | baseline
  bool uses_theta = true;
  const MlpParams* theta = nullptr;
};

struct AblationSuite {
  const ForwardModel* model = nullptr;
  const Objective* objective = nullptr;
  std::vector<Observation> observations;
  InferenceConfig inference;
  std::vector<std::size_t> step_counts{20, 200};
  std::vector<AblationVariant> variants;
  int threads = 1;
};

struct AblationReport {
  std::vector<std::string> labels;
  std::vector<std::size_t> step_counts;
  std::vector<std::vector<double>> mean_loss;  // [variant][step count]

  double at(const std::string& label, std::size_t steps) const {
    for (std::size_t v = 0; v < labels.size(); ++v) {
      if (labels[v] != label) continue;
      for (std::size_t s = 0; s < step_counts.size(); ++s) {
        if (step_counts[s] == steps) return mean_loss[v][s];
      }
    }
    throw InputError("no ablation entry for " + label + " at " + std::to_string(steps) + " steps");
  }
};

// Every variant runs on the same observations with the same inference
// config; the loss at k steps is read off a single max(k)-step trace.
inline AblationReport run_ablation(const AblationSuite& suite) {
  if (!suite.model || !suite.objective) throw InputError("ablation suite without model or objective");
  if (suite.step_counts.empty()) throw InputError("ablation suite without step counts");
  for (const auto& v : suite.variants) {
    if (v.uses_theta && !v.theta) throw InputError("missing mapping network for variant '" + v.label + "'");
  }
  AblationReport report;
  report.step_counts = suite.step_counts;
  InferenceConfig cfg = suite.inference;
  cfg.steps = *std::max_element(suite.step_counts.begin(), suite.step_counts.end());
  for (const auto& v : suite.variants) {
    const auto traces = infer_all(v.uses_theta ? v.theta : nullptr, *suite.model, *suite.objective,
                                  suite.observations, cfg, suite.threads);
    std::vector<double> means;
    for (auto s : suite.step_counts) {
      double acc = 0.0;
      for (const auto& t : traces) acc += t.records[s].loss;
      means.push_back(acc / static_cast<double>(traces.size()));
    }
    report.labels.push_back(v.label);
    report.mean_loss.push_back(std::move(means));
  }
  return report;
}

}  // namespace lopt
