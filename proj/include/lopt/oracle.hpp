#pragma once

// Reference oracles: exhaustive grid minimization and central finite
// differences. Nothing here touches the tape or any adjoint.

#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lopt/archive.hpp"
#include "lopt/errors.hpp"
#include "lopt/parallel.hpp"

namespace lopt::oracle {

using PointFn = std::function<double(std::span<const double>)>;

struct Box {
  std::vector<double> lo;
  std::vector<double> hi;
};

struct GridMinimum {
  std::vector<double> argmin;
  double value = std::numeric_limits<double>::infinity();
};

inline std::vector<double> grid_point(const Box& box, std::size_t resolution, std::size_t flat) {
  const std::size_t d = box.lo.size();
  std::vector<double> p(d);
  for (std::size_t k = d; k-- > 0;) {
    const std::size_t idx = flat % resolution;
    flat /= resolution;
    p[k] = box.lo[k] + (box.hi[k] - box.lo[k]) * static_cast<double>(idx) /
                           static_cast<double>(resolution - 1);
  }
  return p;
}

// Exhaustive search over resolution^d vertices. Ties resolve to the
// lexicographically smallest vertex; NaN values never win.
inline GridMinimum grid_minimize(const PointFn& fn, const Box& box, std::size_t resolution,
                                 int threads = 1) {
  if (resolution < 11) throw InputError("grid_minimize needs resolution >= 11");
  if (box.lo.size() != box.hi.size() || box.lo.empty()) throw DimensionError("malformed search box");
  std::size_t total = 1;
  for (std::size_t k = 0; k < box.lo.size(); ++k) total *= resolution;
  std::vector<double> values(total);
  parallel_for(total, threads, [&](std::size_t v) { values[v] = fn(grid_point(box, resolution, v)); });
  GridMinimum best;
  std::size_t best_index = total;
  for (std::size_t v = 0; v < total; ++v) {
    if (values[v] < best.value) {
      best.value = values[v];
      best_index = v;
    }
  }
  if (best_index < total) best.argmin = grid_point(box, resolution, best_index);
  return best;
}

// Central differences, one coordinate at a time.
inline std::vector<double> finite_diff(const PointFn& fn, std::span<const double> point,
                                       double step = 1e-5) {
  std::vector<double> p(point.begin(), point.end());
  std::vector<double> grad(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double up = fn(p);
    p[i] = orig - step;
    const double down = fn(p);
    p[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("non-finite sample at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-8) {
  if (a.size() != b.size()) throw DimensionError("relative_error on vectors of different lengths");
  double diff = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// A frozen oracle output. Records are written once into a fixture file and
// only read afterwards.
struct OracleRecord {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<std::size_t> dims;
  std::vector<double> expected;
  double tolerance = 0.0;
  std::string created;  // UTC, ISO 8601
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class FixtureFile {
 public:
  FixtureFile() : archive_(std::string(kFixtureVersion)) {}

  static FixtureFile load(const std::filesystem::path& path) {
    FixtureFile f;
    f.archive_ = Archive::load(path, kFixtureVersion);
    return f;
  }

  void save(const std::filesystem::path& path) const { archive_.save(path); }

  void add(const OracleRecord& r) {
    if (has(r.name)) throw OracleError("oracle record '" + r.name + "' already exists");
    archive_.set_attr(r.name + ".seed", std::to_string(r.seed));
    std::string dims;
    for (std::size_t i = 0; i < r.dims.size(); ++i) dims += (i ? "," : "") + std::to_string(r.dims[i]);
    archive_.set_attr(r.name + ".dims", dims);
    archive_.set_attr(r.name + ".tolerance", format_double(r.tolerance));
    archive_.set_attr(r.name + ".created", r.created.empty() ? utc_timestamp() : r.created);
    archive_.put(r.name + ".expected", NamedArray{{r.expected.size()}, r.expected});
  }

  bool has(const std::string& name) const { return archive_.has_attr(name + ".seed"); }

  OracleRecord get(const std::string& name) const {
    if (!has(name)) throw OracleError("no oracle record '" + name + "'");
    OracleRecord r;
    r.name = name;
    r.seed = std::stoull(archive_.attr(name + ".seed"));
    const auto& dims = archive_.attr(name + ".dims");
    std::size_t pos = 0;
    while (pos < dims.size()) {
      const auto comma = dims.find(',', pos);
      r.dims.push_back(std::stoul(dims.substr(pos, comma - pos)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    r.tolerance = parse_double(archive_.attr(name + ".tolerance"));
    r.created = archive_.attr(name + ".created");
    r.expected = archive_.get(name + ".expected").values;
    return r;
  }

  Archive& archive() { return archive_; }
  const Archive& archive() const { return archive_; }

 private:
  Archive archive_;
};

}  // namespace lopt::oracle
