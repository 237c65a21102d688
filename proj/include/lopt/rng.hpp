#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace lopt {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for a (seed, ids...) coordinate, so parallel work
// items draw the same numbers regardless of scheduling.
inline std::uint64_t stream_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = mix64(seed);
  for (auto id : ids) h = mix64(h ^ mix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> ids = {}) {
  return Rng(stream_seed(seed, ids));
}

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

inline std::vector<double> uniform_vector(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

// Stream tags used across the library.
namespace streams {
inline constexpr std::uint64_t theta_init = 1;
inline constexpr std::uint64_t model_weights = 2;
inline constexpr std::uint64_t train_obs = 3;
inline constexpr std::uint64_t heldout_obs = 4;
inline constexpr std::uint64_t buffer_sampling = 5;
inline constexpr std::uint64_t z_init = 6;
inline constexpr std::uint64_t retry = 7;
inline constexpr std::uint64_t decoder_data = 8;
inline constexpr std::uint64_t feature_projection = 9;
inline constexpr std::uint64_t hypotheses = 10;
inline constexpr std::uint64_t gradcheck = 11;
}  // namespace streams

}  // namespace lopt
