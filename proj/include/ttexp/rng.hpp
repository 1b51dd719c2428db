#pragma once

/// Counter-based random number generation.
///
/// Every draw is a pure function of (seed, counter), so any consumer that
/// records its seed reproduces its stream bit-for-bit regardless of call
/// interleaving. This is what makes solver initialization and Monte Carlo
/// reports reproducible across runs and across parallel sample blocks.

#include <cmath>
#include <cstdint>

#include <Eigen/Core>

namespace ttexp::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Mixes a seed and a counter into one well-distributed 64-bit word.
inline std::uint64_t mix(std::uint64_t seed, std::uint64_t counter) {
  return splitmix64(splitmix64(seed) ^ splitmix64(counter + 0x9e3779b97f4a7c15ull));
}

/// Uniform draw in the half-open interval (0, 1]; never returns 0 so that
/// log(u) below is always finite.
inline double uniform01(std::uint64_t seed, std::uint64_t counter) {
  return static_cast<double>((mix(seed, counter) >> 11) + 1) * 0x1.0p-53;
}

/// Standard normal draw via Box-Muller; consumes counters 2k and 2k+1.
inline double normal(std::uint64_t seed, std::uint64_t counter) {
  const double u1 = uniform01(seed, 2 * counter);
  const double u2 = uniform01(seed, 2 * counter + 1);
  const double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

/// Vector of iid standard normals at counters base, base+1, ..., base+n-1.
inline Eigen::VectorXd normal_vector(std::uint64_t seed, std::uint64_t base, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(seed, base + static_cast<std::uint64_t>(i));
  return v;
}

/// Sequential normal stream; a convenience wrapper over the counter API.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed, std::uint64_t start = 0) : seed_(seed), next_(start) {}
  double operator()() { return normal(seed_, next_++); }

 private:
  std::uint64_t seed_;
  std::uint64_t next_;
};

}  // namespace ttexp::rng
