#pragma once
// Seeded randomness with hand-rolled transforms. std::mt19937_64's output
// sequence is pinned by the standard but the std distributions are not, so
// every draw here goes through our own arithmetic: identical seeds give
// identical streams on any conforming platform.

#include <cstdint>
#include <random>

#include "bpl/tensor.hpp"

namespace bpl {

// splitmix64 finaliser; used to derive independent stream seeds so parallel
// batch items never share an engine.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct Rng {
  std::mt19937_64 g;

  explicit Rng(std::uint64_t seed) : g(seed) {}

  // uniform on [0, 1), 53-bit resolution
  double uniform01() { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // uniform on {0, ..., n-1}; modulo bias is irrelevant at our ranges and the
  // mapping stays platform-stable
  std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(g() % n); }

  bool bernoulli(double p) { return uniform01() < p; }

  Vec uniform_vec(std::size_t n, double lo, double hi) {
    Vec v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = uniform(lo, hi);
    return v;
  }

  Vec binary_vec(std::size_t n, double p = 0.5) {
    Vec v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = bernoulli(p) ? 1.0 : 0.0;
    return v;
  }

  // Fisher-Yates; deterministic order for dataset shuffles
  void shuffle(std::vector<std::size_t>& idx) {
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(idx[i - 1], idx[j]);
    }
  }
};

}  // namespace bpl
