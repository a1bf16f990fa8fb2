#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "bimm/errors.hpp"

namespace bimm {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

// Deterministic 64-bit generator (splitmix64). All randomness in the project
// flows through this class, so seeded runs reproduce bit-for-bit regardless
// of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}

  uint64_t next_u64() { return detail::splitmix64(state_); }

  // Independent stream derived from the construction seed and a tag.
  // Unaffected by how many values the parent has produced, which keeps
  // per-item streams stable under reordering of the surrounding code.
  Rng child(uint64_t tag) const {
    uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ull * (tag + 0x632be59bd9b4e019ull));
    uint64_t mixed = detail::splitmix64(s);
    return Rng(detail::splitmix64(s) ^ mixed);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ContractError("Rng::uniform_int: n must be positive");
    // Rejection sampling to avoid modulo bias.
    uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller; second value cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // Normal(0, std) with draws outside two standard deviations rejected.
  double trunc_normal(double stddev) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= 2.0) return z * stddev;
    }
  }

  // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw ContractError("Rng::sample_without_replacement: k > n");
    std::vector<size_t> pool(n);
    std::iota(pool.begin(), pool.end(), size_t{0});
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + static_cast<size_t>(uniform_int(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  // In-place Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace bimm
