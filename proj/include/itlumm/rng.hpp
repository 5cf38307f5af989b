#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>

namespace itlumm {

/// Portable pseudorandom stream: mt19937_64 plus hand-written distributions.
///
/// The standard library fixes the engine's output sequence but leaves the
/// distribution algorithms to the implementation, so all derived draws are
/// implemented here to get the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), unbiased (rejection sampling). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller; one value per call.
  double normal();

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::span<T> v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Child stream whose seed is derived from this seed and `stream`.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace itlumm
