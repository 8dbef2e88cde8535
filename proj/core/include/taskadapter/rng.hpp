// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace taskadapter {

/// Seeded random stream with platform-independent output.
///
/// std::mt19937_64 is fully specified by the standard, but the standard
/// distributions are not, so every draw here is derived from raw 64-bit words.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream for (seed, index) pairs such as episode numbers.
  static Rng stream(std::uint64_t seed, std::uint64_t index) { return Rng(mix(seed, index)); }

  /// SplitMix64 finalizer over two words.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Unbiased integer in [0, n).
  std::size_t below(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace taskadapter
