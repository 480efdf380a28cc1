#pragma once

#include <cstdint>

namespace tformer {

// SplitMix64. Outputs are bit-identical across platforms for a given seed;
// normal() goes through libm and is only as portable as log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (one draw per call, the sine branch is discarded).
  double normal();

  /// Normal(0, stddev) rejected outside +-2 stddev.
  double truncated_normal(double stddev);

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace tformer
