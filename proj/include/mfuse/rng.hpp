#pragma once

#include <cstdint>

namespace mfuse {

/// Counter-based generator built on the SplitMix64 finalizer.
///
/// Every draw is mix(seed + counter * gamma), so a stream is fully described
/// by (seed, counter) and the output is identical on every platform. Only
/// integer arithmetic is used for uniforms; normals go through std::log and
/// std::cos and inherit the libm's rounding.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace mfuse
