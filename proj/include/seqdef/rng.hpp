#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace seqdef {

// Deterministic randomness helpers.
//
// std::mt19937_64 output is pinned bit-for-bit by the standard, but the
// std::uniform_*_distribution adapters are implementation defined, so every
// draw here goes through explicit mappings instead.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Unbiased integer in [0, bound), bound > 0. Rejection sampling.
  uint64_t below(uint64_t bound);

  // Inclusive integer range.
  int64_t int_in(int64_t lo, int64_t hi);

  // [0, 1) with 53-bit resolution.
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return unit() < p; }

  // Index draw from non-negative weights (need not be normalised).
  size_t weighted(const std::vector<double>& weights);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Splitmix64-style combiner for deriving independent substream seeds.
uint64_t mix_seed(uint64_t seed, uint64_t salt);
uint64_t mix_seed(uint64_t seed, uint64_t salt_a, uint64_t salt_b);

}  // namespace seqdef
