#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace tcpdiff {

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed for item `index` of a run seeded with `base`:
/// splitmix64(base XOR index * golden-ratio constant). Used for per-sample generator
/// seeds and per-member forecast seeds so items can be produced in any order.
constexpr std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(base ^ (index * 0x9E3779B97F4A7C15ULL));
}

/// Deterministic random stream with serializable state.
///
/// Normal deviates use the Marsaglia polar method without caching the second
/// value, so the engine state alone determines every future draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  double normal();

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace tcpdiff
