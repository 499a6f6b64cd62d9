#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace bvib {

/// SplitMix64 finalizer; used to derive independent sub-stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Purpose tags for sub-streams. Values are part of the reproducibility
/// contract: reordering them changes every seeded run.
enum class StreamTag : std::uint64_t {
  arrivals = 1,
  channel = 2,
  reparameterize = 3,
  election = 4,
  attack = 5,
  shuffle = 6,
  init = 7,
  data = 8,
  monte_carlo = 9,
};

/// Seeded random stream with explicit draw semantics.
///
/// Every uniform consumes exactly one 64-bit engine output; normals consume
/// two uniforms (Box-Muller, cosine branch only). std::mt19937_64 is fully
/// specified by the standard, so streams are reproducible across platforms.
/// Sub-streams are derived by hashing the parent seed with a key path, so a
/// component's draws never depend on how many draws another component made.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed = 0) : seed_(seed), engine_(mix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  RandomStream split(std::uint64_t key) const { return RandomStream(mix64(seed_ ^ mix64(key + 0x632be59bd9b4e019ULL))); }

  RandomStream split(StreamTag tag) const { return split(static_cast<std::uint64_t>(tag)); }

  RandomStream split(std::initializer_list<std::uint64_t> path) const {
    RandomStream s = *this;
    for (auto key : path) s = s.split(key);
    return s;
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [0, n) by multiply-shift on the top 32 bits; n < 2^32.
  std::uint64_t below(std::uint64_t n) { return ((engine_() >> 32) * n) >> 32; }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace bvib
