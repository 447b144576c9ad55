#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace cbapm {

/*
 Deterministic counter-based generator (splitmix64 core). The same seed
 yields the same stream on every platform; no global state, no
 environment entropy. All randomness in the library flows through this
 type so that experiments are reproducible bit-for-bit.
*/
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; one spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable seed derivation for substreams (per window, per lambda, per
// ensemble member, ...). FNV-1a over the tag list mixed into the base.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = 0xCBF29CE484222325ULL ^ base;
  for (std::uint64_t t : tags) {
    for (int i = 0; i < 8; ++i) {
      h ^= (t >> (8 * i)) & 0xFFULL;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

} // namespace cbapm
