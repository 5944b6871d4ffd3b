#pragma once

// Portable random streams.
//
// Generator: xoshiro256** seeded through SplitMix64. Normals use the
// Box-Muller transform (both variates are used, in order cos then sin).
// Student-t(k) is Z / sqrt(chi2_k / k) with chi2_k a sum of k squared
// normals drawn from the same stream. No std:: distributions are used, so a
// given seed yields the same numbers on every platform.
//
// Stream splitting: derive_seed(parent, tag, index) hashes the parent seed,
// an FNV-1a hash of the tag and the index through SplitMix64. The harness
// uses root -> (scenario, replicate) -> (split | method).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace moca {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t state = parent;
  std::uint64_t a = splitmix64(state);
  state = a ^ fnv1a(tag);
  std::uint64_t b = splitmix64(state);
  state = b ^ (index * 0xD1B54A32D192ED03ULL + 1);
  return splitmix64(state);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  double student_t(int dof) {
    const double z = normal();
    double chi2 = 0;
    for (int i = 0; i < dof; ++i) {
      const double e = normal();
      chi2 += e * e;
    }
    return z / std::sqrt(chi2 / dof);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4];
  double spare_ = 0;
  bool has_spare_ = false;
};

}  // namespace moca
