#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace metr {

// SplitMix64. All randomness in the project goes through this generator so
// that runs are bit-reproducible across standard-library implementations
// (std::uniform_real_distribution et al. are not portable bit-for-bit).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Box-Muller; one value per call keeps the stream layout simple.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  uint64_t state_;
};

// FNV-1a, used to derive seeds from strings and to fingerprint buffers.
inline uint64_t fnv1a(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a_u64(uint64_t v, uint64_t h = 0xcbf29ce484222325ULL) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag) { return fnv1a(tag, fnv1a_u64(seed)); }

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) { return fnv1a_u64(salt, fnv1a_u64(seed)); }

}  // namespace metr
