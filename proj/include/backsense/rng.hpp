#pragma once

#include <cmath>
#include <cstdint>

namespace backsense::rng {

// SplitMix64 stream. Used both as the simulation PRNG and as a seed mixer so
// that independent streams can be derived from (seed, tag, indices) without
// coupling draw counts across slots or sensors.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1]; safe as a log() argument.
  double uniform_pos() { return 1.0 - uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call so
  // stream positions stay reproducible across platforms.
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t mix_one(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  SplitMix64 g(h);
  return g.next();
}

// Derives a child seed from a base seed and up to four stream indices.
inline std::uint64_t derive(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                            std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix_one(seed, tag);
  h = mix_one(h, a);
  h = mix_one(h, b);
  h = mix_one(h, c);
  return h;
}

}  // namespace backsense::rng
