#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace oamix {

// Self-contained counter-based RNG so that every draw is reproducible from a
// 64-bit seed, independent of the standard library implementation.

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // warm up so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  // Derive an independent stream, e.g. per parameter name or per sample.
  Rng fork(uint64_t salt) const {
    uint64_t s = state_;
    uint64_t base = splitmix64(s);
    return Rng(base ^ (salt * 0x9e3779b97f4a7c15ull));
  }
  Rng fork(std::string_view name) const { return fork(fnv1a64(name)); }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1) with 53 bits of entropy
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  // Box-Muller; one value per call, cached pair discarded for simplicity
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // normal truncated to [-2, 2] sigma by rejection, then scaled
  double truncated_normal(double stddev) {
    double z = normal();
    while (z < -2.0 || z > 2.0) z = normal();
    return z * stddev;
  }

 private:
  uint64_t state_;
};

}  // namespace oamix
