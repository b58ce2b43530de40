#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "dnpo/mat.hpp"

namespace dnpo {

// splitmix64 step: advances the state and returns the next 64-bit output.
// Output sequence is fully defined by the standard reference constants, so
// streams are reproducible across platforms and compilers.
inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministically derives an independent stream seed from a base seed and
// up to two stream identifiers. Used so that parallel and serial evaluation
// of the same workload consume identical randomness (one derived stream per
// example / term / step, never a shared mutable stream).
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  uint64_t s = base;
  (void)splitmix64_next(s);
  s ^= a + 0x9e3779b97f4a7c15ull;
  (void)splitmix64_next(s);
  s ^= b + 0xd1b54a32d192ed03ull;
  return splitmix64_next(s);
}

// FNV-1a 64-bit hash; used for content digests and string stream ids.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Small deterministic generator. All sampling in the project goes through
// this class; std:: distributions are avoided because their output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller. Consumes exactly two uniforms per call.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Mat normal_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (auto& x : m.data) x = normal();
    return m;
  }

  // Index in [0, n) from a cumulative-probability walk over `probs`
  // (assumed to sum to ~1); the last index absorbs rounding slack.
  int categorical(const std::vector<double>& probs) {
    double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i + 1 < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

}  // namespace dnpo
