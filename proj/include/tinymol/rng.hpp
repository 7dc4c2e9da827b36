#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace tinymol::rng {

// Uniform in [0,1) from the top 53 bits; kept explicit so draws are
// reproducible independent of the standard library's distributions.
inline double uniform(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline size_t uniform_index(std::mt19937_64& gen, size_t size) {
  const auto idx = static_cast<size_t>(uniform(gen) * static_cast<double>(size));
  return std::min(idx, size - 1);
}

// Box-Muller standard normal.
inline double normal(std::mt19937_64& gen) {
  const double u1 = 1.0 - uniform(gen);
  const double u2 = uniform(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline uint64_t fnv1a(std::string_view s, uint64_t seed = 1469598103934665603ull) {
  uint64_t h = seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Stable sub-stream seed from a base seed and a label.
inline uint64_t derive_seed(uint64_t seed, std::string_view label, uint64_t index = 0) {
  uint64_t h = fnv1a(label, seed ^ 0x9e3779b97f4a7c15ull);
  h ^= index + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace tinymol::rng
