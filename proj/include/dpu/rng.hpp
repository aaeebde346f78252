#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dpu {

// SplitMix64 finalizer. Every derived seed in the project goes through this
// so any stage (epoch, dropout draw, pipeline step) is reproducible alone.
constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

constexpr uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr uint64_t mix_seed(uint64_t seed, std::string_view label) {
  return mix_seed(seed, fnv1a64(label));
}

using RngEngine = std::mt19937_64;

inline RngEngine make_engine(uint64_t seed) { return RngEngine(seed); }

// Uniform in [0, 1) built from the top 53 bits; identical on every platform
// with the same engine stream.
inline double uniform01(RngEngine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(RngEngine& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(eng);
}

}  // namespace dpu
