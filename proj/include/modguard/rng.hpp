#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace modguard {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; good avalanche for deriving independent seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for a named sub-stream ("data", "train", "attack", ...) of a root seed.
constexpr std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  return mix64(root ^ mix64(fnv1a64(name)));
}

/// Seed for the index-th element of a stream (one per frame, one per epoch...).
constexpr std::uint64_t indexed_seed(std::uint64_t stream, std::uint64_t index) {
  return mix64(stream ^ mix64(index + 0x632BE59BD9B4E019ULL));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

} // namespace modguard
