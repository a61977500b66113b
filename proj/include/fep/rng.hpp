#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fep {

/// Derives an independent substream seed from a root seed and a stream
/// name (FNV-1a over the name, mixed with splitmix64). Used so data
/// generation, weight init, mask sampling and trials draw from
/// independent, individually reproducible streams.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = root + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t root, std::string_view stream) {
  return std::mt19937_64(derive_seed(root, stream));
}

}  // namespace fep
