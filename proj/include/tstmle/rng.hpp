#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace tstmle {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based stream derivation. The stream for a path (k1, k2, ...) under
/// a master seed is splitmix64(...splitmix64(splitmix64(seed) ^ k1) ^ k2...).
/// Streams depend only on the path, never on how many other streams exist or
/// the order in which they are requested.
constexpr std::uint64_t derive_seed(std::uint64_t master,
                                    std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(master);
  for (auto k : path) s = splitmix64(s ^ k);
  return s;
}

/// FNV-1a, used to turn string keys (estimator names) into stream path keys.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Path tags keeping the different consumers of a master seed apart.
inline constexpr std::uint64_t kStreamTrial = 0x7472;   // "tr"
inline constexpr std::uint64_t kStreamTruth = 0x7468;   // "th"
inline constexpr std::uint64_t kStreamStage1 = 0x7331;  // "s1"
inline constexpr std::uint64_t kStreamStage2 = 0x7332;  // "s2"

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace tstmle
