#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace xmal {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent child streams from a root seed.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for a path below `root`, e.g. derive_seed(seed, {epoch, step, sample}).
/// Every random draw in the library goes through a seed derived this way, so a
/// computation can be replayed from its coordinates alone.
constexpr std::uint64_t derive_seed(std::uint64_t root,
                                    std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(root);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t root, std::initializer_list<std::uint64_t> path = {}) {
  return Rng(derive_seed(root, path));
}

// Stream tags keep unrelated consumers of one root seed apart.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kViews = 3;
inline constexpr std::uint64_t kDegrade = 4;
inline constexpr std::uint64_t kGenerate = 5;
inline constexpr std::uint64_t kStage2 = 6;
}  // namespace stream

}  // namespace xmal
