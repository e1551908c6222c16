#pragma once

#include <cstdint>

// Seed derivation for independent deterministic substreams.  Every random
// draw in the library comes from an engine seeded through derive_seed, so a
// run is a pure function of its master seed regardless of scheduling.

namespace marketlab::rng {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Mixes a seed with up to three stream labels into a new seed.  Used for
// per-purpose substreams (agent draws vs. market shocks) and for sweep
// replicates, so adding draws to one stream never shifts another.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s ^= a * 0x9e3779b97f4a7c15ull;
  h ^= splitmix64(s);
  s ^= b * 0xc2b2ae3d27d4eb4full;
  h ^= splitmix64(s);
  s ^= c * 0x165667b19e3779f9ull;
  h ^= splitmix64(s);
  return h;
}

// Stream labels.  Belief priors use their own stream so adding or reordering
// those draws never changes who trades or which shocks arrive.
inline constexpr std::uint64_t kAgentDrawStream = 0x41u;
inline constexpr std::uint64_t kShockStream = 0x53u;
inline constexpr std::uint64_t kSweepStream = 0x57u;
inline constexpr std::uint64_t kBeliefStream = 0x42u;

}  // namespace marketlab::rng
