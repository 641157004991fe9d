#pragma once

#include <cstdint>

namespace vshgp {

/// SplitMix64 finalizer.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent seed for a named stream of one top-level seed:
/// splitmix64(top ^ splitmix64(stream)).
inline std::uint64_t derive_seed(std::uint64_t top, std::uint64_t stream) {
  return splitmix64(top ^ splitmix64(stream));
}

/// Stream identifiers used across the toolkit.
enum SeedStream : std::uint64_t {
  kStreamData = 1,
  kStreamSplit = 2,
  kStreamPartition = 3,
  kStreamInducing = 4,
  kStreamBatches = 5,
};

} // namespace vshgp
