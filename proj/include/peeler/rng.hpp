#pragma once

#include <cstdint>
#include <random>

namespace peeler {

using Rng = std::mt19937_64;

// Every random stream is derived from (base seed, purpose, index) so that no
// two components share generator state and episode i is reproducible on its
// own, whichever worker runs it.
enum class Purpose : std::uint32_t {
  kInit = 1,
  kTrainEpisode = 2,
  kEvalEpisode = 3,
  kSplit = 4,
  kHoldout = 5,
};

inline Rng derive_rng(std::uint64_t base_seed, Purpose purpose, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

}  // namespace peeler
