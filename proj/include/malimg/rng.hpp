#pragma once

#include <cstdint>
#include <random>

namespace malimg {

using Rng = std::mt19937_64;

// Independent random streams used by training. Each (seed, index, stream)
// triple yields its own generator, so any step can be replayed without
// carrying generator state across steps.
enum class Stream : std::uint32_t {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Mask = 4,
    Synth = 5,
    Split = 6,
};

inline Rng derive_rng(std::uint64_t seed, std::uint64_t index, Stream stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      static_cast<std::uint32_t>(stream)};
    return Rng(seq);
}

// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace malimg
