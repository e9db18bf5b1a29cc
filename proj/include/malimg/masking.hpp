#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "malimg/preprocess.hpp"
#include "malimg/rng.hpp"

namespace malimg {

struct MaskConfig {
    std::size_t block_size = 16;
    double mask_ratio = 0.5;

    /// Throws BadConfig unless block_size divides image_side and ratio is in [0, 1].
    void validate(std::size_t image_side) const;
    friend bool operator==(const MaskConfig&, const MaskConfig&) = default;
};

// Square grid of blocks covering the image; true = masked.
struct Mask {
    std::size_t grid = 0;
    std::size_t block_size = 0;
    std::vector<std::uint8_t> cells;

    bool masked(std::size_t block_row, std::size_t block_col) const { return cells[block_row * grid + block_col] != 0; }
    std::size_t masked_count() const;
};

/// Number of masked blocks, round(ratio * total) with ties to even.
std::size_t masked_block_count(const MaskConfig& config, std::size_t total_blocks);

/// Selects masked_block_count() blocks uniformly without replacement.
Mask generate_mask(const MaskConfig& config, std::size_t image_side, Rng& rng);

/// Copy of the image with every masked block set to 0.
GrayImage apply_mask(const GrayImage& image, const Mask& mask);

/// In-place variant over a raw side x side pixel buffer.
template <typename T>
void apply_mask_inplace(T* pixels, std::size_t side, const Mask& mask) {
    for (std::size_t br = 0; br < mask.grid; ++br) {
        for (std::size_t bc = 0; bc < mask.grid; ++bc) {
            if (!mask.masked(br, bc)) continue;
            for (std::size_t r = br * mask.block_size; r < (br + 1) * mask.block_size; ++r) {
                T* row = pixels + r * side + bc * mask.block_size;
                for (std::size_t c = 0; c < mask.block_size; ++c) row[c] = T(0);
            }
        }
    }
}

}  // namespace malimg
