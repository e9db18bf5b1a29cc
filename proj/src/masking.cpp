#include "malimg/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "malimg/error.hpp"

namespace malimg {

void MaskConfig::validate(std::size_t image_side) const {
    if (block_size == 0 || image_side % block_size != 0) {
        throw Error(ErrorKind::BadConfig, "mask.block_size " + std::to_string(block_size) +
                                              " must divide image side " + std::to_string(image_side));
    }
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
        throw Error(ErrorKind::BadConfig, "mask.mask_ratio must lie in [0, 1]");
    }
}

std::size_t Mask::masked_count() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](auto c) { return c != 0; }));
}

std::size_t masked_block_count(const MaskConfig& config, std::size_t total_blocks) {
    // nearbyint honours the default FE_TONEAREST mode: halves go to even.
    return static_cast<std::size_t>(std::nearbyint(config.mask_ratio * static_cast<double>(total_blocks)));
}

Mask generate_mask(const MaskConfig& config, std::size_t image_side, Rng& rng) {
    config.validate(image_side);
    Mask mask;
    mask.block_size = config.block_size;
    mask.grid = image_side / config.block_size;
    const std::size_t total = mask.grid * mask.grid;
    const std::size_t count = masked_block_count(config, total);
    mask.cells.assign(total, 0);

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `count` slots are a uniform sample.
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, total - 1);
        std::swap(order[i], order[pick(rng)]);
        mask.cells[order[i]] = 1;
    }
    return mask;
}

GrayImage apply_mask(const GrayImage& image, const Mask& mask) {
    if (image.height != image.width || mask.grid * mask.block_size != image.height ||
        mask.cells.size() != mask.grid * mask.grid) {
        throw Error(ErrorKind::ShapeMismatch, "mask grid does not tile a " + std::to_string(image.height) + "x" +
                                                  std::to_string(image.width) + " image");
    }
    GrayImage out = image;
    apply_mask_inplace(out.pixels.data(), out.width, mask);
    return out;
}

}  // namespace malimg
