#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace malimg {

inline constexpr std::size_t kRowWidth = 800;
inline constexpr std::size_t kImageSide = 400;

struct ByteStream {
    std::vector<std::uint8_t> data;
    std::string source_id;
};

// Row-major byte grid, always kRowWidth columns wide.
struct ByteMatrix {
    std::size_t rows = 0;
    std::vector<std::uint8_t> values;

    static constexpr std::size_t cols = kRowWidth;
    std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Grayscale image with pixels in [0, 1]. The standard pipeline emits
// kImageSide x kImageSide; reduced model configs work on smaller squares.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
    double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Appends zero bytes up to the next multiple of kRowWidth.
/// Throws EmptyInput for an empty stream.
ByteStream pad_bytes(const ByteStream& stream);

/// Views an aligned stream as a kRowWidth-wide matrix. Throws NotAligned.
ByteMatrix reshape_bytes(const ByteStream& stream);

/// Area-weighted box resize of the byte grid to side x side, scaled to [0, 1].
///
/// Each output pixel averages the source rectangle it covers, weighting
/// partially covered source cells by their overlap. Byte sums are exact
/// integers, divided once per pixel. Works for both down- and upscaling
/// along either axis.
GrayImage resize_image(const ByteMatrix& matrix, std::size_t side = kImageSide);

/// The same area-weighted resize applied to an already normalized image.
GrayImage resize_gray(const GrayImage& image, std::size_t side);

/// pad -> reshape -> resize.
GrayImage binary_to_image(const ByteStream& stream, std::size_t side = kImageSide);

ByteStream read_byte_stream(const std::filesystem::path& path);

/// 8-bit grayscale PNG, pixel = round(value * 255).
void write_png(const GrayImage& image, const std::filesystem::path& path);

}  // namespace malimg
