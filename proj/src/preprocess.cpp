#include "malimg/preprocess.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>

#include "malimg/error.hpp"

namespace malimg {

namespace {

struct Overlap {
    std::size_t source;
    std::uint64_t weight;
};

// Integer overlaps between output cell i and source cells along one axis.
// Coordinates are scaled by src*dst so every boundary is an integer: output
// cell i spans [i*src, (i+1)*src) and source cell k spans [k*dst, (k+1)*dst).
// The weights of one output cell sum to src.
std::vector<std::vector<Overlap>> axis_overlaps(std::size_t src, std::size_t dst) {
    std::vector<std::vector<Overlap>> out(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        const std::uint64_t lo = static_cast<std::uint64_t>(i) * src;
        const std::uint64_t hi = lo + src;
        for (std::size_t k = lo / dst; k * dst < hi; ++k) {
            const std::uint64_t k_lo = static_cast<std::uint64_t>(k) * dst;
            const std::uint64_t k_hi = k_lo + dst;
            const std::uint64_t w = std::min(hi, k_hi) - std::max(lo, k_lo);
            if (w > 0) out[i].push_back({k, w});
        }
    }
    return out;
}

// Separable area average. Acc is the exact accumulation type for the
// horizontal pass (integers for bytes, double for floats).
template <typename Acc, typename Value>
GrayImage area_resize(const Value* values, std::size_t rows, std::size_t cols, std::size_t side,
                      double scale) {
    const auto col_ov = axis_overlaps(cols, side);
    const auto row_ov = axis_overlaps(rows, side);

    std::vector<Acc> horizontal(rows * side, Acc{0});
    for (std::size_t r = 0; r < rows; ++r) {
        const Value* row = values + r * cols;
        Acc* dst = horizontal.data() + r * side;
        for (std::size_t j = 0; j < side; ++j) {
            Acc sum{0};
            for (const auto& ov : col_ov[j]) sum += static_cast<Acc>(ov.weight) * static_cast<Acc>(row[ov.source]);
            dst[j] = sum;
        }
    }

    GrayImage image{side, side, std::vector<double>(side * side)};
    const double denom = static_cast<double>(rows) * static_cast<double>(cols) * scale;
    std::vector<Acc> acc(side);
    for (std::size_t i = 0; i < side; ++i) {
        std::fill(acc.begin(), acc.end(), Acc{0});
        for (const auto& ov : row_ov[i]) {
            const Acc* src = horizontal.data() + ov.source * side;
            for (std::size_t j = 0; j < side; ++j) acc[j] += static_cast<Acc>(ov.weight) * src[j];
        }
        for (std::size_t j = 0; j < side; ++j) {
            const double v = static_cast<double>(acc[j]) / denom;
            image.pixels[i * side + j] = std::clamp(v, 0.0, 1.0);
        }
    }
    return image;
}

}  // namespace

ByteStream pad_bytes(const ByteStream& stream) {
    if (stream.data.empty()) throw Error(ErrorKind::EmptyInput, "empty byte stream '" + stream.source_id + "'");
    ByteStream out = stream;
    const std::size_t rem = out.data.size() % kRowWidth;
    if (rem != 0) out.data.resize(out.data.size() + (kRowWidth - rem), 0x00);
    return out;
}

ByteMatrix reshape_bytes(const ByteStream& stream) {
    if (stream.data.empty()) throw Error(ErrorKind::EmptyInput, "empty byte stream '" + stream.source_id + "'");
    if (stream.data.size() % kRowWidth != 0) {
        throw Error(ErrorKind::NotAligned, "length " + std::to_string(stream.data.size()) +
                                               " is not a multiple of " + std::to_string(kRowWidth));
    }
    return ByteMatrix{stream.data.size() / kRowWidth, stream.data};
}

GrayImage resize_image(const ByteMatrix& matrix, std::size_t side) {
    if (matrix.rows == 0 || matrix.values.size() != matrix.rows * ByteMatrix::cols) {
        throw Error(ErrorKind::ShapeMismatch, "byte matrix has inconsistent shape");
    }
    if (side == 0) throw Error(ErrorKind::BadSpec, "target side must be positive");
    return area_resize<std::uint64_t>(matrix.values.data(), matrix.rows, ByteMatrix::cols, side, 255.0);
}

GrayImage resize_gray(const GrayImage& image, std::size_t side) {
    if (image.height == 0 || image.width == 0 || image.pixels.size() != image.height * image.width) {
        throw Error(ErrorKind::ShapeMismatch, "image has inconsistent shape");
    }
    if (side == 0) throw Error(ErrorKind::BadSpec, "target side must be positive");
    if (image.height == side && image.width == side) return image;
    return area_resize<double>(image.pixels.data(), image.height, image.width, side, 1.0);
}

GrayImage binary_to_image(const ByteStream& stream, std::size_t side) {
    return resize_image(reshape_bytes(pad_bytes(stream)), side);
}

ByteStream read_byte_stream(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open '" + path.string() + "'");
    ByteStream stream;
    stream.source_id = path.string();
    stream.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return stream;
}

void write_png(const GrayImage& image, const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::Io, "libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::Io, "libpng failed writing '" + path.string() + "'");
    }

    std::vector<png_byte> row(image.width);
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < image.height; ++r) {
        for (std::size_t c = 0; c < image.width; ++c) {
            row[c] = static_cast<png_byte>(std::lround(std::clamp(image.at(r, c), 0.0, 1.0) * 255.0));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace malimg
