#include <doctest.h>

#include <cmath>

#include "malimg/error.hpp"
#include "malimg/masking.hpp"

using namespace malimg;

namespace {

GrayImage random_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    GrayImage img{side, side, std::vector<double>(side * side)};
    // Strictly positive so every masked pixel visibly changes.
    for (auto& p : img.pixels) p = 0.01 + 0.99 * uniform01(rng);
    return img;
}

std::size_t changed_pixels(const GrayImage& a, const GrayImage& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) n += a.pixels[i] != b.pixels[i];
    return n;
}

}  // namespace

TEST_CASE("masked block counts") {
    Rng rng(3);
    CHECK(generate_mask({16, 0.0}, 400, rng).masked_count() == 0);
    CHECK(generate_mask({16, 1.0}, 400, rng).masked_count() == 625);
    const auto half = generate_mask({16, 0.5}, 400, rng);
    CHECK(half.grid == 25);
    CHECK(half.masked_count() == 312);
    CHECK(masked_block_count({16, 0.5}, 625) == 312);
    CHECK(masked_block_count({16, 0.5}, 627) == 314);  // 313.5 -> 314
    CHECK(masked_block_count({16, 0.5}, 4) == 2);
}

TEST_CASE("apply_mask: identity, full and single block") {
    const auto img = random_image(400, 1);
    Mask empty{25, 16, std::vector<std::uint8_t>(625, 0)};
    CHECK(apply_mask(img, empty) == img);

    Mask full{25, 16, std::vector<std::uint8_t>(625, 1)};
    const auto zeroed = apply_mask(img, full);
    for (double p : zeroed.pixels) REQUIRE(p == 0.0);

    Mask one = empty;
    one.cells[0] = 1;
    const auto copy = img;
    const auto out = apply_mask(img, one);
    CHECK(changed_pixels(img, out) == 256);
    CHECK(img == copy);
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) CHECK(out.at(r, c) == 0.0);
}

TEST_CASE("masked pixel fraction equals masked block fraction") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const double ratio = uniform01(rng);
        const std::size_t block = (seed % 2) ? 16 : 8;
        const auto img = random_image(400, seed);
        const auto mask = generate_mask({block, ratio}, 400, rng);
        const auto out = apply_mask(img, mask);
        CHECK(changed_pixels(img, out) == block * block * mask.masked_count());
        for (std::size_t i = 0; i < img.pixels.size(); ++i) {
            if (out.pixels[i] != 0.0) REQUIRE(out.pixels[i] == img.pixels[i]);
        }
    }
}

TEST_CASE("same rng state gives the same mask") {
    Rng a = derive_rng(9, 4, Stream::Mask);
    Rng b = derive_rng(9, 4, Stream::Mask);
    const auto m1 = generate_mask({16, 0.5}, 400, a);
    const auto m2 = generate_mask({16, 0.5}, 400, b);
    CHECK(m1.cells == m2.cells);
    Rng c = derive_rng(9, 5, Stream::Mask);
    CHECK(generate_mask({16, 0.5}, 400, c).cells != m1.cells);
}

TEST_CASE("block selection is uniform") {
    // 4x4 grid, 5 of 16 blocks per draw: each block is hit with p = 5/16.
    const std::size_t trials = 20000;
    std::vector<std::size_t> hits(16, 0);
    Rng rng(11);
    for (std::size_t t = 0; t < trials; ++t) {
        const auto m = generate_mask({4, 5.0 / 16.0}, 16, rng);
        REQUIRE(m.masked_count() == 5);
        for (std::size_t i = 0; i < 16; ++i) hits[i] += m.cells[i];
    }
    const double p = 5.0 / 16.0;
    const double sd = std::sqrt(trials * p * (1 - p));
    for (auto h : hits) CHECK(std::abs(static_cast<double>(h) - trials * p) < 5 * sd);
}

TEST_CASE("mask errors") {
    Rng rng(1);
    try {
        generate_mask({15, 0.5}, 400, rng);
        FAIL("expected BadConfig");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BadConfig);
    }
    CHECK_THROWS_AS(generate_mask({16, 1.5}, 400, rng), Error);
    CHECK_THROWS_AS(generate_mask({0, 0.5}, 400, rng), Error);

    const auto mask = generate_mask({16, 0.5}, 400, rng);
    try {
        apply_mask(random_image(32, 1), mask);
        FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ShapeMismatch);
    }
}
