#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "malimg/dataset.hpp"
#include "malimg/model.hpp"
#include "malimg/rng.hpp"

namespace fixtures {

// Small 32x32 network: two same convs, two valid stride-2 convs (32 -> 14 -> 5).
inline malimg::ModelConfig reduced_config(std::size_t families = 3) {
    malimg::ModelConfig c;
    c.input_size = 32;
    c.families = families;
    c.convs = {
        {4, 3, 1, malimg::Padding::same},
        {4, 3, 1, malimg::Padding::same},
        {6, 5, 2, malimg::Padding::valid},
        {8, 5, 2, malimg::Padding::valid},
    };
    c.embedding_channels = 8;
    c.head_width = 8;
    c.residual_blocks = 3;
    return c;
}

inline malimg::GrayImage random_image(std::size_t side, std::uint64_t seed) {
    malimg::Rng rng(seed);
    malimg::GrayImage img{side, side, std::vector<double>(side * side)};
    for (auto& p : img.pixels) p = malimg::uniform01(rng);
    return img;
}

// Family f is a noisy horizontal gradient whose direction depends on f.
inline malimg::LabeledCorpus toy_corpus(std::size_t families, std::size_t per_family, std::size_t side,
                                        std::uint64_t seed) {
    malimg::LabeledCorpus c;
    malimg::Rng rng(seed);
    for (std::size_t f = 0; f < families; ++f) {
        c.family_names.push_back("family" + std::to_string(f));
        for (std::size_t i = 0; i < per_family; ++i) {
            malimg::GrayImage img{side, side, std::vector<double>(side * side)};
            for (std::size_t r = 0; r < side; ++r) {
                for (std::size_t col = 0; col < side; ++col) {
                    const double t = static_cast<double>(f % 2 ? col : r) / static_cast<double>(side);
                    const double base = f < 2 ? t : 1.0 - t;
                    img.at(r, col) = 0.8 * base + 0.2 * malimg::uniform01(rng);
                }
            }
            c.samples.push_back({img, static_cast<int>(f), "f" + std::to_string(f) + "_" + std::to_string(i)});
        }
    }
    return c;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

}  // namespace fixtures
