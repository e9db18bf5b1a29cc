#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "malimg/preprocess.hpp"

namespace malimg {

struct LabeledSample {
    GrayImage image;
    int family_id = -1;  // -1 marks an unlabeled sample (e.g. a novelty query)
    std::string source_id;
};

struct LabeledCorpus {
    std::vector<LabeledSample> samples;
    std::vector<std::string> family_names;

    std::size_t family_count() const { return family_names.size(); }
    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    /// Sample counts indexed by family_id.
    std::vector<std::size_t> family_sizes() const;

    /// Throws UnknownFamily / BadSpec when labels or ids are inconsistent.
    void validate() const;
};

struct SplitSpec {
    double train_fraction = 0.9;
    std::uint64_t seed = 0;
};

struct ManifestRow {
    std::string path;
    std::string family;
};

/// Parses a `path,family` CSV with header. Quoted fields are accepted.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest);

/// Loads every manifest row (paths relative to root) through binary_to_image.
/// Families are indexed in alphabetical order of their names.
LabeledCorpus load_corpus(const std::filesystem::path& root, const std::filesystem::path& manifest,
                          std::size_t side = kImageSide);

/// Number of samples of an n-sample family that go to training:
/// floor(fraction * n), lowered so that at least one sample is held out.
std::size_t train_count(std::size_t n, double train_fraction);

/// Per-family split; every family keeps at least one test sample.
/// Throws FamilyTooSmall for any family with fewer than two samples.
std::pair<LabeledCorpus, LabeledCorpus> stratified_split(const LabeledCorpus& corpus, const SplitSpec& spec);

/// Raw bytes of one synthetic sample. Each family has its own texture
/// generator (repeating motifs, constant blocks, diagonal ramps, packed
/// bodies behind structured headers, text-like regions) and every sample
/// gets a random length in [200k, 800k] bytes plus 5% noise bytes.
ByteStream synth_bytes(std::size_t family, std::size_t index, std::uint64_t seed);

/// Synthetic desk-scale corpus, deterministic in (families, per_family, seed).
LabeledCorpus synth_corpus(std::size_t families, std::size_t per_family, std::uint64_t seed,
                           std::size_t side = kImageSide);

// Corpus cache: one BIMG blob per sample (magic "BIMG", u32 height, u32 width,
// row-major little-endian float32 pixels) plus an index.json. Pixels are
// narrowed to float32 on disk, which is the precision the model consumes.
void write_image_blob(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_image_blob(const std::filesystem::path& path);

void write_corpus_cache(const LabeledCorpus& corpus, const std::filesystem::path& dir);

/// Reads a cache written by write_corpus_cache. When side is nonzero every
/// image is area-resized to side x side.
LabeledCorpus read_corpus_cache(const std::filesystem::path& dir, std::size_t side = 0);

/// Keeps the samples whose source_id is in ids, in corpus order.
LabeledCorpus select_samples(const LabeledCorpus& corpus, const std::vector<std::string>& ids);

}  // namespace malimg
