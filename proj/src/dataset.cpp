#include "malimg/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "malimg/csv.hpp"
#include "malimg/error.hpp"
#include "malimg/rng.hpp"

namespace malimg {

static_assert(std::endian::native == std::endian::little, "BIMG blobs are written in host order");

namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::uint64_t uniform_int(Rng& rng, std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng);
}

std::uint8_t random_byte(Rng& rng) { return static_cast<std::uint8_t>(rng() >> 56); }

void fill_motif(std::vector<std::uint8_t>& out, Rng& family, Rng& sample) {
    const std::size_t period = uniform_int(family, 600, 1000);
    std::vector<std::uint8_t> motif;
    motif.reserve(period);
    while (motif.size() < period) {
        const std::size_t run = uniform_int(family, 8, 48);
        const std::uint8_t value = random_byte(family);
        for (std::size_t i = 0; i < run && motif.size() < period; ++i) motif.push_back(value);
    }
    const std::size_t phase = uniform_int(sample, 0, period - 1);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = motif[(i + phase) % period];
}

void fill_blocks(std::vector<std::uint8_t>& out, Rng& family, Rng& sample) {
    const std::uint8_t palette[3] = {random_byte(family), random_byte(family), random_byte(family)};
    const std::size_t lo = uniform_int(family, 1000, 4000);
    const std::size_t hi = lo * uniform_int(family, 2, 5);
    std::size_t i = 0;
    while (i < out.size()) {
        const std::size_t len = uniform_int(sample, lo, hi);
        const std::uint8_t value = palette[uniform_int(sample, 0, 2)];
        for (std::size_t k = 0; k < len && i < out.size(); ++k, ++i) out[i] = value;
    }
}

void fill_ramp(std::vector<std::uint8_t>& out, Rng& family, Rng& sample) {
    const std::size_t slope = uniform_int(family, 1, 6);
    const std::size_t gain = uniform_int(family, 1, 3);
    const std::size_t shift = uniform_int(sample, 0, 255);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t col = i % kRowWidth;
        const std::size_t row = i / kRowWidth;
        out[i] = static_cast<std::uint8_t>(((col + row * slope) * gain + shift) & 0xFF);
    }
}

void fill_packed(std::vector<std::uint8_t>& out, Rng& family, Rng& sample) {
    const double header_fraction = 0.1 + 0.3 * uniform01(family);
    const std::uint8_t header_level = static_cast<std::uint8_t>(uniform_int(family, 16, 96));
    const double jitter = 0.9 + 0.2 * uniform01(sample);
    const auto header = static_cast<std::size_t>(std::min(1.0, header_fraction * jitter) * out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (i < header) {
            // Sparse small values in a mostly zero header.
            out[i] = (i / 64) % 4 == 0 ? static_cast<std::uint8_t>(uniform_int(sample, 0, header_level)) : 0;
        } else {
            out[i] = random_byte(sample);
        }
    }
}

void fill_text(std::vector<std::uint8_t>& out, Rng& family, Rng& sample) {
    const std::size_t line = uniform_int(family, 40, 120);
    const std::size_t gap_every = uniform_int(family, 8000, 30000);
    const std::size_t gap_len = uniform_int(family, 1000, 6000);
    const std::size_t phase = uniform_int(sample, 0, gap_every - 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if ((i + phase) % gap_every < gap_len) {
            out[i] = 0;
        } else if (i % line == line - 1) {
            out[i] = '\n';
        } else {
            const std::uint64_t r = uniform_int(sample, 0, 5);
            out[i] = r == 0 ? ' ' : static_cast<std::uint8_t>(uniform_int(sample, 'a', 'z'));
        }
    }
}

}  // namespace

std::vector<std::size_t> LabeledCorpus::family_sizes() const {
    std::vector<std::size_t> sizes(family_count(), 0);
    for (const auto& s : samples) {
        if (s.family_id >= 0 && static_cast<std::size_t>(s.family_id) < sizes.size()) ++sizes[s.family_id];
    }
    return sizes;
}

void LabeledCorpus::validate() const {
    std::set<std::string> seen;
    for (const auto& s : samples) {
        if (s.family_id < 0 || static_cast<std::size_t>(s.family_id) >= family_count()) {
            throw Error(ErrorKind::UnknownFamily, "sample '" + s.source_id + "' has family id " +
                                                      std::to_string(s.family_id) + " outside [0, " +
                                                      std::to_string(family_count()) + ")");
        }
        if (!seen.insert(s.source_id).second) {
            throw Error(ErrorKind::BadSpec, "duplicate source_id '" + s.source_id + "'");
        }
    }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open manifest '" + manifest.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::BadSpec, "manifest '" + manifest.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    const auto header = split_csv_line(line);
    if (header.size() != 2 || trim(header[0]) != "path" || trim(header[1]) != "family") {
        throw Error(ErrorKind::BadSpec, "manifest header must be 'path,family'");
    }

    std::vector<ManifestRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 2) {
            throw Error(ErrorKind::BadSpec, "manifest line " + std::to_string(line_no) + " needs 2 fields");
        }
        ManifestRow row{trim(fields[0]), trim(fields[1])};
        if (row.family.empty()) {
            throw Error(ErrorKind::UnknownFamily, "manifest line " + std::to_string(line_no) + " ('" + row.path +
                                                      "') has an empty family");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

LabeledCorpus load_corpus(const std::filesystem::path& root, const std::filesystem::path& manifest,
                          std::size_t side) {
    const auto rows = read_manifest(manifest);

    LabeledCorpus corpus;
    std::set<std::string> names;
    for (const auto& row : rows) names.insert(row.family);
    corpus.family_names.assign(names.begin(), names.end());

    std::map<std::string, int> index;
    for (std::size_t i = 0; i < corpus.family_names.size(); ++i) index[corpus.family_names[i]] = static_cast<int>(i);

    for (const auto& row : rows) {
        const auto path = root / row.path;
        if (!std::filesystem::is_regular_file(path)) {
            throw Error(ErrorKind::MissingFile, "manifest references missing file '" + path.string() + "'");
        }
        ByteStream stream = read_byte_stream(path);
        stream.source_id = row.path;
        corpus.samples.push_back({binary_to_image(stream, side), index.at(row.family), row.path});
    }
    corpus.validate();
    return corpus;
}

std::size_t train_count(std::size_t n, double train_fraction) {
    // The epsilon absorbs representation error in products like 0.3 * 10.
    auto k = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 1e-9));
    return std::min(k, n == 0 ? 0 : n - 1);
}

std::pair<LabeledCorpus, LabeledCorpus> stratified_split(const LabeledCorpus& corpus, const SplitSpec& spec) {
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
        throw Error(ErrorKind::BadSpec, "train_fraction must lie in (0, 1)");
    }
    corpus.validate();

    std::vector<std::vector<std::size_t>> members(corpus.family_count());
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) members[corpus.samples[i].family_id].push_back(i);

    std::vector<std::uint8_t> to_train(corpus.samples.size(), 0);
    for (std::size_t f = 0; f < members.size(); ++f) {
        auto& idx = members[f];
        if (idx.size() < 2) {
            throw Error(ErrorKind::FamilyTooSmall, "family '" + corpus.family_names[f] + "' has " +
                                                       std::to_string(idx.size()) + " sample(s); need at least 2");
        }
        Rng rng = derive_rng(spec.seed, f, Stream::Split);
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t k = train_count(idx.size(), spec.train_fraction);
        for (std::size_t j = 0; j < k; ++j) to_train[idx[j]] = 1;
    }

    LabeledCorpus train{{}, corpus.family_names};
    LabeledCorpus test{{}, corpus.family_names};
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        (to_train[i] ? train : test).samples.push_back(corpus.samples[i]);
    }
    return {std::move(train), std::move(test)};
}

ByteStream synth_bytes(std::size_t family, std::size_t index, std::uint64_t seed) {
    Rng family_rng = derive_rng(seed, family, Stream::Synth);
    Rng sample_rng = derive_rng(seed, (std::uint64_t{1} << 63) | (std::uint64_t{family} << 32) | index, Stream::Synth);

    ByteStream stream;
    stream.source_id = "synth/f" + std::to_string(family) + "/s" + std::to_string(index);
    stream.data.resize(uniform_int(sample_rng, 200'000, 800'000));

    switch (family % 5) {
        case 0: fill_motif(stream.data, family_rng, sample_rng); break;
        case 1: fill_blocks(stream.data, family_rng, sample_rng); break;
        case 2: fill_ramp(stream.data, family_rng, sample_rng); break;
        case 3: fill_packed(stream.data, family_rng, sample_rng); break;
        default: fill_text(stream.data, family_rng, sample_rng); break;
    }

    for (auto& byte : stream.data) {
        if (uniform01(sample_rng) < 0.05) byte = random_byte(sample_rng);
    }
    return stream;
}

LabeledCorpus synth_corpus(std::size_t families, std::size_t per_family, std::uint64_t seed, std::size_t side) {
    if (families < 2 || per_family < 2) {
        throw Error(ErrorKind::BadSpec, "synthetic corpus needs families >= 2 and per_family >= 2");
    }
    LabeledCorpus corpus;
    for (std::size_t f = 0; f < families; ++f) {
        std::ostringstream name;
        name << "family_" << std::setw(3) << std::setfill('0') << f;
        corpus.family_names.push_back(name.str());
    }
    corpus.samples.reserve(families * per_family);
    for (std::size_t f = 0; f < families; ++f) {
        for (std::size_t i = 0; i < per_family; ++i) {
            ByteStream stream = synth_bytes(f, i, seed);
            corpus.samples.push_back({binary_to_image(stream, side), static_cast<int>(f), stream.source_id});
        }
    }
    return corpus;
}

void write_image_blob(const GrayImage& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
    const auto h = static_cast<std::uint32_t>(image.height);
    const auto w = static_cast<std::uint32_t>(image.width);
    out.write("BIMG", 4);
    out.write(reinterpret_cast<const char*>(&h), sizeof h);
    out.write(reinterpret_cast<const char*>(&w), sizeof w);
    const std::vector<float> values(image.pixels.begin(), image.pixels.end());
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!out) throw Error(ErrorKind::Io, "short write to '" + path.string() + "'");
}

GrayImage read_image_blob(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open '" + path.string() + "'");
    char magic[4];
    std::uint32_t h = 0;
    std::uint32_t w = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&h), sizeof h);
    in.read(reinterpret_cast<char*>(&w), sizeof w);
    if (!in || std::memcmp(magic, "BIMG", 4) != 0) {
        throw Error(ErrorKind::Io, "'" + path.string() + "' is not a BIMG blob");
    }
    std::vector<float> values(static_cast<std::size_t>(h) * w);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!in) throw Error(ErrorKind::Io, "'" + path.string() + "' is truncated");
    return GrayImage{h, w, {values.begin(), values.end()}};
}

void write_corpus_cache(const LabeledCorpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    nlohmann::json index;
    index["format"] = "malimg-corpus";
    index["version"] = 1;
    index["family_names"] = corpus.family_names;
    auto& entries = index["samples"] = nlohmann::json::array();
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        const auto& s = corpus.samples[i];
        std::ostringstream file;
        file << "images/" << std::setw(6) << std::setfill('0') << i << ".bimg";
        write_image_blob(s.image, dir / file.str());
        nlohmann::json e{{"source_id", s.source_id}, {"family_id", s.family_id}, {"file", file.str()}};
        e["family"] = s.family_id >= 0 ? nlohmann::json(corpus.family_names.at(s.family_id)) : nlohmann::json();
        entries.push_back(std::move(e));
    }
    std::ofstream out(dir / "index.json", std::ios::trunc);
    out << index.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + (dir / "index.json").string() + "'");
}

LabeledCorpus read_corpus_cache(const std::filesystem::path& dir, std::size_t side) {
    const auto index_path = dir / "index.json";
    std::ifstream in(index_path);
    if (!in) throw Error(ErrorKind::MissingFile, "no corpus index at '" + index_path.string() + "'");
    nlohmann::json index;
    try {
        in >> index;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Io, "malformed '" + index_path.string() + "': " + e.what());
    }

    LabeledCorpus corpus;
    corpus.family_names = index.at("family_names").get<std::vector<std::string>>();
    for (const auto& e : index.at("samples")) {
        GrayImage image = read_image_blob(dir / e.at("file").get<std::string>());
        if (side != 0) image = resize_gray(image, side);
        corpus.samples.push_back({std::move(image), e.at("family_id").get<int>(), e.at("source_id").get<std::string>()});
    }
    return corpus;
}

LabeledCorpus select_samples(const LabeledCorpus& corpus, const std::vector<std::string>& ids) {
    const std::set<std::string> wanted(ids.begin(), ids.end());
    LabeledCorpus out{{}, corpus.family_names};
    for (const auto& s : corpus.samples) {
        if (wanted.count(s.source_id)) out.samples.push_back(s);
    }
    return out;
}

}  // namespace malimg
