#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "malimg/dataset.hpp"
#include "malimg/error.hpp"

using namespace malimg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, std::size_t n, std::uint8_t value) {
    std::ofstream out(p, std::ios::binary);
    for (std::size_t i = 0; i < n; ++i) out.put(static_cast<char>(value));
}

// Corpus of tiny constant images; family f gets n[f] samples.
LabeledCorpus toy_corpus(const std::vector<std::size_t>& sizes) {
    LabeledCorpus c;
    for (std::size_t f = 0; f < sizes.size(); ++f) {
        c.family_names.push_back("fam" + std::to_string(f));
        for (std::size_t i = 0; i < sizes[f]; ++i) {
            c.samples.push_back({GrayImage{2, 2, std::vector<double>(4, 0.1 * f)}, static_cast<int>(f),
                                 "f" + std::to_string(f) + "/" + std::to_string(i)});
        }
    }
    return c;
}

std::map<int, std::size_t> counts(const LabeledCorpus& c) {
    std::map<int, std::size_t> m;
    for (const auto& s : c.samples) ++m[s.family_id];
    return m;
}

double image_distance(const GrayImage& a, const GrayImage& b) {
    double d = 0.0;
    for (std::size_t k = 0; k < a.pixels.size(); ++k) d += (a.pixels[k] - b.pixels[k]) * (a.pixels[k] - b.pixels[k]);
    return std::sqrt(d);
}

}  // namespace

TEST_CASE("load_corpus indexes families alphabetically") {
    TempDir dir("malimg_dataset_load");
    write_bytes(dir.path / "a.bin", 1000, 1);
    write_bytes(dir.path / "b.bin", 1000, 2);
    {
        std::ofstream m(dir.path / "manifest.csv");
        m << "path,family\n\"a.bin\",fooware\nb.bin,barware\n";
    }
    const auto corpus = load_corpus(dir.path, dir.path / "manifest.csv", 16);
    CHECK(corpus.family_count() == 2);
    CHECK(corpus.family_names == std::vector<std::string>{"barware", "fooware"});
    REQUIRE(corpus.size() == 2);
    CHECK(corpus.samples[0].family_id == 1);
    CHECK(corpus.samples[1].family_id == 0);
    CHECK(corpus.samples[0].image.height == 16);
}

TEST_CASE("load_corpus errors name the culprit") {
    TempDir dir("malimg_dataset_errors");
    {
        std::ofstream m(dir.path / "missing.csv");
        m << "path,family\nnot_here.bin,x\n";
    }
    try {
        load_corpus(dir.path, dir.path / "missing.csv");
        FAIL("expected MissingFile");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::MissingFile);
        CHECK(std::string(e.what()).find("not_here.bin") != std::string::npos);
    }

    write_bytes(dir.path / "ok.bin", 10, 1);
    {
        std::ofstream m(dir.path / "nofamily.csv");
        m << "path,family\nok.bin,\n";
    }
    try {
        load_corpus(dir.path, dir.path / "nofamily.csv");
        FAIL("expected UnknownFamily");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnknownFamily);
    }

    write_bytes(dir.path / "empty.bin", 0, 0);
    {
        std::ofstream m(dir.path / "empty.csv");
        m << "path,family\nempty.bin,x\n";
    }
    try {
        load_corpus(dir.path, dir.path / "empty.csv");
        FAIL("expected EmptyInput");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::EmptyInput);
        CHECK(std::string(e.what()).find("empty.bin") != std::string::npos);
    }

    {
        std::ofstream m(dir.path / "header.csv");
        m << "file,label\nok.bin,x\n";
    }
    CHECK_THROWS_AS(read_manifest(dir.path / "header.csv"), Error);
}

TEST_CASE("train_count follows floor(0.9 n) with one held out") {
    CHECK(train_count(10, 0.9) == 9);
    CHECK(train_count(2, 0.9) == 1);
    CHECK(train_count(200, 0.9) == 180);
    CHECK(train_count(11, 0.9) == 9);
    CHECK(train_count(5, 0.99) == 4);
    CHECK(train_count(3, 0.1) == 0);
}

TEST_CASE("stratified split counts, coverage and determinism") {
    const auto corpus = toy_corpus({10, 2, 37, 200});
    const auto [train, test] = stratified_split(corpus, {0.9, 42});
    const auto tr = counts(train);
    const auto te = counts(test);
    CHECK(tr.at(0) == 9);
    CHECK(te.at(0) == 1);
    CHECK(tr.at(1) == 1);
    CHECK(te.at(1) == 1);
    CHECK(tr.at(2) == 33);
    CHECK(te.at(2) == 4);
    CHECK(tr.at(3) == 180);
    CHECK(te.at(3) == 20);

    std::multiset<std::string> all;
    for (const auto& s : train.samples) all.insert(s.source_id);
    for (const auto& s : test.samples) CHECK(all.count(s.source_id) == 0);
    for (const auto& s : test.samples) all.insert(s.source_id);
    std::multiset<std::string> expected;
    for (const auto& s : corpus.samples) expected.insert(s.source_id);
    CHECK(all == expected);

    const auto [train2, test2] = stratified_split(corpus, {0.9, 42});
    std::vector<std::string> a, b;
    for (const auto& s : test.samples) a.push_back(s.source_id);
    for (const auto& s : test2.samples) b.push_back(s.source_id);
    CHECK(a == b);

    const auto [train3, test3] = stratified_split(corpus, {0.9, 43});
    std::vector<std::string> c;
    for (const auto& s : test3.samples) c.push_back(s.source_id);
    CHECK(a != c);
}

TEST_CASE("families with a single sample are rejected") {
    const auto corpus = toy_corpus({5, 1});
    try {
        stratified_split(corpus, {0.9, 1});
        FAIL("expected FamilyTooSmall");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::FamilyTooSmall);
        CHECK(std::string(e.what()).find("fam1") != std::string::npos);
    }
}

TEST_CASE("corpus validation") {
    auto corpus = toy_corpus({2, 2});
    CHECK_NOTHROW(corpus.validate());
    corpus.samples[0].family_id = 5;
    CHECK_THROWS_AS(corpus.validate(), Error);
    corpus = toy_corpus({2, 2});
    corpus.samples[1].source_id = corpus.samples[0].source_id;
    CHECK_THROWS_AS(corpus.validate(), Error);
}

TEST_CASE("synthetic corpus: counts, determinism, family separation") {
    const auto corpus = synth_corpus(5, 6, 7, 64);
    CHECK(corpus.size() == 30);
    CHECK(corpus.family_count() == 5);
    for (const auto& [f, n] : counts(corpus)) CHECK(n == 6);

    const auto again = synth_corpus(5, 6, 7, 64);
    for (std::size_t i = 0; i < corpus.size(); ++i) REQUIRE(corpus.samples[i].image == again.samples[i].image);
    CHECK(synth_bytes(2, 3, 7).data == synth_bytes(2, 3, 7).data);
    CHECK(synth_bytes(2, 3, 7).data != synth_bytes(2, 3, 8).data);

    for (std::size_t f = 0; f < 5; ++f) {
        const auto s = synth_bytes(f, 0, 7);
        CHECK(s.data.size() >= 200000);
        CHECK(s.data.size() <= 800000);
    }

    double intra = 0, inter = 0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        for (std::size_t j = i + 1; j < corpus.size(); ++j) {
            const double d = image_distance(corpus.samples[i].image, corpus.samples[j].image);
            if (corpus.samples[i].family_id == corpus.samples[j].family_id) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    }
    CHECK(inter / n_inter > intra / n_intra);

    CHECK_THROWS_AS(synth_corpus(1, 5, 1), Error);
    CHECK_THROWS_AS(synth_corpus(3, 1, 1), Error);
}

TEST_CASE("corpus cache round-trips bit-exactly at float32") {
    TempDir dir("malimg_dataset_cache");
    const auto corpus = synth_corpus(3, 3, 1, 32);
    write_corpus_cache(corpus, dir.path);
    const auto back = read_corpus_cache(dir.path);
    REQUIRE(back.size() == corpus.size());
    CHECK(back.family_names == corpus.family_names);
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.samples[i].source_id == corpus.samples[i].source_id);
        CHECK(back.samples[i].family_id == corpus.samples[i].family_id);
        for (std::size_t k = 0; k < back.samples[i].image.pixels.size(); ++k) {
            REQUIRE(back.samples[i].image.pixels[k] ==
                    static_cast<double>(static_cast<float>(corpus.samples[i].image.pixels[k])));
        }
    }
    // A second write of the read-back corpus produces identical blobs.
    TempDir dir2("malimg_dataset_cache2");
    write_corpus_cache(back, dir2.path);
    const auto again = read_corpus_cache(dir2.path);
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(again.samples[i].image == back.samples[i].image);

    const auto resized = read_corpus_cache(dir.path, 8);
    CHECK(resized.samples[0].image.height == 8);

    const auto picked = select_samples(corpus, {corpus.samples[4].source_id, corpus.samples[1].source_id});
    REQUIRE(picked.size() == 2);
    CHECK(picked.samples[0].source_id == corpus.samples[1].source_id);
}
