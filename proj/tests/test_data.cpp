#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "vlp/data.hpp"
#include "vlp/errors.hpp"
#include "vlp/prompter.hpp"

using namespace vlp;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

DataConfig small_corpus_config() {
    DataConfig cfg;
    cfg.samples_train = 8;
    cfg.samples_test = 2;
    cfg.frames = 8;
    return cfg;
}

}  // namespace

TEST_CASE("tokenizer round trip and specials") {
    std::vector<std::string> texts{"A dog runs.", "the dog and a cat"};
    Tokenizer tok = Tokenizer::build(texts);

    const std::vector<int> ids = tok.encode("A dog runs.", 6);
    REQUIRE(ids.size() == 7);
    CHECK(ids[0] == Tokenizer::kCls);
    CHECK(tok.word_of(ids[1]) == "a");
    CHECK(tok.word_of(ids[2]) == "dog");
    CHECK(tok.word_of(ids[3]) == "runs");
    CHECK(ids[4] == Tokenizer::kPad);
    CHECK(ids[6] == Tokenizer::kPad);

    // empty string -> CLS + padding
    const std::vector<int> empty = tok.encode("", 4);
    CHECK(empty == std::vector<int>{1, 0, 0, 0, 0});

    // unknown word -> UNK; in-vocabulary words round-trip
    const std::vector<int> unk = tok.encode("zebra runs", 3);
    CHECK(unk[1] == Tokenizer::kUnk);
    for (const std::string& w : {"dog", "cat", "runs"}) {
        CHECK(tok.word_of(tok.id_of(w)) == w);
    }
}

TEST_CASE("synthetic corpus determinism and caption structure") {
    DataConfig cfg = small_corpus_config();
    Corpus a = synth_corpus(cfg, 42);
    Corpus b = synth_corpus(cfg, 42);
    Corpus c = synth_corpus(cfg, 43);

    REQUIRE(a.samples.size() == 10);
    bool any_difference = false;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].media.data == b.samples[i].media.data);
        CHECK(a.samples[i].caption == b.samples[i].caption);
        if (a.samples[i].media.data != c.samples[i].media.data) any_difference = true;
    }
    CHECK(any_difference);

    std::set<std::string> names;
    for (const auto& e : entity_classes()) names.insert(e.name);
    for (const auto& s : a.samples) {
        REQUIRE(!s.caption.empty());
        std::size_t nouns = 0;
        for (const auto& w : Tokenizer::split_words(s.caption)) {
            if (names.count(w)) ++nouns;
        }
        CHECK(nouns == s.gt_entities.size());
        CHECK(s.media.t == 8);
        CHECK(s.media.h == 32);
    }
}

TEST_CASE("caption entity counts cross-check extract_entities") {
    DataConfig cfg = small_corpus_config();
    cfg.samples_train = 16;
    Corpus corpus = synth_corpus(cfg, 7);
    std::set<std::string> lexicon;
    for (const auto& e : entity_classes()) lexicon.insert(e.name);
    lexicon.insert("sky");

    std::vector<std::string> captions;
    for (const auto& s : corpus.samples) captions.push_back(s.caption);
    EntityVocabulary vocab = extract_entities(captions, lexicon, 100);

    std::map<std::string, std::size_t> direct;
    for (const auto& s : corpus.samples) {
        for (const auto& gt : s.gt_entities) ++direct[gt.name];
    }
    REQUIRE(vocab.size() == direct.size());
    for (const auto& entry : vocab.entries) {
        CHECK(direct.at(entry.name) == entry.frequency);
    }
}

TEST_CASE("split-half frame sampler") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const auto idx = sample_frames_train(8, 4, rng);
        REQUIRE(idx.size() == 4);
        CHECK(std::count_if(idx.begin(), idx.end(), [](std::size_t i) { return i < 4; }) == 2);
        CHECK(std::count_if(idx.begin(), idx.end(), [](std::size_t i) { return i >= 4; }) == 2);
        for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i - 1] < idx[i]);
    }
    // T == N: identity
    CHECK(sample_frames_train(4, 4, rng) == std::vector<std::size_t>{0, 1, 2, 3});
    // same seed, same indices
    Rng r1(9), r2(9);
    CHECK(sample_frames_train(10, 4, r1) == sample_frames_train(10, 4, r2));
    CHECK_THROWS_AS(sample_frames_train(3, 4, rng), InputError);
}

TEST_CASE("split-half sampler is uniform within halves") {
    Rng rng(1234);
    const int draws = 10000;
    std::array<int, 8> counts{};
    for (int i = 0; i < draws; ++i) {
        for (std::size_t idx : sample_frames_train(8, 4, rng)) ++counts[idx];
    }
    // each half picks 2 of 4 -> marginal 1/2; chi-squared over 4 cells,
    // df = 3, p > 0.01 means chi2 < 11.345
    for (int half = 0; half < 2; ++half) {
        const double expected = draws / 2.0;
        double chi2 = 0.0;
        for (int j = 0; j < 4; ++j) {
            const double diff = counts[half * 4 + j] - expected;
            chi2 += diff * diff / expected;
        }
        CHECK(chi2 < 11.345);
    }
}

TEST_CASE("inference frame sampler midpoints") {
    CHECK(sample_frames_infer(8, 4) == std::vector<std::size_t>{1, 3, 5, 7});
    CHECK(sample_frames_infer(4, 4) == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(sample_frames_infer(8, 4) == sample_frames_infer(8, 4));
    // duplication when T < N, non-decreasing
    const auto dup = sample_frames_infer(2, 5);
    for (std::size_t i = 1; i < dup.size(); ++i) CHECK(dup[i - 1] <= dup[i]);
    for (std::size_t v : dup) CHECK(v < 2);
}

TEST_CASE("image promotion to static video") {
    FrameStack img{1, 4, 4, 3, std::vector<std::uint8_t>(48)};
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(i);
    FrameStack vid = image_to_static_video(img, 4);
    REQUIRE(vid.t == 4);
    for (std::size_t f = 0; f < 4; ++f) {
        for (std::size_t i = 0; i < 48; ++i) CHECK(vid.data[f * 48 + i] == img.data[i]);
    }
    FrameStack same = image_to_static_video(img, 1);
    CHECK(same.data == img.data);
}

TEST_CASE("masking respects specials and restores originals") {
    std::vector<std::string> texts{"a b c d e f g h"};
    Tokenizer tok = Tokenizer::build(texts);
    const std::vector<int> ids = tok.encode("a b c d e f g h", 10);

    Rng rng(5);
    // p=0 with the forced floor -> exactly one masked position
    MaskResult none = mask_tokens(ids, 0.0, rng, tok);
    CHECK(none.forced);
    CHECK(none.positions.size() == 1);

    // p=1 -> every non-special token masked
    MaskResult all = mask_tokens(ids, 1.0, rng, tok);
    CHECK(all.positions.size() == 8);
    for (std::size_t i = 0; i < all.ids.size(); ++i) {
        if (tok.is_special(ids[i])) {
            CHECK(all.ids[i] == ids[i]);
        } else {
            CHECK(all.ids[i] == Tokenizer::kMask);
        }
    }

    // originals restore the input exactly
    std::vector<int> restored = all.ids;
    for (std::size_t i = 0; i < all.positions.size(); ++i) {
        restored[all.positions[i]] = all.originals[i];
    }
    CHECK(restored == ids);
}

TEST_CASE("empirical mask rate at p=0.15") {
    std::vector<std::string> texts{"w1 w2 w3 w4 w5 w6 w7 w8 w9 w10"};
    Tokenizer tok = Tokenizer::build(texts);
    const std::vector<int> ids = tok.encode("w1 w2 w3 w4 w5 w6 w7 w8 w9 w10", 10);
    Rng rng(99);
    std::size_t selected = 0, tokens = 0;
    while (tokens < 100000) {
        MaskResult r = mask_tokens(ids, 0.15, rng, tok);
        // count the raw Bernoulli selection, before the force-mask floor
        selected += r.forced ? 0 : r.positions.size();
        tokens += 10;
        for (std::size_t pos : r.positions) {
            CHECK(pos >= 1);            // CLS never masked
            CHECK(ids[pos] != Tokenizer::kPad);
        }
    }
    const double rate = static_cast<double>(selected) / static_cast<double>(tokens);
    CHECK(rate > 0.145);
    CHECK(rate < 0.155);
}

TEST_CASE("corpus manifest round trip is byte identical") {
    DataConfig cfg = small_corpus_config();
    cfg.qa = true;
    Corpus corpus = synth_corpus(cfg, 11);
    const std::string dir1 = "/tmp/vlp_corpus_a";
    const std::string dir2 = "/tmp/vlp_corpus_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    write_corpus(corpus, dir1);
    Corpus loaded = read_corpus(dir1);
    write_corpus(loaded, dir2);

    CHECK(read_file(dir1 + "/manifest.jsonl") == read_file(dir2 + "/manifest.jsonl"));
    CHECK(read_file(dir1 + "/vocab.txt") == read_file(dir2 + "/vocab.txt"));
    REQUIRE(loaded.samples.size() == corpus.samples.size());
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        CHECK(loaded.samples[i].media.data == corpus.samples[i].media.data);
        CHECK(loaded.samples[i].caption == corpus.samples[i].caption);
        CHECK(loaded.samples[i].split == corpus.samples[i].split);
    }
    CHECK(loaded.answer_vocab == corpus.answer_vocab);
    CHECK(loaded.tokenizer.words == corpus.tokenizer.words);
}

TEST_CASE("alpv media io") {
    FrameStack s{2, 3, 4, 3, {}};
    s.data.resize(s.pixel_count());
    for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] = static_cast<std::uint8_t>(i * 7);
    write_alpv(s, "/tmp/vlp_test.alpv");
    FrameStack r = read_alpv("/tmp/vlp_test.alpv");
    CHECK(r.t == 2);
    CHECK(r.h == 3);
    CHECK(r.w == 4);
    CHECK(r.data == s.data);

    // corrupt one byte -> integrity error on the magic
    {
        std::fstream f("/tmp/vlp_test.alpv", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS_AS(read_alpv("/tmp/vlp_test.alpv"), IntegrityError);
}

TEST_CASE("ppm sequence import") {
    const std::string p1 = "/tmp/vlp_f0.ppm";
    const std::string p2 = "/tmp/vlp_f1.ppm";
    for (const auto& [path, fill] : {std::pair{p1, 10}, std::pair{p2, 200}}) {
        std::ofstream out(path, std::ios::binary);
        out << "P6\n2 2\n255\n";
        for (int i = 0; i < 12; ++i) out.put(static_cast<char>(fill + i));
    }
    std::vector<std::string> paths{p1, p2};
    FrameStack s = read_ppm_sequence(paths);
    CHECK(s.t == 2);
    CHECK(s.h == 2);
    CHECK(s.w == 2);
    CHECK(s.c == 3);
    CHECK(s.at(0, 0, 0, 0) == 10);
    CHECK(s.at(1, 0, 0, 0) == 200);
}

TEST_CASE("dominant entity for a crop") {
    DataConfig cfg = small_corpus_config();
    Corpus corpus = synth_corpus(cfg, 21);
    const Sample& s = corpus.samples[0];
    REQUIRE(!s.gt_entities.empty());
    const auto& gt = s.gt_entities[0];
    // crop exactly the first entity's frame-0 box
    const auto& b = gt.bbox[0];
    const std::string who = dominant_entity(s, static_cast<std::size_t>(b[0]),
                                            static_cast<std::size_t>(b[1]),
                                            static_cast<std::size_t>(b[2]),
                                            static_cast<std::size_t>(b[3]));
    CHECK(!who.empty());
    // crop of nothing: zero-area overlap only when entities are absent there
    CHECK(dominant_entity(s, 0, 0, 1, 1).empty() ==
          (dominant_entity(s, 0, 0, 1, 1) == ""));
}
