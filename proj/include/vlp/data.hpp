#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vlp/config.hpp"
#include "vlp/media.hpp"
#include "vlp/rng.hpp"

namespace vlp {

/// Word-level tokenizer: lowercase, split on anything non-alphanumeric.
/// Special ids: 0 [PAD], 1 [CLS], 2 [MASK], 3 [UNK]; content words follow.
struct Tokenizer {
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kMask = 2;
    static constexpr int kUnk = 3;

    std::vector<std::string> words;  // id - 4 -> word
    std::map<std::string, int> ids;

    std::size_t vocab_size() const { return words.size() + 4; }
    bool is_special(int id) const { return id >= 0 && id < 4; }
    int id_of(const std::string& word) const;
    std::string word_of(int id) const;

    static std::vector<std::string> split_words(const std::string& text);
    static Tokenizer build(std::span<const std::string> texts);
    static Tokenizer from_words(std::vector<std::string> words);

    /// [CLS] + content ids, truncated and [PAD]-padded to max_text content
    /// slots (total length max_text + 1).
    std::vector<int> encode(const std::string& text, std::size_t max_text) const;
};

enum class Split { train, val, test };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct QaPair {
    std::string question;
    int answer_id = 0;
    std::string answer_text;
};

/// Ground truth for one synthetic entity: per-frame bounding box and
/// visibility.
struct GtEntity {
    std::string name;
    std::vector<std::array<int, 4>> bbox;  // x0,y0,x1,y1 per frame
    std::vector<bool> visible;
};

struct Sample {
    std::string id;
    FrameStack media;
    bool is_image = false;
    std::string caption;
    Split split = Split::train;
    std::optional<QaPair> qa;
    std::vector<GtEntity> gt_entities;
};

struct Corpus {
    std::vector<Sample> samples;
    std::vector<std::string> answer_vocab;
    Tokenizer tokenizer;
    std::string config_text;  // provenance carried in the manifest header

    std::vector<std::size_t> split_indices(Split s) const;
    std::vector<std::string> captions(Split s) const;
};

/// The synthetic entity palette: one fixed color per shape so crops are
/// identifiable at any scale. Every name appears in the shipped noun lexicon.
struct EntityClass {
    const char* name;
    std::uint8_t r, g, b;
};
std::span<const EntityClass> entity_classes();

/// Deterministic synthetic corpus: each sample renders 1-3 colored shapes
/// drifting linearly across T frames, captioned by a fixed grammar naming the
/// entities plus one action word.
Corpus synth_corpus(const DataConfig& cfg, std::uint64_t seed);

/// Entity with the largest painted-box overlap with the crop (summed over
/// visible frames); empty when nothing overlaps.
std::string dominant_entity(const Sample& sample, std::size_t x0, std::size_t y0,
                            std::size_t x1, std::size_t y1);

/// Split-half training sampler: n/2 indices without replacement from each
/// half of [0,total), merged ascending.
std::vector<std::size_t> sample_frames_train(std::size_t total, std::size_t n, Rng& rng);

/// Deterministic midpoints: floor((i+0.5)*total/n), clamped; duplicates
/// appear when total < n.
std::vector<std::size_t> sample_frames_infer(std::size_t total, std::size_t n);

FrameStack image_to_static_video(const FrameStack& image, std::size_t n);

struct MaskResult {
    std::vector<int> ids;
    std::vector<std::size_t> positions;
    std::vector<int> originals;
    bool forced = false;  // no token was selected, so one was force-masked
};

/// Independently masks each non-special token with probability p, replacing
/// it with [MASK]; if none is selected, one non-special token is force-masked
/// so the loss is never vacuous.
MaskResult mask_tokens(std::span<const int> ids, double p, Rng& rng, const Tokenizer& tok);

/// Corpus directory layout: manifest.jsonl + vocab.txt + media/<id>.alpv.
/// `config_text`, when given, is embedded in the manifest header for
/// provenance.
void write_corpus(const Corpus& corpus, const std::string& dir,
                  const std::string& config_text = "");
Corpus read_corpus(const std::string& dir);

}  // namespace vlp
