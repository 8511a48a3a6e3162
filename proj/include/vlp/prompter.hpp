#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vlp/data.hpp"
#include "vlp/encoders.hpp"
#include "vlp/objectives.hpp"
#include "vlp/templates.hpp"

namespace vlp {

/// Entity names with corpus frequencies, sorted by frequency descending with
/// lexicographic tie-breaks.
struct EntityVocabulary {
    struct Entry {
        std::string name;
        std::size_t frequency = 0;
    };
    std::vector<Entry> entries;
    std::size_t requested = 0;  // the M that was asked for

    std::size_t size() const { return entries.size(); }
    int index_of(const std::string& name) const;
    std::vector<std::string> names() const;
};

std::vector<std::string> load_noun_lexicon(const std::string& path);

/// The built-in noun list; the shipped assets/noun_lexicon.txt holds the
/// same words.
const std::vector<std::string>& default_noun_lexicon();

/// Counts caption tokens that appear in the noun lexicon and keeps the top-M.
/// Fewer than M hits returns them all (callers may warn via `requested`).
EntityVocabulary extract_entities(std::span<const std::string> captions,
                                  const std::set<std::string>& lexicon, std::size_t limit);

/// |vocab| x |templates| prompt strings, entity-major.
std::vector<std::string> instantiate_prompts(const EntityVocabulary& vocab,
                                             std::span<const std::string> templates);

/// The frozen pseudo-label generator: video and text towers plus projections,
/// trained with the contrastive loss only, then locked.
class PrompterModel {
public:
    explicit PrompterModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    EmbeddingSequence encode_video(Graph& g, BoundParams& bp, const FrameArray& frames) const;
    EmbeddingSequence encode_text(Graph& g, BoundParams& bp, std::span<const int> ids) const;
    Var project(Graph& g, BoundParams& bp, Var cls, Modality head) const;

    /// Projection values without keeping a graph around.
    Tensor video_projection(const FrameArray& frames) const;
    Tensor text_projection(std::span<const int> ids) const;

    void freeze();
    bool frozen() const { return params_.frozen(); }
    std::uint64_t fingerprint() const;
    /// The prompter's own temperature (frozen with the encoders).
    double tau() const;

private:
    ModelConfig cfg_;
    VideoEncoder video_;
    TextEncoder text_;
    ProjectionHead proj_v_;
    ProjectionHead proj_t_;
    ParamStore params_;
};

enum class PromptModality { video, image };

/// Per-entity ensembled prompt embeddings (unit rows of [M, proj_dim]),
/// locked to the prompter that produced them.
struct PromptBank {
    std::vector<std::string> entities;
    Tensor embeddings;
    std::vector<std::string> templates_used;
    std::uint64_t prompter_fingerprint = 0;
    PromptModality modality = PromptModality::video;
};

/// Arithmetic mean of each entity's projected prompt CLS embeddings,
/// re-normalized to unit length so similarity stays a cosine. With
/// `ensemble` off only the first template is used.
PromptBank build_prompt_bank(const EntityVocabulary& vocab, std::span<const std::string> templates,
                             PromptModality modality, const PrompterModel& prompter,
                             const Tokenizer& tokenizer, bool ensemble = true);

void save_prompt_bank(const PromptBank& bank, const std::string& path,
                      const std::string& config_text = "");
PromptBank load_prompt_bank(const std::string& path);

struct PseudoLabel {
    std::vector<double> q;
    std::size_t top_entity = 0;
    double top_score = 0.0;
    bool kept = false;
};

/// Softmax with a permutation-invariant summation order (addends sorted by
/// value), so permuting the entities permutes q exactly.
std::vector<double> softmax_similarities(std::span<const double> sims, double tau);

/// Uniform area fraction in [min_frac, max_frac], aspect in [0.5, 2], uniform
/// placement; resampled until the integer rectangle keeps the area bound and
/// covers at least one patch center (at most 100 attempts).
CropRegion sample_crop(std::size_t h, std::size_t w, Rng& rng, std::size_t patch_size,
                       double min_frac = 0.3, double max_frac = 0.5);

/// Scores the crop against every bank entry through the frozen prompter;
/// kept iff the top score reaches `threshold`.
PseudoLabel pseudo_label(const FrameArray& crop_frames, const PromptBank& bank,
                         const PrompterModel& prompter, double threshold = 0.2);

/// One export record per crop: {sample_id, crop bounds, top-5 entities with
/// scores, kept flag} as a JSON line.
std::string pseudo_label_record(const std::string& sample_id, const CropRegion& crop,
                                const PseudoLabel& label, const PromptBank& bank,
                                std::size_t top_k = 5);

}  // namespace vlp
