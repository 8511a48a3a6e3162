#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace vlp {

/// Widths and depths of one encoder stack family. `video_layers` counts
/// temporal and spatial attention sub-blocks individually, so the divided
/// space-time encoder runs video_layers/2 temporal+spatial pairs.
struct ModelConfig {
    std::size_t d = 64;
    std::size_t heads = 4;
    std::size_t video_layers = 4;
    std::size_t text_layers = 2;
    std::size_t mm_layers = 2;
    std::size_t patch_size = 8;
    std::size_t frame_size = 32;
    std::size_t max_frames = 4;
    std::size_t max_text = 16;
    std::size_t proj_dim = 16;
    std::size_t vocab_size = 0;
    std::size_t ffn_mult = 4;

    void validate() const;
    std::size_t patches_per_frame() const;
    std::size_t ffn_hidden() const { return ffn_mult * d; }

    static ModelConfig desk_default();
    /// Paper-scale preset (12-pair TimeSformer, 6-layer text and multimodal
    /// stacks, 224px frames, 256-d projection). Documentation scale only.
    static ModelConfig paper_preset();
    static ModelConfig prompter_default();
};

enum class LossKind { vtc, pem, mlm, vtm };

std::string loss_set_str(const std::set<LossKind>& set);
std::set<LossKind> parse_loss_set(const std::string& csv);

struct TrainConfig {
    std::string optimizer = "adamw";
    double peak_lr = 1e-4;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    std::string schedule = "warmup-linear";
    double warmup_ratio = 0.1;
    std::size_t steps = 200;
    std::size_t epochs = 0;  // when > 0, overrides steps
    std::size_t batch = 8;
    std::size_t frames = 4;
    std::size_t grad_accum = 1;
    std::string augmentation = "none";
    std::set<LossKind> loss_set = {LossKind::vtc, LossKind::pem, LossKind::mlm,
                                   LossKind::vtm};
    std::size_t crops_per_video = 1;
    std::size_t entities = 0;  // M; 0 keeps every lexicon hit
    bool ensemble = true;
    double label_threshold = 0.2;
    double crop_min_frac = 0.3;
    double crop_max_frac = 0.5;
    double tau_init = 0.07;

    void validate() const;
};

struct DataConfig {
    std::size_t samples_train = 64;
    std::size_t samples_test = 16;
    std::size_t frames = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t entities_min = 1;
    std::size_t entities_max = 3;
    double image_fraction = 0.0;
    bool qa = false;
    bool blink = false;

    void validate() const;
};

struct EvalConfig {
    std::string scorer = "vtc";  // vtc | vtm

    void validate() const;
};

/// Flat-key configuration for the whole pipeline. File format: UTF-8
/// `key = value` lines, '#' comments. Unknown keys are errors.
struct Config {
    std::uint64_t seed = 42;
    ModelConfig model = ModelConfig::desk_default();
    ModelConfig prompter = ModelConfig::prompter_default();
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;

    void validate() const;

    /// Applies one `key=value` assignment; ConfigError on unknown key or
    /// unparsable value.
    void set(const std::string& key, const std::string& value);

    static Config from_file(const std::string& path);
    static Config from_text(const std::string& text);

    /// Resolved configuration as sorted key=value lines; embedded in every
    /// artifact for provenance.
    std::string to_text() const;
    std::map<std::string, std::string> to_map() const;
};

}  // namespace vlp
