#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "vlp/config.hpp"
#include "vlp/graph.hpp"
#include "vlp/media.hpp"
#include "vlp/rng.hpp"

namespace vlp {

/// Named parameters in deterministic (name) order. Once frozen, values may
/// not be mutated through the optimizer; fingerprint() identifies the exact
/// value set.
class ParamStore {
public:
    Tensor& add(const std::string& name, Shape shape);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    std::map<std::string, Tensor>& tensors() { return params_; }
    const std::map<std::string, Tensor>& tensors() const { return params_; }

    void zero_grads();
    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }
    std::uint64_t fingerprint() const;

private:
    std::map<std::string, Tensor> params_;
    bool frozen_ = false;
};

/// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains,
/// log_tau = ln(tau_init). Each tensor draws from a stream derived from its
/// name, so adding or removing parameters does not disturb the others.
void init_params(ParamStore& ps, std::uint64_t seed, double tau_init = 0.07);

/// Caches one graph leaf per parameter so weight reuse inside a forward pass
/// records a single node.
class BoundParams {
public:
    BoundParams(Graph& g, ParamStore& ps) : g_(g), ps_(ps) {}
    Var operator()(const std::string& name);

private:
    Graph& g_;
    ParamStore& ps_;
    std::map<std::string, Var> cache_;
};

enum class Modality { video, text };
enum class EncodeMode { train, probe };

/// Output slot provenance for the multimodal encoder; index -1 marks a CLS.
struct SlotRef {
    Modality modality;
    int index;
    bool operator==(const SlotRef&) const = default;
};

struct EmbeddingSequence {
    enum class Kind { video, text, multimodal };
    Kind kind;
    Var cls;     // [1, d]
    Var tokens;  // [n, d]
    std::vector<SlotRef> provenance;  // multimodal only; entry 0 is the CLS slot
};

/// Flattened non-overlapping patches: [N*K, patch*patch*C], raster order per
/// frame, frame-major.
Tensor patch_matrix(const FrameArray& frames, std::size_t patch_size);

/// Per-dimension piecewise-linear resampling of an [L,d] position table over
/// normalized positions; new_len == L returns the input unchanged.
Tensor interpolate_temporal_pe(const Tensor& pe, std::size_t new_len);

/// Divided space-time transformer. Patch tokens attend temporally (same patch
/// position across frames) then spatially (within each frame, CLS included);
/// mean pooling over frames fuses per-frame features.
class VideoEncoder {
public:
    VideoEncoder(const ModelConfig& cfg, std::string prefix);
    void register_params(ParamStore& ps) const;
    EmbeddingSequence encode(Graph& g, BoundParams& bp, const FrameArray& frames,
                             EncodeMode mode = EncodeMode::train) const;

private:
    ModelConfig cfg_;
    std::string prefix_;
};

class TextEncoder {
public:
    TextEncoder(const ModelConfig& cfg, std::string prefix);
    void register_params(ParamStore& ps) const;
    EmbeddingSequence encode(Graph& g, BoundParams& bp, std::span<const int> token_ids) const;

private:
    ModelConfig cfg_;
    std::string prefix_;
};

class MultimodalEncoder {
public:
    MultimodalEncoder(const ModelConfig& cfg, std::string prefix);
    void register_params(ParamStore& ps) const;
    /// Concatenates [text CLS | video tokens | text tokens]; the video CLS is
    /// dropped. The output CLS is the text-CLS slot after fusion.
    EmbeddingSequence encode(Graph& g, BoundParams& bp, const EmbeddingSequence& video,
                             const EmbeddingSequence& text) const;

private:
    ModelConfig cfg_;
    std::string prefix_;
};

/// Bias-free linear map to the shared contrastive space, L2-normalized.
class ProjectionHead {
public:
    ProjectionHead(const ModelConfig& cfg, std::string name);
    void register_params(ParamStore& ps) const;
    Var apply(Graph& g, BoundParams& bp, Var cls) const;

private:
    ModelConfig cfg_;
    std::string name_;
};

/// The pre-training model: video/text/multimodal encoders, the two
/// contrastive projections, the task heads, and the learnable temperature.
class Model {
public:
    /// entity_count sizes the PEM head (0 omits it); answer_count sizes the
    /// QA head (0 omits it).
    Model(ModelConfig cfg, std::size_t entity_count, std::size_t answer_count = 0);

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& config() { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::size_t entity_count() const { return entity_count_; }
    std::size_t answer_count() const { return answer_count_; }

    EmbeddingSequence encode_video(Graph& g, BoundParams& bp, const FrameArray& frames,
                                   EncodeMode mode = EncodeMode::train) const;
    EmbeddingSequence encode_text(Graph& g, BoundParams& bp, std::span<const int> ids) const;
    EmbeddingSequence encode_multimodal(Graph& g, BoundParams& bp,
                                        const EmbeddingSequence& video,
                                        const EmbeddingSequence& text) const;
    Var project(Graph& g, BoundParams& bp, Var cls, Modality head) const;

private:
    ModelConfig cfg_;
    std::size_t entity_count_;
    std::size_t answer_count_;
    VideoEncoder video_;
    TextEncoder text_;
    MultimodalEncoder mm_;
    ProjectionHead proj_v_;
    ProjectionHead proj_t_;
    ParamStore params_;
};

}  // namespace vlp
