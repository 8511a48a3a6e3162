#include "vlp/encoders.hpp"

#include <cmath>

#include "vlp/errors.hpp"
#include "vlp/hash.hpp"

namespace vlp {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Shape shape) {
    if (frozen_) throw IntegrityError("params: store is frozen, cannot add '" + name + "'");
    auto [it, inserted] = params_.emplace(name, Tensor(std::move(shape)));
    if (!inserted) throw IntegrityError("params: duplicate parameter '" + name + "'");
    it->second.requires_grad = true;
    return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw IntegrityError("params: no parameter '" + name + "'");
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw IntegrityError("params: no parameter '" + name + "'");
    return it->second;
}

void ParamStore::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

std::uint64_t ParamStore::fingerprint() const {
    std::uint64_t crc = 0;
    for (const auto& [name, t] : params_) {
        crc = crc64(name.data(), name.size(), crc);
        for (std::size_t e : t.shape) {
            const std::uint64_t v = e;
            crc = crc64(&v, sizeof(v), crc);
        }
        crc = crc64(t.values.data(), t.values.size() * sizeof(double), crc);
    }
    return crc;
}

void init_params(ParamStore& ps, std::uint64_t seed, double tau_init) {
    for (auto& [name, t] : ps.tensors()) {
        if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
            std::fill(t.values.begin(), t.values.end(), 0.0);
        } else if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0) {
            std::fill(t.values.begin(), t.values.end(), 1.0);
        } else if (name.find("log_tau") != std::string::npos) {
            std::fill(t.values.begin(), t.values.end(), std::log(tau_init));
        } else {
            Rng rng(derive_seed(seed, name));
            for (double& v : t.values) v = rng.normal(0.0, 0.02);
        }
    }
}

Var BoundParams::operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = g_.param(ps_.at(name));
    cache_.emplace(name, v);
    return v;
}

// ---------------------------------------------------------------------------
// shared transformer pieces
// ---------------------------------------------------------------------------

namespace {

void register_attention(ParamStore& ps, const std::string& prefix, std::size_t d) {
    ps.add(prefix + "ln.gain", {d});
    ps.add(prefix + "ln.bias", {d});
    for (const char* m : {"wq", "wk", "wv", "wo"}) {
        ps.add(prefix + m + ".weight", {d, d});
        ps.add(prefix + m + ".bias", {d});
    }
}

void register_ffn(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t hidden) {
    ps.add(prefix + "ln.gain", {d});
    ps.add(prefix + "ln.bias", {d});
    ps.add(prefix + "fc1.weight", {d, hidden});
    ps.add(prefix + "fc1.bias", {hidden});
    ps.add(prefix + "fc2.weight", {hidden, d});
    ps.add(prefix + "fc2.bias", {d});
}

/// Multi-head self-attention over a pre-normalized [T,d] sequence.
Var attention(Graph& g, BoundParams& bp, Var x, const std::string& prefix, std::size_t heads) {
    const std::size_t d = x.shape()[1];
    const std::size_t dh = d / heads;
    Var q = add(matmul(x, bp(prefix + "wq.weight")), bp(prefix + "wq.bias"));
    Var k = add(matmul(x, bp(prefix + "wk.weight")), bp(prefix + "wk.bias"));
    Var v = add(matmul(x, bp(prefix + "wv.weight")), bp(prefix + "wv.bias"));
    std::vector<Var> heads_out;
    heads_out.reserve(heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice(q, 1, h * dh, dh);
        Var kh = slice(k, 1, h * dh, dh);
        Var vh = slice(v, 1, h * dh, dh);
        Var att = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
        heads_out.push_back(matmul(att, vh));
    }
    Var merged = heads == 1 ? heads_out[0] : concat(heads_out, 1);
    (void)g;
    return add(matmul(merged, bp(prefix + "wo.weight")), bp(prefix + "wo.bias"));
}

Var ffn(Graph& g, BoundParams& bp, Var x, const std::string& prefix) {
    (void)g;
    Var h = gelu(add(matmul(x, bp(prefix + "fc1.weight")), bp(prefix + "fc1.bias")));
    return add(matmul(h, bp(prefix + "fc2.weight")), bp(prefix + "fc2.bias"));
}

Var norm(Graph& g, BoundParams& bp, Var x, const std::string& prefix) {
    (void)g;
    return layer_norm(x, bp(prefix + "ln.gain"), bp(prefix + "ln.bias"));
}

/// Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).
Var transformer_block(Graph& g, BoundParams& bp, Var x, const std::string& prefix,
                      std::size_t heads) {
    x = add(x, attention(g, bp, norm(g, bp, x, prefix + "attn."), prefix + "attn.", heads));
    x = add(x, ffn(g, bp, norm(g, bp, x, prefix + "ffn."), prefix + "ffn."));
    return x;
}

Var final_norm(Graph& g, BoundParams& bp, Var x, const std::string& prefix) {
    (void)g;
    return layer_norm(x, bp(prefix + "norm.gain"), bp(prefix + "norm.bias"));
}

}  // namespace

// ---------------------------------------------------------------------------
// patch geometry
// ---------------------------------------------------------------------------

Tensor patch_matrix(const FrameArray& frames, std::size_t patch_size) {
    if (patch_size == 0 || frames.h % patch_size != 0 || frames.w % patch_size != 0) {
        throw ConfigError("patchify: frame " + std::to_string(frames.w) + "x" +
                          std::to_string(frames.h) + " not divisible by patch size " +
                          std::to_string(patch_size));
    }
    const std::size_t gy = frames.h / patch_size;
    const std::size_t gx = frames.w / patch_size;
    const std::size_t k = gy * gx;
    const std::size_t vec = patch_size * patch_size * frames.c;
    Tensor out(Shape{frames.t * k, vec});
    std::size_t row = 0;
    for (std::size_t t = 0; t < frames.t; ++t) {
        for (std::size_t py = 0; py < gy; ++py) {
            for (std::size_t px = 0; px < gx; ++px, ++row) {
                double* dst = out.values.data() + row * vec;
                for (std::size_t y = 0; y < patch_size; ++y) {
                    for (std::size_t x = 0; x < patch_size; ++x) {
                        for (std::size_t ch = 0; ch < frames.c; ++ch) {
                            *dst++ = frames.at(t, py * patch_size + y, px * patch_size + x, ch);
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor interpolate_temporal_pe(const Tensor& pe, std::size_t new_len) {
    if (pe.rank() != 2 || pe.shape[0] == 0) {
        throw DimensionError("interpolate: position table must be [L,d] with L >= 1, got " +
                             shape_str(pe.shape));
    }
    if (new_len == 0) throw DimensionError("interpolate: new_len must be >= 1");
    const std::size_t l = pe.shape[0];
    const std::size_t d = pe.shape[1];
    if (new_len == l) return pe;
    Tensor out(Shape{new_len, d});
    for (std::size_t i = 0; i < new_len; ++i) {
        double pos = 0.0;
        if (new_len > 1 && l > 1) {
            pos = static_cast<double>(i) * static_cast<double>(l - 1) /
                  static_cast<double>(new_len - 1);
        }
        const std::size_t lo = std::min(l - 1, static_cast<std::size_t>(pos));
        const std::size_t hi = std::min(l - 1, lo + 1);
        const double frac = pos - static_cast<double>(lo);
        for (std::size_t j = 0; j < d; ++j) {
            out.values[i * d + j] =
                pe.values[lo * d + j] * (1.0 - frac) + pe.values[hi * d + j] * frac;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// VideoEncoder
// ---------------------------------------------------------------------------

VideoEncoder::VideoEncoder(const ModelConfig& cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {}

void VideoEncoder::register_params(ParamStore& ps) const {
    const std::size_t d = cfg_.d;
    const std::size_t k = cfg_.patches_per_frame();
    const std::size_t vec = cfg_.patch_size * cfg_.patch_size * 3;
    ps.add(prefix_ + "patch.weight", {vec, d});
    ps.add(prefix_ + "patch.bias", {d});
    ps.add(prefix_ + "cls", {1, d});
    ps.add(prefix_ + "pos_spatial", {k + 1, d});
    ps.add(prefix_ + "pos_temporal", {cfg_.max_frames, d});
    for (std::size_t i = 0; i < cfg_.video_layers / 2; ++i) {
        const std::string b = prefix_ + "block" + std::to_string(i) + ".";
        register_attention(ps, b + "tattn.", d);
        register_attention(ps, b + "sattn.", d);
        register_ffn(ps, b + "ffn.", d, cfg_.ffn_hidden());
    }
    ps.add(prefix_ + "norm.gain", {d});
    ps.add(prefix_ + "norm.bias", {d});
}

EmbeddingSequence VideoEncoder::encode(Graph& g, BoundParams& bp, const FrameArray& frames,
                                       EncodeMode /*mode*/) const {
    if (frames.t == 0) throw InputError("encode_video: zero frames");
    if (frames.t > cfg_.max_frames) {
        throw InputError("encode_video: " + std::to_string(frames.t) + " frames exceed max " +
                         std::to_string(cfg_.max_frames));
    }
    if (frames.h != cfg_.frame_size || frames.w != cfg_.frame_size || frames.c != 3) {
        throw InputError("encode_video: frames must be " + std::to_string(cfg_.frame_size) +
                         "x" + std::to_string(cfg_.frame_size) + "x3, got " +
                         std::to_string(frames.w) + "x" + std::to_string(frames.h) + "x" +
                         std::to_string(frames.c));
    }
    const std::size_t n = frames.t;
    const std::size_t k = cfg_.patches_per_frame();
    const std::size_t d = cfg_.d;

    // patch embedding + spatial/temporal positions
    Var patches = g.constant(patch_matrix(frames, cfg_.patch_size));
    Var x = add(matmul(patches, bp(prefix_ + "patch.weight")), bp(prefix_ + "patch.bias"));
    Var spat = slice(bp(prefix_ + "pos_spatial"), 0, 1, k);
    std::vector<Var> tiles(n, spat);
    x = add(x, concat(tiles, 0));
    Var x3 = reshape(x, {n, k, d});
    Var temp3 = reshape(slice(bp(prefix_ + "pos_temporal"), 0, 0, n), {n, 1, d});
    std::vector<Var> trow(k, temp3);
    x3 = add(x3, concat(trow, 1));

    // per-frame CLS with the CLS spatial position; no temporal position, so a
    // static video keeps identical per-frame CLS slices
    Var cls0 = add(bp(prefix_ + "cls"), slice(bp(prefix_ + "pos_spatial"), 0, 0, 1));
    std::vector<Var> cls_tiles(n, cls0);
    Var cls3 = reshape(concat(cls_tiles, 0), {n, 1, d});

    Var s = concat({cls3, x3}, 1);  // [n, k+1, d]

    for (std::size_t block = 0; block < cfg_.video_layers / 2; ++block) {
        const std::string b = prefix_ + "block" + std::to_string(block) + ".";

        // temporal attention over patch tokens, per patch position
        Var ln_t = norm(g, bp, s, b + "tattn.");
        Var grouped = transpose(slice(ln_t, 1, 1, k), 0, 1);  // [k, n, d]
        std::vector<Var> t_parts;
        t_parts.reserve(k);
        for (std::size_t p = 0; p < k; ++p) {
            Var seq = reshape(slice(grouped, 0, p, 1), {n, d});
            Var att = attention(g, bp, seq, b + "tattn.", cfg_.heads);
            t_parts.push_back(reshape(att, {1, n, d}));
        }
        Var t_delta = transpose(concat(t_parts, 0), 0, 1);  // [n, k, d]
        Var delta = concat({g.constant(Tensor(Shape{n, 1, d})), t_delta}, 1);
        s = add(s, delta);

        // spatial attention per frame slice, CLS included
        Var ln_s = norm(g, bp, s, b + "sattn.");
        std::vector<Var> s_parts;
        s_parts.reserve(n);
        for (std::size_t f = 0; f < n; ++f) {
            Var seq = reshape(slice(ln_s, 0, f, 1), {k + 1, d});
            Var att = attention(g, bp, seq, b + "sattn.", cfg_.heads);
            s_parts.push_back(reshape(att, {1, k + 1, d}));
        }
        s = add(s, concat(s_parts, 0));

        // feed-forward over every token
        Var ln_f = norm(g, bp, s, b + "ffn.");
        Var flat = reshape(ln_f, {n * (k + 1), d});
        s = add(s, reshape(ffn(g, bp, flat, b + "ffn."), {n, k + 1, d}));
    }

    // temporal fusion: mean pooling over frames, then the final norm
    Var fused = mean(final_norm(g, bp, s, prefix_), 0);  // [k+1, d]
    EmbeddingSequence out;
    out.kind = EmbeddingSequence::Kind::video;
    out.cls = slice(fused, 0, 0, 1);
    out.tokens = slice(fused, 0, 1, k);
    return out;
}

// ---------------------------------------------------------------------------
// TextEncoder
// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(const ModelConfig& cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {}

void TextEncoder::register_params(ParamStore& ps) const {
    const std::size_t d = cfg_.d;
    if (cfg_.vocab_size == 0) throw ConfigError("text encoder: vocab_size unset");
    ps.add(prefix_ + "tok_embed", {cfg_.vocab_size, d});
    ps.add(prefix_ + "pos", {cfg_.max_text + 1, d});
    for (std::size_t i = 0; i < cfg_.text_layers; ++i) {
        const std::string b = prefix_ + "block" + std::to_string(i) + ".";
        register_attention(ps, b + "attn.", d);
        register_ffn(ps, b + "ffn.", d, cfg_.ffn_hidden());
    }
    ps.add(prefix_ + "norm.gain", {d});
    ps.add(prefix_ + "norm.bias", {d});
}

EmbeddingSequence TextEncoder::encode(Graph& g, BoundParams& bp,
                                      std::span<const int> token_ids) const {
    if (token_ids.empty()) throw InputError("encode_text: empty token sequence");
    if (token_ids.size() > cfg_.max_text + 1) {
        throw InputError("encode_text: " + std::to_string(token_ids.size()) +
                         " tokens exceed max " + std::to_string(cfg_.max_text + 1));
    }
    std::vector<std::int32_t> ids;
    ids.reserve(token_ids.size());
    for (int id : token_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
            throw InputError("encode_text: token id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(cfg_.vocab_size));
        }
        ids.push_back(id);
    }
    const std::size_t len = ids.size();
    Var x = gather(bp(prefix_ + "tok_embed"), ids);
    x = add(x, slice(bp(prefix_ + "pos"), 0, 0, len));
    for (std::size_t i = 0; i < cfg_.text_layers; ++i) {
        x = transformer_block(g, bp, x, prefix_ + "block" + std::to_string(i) + ".", cfg_.heads);
    }
    x = final_norm(g, bp, x, prefix_);
    EmbeddingSequence out;
    out.kind = EmbeddingSequence::Kind::text;
    out.cls = slice(x, 0, 0, 1);
    out.tokens = slice(x, 0, 1, len - 1);
    return out;
}

// ---------------------------------------------------------------------------
// MultimodalEncoder
// ---------------------------------------------------------------------------

MultimodalEncoder::MultimodalEncoder(const ModelConfig& cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {}

void MultimodalEncoder::register_params(ParamStore& ps) const {
    for (std::size_t i = 0; i < cfg_.mm_layers; ++i) {
        const std::string b = prefix_ + "block" + std::to_string(i) + ".";
        register_attention(ps, b + "attn.", cfg_.d);
        register_ffn(ps, b + "ffn.", cfg_.d, cfg_.ffn_hidden());
    }
    ps.add(prefix_ + "norm.gain", {cfg_.d});
    ps.add(prefix_ + "norm.bias", {cfg_.d});
}

EmbeddingSequence MultimodalEncoder::encode(Graph& g, BoundParams& bp,
                                            const EmbeddingSequence& video,
                                            const EmbeddingSequence& text) const {
    if (video.kind != EmbeddingSequence::Kind::video ||
        text.kind != EmbeddingSequence::Kind::text) {
        throw ContractError("encode_multimodal: expects one video and one text sequence");
    }
    if (video.tokens.shape()[1] != cfg_.d || text.tokens.shape()[1] != cfg_.d) {
        throw ConfigError("encode_multimodal: width mismatch, video " +
                          shape_str(video.tokens.shape()) + " text " +
                          shape_str(text.tokens.shape()) + " vs d=" + std::to_string(cfg_.d));
    }
    const std::size_t k = video.tokens.shape()[0];
    const std::size_t nt = text.tokens.shape()[0];
    Var x = concat({text.cls, video.tokens, text.tokens}, 0);  // [1+k+nt, d]
    for (std::size_t i = 0; i < cfg_.mm_layers; ++i) {
        x = transformer_block(g, bp, x, prefix_ + "block" + std::to_string(i) + ".", cfg_.heads);
    }
    x = final_norm(g, bp, x, prefix_);

    EmbeddingSequence out;
    out.kind = EmbeddingSequence::Kind::multimodal;
    out.cls = slice(x, 0, 0, 1);
    out.tokens = slice(x, 0, 1, k + nt);
    out.provenance.reserve(1 + k + nt);
    out.provenance.push_back({Modality::text, -1});
    for (std::size_t i = 0; i < k; ++i) out.provenance.push_back({Modality::video, static_cast<int>(i)});
    for (std::size_t i = 0; i < nt; ++i) out.provenance.push_back({Modality::text, static_cast<int>(i)});
    return out;
}

// ---------------------------------------------------------------------------
// ProjectionHead
// ---------------------------------------------------------------------------

ProjectionHead::ProjectionHead(const ModelConfig& cfg, std::string name)
    : cfg_(cfg), name_(std::move(name)) {}

void ProjectionHead::register_params(ParamStore& ps) const {
    ps.add(name_ + ".weight", {cfg_.d, cfg_.proj_dim});
}

Var ProjectionHead::apply(Graph& g, BoundParams& bp, Var cls) const {
    (void)g;
    return l2_normalize(matmul(cls, bp(name_ + ".weight")), 1);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::size_t entity_count, std::size_t answer_count)
    : cfg_(cfg),
      entity_count_(entity_count),
      answer_count_(answer_count),
      video_(cfg, "video."),
      text_(cfg, "text."),
      mm_(cfg, "mm."),
      proj_v_(cfg, "proj_v"),
      proj_t_(cfg, "proj_t") {
    cfg_.validate();
    video_.register_params(params_);
    text_.register_params(params_);
    mm_.register_params(params_);
    proj_v_.register_params(params_);
    proj_t_.register_params(params_);
    params_.add("log_tau", {});
    params_.add("vtm_head.weight", {cfg_.d, 2});
    params_.add("vtm_head.bias", {2});
    params_.add("mlm_head.weight", {cfg_.d, cfg_.vocab_size});
    params_.add("mlm_head.bias", {cfg_.vocab_size});
    if (entity_count_ > 0) {
        params_.add("pem_head.fc1.weight", {cfg_.d, cfg_.d});
        params_.add("pem_head.fc1.bias", {cfg_.d});
        params_.add("pem_head.fc2.weight", {cfg_.d, entity_count_});
        params_.add("pem_head.fc2.bias", {entity_count_});
    }
    if (answer_count_ > 0) {
        params_.add("qa_head.fc1.weight", {cfg_.d, cfg_.d});
        params_.add("qa_head.fc1.bias", {cfg_.d});
        params_.add("qa_head.fc2.weight", {cfg_.d, answer_count_});
        params_.add("qa_head.fc2.bias", {answer_count_});
    }
}

EmbeddingSequence Model::encode_video(Graph& g, BoundParams& bp, const FrameArray& frames,
                                      EncodeMode mode) const {
    return video_.encode(g, bp, frames, mode);
}

EmbeddingSequence Model::encode_text(Graph& g, BoundParams& bp, std::span<const int> ids) const {
    return text_.encode(g, bp, ids);
}

EmbeddingSequence Model::encode_multimodal(Graph& g, BoundParams& bp,
                                           const EmbeddingSequence& video,
                                           const EmbeddingSequence& text) const {
    return mm_.encode(g, bp, video, text);
}

Var Model::project(Graph& g, BoundParams& bp, Var cls, Modality head) const {
    return head == Modality::video ? proj_v_.apply(g, bp, cls) : proj_t_.apply(g, bp, cls);
}

}  // namespace vlp
