#pragma once

#include <span>
#include <vector>

#include "vlp/encoders.hpp"
#include "vlp/graph.hpp"
#include "vlp/rng.hpp"

namespace vlp {

/// Pixel rectangle [x0,x1) x [y0,y1), identical across the sampled frames.
struct CropRegion {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    void validate(std::size_t w, std::size_t h) const;
    std::size_t width() const { return x1 - x0; }
    std::size_t height() const { return y1 - y0; }
    std::size_t area() const { return width() * height(); }
    double area_fraction(std::size_t w, std::size_t h) const;
};

/// Dot product of two projected unit row vectors ([1,P] each) as a rank-0
/// scalar; in [-1, 1] because both are unit-norm.
Var similarity(Var v_proj, Var t_proj);

/// In-batch score matrix: scores(i,j) = s(V_i, T_j). `scaled` divides the raw
/// scores by the learnable temperature (tau = exp(log_tau)).
struct SimilarityMatrix {
    Var scores;  // [B,B]
    Var tau;     // rank-0
    Var scaled;  // [B,B], scores / tau
    std::size_t batch = 0;
};

SimilarityMatrix similarity_matrix(std::span<const Var> video_projs,
                                   std::span<const Var> text_projs, Var log_tau);

/// Symmetric InfoNCE over the batch: mean of the video-to-text and
/// text-to-video cross-entropies against the diagonal.
Var vtc_loss(const SimilarityMatrix& sim);

/// Video token slots whose patch centers fall inside the crop, as indices
/// into the K patch positions (raster order).
std::vector<std::size_t> crop_patch_slots(const CropRegion& crop, std::size_t frame_w,
                                          std::size_t frame_h, std::size_t patch_size);

/// Mean of the multimodal outputs at the crop's video slots -> [1,d].
Var crop_pool(const EmbeddingSequence& mm_seq, const CropRegion& crop, const ModelConfig& cfg);

/// Two-layer MLP entity classifier over a pooled [1,d] vector -> [1,M].
Var pem_logits(Graph& g, BoundParams& bp, Var pooled);

/// Cross-entropy -sum_m q_m log softmax(logits)_m with a constant target q.
Var soft_cross_entropy(Var logits, std::span<const double> q);

/// PEM loss for one kept pseudo-label.
Var pem_loss(Graph& g, BoundParams& bp, Var pooled, std::span<const double> q);

/// Mean cross-entropy of the vocabulary head over the masked text positions.
/// `masked_positions` index the tokenized id array (position 0 is the CLS and
/// is never a text slot). Zero positions yield a constant 0 loss.
Var mlm_loss(Graph& g, BoundParams& bp, const EmbeddingSequence& mm_seq,
             std::span<const std::size_t> masked_positions, std::span<const int> original_ids);

enum class MiningDirection { v2t, t2v };

/// Samples an off-diagonal index with probability proportional to
/// softmax(scores/tau) over the anchor's row (v2t) or column (t2v).
std::size_t mine_hard_negative(const SimilarityMatrix& sim, std::size_t anchor,
                               MiningDirection direction, Rng& rng);

/// Binary match/non-match cross-entropy on multimodal CLS vectors, averaged
/// uniformly over the positives and mined negatives.
Var vtm_loss(Graph& g, BoundParams& bp, std::span<const Var> positive_cls,
             std::span<const Var> negative_cls);

/// Unweighted sum of the enabled objectives.
Var total_loss(std::span<const Var> losses);

}  // namespace vlp
