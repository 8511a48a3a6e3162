#include "vlp/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "vlp/errors.hpp"

namespace vlp {

void CropRegion::validate(std::size_t w, std::size_t h) const {
    if (!(x0 < x1 && x1 <= w && y0 < y1 && y1 <= h)) {
        throw InputError("crop: bounds [" + std::to_string(x0) + "," + std::to_string(x1) +
                         ")x[" + std::to_string(y0) + "," + std::to_string(y1) +
                         ") invalid for " + std::to_string(w) + "x" + std::to_string(h));
    }
}

double CropRegion::area_fraction(std::size_t w, std::size_t h) const {
    return static_cast<double>(area()) / static_cast<double>(w * h);
}

Var similarity(Var v_proj, Var t_proj) {
    if (v_proj.shape() != t_proj.shape() || v_proj.shape().size() != 2 ||
        v_proj.shape()[0] != 1) {
        throw DimensionError("similarity: expects matching [1,P] projections, got " +
                             shape_str(v_proj.shape()) + " and " + shape_str(t_proj.shape()));
    }
    return sum_all(multiply(v_proj, t_proj));
}

SimilarityMatrix similarity_matrix(std::span<const Var> video_projs,
                                   std::span<const Var> text_projs, Var log_tau) {
    if (video_projs.empty() || video_projs.size() != text_projs.size()) {
        throw ContractError("similarity_matrix: need equal non-empty projection lists");
    }
    Var v_stack = video_projs.size() == 1 ? video_projs[0] : concat(video_projs, 0);
    Var t_stack = text_projs.size() == 1 ? text_projs[0] : concat(text_projs, 0);
    SimilarityMatrix sim;
    sim.batch = video_projs.size();
    sim.scores = matmul(v_stack, transpose(t_stack));
    sim.tau = exp(log_tau);
    sim.scaled = multiply(sim.scores, exp(scale(log_tau, -1.0)));
    return sim;
}

Var vtc_loss(const SimilarityMatrix& sim) {
    const std::size_t b = sim.batch;
    if (sim.scores.shape() != Shape{b, b}) {
        throw ContractError("vtc_loss: non-square similarity matrix " +
                            shape_str(sim.scores.shape()));
    }
    Graph& g = *sim.scores.graph;
    Tensor eye({b, b});
    for (std::size_t i = 0; i < b; ++i) eye.values[i * b + i] = 1.0;
    Var mask = g.constant(eye);
    // mean over rows of -log softmax at the diagonal, then the symmetric term
    Var v2t = scale(sum_all(multiply(log(softmax(sim.scaled, 1)), mask)),
                    -1.0 / static_cast<double>(b));
    Var t2v = scale(sum_all(multiply(log(softmax(sim.scaled, 0)), mask)),
                    -1.0 / static_cast<double>(b));
    return scale(add(v2t, t2v), 0.5);
}

std::vector<std::size_t> crop_patch_slots(const CropRegion& crop, std::size_t frame_w,
                                          std::size_t frame_h, std::size_t patch_size) {
    crop.validate(frame_w, frame_h);
    const std::size_t gx = frame_w / patch_size;
    const std::size_t gy = frame_h / patch_size;
    std::vector<std::size_t> slots;
    for (std::size_t py = 0; py < gy; ++py) {
        for (std::size_t px = 0; px < gx; ++px) {
            const double cx = (static_cast<double>(px) + 0.5) * static_cast<double>(patch_size);
            const double cy = (static_cast<double>(py) + 0.5) * static_cast<double>(patch_size);
            if (cx >= static_cast<double>(crop.x0) && cx < static_cast<double>(crop.x1) &&
                cy >= static_cast<double>(crop.y0) && cy < static_cast<double>(crop.y1)) {
                slots.push_back(py * gx + px);
            }
        }
    }
    return slots;
}

Var crop_pool(const EmbeddingSequence& mm_seq, const CropRegion& crop, const ModelConfig& cfg) {
    if (mm_seq.kind != EmbeddingSequence::Kind::multimodal) {
        throw ContractError("crop_pool: expects a multimodal sequence");
    }
    const std::vector<std::size_t> slots =
        crop_patch_slots(crop, cfg.frame_size, cfg.frame_size, cfg.patch_size);
    if (slots.empty()) {
        throw DegenerateCropError("crop_pool: crop covers no patch centers");
    }
    // video patch i sits at token row i; verify against the provenance map
    std::vector<Var> rows;
    rows.reserve(slots.size());
    for (std::size_t slot : slots) {
        const SlotRef& ref = mm_seq.provenance.at(1 + slot);
        if (ref.modality != Modality::video || ref.index != static_cast<int>(slot)) {
            throw ContractError("crop_pool: provenance map does not place video patch " +
                                std::to_string(slot) + " at its expected slot");
        }
        rows.push_back(slice(mm_seq.tokens, 0, slot, 1));
    }
    Var stacked = rows.size() == 1 ? rows[0] : concat(rows, 0);
    return reshape(mean(stacked, 0), {1, cfg.d});
}

Var pem_logits(Graph& g, BoundParams& bp, Var pooled) {
    (void)g;
    Var h = gelu(add(matmul(pooled, bp("pem_head.fc1.weight")), bp("pem_head.fc1.bias")));
    return add(matmul(h, bp("pem_head.fc2.weight")), bp("pem_head.fc2.bias"));
}

Var soft_cross_entropy(Var logits, std::span<const double> q) {
    if (logits.shape().size() != 2 || logits.shape()[0] != 1 || logits.shape()[1] != q.size()) {
        throw DimensionError("soft_cross_entropy: logits " + shape_str(logits.shape()) +
                             " vs target of " + std::to_string(q.size()));
    }
    Graph& g = *logits.graph;
    Tensor target({1, q.size()});
    std::copy(q.begin(), q.end(), target.values.begin());
    Var logp = log(softmax(logits, 1));
    return scale(sum_all(multiply(logp, g.constant(target))), -1.0);
}

Var pem_loss(Graph& g, BoundParams& bp, Var pooled, std::span<const double> q) {
    double total = 0.0;
    for (double v : q) total += v;
    if (std::fabs(total - 1.0) > 1e-6) {
        throw ContractError("pem_loss: pseudo-label does not sum to 1");
    }
    return soft_cross_entropy(pem_logits(g, bp, pooled), q);
}

Var mlm_loss(Graph& g, BoundParams& bp, const EmbeddingSequence& mm_seq,
             std::span<const std::size_t> masked_positions,
             std::span<const int> original_ids) {
    if (mm_seq.kind != EmbeddingSequence::Kind::multimodal) {
        throw ContractError("mlm_loss: expects a multimodal sequence");
    }
    if (masked_positions.size() != original_ids.size()) {
        throw ContractError("mlm_loss: positions and original ids differ in length");
    }
    if (masked_positions.empty()) return g.constant_scalar(0.0);

    // text content token j-1 of id-array position j lives after the K video
    // slots; locate it through the provenance map
    std::size_t k = 0;
    for (std::size_t s = 1; s < mm_seq.provenance.size(); ++s) {
        if (mm_seq.provenance[s].modality == Modality::video) ++k;
    }
    std::vector<Var> rows;
    rows.reserve(masked_positions.size());
    for (std::size_t pos : masked_positions) {
        if (pos == 0) throw ContractError("mlm_loss: position 0 is the CLS, not a text slot");
        const std::size_t slot = 1 + k + (pos - 1);
        if (slot >= mm_seq.provenance.size() ||
            mm_seq.provenance[slot].modality != Modality::text ||
            mm_seq.provenance[slot].index != static_cast<int>(pos - 1)) {
            throw ContractError("mlm_loss: position " + std::to_string(pos) +
                                " is not a text slot");
        }
        rows.push_back(slice(mm_seq.tokens, 0, slot - 1, 1));
    }
    Var feats = rows.size() == 1 ? rows[0] : concat(rows, 0);  // [n,d]
    Var logits = add(matmul(feats, bp("mlm_head.weight")), bp("mlm_head.bias"));
    Var logp = log(softmax(logits, 1));
    const std::size_t vocab = logits.shape()[1];
    Tensor onehot({masked_positions.size(), vocab});
    for (std::size_t r = 0; r < original_ids.size(); ++r) {
        const int id = original_ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw ContractError("mlm_loss: original id " + std::to_string(id) +
                                " outside vocabulary");
        }
        onehot.values[r * vocab + static_cast<std::size_t>(id)] = 1.0;
    }
    return scale(sum_all(multiply(logp, g.constant(onehot))),
                 -1.0 / static_cast<double>(masked_positions.size()));
}

std::size_t mine_hard_negative(const SimilarityMatrix& sim, std::size_t anchor,
                               MiningDirection direction, Rng& rng) {
    const std::size_t b = sim.batch;
    if (b < 2) throw ContractError("mine_hard_negative: batch must be >= 2");
    if (anchor >= b) throw ContractError("mine_hard_negative: anchor out of range");
    const Tensor& scaled = sim.scaled.value();
    std::vector<double> logits;
    std::vector<std::size_t> candidates;
    logits.reserve(b - 1);
    for (std::size_t j = 0; j < b; ++j) {
        if (j == anchor) continue;
        const double s = direction == MiningDirection::v2t ? scaled.values[anchor * b + j]
                                                           : scaled.values[j * b + anchor];
        logits.push_back(s);
        candidates.push_back(j);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    std::vector<double> weights(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        weights[i] = std::exp(logits[i] - mx);
        total += weights[i];
    }
    const double r = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (r < acc) return candidates[i];
    }
    return candidates.back();
}

Var vtm_loss(Graph& g, BoundParams& bp, std::span<const Var> positive_cls,
             std::span<const Var> negative_cls) {
    if (positive_cls.empty()) throw ContractError("vtm_loss: empty batch");
    const std::size_t total = positive_cls.size() + negative_cls.size();
    std::vector<Var> rows(positive_cls.begin(), positive_cls.end());
    rows.insert(rows.end(), negative_cls.begin(), negative_cls.end());
    Var feats = rows.size() == 1 ? rows[0] : concat(rows, 0);  // [total, d]
    Var logits = add(matmul(feats, bp("vtm_head.weight")), bp("vtm_head.bias"));
    Var logp = log(softmax(logits, 1));
    // class 1 = matched, class 0 = unmatched
    Tensor target({total, 2});
    for (std::size_t r = 0; r < total; ++r) {
        target.values[r * 2 + (r < positive_cls.size() ? 1 : 0)] = 1.0;
    }
    return scale(sum_all(multiply(logp, g.constant(target))),
                 -1.0 / static_cast<double>(total));
}

Var total_loss(std::span<const Var> losses) {
    if (losses.empty()) throw ContractError("total_loss: nothing to sum");
    Var acc = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) acc = add(acc, losses[i]);
    return acc;
}

}  // namespace vlp
