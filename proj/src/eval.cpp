#include "vlp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "vlp/errors.hpp"
#include "vlp/objectives.hpp"

namespace vlp {

using nlohmann::json;

std::vector<std::size_t> gt_ranks(const Tensor& scores, std::span<const std::size_t> gt) {
    if (scores.rank() != 2) throw DataError("retrieval: score matrix must be rank 2");
    const std::size_t q = scores.shape[0];
    const std::size_t g = scores.shape[1];
    if (gt.size() != q) throw DataError("retrieval: one ground-truth index per query required");
    std::vector<std::size_t> ranks(q);
    for (std::size_t i = 0; i < q; ++i) {
        if (gt[i] >= g) {
            throw DataError("retrieval: gt index " + std::to_string(gt[i]) +
                            " outside gallery of " + std::to_string(g));
        }
        const double s_gt = scores.values[i * g + gt[i]];
        std::size_t rank = 1;
        for (std::size_t j = 0; j < g; ++j) {
            if (j != gt[i] && scores.values[i * g + j] >= s_gt) ++rank;
        }
        ranks[i] = rank;
    }
    return ranks;
}

RetrievalReport retrieval_metrics(const Tensor& scores, std::span<const std::size_t> gt) {
    const std::vector<std::size_t> ranks = gt_ranks(scores, gt);
    RetrievalReport report;
    const double n = static_cast<double>(ranks.size());
    for (std::size_t r : ranks) {
        if (r <= 1) report.r1 += 1.0;
        if (r <= 5) report.r5 += 1.0;
        if (r <= 10) report.r10 += 1.0;
    }
    report.r1 = 100.0 * report.r1 / n;
    report.r5 = 100.0 * report.r5 / n;
    report.r10 = 100.0 * report.r10 / n;
    std::vector<std::size_t> sorted(ranks);
    std::sort(sorted.begin(), sorted.end());
    report.mdr = static_cast<double>(sorted[(sorted.size() - 1) / 2]);  // lower median
    return report;
}

Scorer scorer_from_name(const std::string& name) {
    if (name == "vtc") return Scorer::vtc;
    if (name == "vtm") return Scorer::vtm;
    throw ConfigError("scorer must be 'vtc' or 'vtm', got '" + name + "'");
}

namespace {

FrameArray inference_frames(const Sample& sample, std::size_t n) {
    if (sample.is_image || sample.media.t == 1) {
        return to_array(image_to_static_video(sample.media, n));
    }
    const FrameArray all = to_array(sample.media);
    return select_frames(all, sample_frames_infer(sample.media.t, n));
}

struct SequenceValue {
    Tensor cls;
    Tensor tokens;
};

SequenceValue encode_video_value(const TrainState& state, const Sample& sample) {
    auto& params = const_cast<ParamStore&>(state.model.params());
    Graph g;
    BoundParams bp(g, params);
    const FrameArray frames = inference_frames(sample, state.model.config().max_frames);
    EmbeddingSequence seq = state.model.encode_video(g, bp, frames, EncodeMode::probe);
    return {seq.cls.value(), seq.tokens.value()};
}

SequenceValue encode_text_value(const TrainState& state, const std::string& text) {
    auto& params = const_cast<ParamStore&>(state.model.params());
    Graph g;
    BoundParams bp(g, params);
    const std::vector<int> ids = state.tokenizer.encode(text, state.model.config().max_text);
    EmbeddingSequence seq = state.model.encode_text(g, bp, ids);
    return {seq.cls.value(), seq.tokens.value()};
}

Tensor project_value(const TrainState& state, const Tensor& cls, Modality head) {
    auto& params = const_cast<ParamStore&>(state.model.params());
    Graph g;
    BoundParams bp(g, params);
    return state.model.project(g, bp, g.constant(cls), head).value();
}

/// Multimodal CLS for one (video, text) pair rebuilt from cached unimodal
/// values inside a fresh graph.
Tensor mm_cls_value(const TrainState& state, const SequenceValue& video,
                    const SequenceValue& text) {
    auto& params = const_cast<ParamStore&>(state.model.params());
    Graph g;
    BoundParams bp(g, params);
    EmbeddingSequence v{EmbeddingSequence::Kind::video, g.constant(video.cls),
                        g.constant(video.tokens), {}};
    EmbeddingSequence t{EmbeddingSequence::Kind::text, g.constant(text.cls),
                        g.constant(text.tokens), {}};
    return state.model.encode_multimodal(g, bp, v, t).cls.value();
}

double vtm_margin(const TrainState& state, const Tensor& e_cls) {
    auto& params = const_cast<ParamStore&>(state.model.params());
    Graph g;
    BoundParams bp(g, params);
    Var logits = add(matmul(g.constant(e_cls), bp("vtm_head.weight")), bp("vtm_head.bias"));
    const Tensor& v = logits.value();
    return v.values[1] - v.values[0];  // match minus non-match logit
}

}  // namespace

Tensor score_retrieval(const TrainState& state, const Corpus& corpus, Split split,
                       Scorer scorer) {
    const std::vector<std::size_t> indices = corpus.split_indices(split);
    if (indices.empty()) throw DataError("score_retrieval: empty split");
    const std::size_t n = indices.size();

    std::vector<SequenceValue> videos(n), texts(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = corpus.samples[indices[i]];
        videos[i] = encode_video_value(state, s);
        texts[i] = encode_text_value(state, s.caption);
    }

    Tensor scores(Shape{n, n});
    if (scorer == Scorer::vtc) {
        const std::size_t p = state.model.config().proj_dim;
        std::vector<Tensor> vp(n), tp(n);
        for (std::size_t i = 0; i < n; ++i) {
            vp[i] = project_value(state, videos[i].cls, Modality::video);
            tp[i] = project_value(state, texts[i].cls, Modality::text);
        }
        for (std::size_t q = 0; q < n; ++q) {
            for (std::size_t g = 0; g < n; ++g) {
                double dot = 0.0;
                for (std::size_t j = 0; j < p; ++j) dot += tp[q].values[j] * vp[g].values[j];
                scores.values[q * n + g] = dot;
            }
        }
    } else {
        for (std::size_t q = 0; q < n; ++q) {
            for (std::size_t g = 0; g < n; ++g) {
                scores.values[q * n + g] =
                    vtm_margin(state, mm_cls_value(state, videos[g], texts[q]));
            }
        }
    }
    return scores;
}

double qa_accuracy(std::span<const int> predictions, std::span<const int> gold) {
    if (predictions.size() != gold.size()) {
        throw DataError("qa_accuracy: prediction/gold length mismatch");
    }
    if (predictions.empty()) throw DataError("qa_accuracy: empty inputs");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == gold[i]) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(predictions.size());
}

QaEval qa_predict(const TrainState& state, const Corpus& corpus, Split split) {
    if (state.model.answer_count() == 0) throw ContractError("qa_predict: model has no QA head");
    auto& params = const_cast<ParamStore&>(state.model.params());
    QaEval out;
    for (std::size_t idx : corpus.split_indices(split)) {
        const Sample& s = corpus.samples[idx];
        if (!s.qa) continue;
        const SequenceValue video = encode_video_value(state, s);
        const SequenceValue question = encode_text_value(state, s.qa->question);
        const Tensor e_cls = mm_cls_value(state, video, question);
        Graph g;
        BoundParams bp(g, params);
        Var h = gelu(add(matmul(g.constant(e_cls), bp("qa_head.fc1.weight")),
                         bp("qa_head.fc1.bias")));
        Var logits = add(matmul(h, bp("qa_head.fc2.weight")), bp("qa_head.fc2.bias"));
        const Tensor& v = logits.value();
        const std::size_t best =
            static_cast<std::size_t>(std::max_element(v.values.begin(), v.values.end()) -
                                     v.values.begin());
        out.predictions.push_back(static_cast<int>(best));
        out.gold.push_back(s.qa->answer_id);
    }
    return out;
}

namespace {

std::string cell(const std::optional<double>& v) {
    if (!v) return "-";
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << *v;
    return os.str();
}

}  // namespace

std::string ablation_table(std::span<const AblationRow> rows) {
    std::vector<std::vector<std::string>> grid;
    grid.push_back({"pre-training tasks", "R1", "R5", "R10", "MdR", "Acc."});
    for (const auto& row : rows) {
        grid.push_back({row.name, cell(row.r1), cell(row.r5), cell(row.r10), cell(row.mdr),
                        cell(row.acc)});
    }
    std::vector<std::size_t> widths(grid[0].size(), 0);
    for (const auto& r : grid) {
        for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], r[c].size());
    }
    std::ostringstream os;
    for (const auto& r : grid) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            os << (c == 0 ? "" : "  ");
            os << r[c] << std::string(widths[c] - r[c].size(), ' ');
        }
        os << '\n';
    }
    return os.str();
}

std::string ablation_records(std::span<const AblationRow> rows) {
    std::ostringstream os;
    for (const auto& row : rows) {
        auto emit = [&](const char* metric, const std::optional<double>& v) {
            if (!v) return;
            json j;
            j["run"] = row.name;
            j["metric"] = metric;
            j["value"] = *v;
            os << j.dump() << '\n';
        };
        emit("R1", row.r1);
        emit("R5", row.r5);
        emit("R10", row.r10);
        emit("MdR", row.mdr);
        emit("Acc", row.acc);
    }
    return os.str();
}

}  // namespace vlp
