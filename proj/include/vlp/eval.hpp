#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlp/data.hpp"
#include "vlp/training.hpp"

namespace vlp {

struct RetrievalReport {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;  // percentages
    double mdr = 0.0;                      // 1-based rank
};

/// Pessimal rank of the ground-truth item per query: ties never help, so the
/// rank is 1 + the number of non-gt items scoring >= the gt item.
std::vector<std::size_t> gt_ranks(const Tensor& scores, std::span<const std::size_t> gt);

/// R@k percentages and the median rank (lower median for even counts).
RetrievalReport retrieval_metrics(const Tensor& scores, std::span<const std::size_t> gt);

enum class Scorer { vtc, vtm };
Scorer scorer_from_name(const std::string& name);

/// Query-by-gallery score matrix over one split: queries are the split's
/// captions, the gallery its videos, uniform inference frame sampling.
/// vtc reads projected-CLS dot products; vtm reads the match-head logit
/// margin per pair through the multimodal encoder.
Tensor score_retrieval(const TrainState& state, const Corpus& corpus, Split split,
                       Scorer scorer);

double qa_accuracy(std::span<const int> predictions, std::span<const int> gold);

/// Argmax answers over one split (samples without QA pairs are skipped).
struct QaEval {
    std::vector<int> predictions;
    std::vector<int> gold;
};
QaEval qa_predict(const TrainState& state, const Corpus& corpus, Split split);

struct AblationRow {
    std::string name;
    std::optional<double> r1, r5, r10, mdr, acc;
};

/// Aligned text table: one row per loss subset, columns R1 R5 R10 MdR Acc.
std::string ablation_table(std::span<const AblationRow> rows);
std::string ablation_records(std::span<const AblationRow> rows);

}  // namespace vlp
