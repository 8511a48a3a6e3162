#include "vlp/prompter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "json.hpp"
#include "vlp/errors.hpp"

namespace vlp {

using nlohmann::json;

// ---------------------------------------------------------------------------
// entity vocabulary
// ---------------------------------------------------------------------------

int EntityVocabulary::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

std::vector<std::string> EntityVocabulary::names() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.name);
    return out;
}

std::vector<std::string> load_noun_lexicon(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("lexicon: cannot open '" + path + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty() && line[0] != '#') out.push_back(line);
    }
    return out;
}

const std::vector<std::string>& default_noun_lexicon() {
    static const std::vector<std::string> kNouns = {
        "apple",   "ball",   "bar",      "beach",  "bird",   "boat",   "box",
        "bread",   "bridge", "car",      "cat",    "chair",  "circle", "cloud",
        "cross",   "cup",    "diamond",  "dog",    "door",   "dot",    "field",
        "fire",    "fish",   "floor",    "flower", "forest", "garden", "grass",
        "hill",    "horse",  "house",    "lake",   "light",  "moon",   "mountain",
        "park",    "plane",  "rain",     "ring",   "river",  "road",   "roof",
        "sand",    "shadow", "sky",      "smoke",  "snow",   "square", "star",
        "stone",   "street", "sun",      "table",  "tower",  "train",  "tree",
        "triangle", "wall",  "water",    "window",
    };
    return kNouns;
}

EntityVocabulary extract_entities(std::span<const std::string> captions,
                                  const std::set<std::string>& lexicon, std::size_t limit) {
    if (lexicon.empty()) throw ContractError("extract_entities: empty lexicon");
    if (limit == 0) throw ContractError("extract_entities: limit must be >= 1");
    std::map<std::string, std::size_t> counts;
    for (const auto& caption : captions) {
        for (const auto& w : Tokenizer::split_words(caption)) {
            if (lexicon.count(w)) ++counts[w];
        }
    }
    std::vector<EntityVocabulary::Entry> entries;
    entries.reserve(counts.size());
    for (const auto& [name, freq] : counts) entries.push_back({name, freq});
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.frequency != b.frequency) return a.frequency > b.frequency;
        return a.name < b.name;
    });
    if (entries.size() > limit) entries.resize(limit);
    EntityVocabulary vocab;
    vocab.entries = std::move(entries);
    vocab.requested = limit;
    return vocab;
}

std::vector<std::string> instantiate_prompts(const EntityVocabulary& vocab,
                                             std::span<const std::string> templates) {
    std::vector<std::string> out;
    out.reserve(vocab.size() * templates.size());
    for (const auto& entry : vocab.entries) {
        for (const auto& tpl : templates) {
            out.push_back(instantiate_template(tpl, entry.name));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// PrompterModel
// ---------------------------------------------------------------------------

PrompterModel::PrompterModel(ModelConfig cfg)
    : cfg_(cfg),
      video_(cfg, "video."),
      text_(cfg, "text."),
      proj_v_(cfg, "proj_v"),
      proj_t_(cfg, "proj_t") {
    cfg_.validate();
    video_.register_params(params_);
    text_.register_params(params_);
    proj_v_.register_params(params_);
    proj_t_.register_params(params_);
    params_.add("log_tau", {});
}

EmbeddingSequence PrompterModel::encode_video(Graph& g, BoundParams& bp,
                                              const FrameArray& frames) const {
    return video_.encode(g, bp, frames);
}

EmbeddingSequence PrompterModel::encode_text(Graph& g, BoundParams& bp,
                                             std::span<const int> ids) const {
    return text_.encode(g, bp, ids);
}

Var PrompterModel::project(Graph& g, BoundParams& bp, Var cls, Modality head) const {
    return head == Modality::video ? proj_v_.apply(g, bp, cls) : proj_t_.apply(g, bp, cls);
}

Tensor PrompterModel::video_projection(const FrameArray& frames) const {
    Graph g;
    BoundParams bp(g, const_cast<ParamStore&>(params_));
    EmbeddingSequence seq = video_.encode(g, bp, frames);
    return proj_v_.apply(g, bp, seq.cls).value();
}

Tensor PrompterModel::text_projection(std::span<const int> ids) const {
    Graph g;
    BoundParams bp(g, const_cast<ParamStore&>(params_));
    EmbeddingSequence seq = text_.encode(g, bp, ids);
    return proj_t_.apply(g, bp, seq.cls).value();
}

void PrompterModel::freeze() {
    for (auto& [name, t] : params_.tensors()) {
        t.requires_grad = false;
        t.grad.reset();
    }
    params_.freeze();
}

std::uint64_t PrompterModel::fingerprint() const { return params_.fingerprint(); }

double PrompterModel::tau() const { return std::exp(params_.at("log_tau").values[0]); }

// ---------------------------------------------------------------------------
// prompt bank
// ---------------------------------------------------------------------------

PromptBank build_prompt_bank(const EntityVocabulary& vocab, std::span<const std::string> templates,
                             PromptModality modality, const PrompterModel& prompter,
                             const Tokenizer& tokenizer, bool ensemble) {
    if (!prompter.frozen()) {
        throw IntegrityError("prompt bank: the prompter must be frozen first");
    }
    if (vocab.size() == 0) throw ContractError("prompt bank: empty entity vocabulary");
    if (templates.empty()) throw ContractError("prompt bank: entity with zero prompts");

    std::vector<std::string> used(templates.begin(), templates.end());
    if (!ensemble) used.resize(1);

    const std::size_t proj = prompter.config().proj_dim;
    PromptBank bank;
    bank.entities = vocab.names();
    bank.embeddings = Tensor(Shape{vocab.size(), proj});
    bank.templates_used = used;
    bank.prompter_fingerprint = prompter.fingerprint();
    bank.modality = modality;

    for (std::size_t e = 0; e < vocab.size(); ++e) {
        std::vector<std::vector<double>> embs;
        embs.reserve(used.size());
        for (const auto& tpl : used) {
            const std::string prompt = instantiate_template(tpl, vocab.entries[e].name);
            const std::vector<int> ids = tokenizer.encode(prompt, prompter.config().max_text);
            embs.push_back(prompter.text_projection(ids).values);
        }
        // per-coordinate multiset sum: equal values grouped as count * value
        // and accumulated in ascending order, so the mean is independent of
        // template order and exact under whole-list duplication
        std::vector<double> mean(proj, 0.0);
        std::vector<double> column(used.size());
        for (std::size_t j = 0; j < proj; ++j) {
            for (std::size_t t = 0; t < embs.size(); ++t) column[t] = embs[t][j];
            std::sort(column.begin(), column.end());
            double acc = 0.0;
            std::size_t t = 0;
            while (t < column.size()) {
                std::size_t run = 1;
                while (t + run < column.size() && column[t + run] == column[t]) ++run;
                acc += static_cast<double>(run) * column[t];
                t += run;
            }
            mean[j] = acc;
        }
        for (double& v : mean) v /= static_cast<double>(used.size());
        double norm = 0.0;
        for (double v : mean) norm += v * v;
        norm = std::sqrt(norm);
        if (norm <= 1e-12) {
            throw DomainError("prompt bank: degenerate ensembled embedding for '" +
                              vocab.entries[e].name + "'");
        }
        for (std::size_t j = 0; j < proj; ++j) {
            bank.embeddings.values[e * proj + j] = mean[j] / norm;
        }
    }
    return bank;
}

void save_prompt_bank(const PromptBank& bank, const std::string& path,
                      const std::string& config_text) {
    json j;
    if (!config_text.empty()) j["config"] = config_text;
    j["format"] = 1;
    j["entities"] = bank.entities;
    j["proj_dim"] = bank.embeddings.shape[1];
    j["embeddings"] = bank.embeddings.values;
    j["templates"] = bank.templates_used;
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(bank.prompter_fingerprint));
    j["prompter_fingerprint"] = fp;
    j["modality"] = bank.modality == PromptModality::video ? "video" : "image";
    std::ofstream out(path);
    if (!out) throw DataError("prompt bank: cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

PromptBank load_prompt_bank(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("prompt bank: cannot open '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw IntegrityError("prompt bank: malformed JSON in '" + path + "'");
    PromptBank bank;
    bank.entities = j.at("entities").get<std::vector<std::string>>();
    const std::size_t proj = j.at("proj_dim").get<std::size_t>();
    bank.embeddings = Tensor(Shape{bank.entities.size(), proj},
                             j.at("embeddings").get<std::vector<double>>());
    bank.templates_used = j.at("templates").get<std::vector<std::string>>();
    bank.prompter_fingerprint =
        std::stoull(j.at("prompter_fingerprint").get<std::string>(), nullptr, 16);
    bank.modality = j.at("modality").get<std::string>() == "image" ? PromptModality::image
                                                                    : PromptModality::video;
    return bank;
}

// ---------------------------------------------------------------------------
// crops and pseudo-labels
// ---------------------------------------------------------------------------

CropRegion sample_crop(std::size_t h, std::size_t w, Rng& rng, std::size_t patch_size,
                       double min_frac, double max_frac) {
    if (h < 2 * patch_size || w < 2 * patch_size) {
        throw InputError("sample_crop: frame " + std::to_string(w) + "x" + std::to_string(h) +
                         " smaller than two patches");
    }
    const double total = static_cast<double>(h) * static_cast<double>(w);
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double frac = rng.uniform(min_frac, max_frac);
        const double aspect = rng.uniform(0.5, 2.0);  // width / height
        const double area = frac * total;
        double cw = std::sqrt(area * aspect);
        double ch = area / cw;
        std::size_t iw = static_cast<std::size_t>(std::lround(cw));
        std::size_t ih = static_cast<std::size_t>(std::lround(ch));
        iw = std::clamp<std::size_t>(iw, 1, w);
        ih = std::clamp<std::size_t>(ih, 1, h);
        const double got = static_cast<double>(iw * ih) / total;
        if (got < min_frac || got > max_frac) continue;  // rounding broke the bound
        CropRegion crop;
        crop.x0 = rng.uniform_int(w - iw + 1);
        crop.y0 = rng.uniform_int(h - ih + 1);
        crop.x1 = crop.x0 + iw;
        crop.y1 = crop.y0 + ih;
        if (!crop_patch_slots(crop, w, h, patch_size).empty()) return crop;
    }
    throw DegenerateCropError("sample_crop: no crop covering a patch center in 100 attempts");
}

std::vector<double> softmax_similarities(std::span<const double> sims, double tau) {
    if (sims.empty()) throw ContractError("softmax_similarities: empty input");
    if (tau <= 0.0) throw DomainError("softmax_similarities: non-positive temperature");
    const double mx = *std::max_element(sims.begin(), sims.end());
    std::vector<double> q(sims.size());
    for (std::size_t i = 0; i < sims.size(); ++i) q[i] = std::exp((sims[i] - mx) / tau);
    std::vector<double> sorted(q);
    std::sort(sorted.begin(), sorted.end());
    double denom = 0.0;
    for (double v : sorted) denom += v;
    for (double& v : q) v /= denom;
    return q;
}

PseudoLabel pseudo_label(const FrameArray& crop_frames, const PromptBank& bank,
                         const PrompterModel& prompter, double threshold) {
    if (bank.prompter_fingerprint != prompter.fingerprint()) {
        throw IntegrityError("pseudo_label: prompt bank was built by a different prompter");
    }
    const FrameArray* frames = &crop_frames;
    FrameArray subsampled;
    if (crop_frames.t > prompter.config().max_frames) {
        // uniform midpoints, matching inference-time frame selection
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < prompter.config().max_frames; ++i) {
            const double mid = (static_cast<double>(i) + 0.5) * static_cast<double>(crop_frames.t) /
                               static_cast<double>(prompter.config().max_frames);
            idx.push_back(std::min(crop_frames.t - 1, static_cast<std::size_t>(mid)));
        }
        subsampled = select_frames(crop_frames, idx);
        frames = &subsampled;
    }
    const std::size_t size = prompter.config().frame_size;
    const FrameArray resized = resize_bilinear(*frames, size, size);
    const Tensor vproj = prompter.video_projection(resized);  // [1, proj]

    const std::size_t m = bank.entities.size();
    const std::size_t proj = bank.embeddings.shape[1];
    std::vector<double> sims(m, 0.0);
    for (std::size_t e = 0; e < m; ++e) {
        double dot = 0.0;
        for (std::size_t j = 0; j < proj; ++j) {
            dot += vproj.values[j] * bank.embeddings.values[e * proj + j];
        }
        sims[e] = dot;
    }
    PseudoLabel label;
    label.q = softmax_similarities(sims, prompter.tau());
    label.top_entity = static_cast<std::size_t>(
        std::max_element(label.q.begin(), label.q.end()) - label.q.begin());
    label.top_score = label.q[label.top_entity];
    label.kept = label.top_score >= threshold;
    return label;
}

std::string pseudo_label_record(const std::string& sample_id, const CropRegion& crop,
                                const PseudoLabel& label, const PromptBank& bank,
                                std::size_t top_k) {
    std::vector<std::size_t> order(label.q.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return label.q[a] > label.q[b]; });
    if (order.size() > top_k) order.resize(top_k);
    json j;
    j["sample_id"] = sample_id;
    j["crop"] = {crop.x0, crop.y0, crop.x1, crop.y1};
    json top = json::array();
    for (std::size_t idx : order) {
        top.push_back({{"entity", bank.entities[idx]}, {"score", label.q[idx]}});
    }
    j["top"] = top;
    j["kept"] = label.kept;
    return j.dump();
}

}  // namespace vlp
