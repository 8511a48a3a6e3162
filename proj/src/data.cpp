#include "vlp/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "vlp/errors.hpp"
#include "vlp/templates.hpp"

namespace vlp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
            cur.push_back(c);
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Tokenizer Tokenizer::build(std::span<const std::string> texts) {
    std::set<std::string> unique;
    for (const auto& t : texts) {
        for (auto& w : split_words(t)) unique.insert(w);
    }
    return from_words(std::vector<std::string>(unique.begin(), unique.end()));
}

Tokenizer Tokenizer::from_words(std::vector<std::string> words) {
    Tokenizer tok;
    tok.words = std::move(words);
    for (std::size_t i = 0; i < tok.words.size(); ++i) {
        auto [it, inserted] = tok.ids.emplace(tok.words[i], static_cast<int>(i + 4));
        if (!inserted) throw DataError("tokenizer: duplicate word '" + tok.words[i] + "'");
    }
    return tok;
}

int Tokenizer::id_of(const std::string& word) const {
    auto it = ids.find(word);
    return it == ids.end() ? kUnk : it->second;
}

std::string Tokenizer::word_of(int id) const {
    switch (id) {
        case kPad: return "[PAD]";
        case kCls: return "[CLS]";
        case kMask: return "[MASK]";
        case kUnk: return "[UNK]";
        default: break;
    }
    const std::size_t idx = static_cast<std::size_t>(id) - 4;
    if (id < 0 || idx >= words.size()) {
        throw DataError("tokenizer: id " + std::to_string(id) + " out of range");
    }
    return words[idx];
}

std::vector<int> Tokenizer::encode(const std::string& text, std::size_t max_text) const {
    std::vector<int> out;
    out.reserve(max_text + 1);
    out.push_back(kCls);
    for (const auto& w : split_words(text)) {
        if (out.size() == max_text + 1) break;
        out.push_back(id_of(w));
    }
    while (out.size() < max_text + 1) out.push_back(kPad);
    return out;
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw DataError("unknown split '" + name + "'");
}

std::vector<std::size_t> Corpus::split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == s) out.push_back(i);
    }
    return out;
}

std::vector<std::string> Corpus::captions(Split s) const {
    std::vector<std::string> out;
    for (const auto& i : split_indices(s)) out.push_back(samples[i].caption);
    return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

std::span<const EntityClass> entity_classes() {
    static const EntityClass kClasses[] = {
        {"circle", 220, 40, 40},   {"square", 40, 80, 220},  {"triangle", 40, 200, 80},
        {"diamond", 230, 220, 50}, {"cross", 220, 60, 220},  {"ring", 60, 220, 220},
        {"bar", 240, 140, 40},     {"dot", 235, 235, 235},
    };
    return kClasses;
}

namespace {

const char* kActionsSingular[] = {"drifts", "slides", "glides", "wanders", "roams"};
const char* kActionsPlural[] = {"drift", "slide", "glide", "wander", "roam"};
const char* kCountWords[] = {"one", "two", "three"};

// caption heads mirroring a subset of the prompt-template phrasings, so
// prompt-style contexts are in-distribution for the text tower while some
// template words (e.g. "footage") stay corpus-rare, as they would be in a
// web corpus; none of these words is a lexicon noun
const char* kVideoPrefixes[] = {"", "a video of", "a portrait of", "a video of",
                                "a portrait of"};
const char* kImagePrefixes[] = {"", "a photo of", "a picture of", "a photo of",
                                "a good picture of"};
const char* kArticles[] = {"a", "the", "one"};

bool inside_shape(const std::string& name, double dx, double dy, double r) {
    const double ax = std::fabs(dx), ay = std::fabs(dy);
    if (name == "circle") return dx * dx + dy * dy <= r * r;
    if (name == "square") return ax <= r && ay <= r;
    if (name == "triangle") return dy >= -r && dy <= r && ax <= (r - dy) * 0.5 + 0.0;
    if (name == "diamond") return ax + ay <= r;
    if (name == "cross") return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
    if (name == "ring") {
        const double d2 = dx * dx + dy * dy;
        return d2 <= r * r && d2 >= (r * 0.5) * (r * 0.5);
    }
    if (name == "bar") return ax <= r && ay <= r / 3.0;
    if (name == "dot") return dx * dx + dy * dy <= (r * 0.55) * (r * 0.55);
    throw DataError("unknown shape '" + name + "'");
}

struct EntityDraw {
    const EntityClass* cls;
    double r;
    double x_start, y_start, x_end, y_end;
    std::size_t blink_start = 0, blink_len = 0;  // blink_len == 0 means always visible
};

void render_entity(FrameStack& media, const EntityDraw& e, std::size_t t, double cx, double cy) {
    const auto h = static_cast<long>(media.h), w = static_cast<long>(media.w);
    const long y_lo = std::max(0L, static_cast<long>(std::floor(cy - e.r)) - 1);
    const long y_hi = std::min(h - 1, static_cast<long>(std::ceil(cy + e.r)) + 1);
    const long x_lo = std::max(0L, static_cast<long>(std::floor(cx - e.r)) - 1);
    const long x_hi = std::min(w - 1, static_cast<long>(std::ceil(cx + e.r)) + 1);
    for (long y = y_lo; y <= y_hi; ++y) {
        for (long x = x_lo; x <= x_hi; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            if (!inside_shape(e.cls->name, dx, dy, e.r)) continue;
            media.at(t, static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0) = e.cls->r;
            media.at(t, static_cast<std::size_t>(y), static_cast<std::size_t>(x), 1) = e.cls->g;
            media.at(t, static_cast<std::size_t>(y), static_cast<std::size_t>(x), 2) = e.cls->b;
        }
    }
}

}  // namespace

Corpus synth_corpus(const DataConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto classes = entity_classes();
    if (cfg.entities_max > classes.size()) {
        throw ConfigError("data.entities_max exceeds the " + std::to_string(classes.size()) +
                          " entity classes");
    }

    Corpus corpus;
    const std::size_t total = cfg.samples_train + cfg.samples_test;
    std::set<std::string> answers;

    for (std::size_t i = 0; i < total; ++i) {
        Rng rng(derive_seed(seed, "sample", i));
        Sample s;
        {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "synth-%04zu", i);
            s.id = buf;
        }
        s.split = i < cfg.samples_train ? Split::train : Split::test;
        s.is_image = rng.uniform() < cfg.image_fraction;
        const std::size_t frames = s.is_image ? 1 : cfg.frames;

        // question type decides entity count for QA corpora so that identity
        // questions stay unambiguous
        int qa_type = -1;
        std::size_t n_entities =
            cfg.entities_min + rng.uniform_int(cfg.entities_max - cfg.entities_min + 1);
        if (cfg.qa) {
            qa_type = static_cast<int>(rng.uniform_int(2));
            if (qa_type == 0) n_entities = 1;
        }

        // distinct entity classes
        std::vector<std::size_t> class_pool(classes.size());
        for (std::size_t c = 0; c < class_pool.size(); ++c) class_pool[c] = c;
        for (std::size_t c = 0; c < n_entities; ++c) {
            const std::size_t j = c + rng.uniform_int(class_pool.size() - c);
            std::swap(class_pool[c], class_pool[j]);
        }

        std::vector<EntityDraw> draws;
        for (std::size_t c = 0; c < n_entities; ++c) {
            EntityDraw e;
            e.cls = &classes[class_pool[c]];
            e.r = 5.0 + static_cast<double>(rng.uniform_int(3));
            const double margin = e.r + 1.0;
            e.x_start = rng.uniform(margin, static_cast<double>(cfg.width) - margin);
            e.y_start = rng.uniform(margin, static_cast<double>(cfg.height) - margin);
            e.x_end = rng.uniform(margin, static_cast<double>(cfg.width) - margin);
            e.y_end = rng.uniform(margin, static_cast<double>(cfg.height) - margin);
            if (cfg.blink && frames > 1) {
                e.blink_len = (frames + 1) / 2;
                e.blink_start = rng.uniform_int(frames - e.blink_len + 1);
            }
            draws.push_back(e);
        }

        s.media.t = frames;
        s.media.h = cfg.height;
        s.media.w = cfg.width;
        s.media.c = 3;
        s.media.data.assign(s.media.pixel_count(), 16);

        for (const auto& e : draws) {
            GtEntity gt;
            gt.name = e.cls->name;
            for (std::size_t t = 0; t < frames; ++t) {
                const double u = frames == 1 ? 0.0
                                             : static_cast<double>(t) /
                                                   static_cast<double>(frames - 1);
                const double cx = e.x_start + (e.x_end - e.x_start) * u;
                const double cy = e.y_start + (e.y_end - e.y_start) * u;
                const bool visible =
                    e.blink_len == 0 || (t >= e.blink_start && t < e.blink_start + e.blink_len);
                gt.visible.push_back(visible);
                const int bx0 = std::max(0, static_cast<int>(std::floor(cx - e.r)));
                const int by0 = std::max(0, static_cast<int>(std::floor(cy - e.r)));
                const int bx1 = std::min(static_cast<int>(cfg.width), static_cast<int>(std::ceil(cx + e.r)));
                const int by1 = std::min(static_cast<int>(cfg.height), static_cast<int>(std::ceil(cy + e.r)));
                gt.bbox.push_back({bx0, by0, bx1, by1});
                if (visible) render_entity(s.media, e, t, cx, cy);
            }
            s.gt_entities.push_back(std::move(gt));
        }

        // caption: entities in a seeded order plus one action word, under a
        // seeded template head and article
        std::vector<std::string> names;
        for (const auto& e : draws) names.push_back(e.cls->name);
        for (std::size_t c = 0; c + 1 < names.size(); ++c) {
            const std::size_t j = c + rng.uniform_int(names.size() - c);
            std::swap(names[c], names[j]);
        }
        const std::size_t action = rng.uniform_int(5);
        const std::string prefix = s.is_image ? kImagePrefixes[rng.uniform_int(5)]
                                              : kVideoPrefixes[rng.uniform_int(5)];
        const std::string art = kArticles[rng.uniform_int(3)];
        std::string core;
        if (names.size() == 1) {
            core = art + " " + names[0];
        } else if (names.size() == 2) {
            core = art + " " + names[0] + " and " + art + " " + names[1];
        } else {
            core = art + " " + names[0] + " , " + art + " " + names[1] + " and " + art + " " +
                   names[2];
        }
        const char* verb = names.size() == 1 ? kActionsSingular[action] : kActionsPlural[action];
        if (prefix.empty()) {
            s.caption = core + " " + verb;
        } else {
            s.caption = prefix + " " + core + " that " + verb;
        }

        if (cfg.qa) {
            QaPair qa;
            if (qa_type == 0) {
                qa.question = "what shape is shown";
                qa.answer_text = draws[0].cls->name;
            } else {
                qa.question = "how many shapes are shown";
                qa.answer_text = kCountWords[n_entities - 1];
            }
            answers.insert(qa.answer_text);
            s.qa = std::move(qa);
        }

        corpus.samples.push_back(std::move(s));
    }

    corpus.answer_vocab.assign(answers.begin(), answers.end());
    for (auto& s : corpus.samples) {
        if (s.qa) {
            const auto it = std::find(corpus.answer_vocab.begin(), corpus.answer_vocab.end(),
                                      s.qa->answer_text);
            s.qa->answer_id = static_cast<int>(it - corpus.answer_vocab.begin());
        }
    }

    // vocabulary over every text surface plus the built-in prompt templates,
    // so prompt instantiations tokenize without [UNK]
    std::vector<std::string> texts;
    for (const auto& s : corpus.samples) {
        texts.push_back(s.caption);
        if (s.qa) {
            texts.push_back(s.qa->question);
            texts.push_back(s.qa->answer_text);
        }
    }
    for (const auto& t : default_templates().video) texts.push_back(t);
    for (const auto& t : default_templates().image) texts.push_back(t);
    for (const auto& c : entity_classes()) texts.push_back(c.name);
    corpus.tokenizer = Tokenizer::build(texts);
    return corpus;
}

std::string dominant_entity(const Sample& sample, std::size_t x0, std::size_t y0,
                            std::size_t x1, std::size_t y1) {
    std::string best;
    double best_area = 0.0;
    for (const auto& gt : sample.gt_entities) {
        double area = 0.0;
        for (std::size_t t = 0; t < gt.bbox.size(); ++t) {
            if (!gt.visible[t]) continue;
            const auto& b = gt.bbox[t];
            const double ox = std::max(0.0, std::min<double>(x1, b[2]) - std::max<double>(x0, b[0]));
            const double oy = std::max(0.0, std::min<double>(y1, b[3]) - std::max<double>(y0, b[1]));
            area += ox * oy;
        }
        if (area > best_area) {
            best_area = area;
            best = gt.name;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// frame sampling / masking
// ---------------------------------------------------------------------------

std::vector<std::size_t> sample_frames_train(std::size_t total, std::size_t n, Rng& rng) {
    if (n == 0) throw InputError("sample_frames_train: n must be positive");
    if (total < n) {
        throw InputError("sample_frames_train: " + std::to_string(total) + " frames < n=" +
                         std::to_string(n));
    }
    const std::size_t first_n = n / 2;
    const std::size_t second_n = n - first_n;
    const std::size_t half = total / 2;

    auto draw = [&rng](std::size_t lo, std::size_t hi, std::size_t count) {
        std::vector<std::size_t> pool;
        for (std::size_t i = lo; i < hi; ++i) pool.push_back(i);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + rng.uniform_int(pool.size() - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(count);
        return pool;
    };

    std::vector<std::size_t> out = draw(0, half, first_n);
    const std::vector<std::size_t> second = draw(half, total, second_n);
    out.insert(out.end(), second.begin(), second.end());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> sample_frames_infer(std::size_t total, std::size_t n) {
    if (total == 0 || n == 0) throw InputError("sample_frames_infer: empty input");
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double mid = (static_cast<double>(i) + 0.5) * static_cast<double>(total) /
                           static_cast<double>(n);
        out.push_back(std::min(total - 1, static_cast<std::size_t>(mid)));
    }
    return out;
}

FrameStack image_to_static_video(const FrameStack& image, std::size_t n) {
    if (n == 0) throw InputError("image_to_static_video: n must be positive");
    if (image.t != 1) throw InputError("image_to_static_video: input must hold one frame");
    if (n == 1) return image;
    FrameStack out{n, image.h, image.w, image.c, {}};
    out.data.reserve(n * image.data.size());
    for (std::size_t i = 0; i < n; ++i) {
        out.data.insert(out.data.end(), image.data.begin(), image.data.end());
    }
    return out;
}

MaskResult mask_tokens(std::span<const int> ids, double p, Rng& rng, const Tokenizer& tok) {
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!tok.is_special(ids[i])) maskable.push_back(i);
    }
    if (maskable.empty()) {
        throw InputError("mask_tokens: no non-special token to mask");
    }
    MaskResult out;
    out.ids.assign(ids.begin(), ids.end());
    for (std::size_t i : maskable) {
        if (rng.uniform() < p) {
            out.positions.push_back(i);
            out.originals.push_back(out.ids[i]);
            out.ids[i] = Tokenizer::kMask;
        }
    }
    if (out.positions.empty()) {
        out.forced = true;
        const std::size_t i = maskable[rng.uniform_int(maskable.size())];
        out.positions.push_back(i);
        out.originals.push_back(out.ids[i]);
        out.ids[i] = Tokenizer::kMask;
    }
    return out;
}

// ---------------------------------------------------------------------------
// corpus io
// ---------------------------------------------------------------------------

void write_corpus(const Corpus& corpus, const std::string& dir,
                  const std::string& config_text) {
    fs::create_directories(fs::path(dir) / "media");
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw DataError("corpus: cannot write manifest in '" + dir + "'");

    json header;
    header["type"] = "header";
    header["version"] = 1;
    header["answers"] = corpus.answer_vocab;
    const std::string& provenance = config_text.empty() ? corpus.config_text : config_text;
    if (!provenance.empty()) header["config"] = provenance;
    manifest << header.dump() << '\n';

    for (const auto& s : corpus.samples) {
        const std::string media_rel = "media/" + s.id + ".alpv";
        write_alpv(s.media, (fs::path(dir) / media_rel).string());
        json row;
        row["type"] = "sample";
        row["id"] = s.id;
        row["media"] = media_rel;
        row["image"] = s.is_image;
        row["caption"] = s.caption;
        row["split"] = split_name(s.split);
        if (s.qa) {
            row["qa"] = {{"question", s.qa->question},
                         {"answer", s.qa->answer_text},
                         {"answer_id", s.qa->answer_id}};
        }
        if (!s.gt_entities.empty()) {
            json gts = json::array();
            for (const auto& gt : s.gt_entities) {
                json e;
                e["name"] = gt.name;
                e["bbox"] = gt.bbox;
                e["visible"] = gt.visible;
                gts.push_back(e);
            }
            row["gt_entities"] = gts;
        }
        manifest << row.dump() << '\n';
    }

    std::ofstream vocab(fs::path(dir) / "vocab.txt");
    if (!vocab) throw DataError("corpus: cannot write vocab in '" + dir + "'");
    for (const auto& w : corpus.tokenizer.words) vocab << w << '\n';
}

Corpus read_corpus(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw DataError("corpus: cannot open manifest in '" + dir + "'");
    Corpus corpus;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json row = json::parse(line, nullptr, false);
        if (row.is_discarded()) throw DataError("corpus: malformed manifest line");
        const std::string type = row.value("type", "");
        if (type == "header") {
            corpus.answer_vocab = row.value("answers", std::vector<std::string>{});
            corpus.config_text = row.value("config", std::string{});
            continue;
        }
        if (type != "sample") throw DataError("corpus: unknown record type '" + type + "'");
        Sample s;
        s.id = row.at("id").get<std::string>();
        s.caption = row.at("caption").get<std::string>();
        s.is_image = row.value("image", false);
        s.split = split_from_name(row.at("split").get<std::string>());
        s.media = read_alpv((fs::path(dir) / row.at("media").get<std::string>()).string());
        if (row.contains("qa")) {
            QaPair qa;
            qa.question = row["qa"].at("question").get<std::string>();
            qa.answer_text = row["qa"].at("answer").get<std::string>();
            qa.answer_id = row["qa"].at("answer_id").get<int>();
            s.qa = std::move(qa);
        }
        if (row.contains("gt_entities")) {
            for (const auto& e : row["gt_entities"]) {
                GtEntity gt;
                gt.name = e.at("name").get<std::string>();
                gt.bbox = e.at("bbox").get<std::vector<std::array<int, 4>>>();
                for (const auto& v : e.at("visible")) gt.visible.push_back(v.get<bool>());
                s.gt_entities.push_back(std::move(gt));
            }
        }
        corpus.samples.push_back(std::move(s));
    }

    std::ifstream vocab(fs::path(dir) / "vocab.txt");
    if (!vocab) throw DataError("corpus: cannot open vocab in '" + dir + "'");
    std::vector<std::string> words;
    while (std::getline(vocab, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    corpus.tokenizer = Tokenizer::from_words(std::move(words));
    return corpus;
}

}  // namespace vlp
