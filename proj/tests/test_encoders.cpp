#include <cmath>

#include "doctest.h"
#include "vlp/encoders.hpp"
#include "vlp/errors.hpp"
#include "vlp/rng.hpp"

using namespace vlp;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.video_layers = 2;
    cfg.text_layers = 1;
    cfg.mm_layers = 1;
    cfg.patch_size = 8;
    cfg.frame_size = 16;
    cfg.max_frames = 4;
    cfg.max_text = 6;
    cfg.proj_dim = 8;
    cfg.vocab_size = 12;
    return cfg;
}

FrameArray random_frames(std::size_t t, std::size_t hw, std::uint64_t seed) {
    Rng rng(seed);
    FrameArray f{t, hw, hw, 3, {}};
    f.data.resize(t * hw * hw * 3);
    for (double& v : f.data) v = rng.uniform();
    return f;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::fabs(a.values[i] - b.values[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("patch count arithmetic") {
    ModelConfig paper = ModelConfig::paper_preset();
    CHECK(paper.patches_per_frame() == 196);  // 224/16 squared
    ModelConfig desk;
    desk.frame_size = 32;
    desk.patch_size = 8;
    CHECK(desk.patches_per_frame() == 16);
    desk.patch_size = 5;
    CHECK_THROWS_AS(desk.validate(), ConfigError);
}

TEST_CASE("patch matrix geometry and frame locality") {
    FrameArray frames = random_frames(2, 16, 3);
    Tensor m = patch_matrix(frames, 8);
    CHECK(m.shape == Shape{2 * 4, 8 * 8 * 3});

    // permuting the two frames permutes the corresponding token rows
    FrameArray swapped = frames;
    const std::size_t fsz = 16 * 16 * 3;
    for (std::size_t i = 0; i < fsz; ++i) {
        std::swap(swapped.data[i], swapped.data[fsz + i]);
    }
    Tensor ms = patch_matrix(swapped, 8);
    const std::size_t row = 8 * 8 * 3;
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < row; ++c) {
            CHECK(ms.values[r * row + c] == m.values[(r + 4) * row + c]);
            CHECK(ms.values[(r + 4) * row + c] == m.values[r * row + c]);
        }
    }

    FrameArray bad = random_frames(1, 12, 5);
    CHECK_THROWS_AS(patch_matrix(bad, 8), ConfigError);
}

TEST_CASE("video encoder shape contract") {
    ModelConfig cfg = tiny_config();
    VideoEncoder enc(cfg, "video.");
    ParamStore ps;
    enc.register_params(ps);
    init_params(ps, 1);
    for (std::size_t n : {1, 2, 4}) {
        Graph g;
        BoundParams bp(g, ps);
        EmbeddingSequence seq = enc.encode(g, bp, random_frames(n, 16, n));
        CHECK(seq.cls.shape() == Shape{1, cfg.d});
        CHECK(seq.tokens.shape() == Shape{cfg.patches_per_frame(), cfg.d});
    }
    Graph g;
    BoundParams bp(g, ps);
    CHECK_THROWS_AS(enc.encode(g, bp, FrameArray{}), InputError);
}

TEST_CASE("attention rows are distributions inside the encoder") {
    ModelConfig cfg = tiny_config();
    VideoEncoder enc(cfg, "video.");
    ParamStore ps;
    enc.register_params(ps);
    init_params(ps, 2);
    Graph g;
    BoundParams bp(g, ps);
    enc.encode(g, bp, random_frames(3, 16, 9));
    std::size_t softmax_nodes = 0;
    g.visit_nodes([&](OpKind kind, const Tensor& value) {
        if (kind != OpKind::softmax) return;
        ++softmax_nodes;
        const std::size_t cols = value.shape.back();
        for (std::size_t r = 0; r < value.size() / cols; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += value.values[r * cols + c];
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    });
    CHECK(softmax_nodes > 0);
}

TEST_CASE("static video equals single-frame encoding with zero temporal positions") {
    ModelConfig cfg = tiny_config();
    VideoEncoder enc(cfg, "video.");
    ParamStore ps;
    enc.register_params(ps);
    init_params(ps, 3);
    Tensor& pe = ps.at("video.pos_temporal");
    std::fill(pe.values.begin(), pe.values.end(), 0.0);

    FrameArray one = random_frames(1, 16, 11);
    FrameArray four{4, 16, 16, 3, {}};
    for (int i = 0; i < 4; ++i) {
        four.data.insert(four.data.end(), one.data.begin(), one.data.end());
    }

    Graph g1, g4;
    BoundParams bp1(g1, ps), bp4(g4, ps);
    EmbeddingSequence s1 = enc.encode(g1, bp1, one);
    EmbeddingSequence s4 = enc.encode(g4, bp4, four);

    CHECK(max_abs_diff(s1.cls.value(), s4.cls.value()) < 1e-9);
    CHECK(max_abs_diff(s1.tokens.value(), s4.tokens.value()) < 1e-9);

    // repeated encodes of the static stack are bit-identical
    Graph g4b;
    BoundParams bp4b(g4b, ps);
    EmbeddingSequence s4b = enc.encode(g4b, bp4b, four);
    CHECK(s4.tokens.value().values == s4b.tokens.value().values);
}

TEST_CASE("text encoder contracts") {
    ModelConfig cfg = tiny_config();
    TextEncoder enc(cfg, "text.");
    ParamStore ps;
    enc.register_params(ps);
    init_params(ps, 4);

    std::vector<int> ids{1, 5, 6, 7, 0, 0, 0};  // CLS + 3 words + padding
    Graph g;
    BoundParams bp(g, ps);
    EmbeddingSequence seq = enc.encode(g, bp, ids);
    CHECK(seq.cls.shape() == Shape{1, cfg.d});
    CHECK(seq.tokens.shape() == Shape{ids.size() - 1, cfg.d});

    // determinism: bit-identical outputs on repeated calls
    Graph g2;
    BoundParams bp2(g2, ps);
    EmbeddingSequence seq2 = enc.encode(g2, bp2, ids);
    CHECK(seq.cls.value().values == seq2.cls.value().values);
    CHECK(seq.tokens.value().values == seq2.tokens.value().values);

    // changing one input token changes the CLS embedding
    std::vector<int> changed = ids;
    changed[2] = 8;
    Graph g3;
    BoundParams bp3(g3, ps);
    EmbeddingSequence seq3 = enc.encode(g3, bp3, changed);
    double l2 = 0.0;
    for (std::size_t i = 0; i < cfg.d; ++i) {
        const double d = seq3.cls.value()[i] - seq.cls.value()[i];
        l2 += d * d;
    }
    CHECK(std::sqrt(l2) > 0.0);

    std::vector<int> oov{1, 99};
    Graph g4;
    BoundParams bp4(g4, ps);
    CHECK_THROWS_AS(enc.encode(g4, bp4, oov), InputError);
}

TEST_CASE("multimodal encoder length and provenance") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 0);
    init_params(model.params(), 5);
    const std::size_t k = cfg.patches_per_frame();
    const std::size_t nt = cfg.max_text;

    Graph g;
    BoundParams bp(g, model.params());
    EmbeddingSequence v = model.encode_video(g, bp, random_frames(2, 16, 13));
    std::vector<int> ids(nt + 1, 0);
    ids[0] = 1;
    ids[1] = 5;
    EmbeddingSequence t = model.encode_text(g, bp, ids);
    EmbeddingSequence mm = model.encode_multimodal(g, bp, v, t);

    CHECK(mm.tokens.shape() == Shape{k + nt, cfg.d});
    REQUIRE(mm.provenance.size() == 1 + k + nt);
    CHECK(mm.provenance[0] == SlotRef{Modality::text, -1});

    // provenance is a bijection onto input slots
    std::size_t video_slots = 0, text_slots = 0;
    std::vector<bool> seen_video(k, false), seen_text(nt, false);
    for (std::size_t i = 1; i < mm.provenance.size(); ++i) {
        const SlotRef& ref = mm.provenance[i];
        if (ref.modality == Modality::video) {
            REQUIRE(!seen_video.at(static_cast<std::size_t>(ref.index)));
            seen_video[static_cast<std::size_t>(ref.index)] = true;
            ++video_slots;
        } else {
            REQUIRE(!seen_text.at(static_cast<std::size_t>(ref.index)));
            seen_text[static_cast<std::size_t>(ref.index)] = true;
            ++text_slots;
        }
    }
    CHECK(video_slots == k);
    CHECK(text_slots == nt);
}

TEST_CASE("projection heads produce unit vectors, homogeneity holds") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 0);
    init_params(model.params(), 6);
    Rng rng(17);
    Tensor cls({1, cfg.d});
    for (double& v : cls.values) v = rng.uniform(-1.0, 1.0);

    Graph g;
    BoundParams bp(g, model.params());
    Var p = model.project(g, bp, g.constant(cls), Modality::video);
    double norm = 0.0;
    for (double v : p.value().values) norm += v * v;
    CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-9);

    // positive scaling of the input leaves the normalized output unchanged
    Tensor scaled = cls;
    for (double& v : scaled.values) v *= 3.7;
    Var p2 = model.project(g, bp, g.constant(scaled), Modality::video);
    for (std::size_t i = 0; i < p.value().size(); ++i) {
        CHECK(p.value()[i] == doctest::Approx(p2.value()[i]).epsilon(1e-12));
    }

    CHECK_THROWS_AS(model.project(g, bp, g.constant(Tensor({1, cfg.d})), Modality::text),
                    DomainError);
}

TEST_CASE("contrastive space widths") {
    CHECK(ModelConfig::paper_preset().proj_dim == 256);
    CHECK(ModelConfig::desk_default().proj_dim == 16);
}

TEST_CASE("temporal position interpolation") {
    Tensor pe({4, 3});
    Rng rng(23);
    for (double& v : pe.values) v = rng.uniform(-1.0, 1.0);
    Tensor same = interpolate_temporal_pe(pe, 4);
    CHECK(same.values == pe.values);

    Tensor two({2, 2}, {0.0, 10.0, 4.0, -2.0});
    Tensor three = interpolate_temporal_pe(two, 3);
    CHECK(three.shape == Shape{3, 2});
    CHECK(three.values[0] == 0.0);
    CHECK(three.values[1] == 10.0);
    CHECK(three.values[2] == doctest::Approx(2.0));
    CHECK(three.values[3] == doctest::Approx(4.0));
    CHECK(three.values[4] == 4.0);
    CHECK(three.values[5] == -2.0);

    // L=2 -> 5: interior points collinear with the endpoints per dimension
    Tensor five = interpolate_temporal_pe(two, 5);
    for (std::size_t j = 0; j < 2; ++j) {
        const double a = two.values[j];
        const double b = two.values[2 + j];
        for (std::size_t i = 0; i < 5; ++i) {
            const double expected = a + (b - a) * static_cast<double>(i) / 4.0;
            CHECK(std::fabs(five.values[i * 2 + j] - expected) < 1e-12);
        }
    }
}

TEST_CASE("parameter store freeze and fingerprint") {
    ParamStore ps;
    ps.add("a.weight", {2, 2});
    init_params(ps, 7);
    const std::uint64_t fp = ps.fingerprint();
    ps.at("a.weight").values[0] += 1.0;
    CHECK(ps.fingerprint() != fp);
    ps.freeze();
    CHECK_THROWS_AS(ps.add("b.weight", {1}), IntegrityError);
}

TEST_CASE("init is per-name stable") {
    ParamStore a, b;
    a.add("x.weight", {4});
    a.add("y.weight", {4});
    b.add("y.weight", {4});  // x absent; y must initialize identically
    init_params(a, 99);
    init_params(b, 99);
    CHECK(a.at("y.weight").values == b.at("y.weight").values);
    CHECK(a.at("x.weight").values != a.at("y.weight").values);
}
