#include "vlp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "vlp/errors.hpp"
#include "vlp/objectives.hpp"

namespace vlp {

using nlohmann::json;

double lr_at(std::size_t step, const ScheduleConfig& cfg) {
    if (cfg.total_steps == 0) throw ContractError("lr_at: schedule has zero steps");
    if (step > cfg.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " +
                            std::to_string(cfg.total_steps));
    }
    const auto warmup = static_cast<std::size_t>(
        cfg.warmup_ratio * static_cast<double>(cfg.total_steps));
    if (step < warmup) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (cfg.total_steps == warmup) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
           static_cast<double>(cfg.total_steps - warmup);
}

bool weight_decay_exempt(const std::string& name) {
    auto ends_with = [&name](const char* suffix) {
        const std::size_t n = std::strlen(suffix);
        return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    return ends_with(".bias") || ends_with(".gain") ||
           name.find("log_tau") != std::string::npos;
}

void adamw_update(ParamStore& params, std::map<std::string, std::vector<double>>& m1,
                  std::map<std::string, std::vector<double>>& m2, std::size_t step_index,
                  double lr, const AdamWConfig& cfg) {
    if (params.frozen()) throw IntegrityError("adamw: parameter store is frozen");
    if (step_index == 0) throw ContractError("adamw: step_index is 1-based");

    // abort before mutating anything if any gradient is non-finite
    for (const auto& [name, t] : params.tensors()) {
        if (t.grad && !all_finite(*t.grad)) {
            throw DomainError("adamw: non-finite gradient in '" + name + "'");
        }
    }

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));

    for (auto& [name, t] : params.tensors()) {
        auto& m = m1[name];
        auto& v = m2[name];
        if (m.size() != t.size()) m.assign(t.size(), 0.0);
        if (v.size() != t.size()) v.assign(t.size(), 0.0);
        const bool decay = !weight_decay_exempt(name) && cfg.weight_decay != 0.0;
        const std::vector<double>* g = t.grad ? &*t.grad : nullptr;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            if (decay) t.values[i] -= lr * cfg.weight_decay * t.values[i];
            t.values[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
        }
    }
}

TrainState make_train_state(const Config& cfg, const Corpus& corpus, std::size_t entity_count,
                            std::size_t answer_count) {
    cfg.validate();
    ModelConfig mc = cfg.model;
    mc.vocab_size = corpus.tokenizer.vocab_size();
    TrainState state{cfg,
                     corpus.tokenizer.words,
                     corpus.tokenizer,
                     Model(mc, entity_count, answer_count),
                     {},
                     {},
                     0,
                     ScheduleConfig{},
                     cfg.seed,
                     0,
                     cfg.train.tau_init};
    init_params(state.model.params(), derive_seed(cfg.seed, "model-init"), cfg.train.tau_init);
    std::size_t steps = cfg.train.steps;
    if (cfg.train.epochs > 0) {
        const std::size_t n = corpus.split_indices(Split::train).size();
        steps = cfg.train.epochs * ((n + cfg.train.batch - 1) / cfg.train.batch);
    }
    state.schedule = ScheduleConfig{cfg.train.peak_lr, cfg.train.warmup_ratio, steps};
    return state;
}

void adamw_step(TrainState& state, double lr) {
    AdamWConfig acfg{state.cfg.train.beta1, state.cfg.train.beta2, 1e-8,
                     state.cfg.train.weight_decay};
    adamw_update(state.model.params(), state.m1, state.m2, state.step + 1, lr, acfg);
    // tau lives as log_tau; keep tau inside [1e-3, 0.5]
    if (state.model.params().contains("log_tau")) {
        double& lt = state.model.params().at("log_tau").values[0];
        lt = std::clamp(lt, std::log(1e-3), std::log(0.5));
    }
}

void add_qa_head(TrainState& state, std::size_t answer_count) {
    if (answer_count == 0) throw ContractError("add_qa_head: zero answers");
    if (state.model.answer_count() == answer_count) return;
    ModelConfig mc = state.model.config();
    Model next(mc, state.model.entity_count(), answer_count);
    init_params(next.params(), derive_seed(state.seed, "model-init"), state.cfg.train.tau_init);
    for (auto& [name, t] : next.params().tensors()) {
        if (state.model.params().contains(name)) {
            const Tensor& old = state.model.params().at(name);
            if (old.shape == t.shape) t.values = old.values;
        }
    }
    state.model = std::move(next);
    // moments for brand-new parameters start at zero lazily inside adamw
}

void set_frame_count(TrainState& state, std::size_t frames) {
    if (frames == 0) throw ContractError("set_frame_count: zero frames");
    if (frames == state.model.config().max_frames) return;
    const Tensor resized =
        interpolate_temporal_pe(state.model.params().at("video.pos_temporal"), frames);

    ModelConfig mc = state.model.config();
    mc.max_frames = frames;
    Model next(mc, state.model.entity_count(), state.model.answer_count());
    init_params(next.params(), derive_seed(state.seed, "model-init"), state.cfg.train.tau_init);
    for (auto& [name, t] : next.params().tensors()) {
        if (name == "video.pos_temporal") {
            t.values = resized.values;
            continue;
        }
        const Tensor& old = state.model.params().at(name);
        if (old.shape == t.shape) t.values = old.values;
    }
    state.model = std::move(next);
    // the resized table starts with fresh optimizer moments
    state.m1.erase("video.pos_temporal");
    state.m2.erase("video.pos_temporal");
    state.cfg.model.max_frames = frames;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

FrameArray training_frames(const Sample& sample, std::size_t n, Rng& rng) {
    if (sample.is_image || sample.media.t == 1) {
        return to_array(image_to_static_video(sample.media, n));
    }
    const FrameArray all = to_array(sample.media);
    std::vector<std::size_t> idx;
    if (sample.media.t >= n) {
        idx = sample_frames_train(sample.media.t, n, rng);
    } else {
        idx = sample_frames_infer(sample.media.t, n);  // duplicate via midpoints
    }
    return select_frames(all, idx);
}

std::vector<std::size_t> draw_batch(const std::vector<std::size_t>& pool, std::size_t n,
                                    Rng& rng) {
    if (pool.empty()) throw DataError("training: empty sample pool");
    std::vector<std::size_t> out;
    out.reserve(n);
    if (pool.size() >= n) {
        std::vector<std::size_t> shuffled(pool);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = i + rng.uniform_int(shuffled.size() - i);
            std::swap(shuffled[i], shuffled[j]);
        }
        out.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n));
    } else {
        for (std::size_t i = 0; i < n; ++i) out.push_back(pool[rng.uniform_int(pool.size())]);
    }
    return out;
}

void write_metrics(std::ofstream& out, const StepMetrics& m, bool qa_mode) {
    json row;
    row["step"] = m.step;
    row["lr"] = m.lr;
    row["l_vtc"] = m.l_vtc;
    row["l_pem"] = m.l_pem;
    row["l_mlm"] = m.l_mlm;
    row["l_vtm"] = m.l_vtm;
    if (qa_mode) row["l_qa"] = m.l_qa;
    row["total"] = m.total;
    if (m.pem_skipped > 0) row["pem_skipped"] = m.pem_skipped;
    out << row.dump() << '\n';
}

}  // namespace

std::vector<StepMetrics> run_training(TrainState& state, const Corpus& corpus,
                                      const TrainLoopOptions& options) {
    const TrainConfig& tc = state.cfg.train;
    const bool use_vtc = options.loss_set.count(LossKind::vtc) > 0;
    const bool use_pem = options.loss_set.count(LossKind::pem) > 0 && !options.qa_mode;
    const bool use_mlm = options.loss_set.count(LossKind::mlm) > 0 && !options.qa_mode;
    const bool use_vtm = options.loss_set.count(LossKind::vtm) > 0 && !options.qa_mode;

    if (use_pem) {
        if (options.prompter == nullptr || !options.prompter->frozen()) {
            throw ContractError("pretrain: PEM needs a frozen prompter");
        }
        if (options.video_bank == nullptr && options.image_bank == nullptr) {
            throw ContractError("pretrain: PEM needs a prompt bank");
        }
        state.prompter_fingerprint = options.prompter->fingerprint();
        state.tau_p = options.prompter->tau();
    }
    if (options.qa_mode && state.model.answer_count() == 0) {
        throw ContractError("finetune_qa: model has no QA head");
    }

    const std::vector<std::size_t> train_idx = corpus.split_indices(Split::train);
    std::vector<std::size_t> video_pool, image_pool;
    for (std::size_t i : train_idx) {
        (corpus.samples[i].is_image ? image_pool : video_pool).push_back(i);
    }

    std::ofstream metrics_file;
    if (!options.metrics_path.empty()) {
        metrics_file.open(options.metrics_path, std::ios::app);
        if (!metrics_file) throw DataError("training: cannot write metrics log");
        if (state.step == 0) {
            json header;
            header["type"] = "config";
            header["config"] = state.cfg.to_text();
            header["loss_set"] = loss_set_str(options.loss_set);
            metrics_file << header.dump() << '\n';
        }
    }

    const std::size_t n_frames = std::min<std::size_t>(tc.frames, state.model.config().max_frames);
    std::vector<StepMetrics> history;

    while (state.step < state.schedule.total_steps &&
           (options.step_limit == 0 || history.size() < options.step_limit)) {
        const std::uint64_t step = state.step;
        StepMetrics metrics;
        metrics.step = step;
        metrics.lr = lr_at(step, state.schedule);

        // the dataloader switches between video and image batches
        const std::vector<std::size_t>* pool = &video_pool;
        if (video_pool.empty()) pool = &image_pool;
        else if (!image_pool.empty() && step % 2 == 1) pool = &image_pool;

        Rng batch_rng(derive_seed(state.seed, "batch", step));
        const std::vector<std::size_t> all_indices =
            draw_batch(*pool, tc.batch * tc.grad_accum, batch_rng);

        state.model.params().zero_grads();

        for (std::size_t chunk = 0; chunk < tc.grad_accum; ++chunk) {
            const std::size_t b = tc.batch;
            std::vector<std::size_t> indices(
                all_indices.begin() + static_cast<std::ptrdiff_t>(chunk * b),
                all_indices.begin() + static_cast<std::ptrdiff_t>((chunk + 1) * b));

            Graph g;
            BoundParams bp(g, state.model.params());

            struct SampleFwd {
                const Sample* sample = nullptr;
                FrameArray frames;
                std::vector<int> ids;
                MaskResult masked;
                EmbeddingSequence v_seq, t_seq;
            };
            std::vector<SampleFwd> fwd(b);
            std::vector<Var> v_projs, t_projs;

            for (std::size_t s = 0; s < b; ++s) {
                const std::size_t pos = chunk * b + s;
                SampleFwd& f = fwd[s];
                f.sample = &corpus.samples[indices[s]];
                Rng frame_rng(derive_seed(state.seed, "frames", step, pos));
                f.frames = training_frames(*f.sample, n_frames, frame_rng);
                const std::string& text =
                    options.qa_mode ? f.sample->qa->question : f.sample->caption;
                f.ids = state.tokenizer.encode(text, state.model.config().max_text);
                f.v_seq = state.model.encode_video(g, bp, f.frames);
                f.t_seq = state.model.encode_text(g, bp, f.ids);
                if (use_vtc || use_vtm) {
                    v_projs.push_back(state.model.project(g, bp, f.v_seq.cls, Modality::video));
                    t_projs.push_back(state.model.project(g, bp, f.t_seq.cls, Modality::text));
                }
            }

            std::vector<Var> losses;
            std::optional<SimilarityMatrix> sim;
            if (use_vtc || use_vtm) {
                sim = similarity_matrix(v_projs, t_projs, bp("log_tau"));
            }
            if (use_vtc) {
                Var l = vtc_loss(*sim);
                metrics.l_vtc += l.value()[0] / static_cast<double>(tc.grad_accum);
                losses.push_back(l);
            }

            std::vector<EmbeddingSequence> mm_pos(b);
            if (use_pem || use_vtm || options.qa_mode) {
                for (std::size_t s = 0; s < b; ++s) {
                    mm_pos[s] = state.model.encode_multimodal(g, bp, fwd[s].v_seq, fwd[s].t_seq);
                }
            }

            if (use_pem) {
                std::vector<Var> pem_terms;
                for (std::size_t s = 0; s < b; ++s) {
                    const std::size_t pos = chunk * b + s;
                    const PromptBank* bank =
                        fwd[s].sample->is_image && options.image_bank ? options.image_bank
                                                                      : options.video_bank;
                    if (bank == nullptr) { ++metrics.pem_skipped; continue; }
                    for (std::size_t c = 0; c < tc.crops_per_video; ++c) {
                        Rng crop_rng(derive_seed(state.seed, "crop", step,
                                                 pos * tc.crops_per_video + c));
                        try {
                            const CropRegion crop = sample_crop(
                                fwd[s].frames.h, fwd[s].frames.w, crop_rng,
                                state.model.config().patch_size, tc.crop_min_frac,
                                tc.crop_max_frac);
                            const FrameArray cropped =
                                crop_array(fwd[s].frames, crop.x0, crop.y0, crop.x1, crop.y1);
                            const PseudoLabel label = pseudo_label(
                                cropped, *bank, *options.prompter, tc.label_threshold);
                            if (!label.kept) { ++metrics.pem_skipped; continue; }
                            Var pooled = crop_pool(mm_pos[s], crop, state.model.config());
                            pem_terms.push_back(pem_loss(g, bp, pooled, label.q));
                        } catch (const DegenerateCropError&) {
                            ++metrics.pem_skipped;
                        }
                    }
                }
                // discarded labels contribute zero but stay in the denominator
                const double denom = static_cast<double>(b * tc.crops_per_video);
                Var l = pem_terms.empty() ? g.constant_scalar(0.0)
                                          : scale(total_loss(pem_terms), 1.0 / denom);
                metrics.l_pem += l.value()[0] / static_cast<double>(tc.grad_accum);
                losses.push_back(l);
            }

            if (use_mlm) {
                std::vector<Var> mlm_terms;
                for (std::size_t s = 0; s < b; ++s) {
                    const std::size_t pos = chunk * b + s;
                    Rng mask_rng(derive_seed(state.seed, "mask", step, pos));
                    fwd[s].masked = mask_tokens(fwd[s].ids, 0.15, mask_rng, state.tokenizer);
                    EmbeddingSequence t_masked =
                        state.model.encode_text(g, bp, fwd[s].masked.ids);
                    EmbeddingSequence mm_masked =
                        state.model.encode_multimodal(g, bp, fwd[s].v_seq, t_masked);
                    mlm_terms.push_back(mlm_loss(g, bp, mm_masked, fwd[s].masked.positions,
                                                 fwd[s].masked.originals));
                }
                Var l = scale(total_loss(mlm_terms), 1.0 / static_cast<double>(b));
                metrics.l_mlm += l.value()[0] / static_cast<double>(tc.grad_accum);
                losses.push_back(l);
            }

            if (use_vtm) {
                std::vector<Var> pos_cls, neg_cls;
                for (std::size_t s = 0; s < b; ++s) pos_cls.push_back(mm_pos[s].cls);
                if (b >= 2) {
                    for (std::size_t s = 0; s < b; ++s) {
                        const std::size_t pos = chunk * b + s;
                        Rng mine_t(derive_seed(state.seed, "mine-t", step, pos));
                        Rng mine_v(derive_seed(state.seed, "mine-v", step, pos));
                        const std::size_t jt =
                            mine_hard_negative(*sim, s, MiningDirection::v2t, mine_t);
                        const std::size_t jv =
                            mine_hard_negative(*sim, s, MiningDirection::t2v, mine_v);
                        EmbeddingSequence neg_text =
                            state.model.encode_multimodal(g, bp, fwd[s].v_seq, fwd[jt].t_seq);
                        EmbeddingSequence neg_video =
                            state.model.encode_multimodal(g, bp, fwd[jv].v_seq, fwd[s].t_seq);
                        neg_cls.push_back(neg_text.cls);
                        neg_cls.push_back(neg_video.cls);
                    }
                }
                Var l = vtm_loss(g, bp, pos_cls, neg_cls);
                metrics.l_vtm += l.value()[0] / static_cast<double>(tc.grad_accum);
                losses.push_back(l);
            }

            if (options.qa_mode) {
                std::vector<Var> qa_terms;
                for (std::size_t s = 0; s < b; ++s) {
                    if (!fwd[s].sample->qa) throw DataError("finetune_qa: sample without QA pair");
                    const int answer = fwd[s].sample->qa->answer_id;
                    if (answer < 0 ||
                        static_cast<std::size_t>(answer) >= state.model.answer_count()) {
                        throw DataError("finetune_qa: answer id " + std::to_string(answer) +
                                        " outside the answer vocabulary");
                    }
                    Var h = gelu(add(matmul(mm_pos[s].cls, bp("qa_head.fc1.weight")),
                                     bp("qa_head.fc1.bias")));
                    Var logits = add(matmul(h, bp("qa_head.fc2.weight")), bp("qa_head.fc2.bias"));
                    std::vector<double> onehot(state.model.answer_count(), 0.0);
                    onehot[static_cast<std::size_t>(answer)] = 1.0;
                    qa_terms.push_back(soft_cross_entropy(logits, onehot));
                }
                Var l = scale(total_loss(qa_terms), 1.0 / static_cast<double>(b));
                metrics.l_qa += l.value()[0] / static_cast<double>(tc.grad_accum);
                losses.push_back(l);
            }

            Var total = scale(total_loss(losses), 1.0 / static_cast<double>(tc.grad_accum));
            metrics.total += total.value()[0];
            g.backward(total);
        }

        adamw_step(state, metrics.lr);
        ++state.step;
        if (metrics_file.is_open()) write_metrics(metrics_file, metrics, options.qa_mode);
        history.push_back(metrics);
    }
    return history;
}

std::vector<StepMetrics> pretrain(TrainState& state, const Corpus& corpus,
                                  const PrompterModel* prompter, const PromptBank* video_bank,
                                  const PromptBank* image_bank, const std::string& metrics_path) {
    TrainLoopOptions options;
    options.loss_set = state.cfg.train.loss_set;
    options.prompter = prompter;
    options.video_bank = video_bank;
    options.image_bank = image_bank;
    options.metrics_path = metrics_path;
    return run_training(state, corpus, options);
}

std::vector<StepMetrics> finetune_retrieval(TrainState& state, const Corpus& corpus,
                                            const std::string& metrics_path) {
    if (state.cfg.train.frames != state.model.config().max_frames) {
        set_frame_count(state, state.cfg.train.frames);
    }
    TrainLoopOptions options;
    options.loss_set = {LossKind::vtc, LossKind::vtm};
    options.metrics_path = metrics_path;
    return run_training(state, corpus, options);
}

std::vector<StepMetrics> finetune_qa(TrainState& state, const Corpus& corpus,
                                     const std::string& metrics_path) {
    if (corpus.answer_vocab.empty()) throw DataError("finetune_qa: corpus has no answers");
    add_qa_head(state, corpus.answer_vocab.size());
    if (state.cfg.train.frames != state.model.config().max_frames) {
        set_frame_count(state, state.cfg.train.frames);
    }
    TrainLoopOptions options;
    options.qa_mode = true;
    options.metrics_path = metrics_path;
    return run_training(state, corpus, options);
}

// ---------------------------------------------------------------------------
// prompter training
// ---------------------------------------------------------------------------

PrompterModel train_prompter(const Corpus& corpus, const Config& cfg,
                             const std::string& metrics_path,
                             std::vector<StepMetrics>* metrics_out) {
    cfg.validate();
    ModelConfig pc = cfg.prompter;
    pc.vocab_size = corpus.tokenizer.vocab_size();
    PrompterModel prompter(pc);
    const std::uint64_t pseed = derive_seed(cfg.seed, "prompter");
    init_params(prompter.params(), derive_seed(pseed, "model-init"), cfg.train.tau_init);

    std::map<std::string, std::vector<double>> m1, m2;
    std::size_t steps = cfg.train.steps;
    if (cfg.train.epochs > 0) {
        const std::size_t n = corpus.split_indices(Split::train).size();
        steps = cfg.train.epochs * ((n + cfg.train.batch - 1) / cfg.train.batch);
    }
    const ScheduleConfig schedule{cfg.train.peak_lr, cfg.train.warmup_ratio, steps};
    const AdamWConfig acfg{cfg.train.beta1, cfg.train.beta2, 1e-8, cfg.train.weight_decay};

    const std::vector<std::size_t> pool = corpus.split_indices(Split::train);
    const std::size_t n_frames = std::min<std::size_t>(cfg.train.frames, pc.max_frames);

    std::ofstream metrics_file;
    if (!metrics_path.empty()) {
        metrics_file.open(metrics_path, std::ios::app);
        json header;
        header["type"] = "config";
        header["config"] = cfg.to_text();
        header["loss_set"] = "vtc";
        metrics_file << header.dump() << '\n';
    }

    for (std::size_t step = 0; step < steps; ++step) {
        Rng batch_rng(derive_seed(pseed, "batch", step));
        const std::vector<std::size_t> indices = draw_batch(pool, cfg.train.batch, batch_rng);

        Graph g;
        BoundParams bp(g, prompter.params());
        std::vector<Var> v_projs, t_projs;
        for (std::size_t s = 0; s < indices.size(); ++s) {
            const Sample& sample = corpus.samples[indices[s]];
            Rng frame_rng(derive_seed(pseed, "frames", step, s));
            FrameArray frames = training_frames(sample, n_frames, frame_rng);
            if (frames.h != pc.frame_size || frames.w != pc.frame_size) {
                frames = resize_bilinear(frames, pc.frame_size, pc.frame_size);
            }
            const std::vector<int> ids = corpus.tokenizer.encode(sample.caption, pc.max_text);
            EmbeddingSequence v_seq = prompter.encode_video(g, bp, frames);
            EmbeddingSequence t_seq = prompter.encode_text(g, bp, ids);
            v_projs.push_back(prompter.project(g, bp, v_seq.cls, Modality::video));
            t_projs.push_back(prompter.project(g, bp, t_seq.cls, Modality::text));
        }
        SimilarityMatrix sim = similarity_matrix(v_projs, t_projs, bp("log_tau"));
        Var loss = vtc_loss(sim);

        StepMetrics metrics;
        metrics.step = step;
        metrics.lr = lr_at(step, schedule);
        metrics.l_vtc = loss.value()[0];
        metrics.total = metrics.l_vtc;

        prompter.params().zero_grads();
        g.backward(loss);
        adamw_update(prompter.params(), m1, m2, step + 1, metrics.lr, acfg);
        double& lt = prompter.params().at("log_tau").values[0];
        lt = std::clamp(lt, std::log(1e-3), std::log(0.5));

        if (metrics_file.is_open()) write_metrics(metrics_file, metrics, false);
        if (metrics_out) metrics_out->push_back(metrics);
    }

    prompter.freeze();
    return prompter;
}

}  // namespace vlp
