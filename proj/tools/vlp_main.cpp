// Command-line front end: synthesize data, train the prompter, build prompt
// banks, generate pseudo-labels, pre-train, finetune, evaluate, and run the
// loss-subset comparison, all from flat config files with flag overrides.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "vlp/errors.hpp"
#include "vlp/eval.hpp"
#include "vlp/grad_check.hpp"
#include "vlp/prompter.hpp"
#include "vlp/training.hpp"

namespace fs = std::filesystem;
using namespace vlp;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> frames;
    std::optional<std::size_t> entities;
    std::optional<std::string> ensemble;
    std::optional<std::string> loss_set;
    std::optional<std::string> scorer;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "global random seed (default 42)");
    cmd->add_option("--frames", args.frames, "frames per video at train time");
    cmd->add_option("--entities", args.entities, "entity vocabulary size M");
    cmd->add_option("--ensemble", args.ensemble, "prompt ensembling: on|off");
    cmd->add_option("--loss-set", args.loss_set, "comma list of vtc,pem,mlm,vtm");
    cmd->add_option("--scorer", args.scorer, "retrieval scorer: vtm|vtc");
}

/// flag > file > default
Config resolve_config(const CommonArgs& args) {
    Config cfg = args.config_path.empty() ? Config{} : Config::from_file(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.frames) cfg.train.frames = *args.frames;
    if (args.entities) cfg.train.entities = *args.entities;
    if (args.ensemble) cfg.set("train.ensemble", *args.ensemble);
    if (args.loss_set) cfg.set("train.loss_set", *args.loss_set);
    if (args.scorer) cfg.set("eval.scorer", *args.scorer);
    cfg.validate();
    return cfg;
}

EntityVocabulary corpus_entities(const Corpus& corpus, const Config& cfg,
                                 const std::string& lexicon_path) {
    std::vector<std::string> words =
        lexicon_path.empty() ? default_noun_lexicon() : load_noun_lexicon(lexicon_path);
    std::set<std::string> lexicon(words.begin(), words.end());
    const std::size_t limit = cfg.train.entities == 0 ? lexicon.size() : cfg.train.entities;
    EntityVocabulary vocab = extract_entities(corpus.captions(Split::train), lexicon, limit);
    if (vocab.size() < vocab.requested && cfg.train.entities != 0) {
        std::cerr << "warning: only " << vocab.size() << " of the requested "
                  << vocab.requested << " entities appear in the corpus\n";
    }
    if (vocab.size() == 0) throw DataError("no lexicon nouns appear in the corpus captions");
    return vocab;
}

PromptTemplates resolve_templates(const std::string& path) {
    return path.empty() ? default_templates() : load_templates(path);
}

std::span<const std::string> templates_for(const PromptTemplates& t, PromptModality m) {
    return m == PromptModality::video ? t.video : t.image;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << text;
}

struct EvalOutcome {
    RetrievalReport report;
    Scorer scorer;
};

EvalOutcome run_retrieval_eval(const TrainState& state, const Corpus& corpus, Split split,
                               Scorer scorer) {
    const Tensor scores = score_retrieval(state, corpus, split, scorer);
    std::vector<std::size_t> gt(scores.shape[0]);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = i;
    return {retrieval_metrics(scores, gt), scorer};
}

// ---------------------------------------------------------------------------
// verbs
// ---------------------------------------------------------------------------

int cmd_synth_data(const CommonArgs& args) {
    Config cfg = resolve_config(args);
    Corpus corpus = synth_corpus(cfg.data, cfg.seed);
    fs::create_directories(args.out_dir);
    write_corpus(corpus, args.out_dir, cfg.to_text());
    std::cout << "synth-data: wrote " << corpus.samples.size() << " samples ("
              << corpus.split_indices(Split::train).size() << " train) to " << args.out_dir
              << "\n";
    return 0;
}

int cmd_train_prompter(const CommonArgs& args, const std::string& data_dir) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    fs::create_directories(args.out_dir);
    std::vector<StepMetrics> history;
    PrompterModel prompter =
        train_prompter(corpus, cfg, (fs::path(args.out_dir) / "prompter_metrics.jsonl").string(),
                       &history);
    const std::string ckpt = (fs::path(args.out_dir) / "prompter.ckpt").string();
    save_prompter(prompter, cfg, corpus.tokenizer.words, ckpt);
    std::cout << "train-prompter: " << history.size() << " steps, final vtc "
              << (history.empty() ? 0.0 : history.back().l_vtc) << ", frozen at " << ckpt
              << "\n";
    return 0;
}

int cmd_build_bank(const CommonArgs& args, const std::string& data_dir,
                   const std::string& prompter_path, const std::string& templates_path,
                   const std::string& lexicon_path, const std::string& modality_name) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    LoadedPrompter loaded = load_prompter(prompter_path);
    EntityVocabulary vocab = corpus_entities(corpus, cfg, lexicon_path);
    const PromptModality modality =
        modality_name == "image" ? PromptModality::image : PromptModality::video;
    PromptTemplates templates = resolve_templates(templates_path);
    PromptBank bank = build_prompt_bank(vocab, templates_for(templates, modality), modality,
                                        loaded.model, corpus.tokenizer, cfg.train.ensemble);
    fs::create_directories(args.out_dir);
    const std::string path = (fs::path(args.out_dir) / ("bank_" + modality_name + ".json")).string();
    save_prompt_bank(bank, path, cfg.to_text());
    std::cout << "build-bank: " << bank.entities.size() << " entities x "
              << bank.templates_used.size() << " templates -> " << path << "\n";
    return 0;
}

int cmd_gen_pseudolabels(const CommonArgs& args, const std::string& data_dir,
                         const std::string& prompter_path, const std::string& bank_path) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    LoadedPrompter loaded = load_prompter(prompter_path);
    PromptBank bank = load_prompt_bank(bank_path);
    fs::create_directories(args.out_dir);
    const std::string path = (fs::path(args.out_dir) / "pseudolabels.jsonl").string();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    nlohmann::json header;
    header["type"] = "config";
    header["config"] = cfg.to_text();
    out << header.dump() << '\n';

    std::size_t kept = 0, total = 0;
    for (std::size_t idx : corpus.split_indices(Split::train)) {
        const Sample& sample = corpus.samples[idx];
        const FrameArray frames = to_array(sample.media);
        for (std::size_t c = 0; c < cfg.train.crops_per_video; ++c) {
            Rng rng(derive_seed(cfg.seed, "labels", idx, c));
            try {
                const CropRegion crop =
                    sample_crop(frames.h, frames.w, rng, cfg.model.patch_size,
                                cfg.train.crop_min_frac, cfg.train.crop_max_frac);
                const FrameArray cropped =
                    crop_array(frames, crop.x0, crop.y0, crop.x1, crop.y1);
                const PseudoLabel label =
                    pseudo_label(cropped, bank, loaded.model, cfg.train.label_threshold);
                out << pseudo_label_record(sample.id, crop, label, bank) << '\n';
                ++total;
                if (label.kept) ++kept;
            } catch (const DegenerateCropError&) {
            }
        }
    }
    std::cout << "gen-pseudolabels: " << total << " crops, " << kept << " kept -> " << path
              << "\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& args, const std::string& data_dir,
                 const std::string& prompter_path, const std::string& bank_path,
                 const std::string& image_bank_path, const std::string& resume_path) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    fs::create_directories(args.out_dir);

    std::optional<LoadedPrompter> prompter;
    std::optional<PromptBank> video_bank, image_bank;
    const bool with_pem = cfg.train.loss_set.count(LossKind::pem) > 0;
    if (with_pem) {
        if (prompter_path.empty() || bank_path.empty()) {
            throw InputError("pretrain: the pem loss needs --prompter and --bank");
        }
        prompter.emplace(load_prompter(prompter_path));
        video_bank.emplace(load_prompt_bank(bank_path));
        if (!image_bank_path.empty()) image_bank.emplace(load_prompt_bank(image_bank_path));
    }

    TrainState state = [&] {
        if (!resume_path.empty()) return load_checkpoint(resume_path);
        const std::size_t m = video_bank ? video_bank->entities.size() : 0;
        return make_train_state(cfg, corpus, m);
    }();

    const auto history =
        pretrain(state, corpus, prompter ? &prompter->model : nullptr,
                 video_bank ? &*video_bank : nullptr, image_bank ? &*image_bank : nullptr,
                 (fs::path(args.out_dir) / "metrics.jsonl").string());
    const std::string ckpt = (fs::path(args.out_dir) / "pretrain.ckpt").string();
    save_checkpoint(state, ckpt);
    std::cout << "pretrain: " << state.step << " steps, losses "
              << loss_set_str(cfg.train.loss_set) << ", final total "
              << (history.empty() ? 0.0 : history.back().total) << " -> " << ckpt << "\n";
    return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& data_dir,
                 const std::string& init_path, bool qa) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    fs::create_directories(args.out_dir);
    TrainState state = init_path.empty() ? make_train_state(cfg, corpus, 0)
                                         : load_checkpoint(init_path);
    // finetuning starts a fresh schedule with the requested hyperparameters
    state.cfg.train = cfg.train;
    state.step = 0;
    state.schedule = ScheduleConfig{cfg.train.peak_lr, cfg.train.warmup_ratio, cfg.train.steps};
    state.m1.clear();
    state.m2.clear();

    const std::string metrics = (fs::path(args.out_dir) / "metrics.jsonl").string();
    const auto history =
        qa ? finetune_qa(state, corpus, metrics) : finetune_retrieval(state, corpus, metrics);
    const std::string name = qa ? "finetune_qa.ckpt" : "finetune_retrieval.ckpt";
    const std::string ckpt = (fs::path(args.out_dir) / name).string();
    save_checkpoint(state, ckpt);
    std::cout << (qa ? "finetune-qa: " : "finetune-retrieval: ") << state.step
              << " steps, final loss " << (history.empty() ? 0.0 : history.back().total)
              << " -> " << ckpt << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& data_dir, const std::string& ckpt_path,
             const std::string& split_name_arg) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    TrainState state = load_checkpoint(ckpt_path);
    const Split split = split_from_name(split_name_arg);
    const Scorer scorer = scorer_from_name(cfg.eval.scorer);
    fs::create_directories(args.out_dir);

    const EvalOutcome outcome = run_retrieval_eval(state, corpus, split, scorer);
    std::ostringstream text;
    text << "retrieval (" << cfg.eval.scorer << ", " << split_name_arg << ")\n"
         << "R@1  " << outcome.report.r1 << "\nR@5  " << outcome.report.r5 << "\nR@10 "
         << outcome.report.r10 << "\nMdR  " << outcome.report.mdr << "\n";

    std::ostringstream records;
    nlohmann::json header;
    header["type"] = "config";
    header["config"] = cfg.to_text();
    records << header.dump() << '\n';
    auto emit = [&](const char* metric, double value) {
        nlohmann::json j;
        j["metric"] = metric;
        j["value"] = value;
        j["split"] = split_name_arg;
        j["scorer"] = cfg.eval.scorer;
        records << j.dump() << '\n';
    };
    emit("R1", outcome.report.r1);
    emit("R5", outcome.report.r5);
    emit("R10", outcome.report.r10);
    emit("MdR", outcome.report.mdr);

    double acc = -1.0;
    if (state.model.answer_count() > 0) {
        const QaEval qa = qa_predict(state, corpus, split);
        if (!qa.predictions.empty()) {
            acc = qa_accuracy(qa.predictions, qa.gold);
            text << "QA accuracy " << acc << "\n";
            emit("Acc", acc);
        }
    }

    write_text((fs::path(args.out_dir) / "report.txt").string(), text.str());
    write_text((fs::path(args.out_dir) / "report.jsonl").string(), records.str());
    std::cout << "eval: R@1 " << outcome.report.r1 << " R@5 " << outcome.report.r5 << " R@10 "
              << outcome.report.r10 << " MdR " << outcome.report.mdr;
    if (acc >= 0.0) std::cout << " Acc " << acc;
    std::cout << " -> " << args.out_dir << "\n";
    return 0;
}

int cmd_grad_check(const CommonArgs& args) {
    Config cfg = resolve_config(args);
    // the loss-level slice of the gradient suite; the acceptance binary runs
    // the full per-primitive sweep
    ModelConfig mc;
    mc.d = 8;
    mc.heads = 2;
    mc.frame_size = 16;
    mc.patch_size = 8;
    mc.max_frames = 2;
    mc.max_text = 4;
    mc.proj_dim = 4;
    mc.vocab_size = 12;
    mc.video_layers = 2;
    mc.text_layers = 1;
    mc.mm_layers = 1;
    Model model(mc, 3);
    init_params(model.params(), cfg.seed);
    Rng rng(cfg.seed);

    FrameArray f1{2, 16, 16, 3, {}}, f2{2, 16, 16, 3, {}};
    f1.data.resize(2 * 16 * 16 * 3);
    f2.data.resize(2 * 16 * 16 * 3);
    for (double& v : f1.data) v = rng.uniform();
    for (double& v : f2.data) v = rng.uniform();
    const std::vector<int> ids1{1, 5, 6, 0, 0}, ids2{1, 7, 8, 9, 0};

    std::vector<Tensor*> checked{
        &model.params().at("proj_v.weight"),    &model.params().at("log_tau"),
        &model.params().at("vtm_head.weight"),  &model.params().at("pem_head.fc2.weight"),
        &model.params().at("mlm_head.bias"),    &model.params().at("video.norm.gain"),
        &model.params().at("text.norm.bias"),
    };

    auto build = [&](Graph& g) {
        BoundParams bp(g, model.params());
        EmbeddingSequence v1 = model.encode_video(g, bp, f1);
        EmbeddingSequence v2 = model.encode_video(g, bp, f2);
        EmbeddingSequence t1 = model.encode_text(g, bp, ids1);
        EmbeddingSequence t2 = model.encode_text(g, bp, ids2);
        std::vector<Var> vp{model.project(g, bp, v1.cls, Modality::video),
                            model.project(g, bp, v2.cls, Modality::video)};
        std::vector<Var> tp{model.project(g, bp, t1.cls, Modality::text),
                            model.project(g, bp, t2.cls, Modality::text)};
        SimilarityMatrix sim = similarity_matrix(vp, tp, bp("log_tau"));
        EmbeddingSequence mm11 = model.encode_multimodal(g, bp, v1, t1);
        EmbeddingSequence mm22 = model.encode_multimodal(g, bp, v2, t2);
        EmbeddingSequence mm12 = model.encode_multimodal(g, bp, v1, t2);
        Var pooled = crop_pool(mm11, {0, 0, 16, 16}, mc);
        const std::vector<double> q{0.5, 0.25, 0.25};
        std::vector<Var> pos{mm11.cls, mm22.cls};
        std::vector<Var> neg{mm12.cls};
        return std::vector<Var>{vtc_loss(sim), pem_loss(g, bp, pooled, q),
                                mlm_loss(g, bp, mm22, std::vector<std::size_t>{1, 2},
                                         std::vector<int>{4, 5}),
                                vtm_loss(g, bp, pos, neg)};
    };

    const char* names[] = {"vtc", "pem", "mlm", "vtm", "total"};
    bool ok = true;
    for (int which = 0; which < 5; ++which) {
        const double err = grad_check(
            [&](Graph& g) {
                auto losses = build(g);
                return which < 4 ? losses[static_cast<std::size_t>(which)] : total_loss(losses);
            },
            std::span<Tensor* const>(checked), 1e-4);
        std::cout << "grad-check " << names[which] << ": max relative error " << err
                  << (err < 1e-4 ? " (pass)" : " (FAIL)") << "\n";
        ok = ok && err < 1e-4;
    }
    return ok ? 0 : 2;
}

int cmd_ablate(const CommonArgs& args, const std::string& data_dir, bool with_qa) {
    Config cfg = resolve_config(args);
    Corpus corpus = read_corpus(data_dir);
    fs::create_directories(args.out_dir);

    // one frozen prompter and bank shared by the subsets that use PEM
    PrompterModel prompter = train_prompter(corpus, cfg);
    EntityVocabulary vocab = corpus_entities(corpus, cfg, "");
    PromptBank bank = build_prompt_bank(vocab, default_templates().video, PromptModality::video,
                                        prompter, corpus.tokenizer, cfg.train.ensemble);

    const std::vector<std::pair<std::string, std::set<LossKind>>> subsets{
        {"MLM + VTM", {LossKind::mlm, LossKind::vtm}},
        {"MLM + VTM + PEM", {LossKind::mlm, LossKind::vtm, LossKind::pem}},
        {"MLM + VTM + VTC", {LossKind::mlm, LossKind::vtm, LossKind::vtc}},
        {"MLM + VTM + PEM + VTC",
         {LossKind::mlm, LossKind::vtm, LossKind::pem, LossKind::vtc}},
    };

    std::vector<AblationRow> rows;
    for (const auto& [name, losses] : subsets) {
        Config run_cfg = cfg;
        run_cfg.train.loss_set = losses;
        TrainState state = make_train_state(run_cfg, corpus, vocab.size());
        TrainLoopOptions opt;
        opt.loss_set = losses;
        if (losses.count(LossKind::pem)) {
            opt.prompter = &prompter;
            opt.video_bank = &bank;
        }
        run_training(state, corpus, opt);

        AblationRow row;
        row.name = name;
        const EvalOutcome zs = run_retrieval_eval(state, corpus, Split::test, Scorer::vtc);
        row.r1 = zs.report.r1;
        row.r5 = zs.report.r5;
        row.r10 = zs.report.r10;
        row.mdr = zs.report.mdr;
        if (with_qa && !corpus.answer_vocab.empty()) {
            TrainState qa_state = state;
            finetune_qa(qa_state, corpus);
            const QaEval qa = qa_predict(qa_state, corpus, Split::test);
            if (!qa.predictions.empty()) row.acc = qa_accuracy(qa.predictions, qa.gold);
        }
        rows.push_back(row);
        std::cout << "ablate: finished " << name << "\n";
    }

    const std::string table = ablation_table(rows);
    write_text((fs::path(args.out_dir) / "ablation.txt").string(), table);
    write_text((fs::path(args.out_dir) / "ablation.jsonl").string(),
               "{\"type\":\"config\",\"config\":" + nlohmann::json(cfg.to_text()).dump() +
                   "}\n" + ablation_records(rows));
    std::cout << table;
    std::cout << "ablate: wrote " << args.out_dir << "/ablation.txt\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video-language pre-training with entity prompts"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string data_dir, prompter_path, bank_path, image_bank_path, resume_path;
    std::string templates_path, lexicon_path, modality = "video", split = "test";
    std::string ckpt_path, init_path;
    bool with_qa = false;

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic corpus");
    add_common(synth, args);

    auto* trainp = app.add_subcommand("train-prompter", "contrastive prompter training");
    add_common(trainp, args);
    trainp->add_option("--data", data_dir, "corpus directory")->required();

    auto* bankc = app.add_subcommand("build-bank", "ensemble prompt embeddings per entity");
    add_common(bankc, args);
    bankc->add_option("--data", data_dir, "corpus directory")->required();
    bankc->add_option("--prompter", prompter_path, "frozen prompter checkpoint")->required();
    bankc->add_option("--templates", templates_path, "template file ([video]/[image] sections)");
    bankc->add_option("--lexicon", lexicon_path, "noun lexicon file");
    bankc->add_option("--modality", modality, "video|image");

    auto* labels = app.add_subcommand("gen-pseudolabels", "export crop pseudo-labels");
    add_common(labels, args);
    labels->add_option("--data", data_dir, "corpus directory")->required();
    labels->add_option("--prompter", prompter_path, "frozen prompter checkpoint")->required();
    labels->add_option("--bank", bank_path, "prompt bank file")->required();

    auto* pre = app.add_subcommand("pretrain", "train with the configured loss subset");
    add_common(pre, args);
    pre->add_option("--data", data_dir, "corpus directory")->required();
    pre->add_option("--prompter", prompter_path, "frozen prompter checkpoint");
    pre->add_option("--bank", bank_path, "video prompt bank");
    pre->add_option("--image-bank", image_bank_path, "image prompt bank");
    pre->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* ft_ret = app.add_subcommand("finetune-retrieval", "VTC+VTM finetuning");
    add_common(ft_ret, args);
    ft_ret->add_option("--data", data_dir, "corpus directory")->required();
    ft_ret->add_option("--init", init_path, "initial checkpoint");

    auto* ft_qa = app.add_subcommand("finetune-qa", "answer-classification finetuning");
    add_common(ft_qa, args);
    ft_qa->add_option("--data", data_dir, "corpus directory")->required();
    ft_qa->add_option("--init", init_path, "initial checkpoint");

    auto* ev = app.add_subcommand("eval", "retrieval metrics and QA accuracy");
    add_common(ev, args);
    ev->add_option("--data", data_dir, "corpus directory")->required();
    ev->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
    ev->add_option("--split", split, "train|val|test");

    auto* gc = app.add_subcommand("grad-check", "finite-difference audit of the losses");
    add_common(gc, args);

    auto* ab = app.add_subcommand("ablate", "run the four loss subsets end to end");
    add_common(ab, args);
    ab->add_option("--data", data_dir, "corpus directory")->required();
    ab->add_flag("--with-qa", with_qa, "also finetune and score QA per subset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth_data(args);
        if (trainp->parsed()) return cmd_train_prompter(args, data_dir);
        if (bankc->parsed()) {
            if (modality != "video" && modality != "image") {
                throw InputError("--modality must be video or image");
            }
            return cmd_build_bank(args, data_dir, prompter_path, templates_path, lexicon_path,
                                  modality);
        }
        if (labels->parsed()) return cmd_gen_pseudolabels(args, data_dir, prompter_path, bank_path);
        if (pre->parsed()) {
            return cmd_pretrain(args, data_dir, prompter_path, bank_path, image_bank_path,
                                resume_path);
        }
        if (ft_ret->parsed()) return cmd_finetune(args, data_dir, init_path, false);
        if (ft_qa->parsed()) return cmd_finetune(args, data_dir, init_path, true);
        if (ev->parsed()) return cmd_eval(args, data_dir, ckpt_path, split);
        if (gc->parsed()) return cmd_grad_check(args);
        if (ab->parsed()) return cmd_ablate(args, data_dir, with_qa);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
