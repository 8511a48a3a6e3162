#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vlp/config.hpp"
#include "vlp/data.hpp"
#include "vlp/encoders.hpp"
#include "vlp/prompter.hpp"

namespace vlp {

struct ScheduleConfig {
    double peak_lr = 1e-4;
    double warmup_ratio = 0.1;
    std::size_t total_steps = 0;
};

/// Linear warmup from 0 to peak over the first warmup_ratio fraction of
/// total_steps, then linear decay from peak to 0 at total_steps.
double lr_at(std::size_t step, const ScheduleConfig& cfg);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 1e-3;
};

/// True for biases, layer-norm parameters and the temperature, which are
/// exempt from weight decay.
bool weight_decay_exempt(const std::string& name);

/// One decoupled-decay AdamW step over every parameter of the store, with
/// bias-corrected moments. `step_index` is 1-based. Missing gradients count
/// as zeros; a non-finite gradient aborts the step before any update.
void adamw_update(ParamStore& params, std::map<std::string, std::vector<double>>& m1,
                  std::map<std::string, std::vector<double>>& m2, std::size_t step_index,
                  double lr, const AdamWConfig& cfg);

/// Everything checkpointing round-trips: parameters, moments, step counter,
/// schedule, seed, and the frozen prompter's identity.
struct TrainState {
    Config cfg;
    std::vector<std::string> vocab_words;
    Tokenizer tokenizer;
    Model model;
    std::map<std::string, std::vector<double>> m1, m2;
    std::uint64_t step = 0;
    ScheduleConfig schedule;
    std::uint64_t seed = 42;
    std::uint64_t prompter_fingerprint = 0;
    double tau_p = 0.07;
};

/// Fresh state for the given corpus; entity_count sizes the PEM head and
/// answer_count the QA head.
TrainState make_train_state(const Config& cfg, const Corpus& corpus, std::size_t entity_count,
                            std::size_t answer_count = 0);

/// AdamW over the state's model with the configured schedule; also clamps
/// log_tau so tau stays inside [1e-3, 0.5].
void adamw_step(TrainState& state, double lr);

/// Rebuilds the model with a QA head of the given width, preserving every
/// existing parameter and its optimizer moments.
void add_qa_head(TrainState& state, std::size_t answer_count);

/// Interpolates the temporal position table to `frames` and updates the
/// model's frame capacity (moments for the table are reset).
void set_frame_count(TrainState& state, std::size_t frames);

struct TrainLoopOptions {
    std::set<LossKind> loss_set;
    bool qa_mode = false;
    const PrompterModel* prompter = nullptr;
    const PromptBank* video_bank = nullptr;
    const PromptBank* image_bank = nullptr;
    std::string metrics_path;    // empty disables the metrics log
    std::size_t step_limit = 0;  // stop after this many steps (0 = run to the end)
};

struct StepMetrics {
    std::uint64_t step = 0;
    double lr = 0.0;
    double l_vtc = 0.0, l_pem = 0.0, l_mlm = 0.0, l_vtm = 0.0, l_qa = 0.0;
    double total = 0.0;
    std::size_t pem_skipped = 0;
};

/// Runs training from state.step to schedule.total_steps; returns the metric
/// rows in step order.
std::vector<StepMetrics> run_training(TrainState& state, const Corpus& corpus,
                                      const TrainLoopOptions& options);

/// Eq.-style pre-training over the configured loss subset; PEM requires the
/// frozen prompter and its bank(s).
std::vector<StepMetrics> pretrain(TrainState& state, const Corpus& corpus,
                                  const PrompterModel* prompter, const PromptBank* video_bank,
                                  const PromptBank* image_bank,
                                  const std::string& metrics_path = "");

/// Retrieval finetuning: VTC + VTM only, reusing the matching head.
std::vector<StepMetrics> finetune_retrieval(TrainState& state, const Corpus& corpus,
                                            const std::string& metrics_path = "");

/// QA finetuning: answer cross-entropy through an MLP on the multimodal CLS.
std::vector<StepMetrics> finetune_qa(TrainState& state, const Corpus& corpus,
                                     const std::string& metrics_path = "");

/// Trains the prompter's towers with the contrastive loss only and freezes
/// them; uses the prompter model config and the shared train hyperparameters.
PrompterModel train_prompter(const Corpus& corpus, const Config& cfg,
                             const std::string& metrics_path = "",
                             std::vector<StepMetrics>* metrics_out = nullptr);

// checkpoint io ("ALPR" container, CRC-64 tail)
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);
void save_prompter(const PrompterModel& prompter, const Config& cfg,
                   const std::vector<std::string>& vocab_words, const std::string& path);
struct LoadedPrompter {
    PrompterModel model;
    Config cfg;
    std::vector<std::string> vocab_words;
};
LoadedPrompter load_prompter(const std::string& path);

}  // namespace vlp
