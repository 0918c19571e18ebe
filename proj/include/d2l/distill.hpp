#pragma once

// Distillation objectives and training loops: truncated-support KL, cross
// entropy, gradient-descent context distillation baselines and meta-training
// of the hypernetwork.

#include "d2l/autograd.hpp"
#include "d2l/hypernet.hpp"
#include "d2l/optim.hpp"
#include "d2l/target_lm.hpp"

#include <atomic>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace d2l {

// One teacher distribution per response position.
struct TopKTargetRecord {
    std::vector<ops::SparseDistribution> positions;  // logits sorted descending, ids unique
    std::vector<int> response;                       // response token ids (aligned with positions)
    void validate() const;
};

// Top-k logits per row; ties broken by lowest token id; k >= vocab keeps all.
TopKTargetRecord topk_targets(const Matrix& teacher_logits, int k);

// Mean over positions of KL(p_teacher || p_student), both renormalised over
// the teacher's top-k token set.
double kl_loss(const TopKTargetRecord& targets, const Matrix& student_logits);
// Mean negative log-likelihood of gold tokens.
double ce_loss(const Matrix& student_logits, std::span<const int> gold);

struct DistillSample {
    std::vector<int> context;   // context tokens (no BOS)
    std::vector<int> query;     // query tokens (no BOS)
    std::vector<int> response;  // response tokens, EOS included when generated
    TopKTargetRecord targets;
    bool teacher_generated = true;
    void validate() const;
};

// Student sequence BOS query "\n" response and the row index in its logits
// that predicts response[0].
std::vector<int> student_sequence(const DistillSample& s, int* first_response_row = nullptr);

struct MetaContext {
    std::vector<int> context;
    std::vector<DistillSample> samples;
};

struct MetaDataset {
    std::vector<MetaContext> contexts;
    int packing_budget = 4096;  // context tokens per step
    void validate() const;
};

enum class LossKind { kl, ntp };
std::string to_string(LossKind k);
LossKind loss_kind_from_string(std::string_view s);

struct TrainSchedule {
    int stage1_steps = 8000;  // single-chunk plans
    int stage2_steps = 2000;  // sampled chunk plans
    float lr = 1e-3f;
    int batch_context_tokens = 4096;
    int max_batch_contexts = 32;
    int samples_per_context = 1;
    int max_chunks = 8;
    float warmup_frac = 0.03f;
    float grad_clip = 1.0f;
    float weight_decay = 0.0f;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 = never
    void validate() const;
};

struct TrainLogRow {
    int step = 0;
    int stage = 1;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct MetaTrainHooks {
    std::function<void(const TrainLogRow&)> on_step;
    // Called after step `step` completes (steps_done = step + 1) every
    // checkpoint_every steps, and once when interrupted.
    std::function<void(int steps_done, const HypernetParams&, const Adam&)> on_checkpoint;
    const std::atomic<bool>* interrupt = nullptr;
    int start_step = 0;                   // resume point
    std::optional<Adam> resume_optimizer;  // optimizer state at start_step
};

struct MetaTrainResult {
    HypernetParams params;
    Adam optimizer;
    int steps_done = 0;
    bool interrupted = false;
    std::vector<TrainLogRow> log;
};

// One sampled training item: a context, its chunk plan and the samples whose
// answers the generated adapter is trained on.
struct MetaBatchItem {
    const MetaContext* context = nullptr;
    ChunkPlan plan;
    std::vector<const DistillSample*> samples;
};

// Builds the differentiable batch loss: frozen-model chunk encoding,
// hypernetwork generation, packed student forward with one adapter slot per
// item. Equals the mean over samples of each sample's per-token mean loss.
Var meta_batch_loss(Tape& tape, const HypernetGraph& hg, const LmGraph& lm, std::span<const MetaBatchItem> items,
                    LossKind loss, GenerationMode mode);

MetaTrainResult meta_train(const HypernetParams& init, const TinyLMParams& lm, const MetaDataset& dataset,
                           const TrainSchedule& schedule, LossKind loss, const MetaTrainHooks& hooks = {});

// Loss of the student on a set of samples with one adapter per (context) slot;
// used for tests and evaluation.
double meta_loss(const HypernetParams& hp, const TinyLMParams& lm, std::span<const MetaContext> contexts,
                 LossKind loss, GenerationMode mode);

// ---------------------------------------------------------------------------
// Gradient-descent context distillation baselines.

struct CdOptions {
    int steps = 200;
    float lr = 0.5f;
    int rank = 8;
    float alpha = 1.0f;
    float init_scale = 0.01f;  // std of A at init; B starts at zero
    std::vector<std::string> modules = {"mlp.down"};
    std::uint64_t seed = 0;
    std::function<void(int step, double loss)> on_step;
};

// Optimises only the adapter (plain gradient descent) so that the student
// without context matches the teacher-with-context targets, averaged over samples.
LoraAdapter run_cd(const TinyLMParams& lm, std::span<const DistillSample> samples, const CdOptions& opts);

// Oracle: the teacher answers the given query with the context, then run_cd on that single pair.
LoraAdapter run_oracle_cd(const TinyLMParams& lm, std::string_view context, std::string_view query,
                          const CdOptions& opts, int max_new = 8, int k = 16);

// Zero-B adapter at the CD initialisation.
LoraAdapter init_cd_adapter(const LMConfig& c, const CdOptions& opts);

// Mean KL of the student-with-adapter over the samples.
double cd_objective(const TinyLMParams& lm, const LoraAdapter& adapter, std::span<const DistillSample> samples);

}  // namespace d2l
