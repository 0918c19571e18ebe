#pragma once

// Experiment orchestration: configuration, run directories, the six
// pipeline commands and metric/report emission.

#include "d2l/distill.hpp"
#include "d2l/hypernet.hpp"
#include "d2l/tasks.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <functional>
#include <string>
#include <vector>

namespace d2l {

struct PretrainConfig {
    int steps = 1500;
    float lr = 3e-3f;
    int batch_tokens = 2048;
    float context_loss_weight = 0.1f;
    int corpus_size = 20000;
    int min_len = 32;
    int max_len = 256;
    std::uint64_t seed = 3;
    // Optional second phase on longer haystacks, continuing from phase one.
    int extend_steps = 600;
    float extend_lr = 1e-3f;
    int extend_batch_tokens = 4096;
    int extend_corpus_size = 5000;
    int extend_max_len = 1900;
};

struct DataConfig {
    int n_contexts = 8000;
    int min_len = 32;
    int max_len = 256;
    int needle_digits = 4;
    int topk = 16;
    int max_new = 6;
    std::uint64_t seed = 7;
};

struct EvalConfig {
    std::vector<int> lengths = {32, 64, 128, 256, 512, 1024, 2048, 4096, 8192};
    int n_per_length = 50;
    std::uint64_t seed = 1234;
    std::vector<std::string> methods = {"in_context", "hypernet-batched", "hypernet-iterative",
                                        "cd-oracle",  "cd-generated-q",   "hyperkv"};
    // Gradient-descent baselines are costly: fewer instances, bounded lengths.
    int cd_n_per_length = 3;
    int cd_max_length = 256;
    int cd_steps = 200;
    float cd_lr = 0.5f;
    int cd_rank = 8;
    int n_generated_queries = 10;
    int latency_repeats = 5;
};

struct ExperimentConfig {
    std::string name = "default";
    std::string run_dir;       // empty: $D2L_RUN_DIR/<name>, else runs/<name>
    std::string teacher_path;  // empty: <run_dir>/teacher.d2lt
    std::string data_path;     // empty: <run_dir>/data/meta.jsonl
    std::string loss = "kl";
    bool resume = true;
    LMConfig lm;
    PretrainConfig pretrain;
    HypernetConfig hypernet;
    TrainSchedule schedule;
    DataConfig data;
    EvalConfig eval;

    // Every problem found, one per entry, prefixed with the dotted field name.
    std::vector<std::string> problems() const;
    void validate() const;  // ConfigError listing all problems
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

// Parses a config document, rejecting unknown keys and mistyped values with
// a ConfigError that lists every offending field.
ExperimentConfig parse_experiment(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::string& path);
// "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

std::string resolve_run_dir(const ExperimentConfig& c);
std::string teacher_path(const ExperimentConfig& c);
std::string data_path(const ExperimentConfig& c);
std::string hypernet_path(const ExperimentConfig& c);

// ---------------------------------------------------------------------------

struct LatencyStats {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    int n = 0;
};

// Runs fn once as warm-up (excluded), then `repeats` timed runs on a
// monotonic clock. std is the sample standard deviation (0 for one run).
LatencyStats measure_update_latency(const std::function<void()>& fn, int repeats);

constexpr int kMetricsSchemaVersion = 1;

struct MetricsRow {
    std::string method;
    int length = 0;
    int n = 0;
    double accuracy = 0.0;
    double latency_ms_mean = 0.0;
    double latency_ms_std = 0.0;
    std::uint64_t update_memory_bytes = 0;
    std::uint64_t inference_footprint_bytes = 0;
    bool truncated = false;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);  // FormatError on schema mismatch
nlohmann::json metrics_json(const std::vector<MetricsRow>& rows);

// Analytic accounting (bytes, f32).
std::uint64_t icl_footprint(const LMConfig& c, int haystack_tokens, int query_tokens, int max_new);
std::uint64_t internalized_footprint(const LMConfig& c, int prefix_tokens, int query_tokens, int max_new);
std::uint64_t hypernet_update_memory(const HypernetParams& hp, int context_tokens);
std::uint64_t cd_update_memory(const LMConfig& c, const CdOptions& opts, int student_tokens);

// ---------------------------------------------------------------------------
// Dataset files.

nlohmann::json sample_to_json(const DistillSample& s, const nlohmann::json& meta);
DistillSample sample_from_json(const nlohmann::json& j);
void write_meta_dataset(const std::string& path, const MetaDataset& ds, const std::vector<nlohmann::json>& meta);
MetaDataset read_meta_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// Commands. Each writes config.json into the run directory first.

struct CommandContext {
    const std::atomic<bool>* interrupt = nullptr;
    std::function<void(const std::string&)> log;  // progress lines; default stderr
};

struct PretrainResult {
    TinyLMParams params;
    double wall_seconds = 0.0;
};
PretrainResult cmd_pretrain_lm(const ExperimentConfig& c, const CommandContext& ctx = {});

struct GenDataResult {
    int count = 0;
    int teacher_mismatches = 0;  // self-responses that differ from the gold needle
    std::string file_hash;
};
GenDataResult cmd_gen_data(const ExperimentConfig& c, const CommandContext& ctx = {});

struct MetaTrainRun {
    HypernetParams params;
    int steps_done = 0;
    bool interrupted = false;
    double wall_seconds = 0.0;
    double first_loss = 0.0;
    double stage1_final_loss = 0.0;  // mean of the last 50 stage-1 steps
};
MetaTrainRun cmd_meta_train(const ExperimentConfig& c, const CommandContext& ctx = {});

std::vector<MetricsRow> cmd_cd_baseline(const ExperimentConfig& c, const CommandContext& ctx = {});
std::vector<MetricsRow> cmd_eval(const ExperimentConfig& c, const CommandContext& ctx = {});

// Merges metrics.csv from run directories into one table (method prefixed by
// the run name); refuses inputs with a different schema version.
std::vector<MetricsRow> cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

// FNV-1a of a file's bytes as 16 hex digits.
std::string file_hash(const std::string& path);

}  // namespace d2l
