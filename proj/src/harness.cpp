#include "d2l/harness.hpp"

#include "d2l/checkpoint.hpp"
#include "d2l/tokenizer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iomanip>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace d2l {

// ---------------------------------------------------------------------------
// Configuration.

namespace {

nlohmann::json schedule_json(const TrainSchedule& s) {
    return {{"stage1_steps", s.stage1_steps},
            {"stage2_steps", s.stage2_steps},
            {"lr", short_float(s.lr)},
            {"batch_context_tokens", s.batch_context_tokens},
            {"max_batch_contexts", s.max_batch_contexts},
            {"samples_per_context", s.samples_per_context},
            {"max_chunks", s.max_chunks},
            {"warmup_frac", short_float(s.warmup_frac)},
            {"grad_clip", short_float(s.grad_clip)},
            {"weight_decay", short_float(s.weight_decay)},
            {"seed", s.seed},
            {"checkpoint_every", s.checkpoint_every}};
}

void schedule_from(const nlohmann::json& j, TrainSchedule& s) {
    s.stage1_steps = j.value("stage1_steps", s.stage1_steps);
    s.stage2_steps = j.value("stage2_steps", s.stage2_steps);
    s.lr = j.value("lr", s.lr);
    s.batch_context_tokens = j.value("batch_context_tokens", s.batch_context_tokens);
    s.max_batch_contexts = j.value("max_batch_contexts", s.max_batch_contexts);
    s.samples_per_context = j.value("samples_per_context", s.samples_per_context);
    s.max_chunks = j.value("max_chunks", s.max_chunks);
    s.warmup_frac = j.value("warmup_frac", s.warmup_frac);
    s.grad_clip = j.value("grad_clip", s.grad_clip);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    s.seed = j.value("seed", s.seed);
    s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
}

nlohmann::json pretrain_json(const PretrainConfig& p) {
    return {{"steps", p.steps},           {"lr", short_float(p.lr)},
            {"batch_tokens", p.batch_tokens}, {"context_loss_weight", short_float(p.context_loss_weight)},
            {"corpus_size", p.corpus_size}, {"min_len", p.min_len},
            {"max_len", p.max_len},       {"seed", p.seed},
            {"extend_steps", p.extend_steps}, {"extend_lr", short_float(p.extend_lr)},
            {"extend_batch_tokens", p.extend_batch_tokens}, {"extend_corpus_size", p.extend_corpus_size},
            {"extend_max_len", p.extend_max_len}};
}

void pretrain_from(const nlohmann::json& j, PretrainConfig& p) {
    p.steps = j.value("steps", p.steps);
    p.lr = j.value("lr", p.lr);
    p.batch_tokens = j.value("batch_tokens", p.batch_tokens);
    p.context_loss_weight = j.value("context_loss_weight", p.context_loss_weight);
    p.corpus_size = j.value("corpus_size", p.corpus_size);
    p.min_len = j.value("min_len", p.min_len);
    p.max_len = j.value("max_len", p.max_len);
    p.seed = j.value("seed", p.seed);
    p.extend_steps = j.value("extend_steps", p.extend_steps);
    p.extend_lr = j.value("extend_lr", p.extend_lr);
    p.extend_batch_tokens = j.value("extend_batch_tokens", p.extend_batch_tokens);
    p.extend_corpus_size = j.value("extend_corpus_size", p.extend_corpus_size);
    p.extend_max_len = j.value("extend_max_len", p.extend_max_len);
}

nlohmann::json data_json(const DataConfig& d) {
    return {{"n_contexts", d.n_contexts}, {"min_len", d.min_len}, {"max_len", d.max_len},
            {"needle_digits", d.needle_digits}, {"topk", d.topk}, {"max_new", d.max_new},
            {"seed", d.seed}};
}

void data_from(const nlohmann::json& j, DataConfig& d) {
    d.n_contexts = j.value("n_contexts", d.n_contexts);
    d.min_len = j.value("min_len", d.min_len);
    d.max_len = j.value("max_len", d.max_len);
    d.needle_digits = j.value("needle_digits", d.needle_digits);
    d.topk = j.value("topk", d.topk);
    d.max_new = j.value("max_new", d.max_new);
    d.seed = j.value("seed", d.seed);
}

nlohmann::json eval_json(const EvalConfig& e) {
    return {{"lengths", e.lengths},
            {"n_per_length", e.n_per_length},
            {"seed", e.seed},
            {"methods", e.methods},
            {"cd_n_per_length", e.cd_n_per_length},
            {"cd_max_length", e.cd_max_length},
            {"cd_steps", e.cd_steps},
            {"cd_lr", short_float(e.cd_lr)},
            {"cd_rank", e.cd_rank},
            {"n_generated_queries", e.n_generated_queries},
            {"latency_repeats", e.latency_repeats}};
}

void eval_from(const nlohmann::json& j, EvalConfig& e) {
    e.lengths = j.value("lengths", e.lengths);
    e.n_per_length = j.value("n_per_length", e.n_per_length);
    e.seed = j.value("seed", e.seed);
    e.methods = j.value("methods", e.methods);
    e.cd_n_per_length = j.value("cd_n_per_length", e.cd_n_per_length);
    e.cd_max_length = j.value("cd_max_length", e.cd_max_length);
    e.cd_steps = j.value("cd_steps", e.cd_steps);
    e.cd_lr = j.value("cd_lr", e.cd_lr);
    e.cd_rank = j.value("cd_rank", e.cd_rank);
    e.n_generated_queries = j.value("n_generated_queries", e.n_generated_queries);
    e.latency_repeats = j.value("latency_repeats", e.latency_repeats);
}

const std::set<std::string> kMethods = {"in_context", "hypernet-batched", "hypernet-iterative",
                                        "cd-oracle",  "cd-generated-q",   "hyperkv"};

void check_types(const nlohmann::json& def, const nlohmann::json& in, const std::string& path,
                 std::vector<std::string>& bad) {
    if (!in.is_object()) {
        bad.push_back((path.empty() ? std::string("<root>") : path) + ": expected an object");
        return;
    }
    for (auto it = in.begin(); it != in.end(); ++it) {
        const std::string p = path.empty() ? it.key() : path + "." + it.key();
        if (!def.contains(it.key())) {
            bad.push_back(p + ": unknown field");
            continue;
        }
        const auto& d = def[it.key()];
        const auto& v = it.value();
        if (d.is_object()) {
            check_types(d, v, p, bad);
        } else if (d.is_boolean()) {
            if (!v.is_boolean()) bad.push_back(p + ": expected a boolean");
        } else if (d.is_number_integer()) {
            if (!v.is_number_integer()) bad.push_back(p + ": expected an integer");
        } else if (d.is_number()) {
            if (!v.is_number()) bad.push_back(p + ": expected a number");
        } else if (d.is_string()) {
            if (!v.is_string()) bad.push_back(p + ": expected a string");
        } else if (d.is_array()) {
            if (!v.is_array()) {
                bad.push_back(p + ": expected an array");
            } else if (!d.empty()) {
                for (const auto& e : v) {
                    if (d.front().is_string() != e.is_string() || d.front().is_number() != e.is_number()) {
                        bad.push_back(p + ": array element of the wrong type");
                        break;
                    }
                }
            }
        }
    }
}

template <typename F>
void collect(std::vector<std::string>& bad, const std::string& prefix, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        const std::string msg = e.what();
        bad.push_back(msg.rfind(prefix, 0) == 0 ? msg : prefix + ": " + msg);
    }
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = nlohmann::json{{"name", c.name},
                       {"run_dir", c.run_dir},
                       {"teacher_path", c.teacher_path},
                       {"data_path", c.data_path},
                       {"loss", c.loss},
                       {"resume", c.resume},
                       {"lm", c.lm},
                       {"pretrain", pretrain_json(c.pretrain)},
                       {"hypernet", c.hypernet},
                       {"schedule", schedule_json(c.schedule)},
                       {"data", data_json(c.data)},
                       {"eval", eval_json(c.eval)}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    c.run_dir = j.value("run_dir", c.run_dir);
    c.teacher_path = j.value("teacher_path", c.teacher_path);
    c.data_path = j.value("data_path", c.data_path);
    c.loss = j.value("loss", c.loss);
    c.resume = j.value("resume", c.resume);
    if (j.contains("lm")) {
        nlohmann::json m = nlohmann::json(c.lm);
        m.update(j["lm"]);
        c.lm = m.get<LMConfig>();
    }
    if (j.contains("pretrain")) pretrain_from(j["pretrain"], c.pretrain);
    if (j.contains("hypernet")) c.hypernet = j["hypernet"].get<HypernetConfig>();
    if (j.contains("schedule")) schedule_from(j["schedule"], c.schedule);
    if (j.contains("data")) data_from(j["data"], c.data);
    if (j.contains("eval")) eval_from(j["eval"], c.eval);
    return c;
}

std::vector<std::string> ExperimentConfig::problems() const {
    std::vector<std::string> bad;
    if (name.empty()) bad.push_back("name: must not be empty");
    if (loss != "kl" && loss != "ntp") bad.push_back("loss: must be \"kl\" or \"ntp\"");
    collect(bad, "lm", [&] { lm.validate(); });
    collect(bad, "hypernet", [&] { hypernet.validate(lm); });
    collect(bad, "schedule", [&] { schedule.validate(); });
    if (lm.vocab_size != Tokenizer::instance().vocab_size()) {
        bad.push_back("lm.vocab_size: must equal the tokenizer vocabulary (" +
                      std::to_string(Tokenizer::instance().vocab_size()) + ")");
    }
    if (pretrain.steps < 0) bad.push_back("pretrain.steps: must be >= 0");
    if (!(pretrain.lr > 0.0f)) bad.push_back("pretrain.lr: must be positive");
    if (pretrain.batch_tokens <= 0) bad.push_back("pretrain.batch_tokens: must be positive");
    if (pretrain.corpus_size <= 0) bad.push_back("pretrain.corpus_size: must be positive");
    if (pretrain.min_len < 1 || pretrain.min_len > pretrain.max_len) bad.push_back("pretrain.min_len: need 1 <= min_len <= max_len");
    if (pretrain.extend_steps < 0) bad.push_back("pretrain.extend_steps: must be >= 0");
    if (pretrain.extend_steps > 0) {
        if (!(pretrain.extend_lr > 0.0f)) bad.push_back("pretrain.extend_lr: must be positive");
        if (pretrain.extend_batch_tokens <= 0) bad.push_back("pretrain.extend_batch_tokens: must be positive");
        if (pretrain.extend_corpus_size <= 0) bad.push_back("pretrain.extend_corpus_size: must be positive");
        if (pretrain.extend_max_len < pretrain.min_len) bad.push_back("pretrain.extend_max_len: must be >= pretrain.min_len");
        if (pretrain.extend_max_len + 80 > lm.max_seq_len) bad.push_back("pretrain.extend_max_len: prompt would exceed lm.max_seq_len");
    }
    if (data.n_contexts <= 0) bad.push_back("data.n_contexts: must be positive");
    if (data.min_len < 1 || data.min_len > data.max_len) bad.push_back("data.min_len: need 1 <= min_len <= max_len");
    if (data.needle_digits < 1 || data.needle_digits > 9) bad.push_back("data.needle_digits: must be in 1..9");
    if (data.topk < 1) bad.push_back("data.topk: must be >= 1");
    if (data.max_new < 1) bad.push_back("data.max_new: must be >= 1");
    if (eval.lengths.empty()) bad.push_back("eval.lengths: must not be empty");
    for (int l : eval.lengths) {
        if (l < 1) {
            bad.push_back("eval.lengths: entries must be positive");
            break;
        }
    }
    if (eval.n_per_length < 1) bad.push_back("eval.n_per_length: must be >= 1");
    for (const auto& m : eval.methods) {
        if (!kMethods.count(m)) bad.push_back("eval.methods: unknown method " + m);
    }
    if (eval.cd_n_per_length < 1) bad.push_back("eval.cd_n_per_length: must be >= 1");
    if (eval.cd_steps < 0) bad.push_back("eval.cd_steps: must be >= 0");
    if (!(eval.cd_lr > 0.0f)) bad.push_back("eval.cd_lr: must be positive");
    if (eval.cd_rank < 1) bad.push_back("eval.cd_rank: must be >= 1");
    if (eval.n_generated_queries < 1) bad.push_back("eval.n_generated_queries: must be >= 1");
    if (eval.latency_repeats < 1) bad.push_back("eval.latency_repeats: must be >= 1");
    return bad;
}

void ExperimentConfig::validate() const {
    const auto bad = problems();
    if (bad.empty()) return;
    std::string msg = "invalid config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
}

ExperimentConfig parse_experiment(const nlohmann::json& j) {
    std::vector<std::string> bad;
    check_types(nlohmann::json(ExperimentConfig{}), j, "", bad);
    ExperimentConfig c;
    if (bad.empty()) {
        try {
            c = experiment_from_json(j);
        } catch (const nlohmann::json::exception& e) {
            bad.push_back(std::string("<root>: ") + e.what());
        } catch (const ConfigError& e) {
            bad.push_back(e.what());
        }
    }
    if (bad.empty()) {
        const auto sem = c.problems();
        bad.insert(bad.end(), sem.begin(), sem.end());
    }
    if (!bad.empty()) {
        std::string msg = "invalid config:";
        for (const auto& b : bad) msg += "\n  " + b;
        throw ConfigError(msg);
    }
    return c;
}

ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": not valid JSON: " + e.what());
    }
    return parse_experiment(j);
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string val = assignment.substr(eq + 1);
    nlohmann::json v;
    try {
        v = nlohmann::json::parse(val);
    } catch (const nlohmann::json::exception&) {
        v = val;
    }
    nlohmann::json* node = &j;
    std::size_t at = 0;
    while (true) {
        const auto dot = key.find('.', at);
        const std::string part = key.substr(at, dot == std::string::npos ? std::string::npos : dot - at);
        if (part.empty()) throw ConfigError("override has an empty key segment: " + assignment);
        if (dot == std::string::npos) {
            (*node)[part] = v;
            return;
        }
        if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
        node = &(*node)[part];
        at = dot + 1;
    }
}

std::string resolve_run_dir(const ExperimentConfig& c) {
    if (!c.run_dir.empty()) return c.run_dir;
    const char* env = std::getenv("D2L_RUN_DIR");
    return (fs::path(env && *env ? env : "runs") / c.name).string();
}

std::string teacher_path(const ExperimentConfig& c) {
    return c.teacher_path.empty() ? (fs::path(resolve_run_dir(c)) / "teacher.d2lt").string() : c.teacher_path;
}

std::string data_path(const ExperimentConfig& c) {
    return c.data_path.empty() ? (fs::path(resolve_run_dir(c)) / "data" / "meta.jsonl").string() : c.data_path;
}

std::string hypernet_path(const ExperimentConfig& c) { return (fs::path(resolve_run_dir(c)) / "hypernet.d2lt").string(); }

// ---------------------------------------------------------------------------
// Metrics.

LatencyStats measure_update_latency(const std::function<void()>& fn, int repeats) {
    if (repeats < 1) throw ConfigError("measure_update_latency: repeats must be >= 1");
    fn();
    std::vector<double> ms;
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    LatencyStats s;
    s.n = repeats;
    for (double v : ms) s.mean_ms += v;
    s.mean_ms /= repeats;
    if (repeats > 1) {
        double sq = 0.0;
        for (double v : ms) sq += (v - s.mean_ms) * (v - s.mean_ms);
        s.std_ms = std::sqrt(sq / (repeats - 1));
    }
    return s;
}

namespace {

constexpr const char* kCsvColumns =
    "method,length,n,accuracy,latency_ms_mean,latency_ms_std,update_memory_bytes,inference_footprint_bytes,truncated";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream o;
    o << "schema_version," << kMetricsSchemaVersion << "\n" << kCsvColumns << "\n";
    o << std::setprecision(10);
    for (const MetricsRow& r : rows) {
        if (r.method.find(',') != std::string::npos) throw FormatError("metrics: method id contains a comma");
        o << r.method << ',' << r.length << ',' << r.n << ',' << r.accuracy << ',' << r.latency_ms_mean << ','
          << r.latency_ms_std << ',' << r.update_memory_bytes << ',' << r.inference_footprint_bytes << ','
          << (r.truncated ? 1 : 0) << "\n";
    }
    return o.str();
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("metrics csv: empty");
    const auto ver = split_csv(line);
    if (ver.size() != 2 || ver[0] != "schema_version") throw FormatError("metrics csv: missing schema_version row");
    if (ver[1] != std::to_string(kMetricsSchemaVersion)) {
        throw FormatError("metrics csv: schema_version " + ver[1] + " != " + std::to_string(kMetricsSchemaVersion));
    }
    if (!std::getline(in, line) || line != kCsvColumns) throw FormatError("metrics csv: unexpected column header");
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split_csv(line);
        if (c.size() != 9) throw FormatError("metrics csv: expected 9 cells, got " + std::to_string(c.size()));
        try {
            MetricsRow r;
            r.method = c[0];
            r.length = std::stoi(c[1]);
            r.n = std::stoi(c[2]);
            r.accuracy = std::stod(c[3]);
            r.latency_ms_mean = std::stod(c[4]);
            r.latency_ms_std = std::stod(c[5]);
            r.update_memory_bytes = std::stoull(c[6]);
            r.inference_footprint_bytes = std::stoull(c[7]);
            r.truncated = c[8] == "1";
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw FormatError("metrics csv: malformed row: " + line);
        }
    }
    return rows;
}

nlohmann::json metrics_json(const std::vector<MetricsRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricsRow& r : rows) {
        arr.push_back({{"method", r.method},
                       {"length", r.length},
                       {"n", r.n},
                       {"accuracy", r.accuracy},
                       {"latency_ms_mean", r.latency_ms_mean},
                       {"latency_ms_std", r.latency_ms_std},
                       {"update_memory_bytes", r.update_memory_bytes},
                       {"inference_footprint_bytes", r.inference_footprint_bytes},
                       {"truncated", r.truncated}});
    }
    return {{"schema_version", kMetricsSchemaVersion}, {"rows", arr}};
}

std::uint64_t icl_footprint(const LMConfig& c, int haystack_tokens, int query_tokens, int max_new) {
    return kv_cache_footprint(static_cast<std::uint64_t>(haystack_tokens),
                              static_cast<std::uint64_t>(query_tokens + max_new), c, 4);
}

std::uint64_t internalized_footprint(const LMConfig& c, int prefix_tokens, int query_tokens, int max_new) {
    return kv_cache_footprint(static_cast<std::uint64_t>(prefix_tokens),
                              static_cast<std::uint64_t>(query_tokens + max_new), c, 4);
}

std::uint64_t hypernet_update_memory(const HypernetParams& hp, int context_tokens) {
    const HypernetConfig& c = hp.config;
    const std::uint64_t k = static_cast<std::uint64_t>(chunk_context(context_tokens, c.max_chunk_tokens).count());
    const std::uint64_t taps = static_cast<std::uint64_t>(required_lm_blocks(hp)) + 1;
    const std::uint64_t ctx = static_cast<std::uint64_t>(context_tokens) + k;  // BOS per chunk
    std::uint64_t floats = hp.parameter_count();
    floats += ctx * taps * static_cast<std::uint64_t>(hp.lm.d_model);  // frozen-model taps
    floats += ctx * static_cast<std::uint64_t>(c.d_proj_hidden + 3 * c.d_latent);  // projection + one block's K/V
    std::uint64_t out = 0;
    for (const HeadTarget& t : hp.targets()) {
        out += static_cast<std::uint64_t>(c.output_mode == OutputMode::lora ? t.d_in + t.d_out : t.d_out);
    }
    floats += k * static_cast<std::uint64_t>(c.n_latents) * out;
    return floats * 4;
}

std::uint64_t cd_update_memory(const LMConfig& c, const CdOptions& opts, int student_tokens) {
    std::uint64_t adapter = 0;
    for (const auto& m : opts.modules) {
        const auto [dout, din] = linear_shape(c, m);
        adapter += static_cast<std::uint64_t>(opts.rank) * static_cast<std::uint64_t>(din + dout);
    }
    adapter *= static_cast<std::uint64_t>(c.n_layers);
    const std::uint64_t t = static_cast<std::uint64_t>(student_tokens);
    // Values kept for backward per token and block, plus attention probabilities.
    const std::uint64_t per_tok = static_cast<std::uint64_t>(c.n_layers) * static_cast<std::uint64_t>(12 * c.d_model + 3 * c.d_mlp);
    const std::uint64_t probs = static_cast<std::uint64_t>(c.n_layers) * static_cast<std::uint64_t>(c.n_heads) * t * t;
    return (2 * adapter + t * per_tok + probs + t * static_cast<std::uint64_t>(c.vocab_size)) * 4;
}

// ---------------------------------------------------------------------------
// Dataset files.

nlohmann::json sample_to_json(const DistillSample& s, const nlohmann::json& meta) {
    const Tokenizer& tok = Tokenizer::instance();
    nlohmann::json ids = nlohmann::json::array(), logits = nlohmann::json::array();
    for (const auto& p : s.targets.positions) {
        ids.push_back(p.tokens);
        logits.push_back(p.logits);
    }
    return {{"context", tok.decode(s.context)},
            {"query", tok.decode(s.query)},
            {"response", tok.decode(s.response)},
            {"response_ids", s.response},
            {"topk", {{"ids", ids}, {"logits", logits}}},
            {"meta", meta}};
}

DistillSample sample_from_json(const nlohmann::json& j) {
    const Tokenizer& tok = Tokenizer::instance();
    DistillSample s;
    try {
        s.context = tok.encode(j.at("context").get<std::string>());
        s.query = tok.encode(j.at("query").get<std::string>());
        s.response = j.at("response_ids").get<std::vector<int>>();
        const auto& ids = j.at("topk").at("ids");
        const auto& lg = j.at("topk").at("logits");
        if (ids.size() != lg.size()) throw FormatError("sample: top-k ids/logits length mismatch");
        for (std::size_t i = 0; i < ids.size(); ++i) {
            ops::SparseDistribution d;
            d.tokens = ids[i].get<std::vector<int>>();
            d.logits = lg[i].get<std::vector<float>>();
            s.targets.positions.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("sample: malformed record: ") + e.what());
    }
    s.targets.response = s.response;
    s.validate();
    return s;
}

void write_meta_dataset(const std::string& path, const MetaDataset& ds, const std::vector<nlohmann::json>& meta) {
    std::string text;
    std::size_t row = 0;
    for (const MetaContext& c : ds.contexts) {
        for (const DistillSample& s : c.samples) {
            text += sample_to_json(s, row < meta.size() ? meta[row] : nlohmann::json::object()).dump();
            text += '\n';
            ++row;
        }
    }
    fs::create_directories(fs::path(path).parent_path());
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

MetaDataset read_meta_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing dataset " + path);
    MetaDataset ds;
    std::string line;
    std::map<std::vector<int>, std::size_t> index;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        DistillSample s;
        try {
            s = sample_from_json(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        auto it = index.find(s.context);
        if (it == index.end()) {
            index[s.context] = ds.contexts.size();
            ds.contexts.push_back({s.context, {}});
            it = index.find(s.context);
        }
        ds.contexts[it->second].samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
}

std::string file_hash(const std::string& path) {
    const auto bytes = read_file(path);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_bytes(bytes.data(), bytes.size())));
    return buf;
}

// ---------------------------------------------------------------------------
// Commands.

namespace {

void say(const CommandContext& ctx, const std::string& msg) {
    if (ctx.log) {
        ctx.log(msg);
    } else {
        std::cerr << msg << std::endl;
    }
}

std::string prepare_run_dir(const ExperimentConfig& c) {
    c.validate();
    const std::string dir = resolve_run_dir(c);
    fs::create_directories(dir);
    const std::string text = nlohmann::json(c).dump(2) + "\n";
    write_file_atomic((fs::path(dir) / "config.json").string(),
                      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return dir;
}

void write_text(const std::string& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

TinyLMParams require_teacher(const ExperimentConfig& c) {
    const std::string p = teacher_path(c);
    if (!fs::exists(p)) throw Error("missing teacher checkpoint " + p + " (run pretrain-lm first)");
    TinyLMParams lm = load_lm(p);
    if (!(lm.config == c.lm)) throw ConfigError("teacher checkpoint config differs from lm section of the config");
    return lm;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

PretrainResult cmd_pretrain_lm(const ExperimentConfig& c, const CommandContext& ctx) {
    const std::string dir = prepare_run_dir(c);
    Rng rng(c.pretrain.seed ^ 0x1f2e3d4c5b6a7988ull);
    const auto corpus = niah_pretrain_corpus(rng, c.pretrain.corpus_size, c.pretrain.min_len, c.pretrain.max_len);
    std::ofstream log(fs::path(dir) / "pretrain_log.jsonl", std::ios::trunc);
    PretrainOptions o;
    o.batch_tokens = c.pretrain.batch_tokens;
    o.context_loss_weight = c.pretrain.context_loss_weight;
    o.seed = c.pretrain.seed;
    std::string stage = "pretrain";
    int offset = 0;
    o.on_step = [&](int step, double loss, double lr, double ms) {
        log << nlohmann::json{{"step", offset + step}, {"stage", stage}, {"loss", loss}, {"lr", lr}, {"wall_ms", ms}}.dump()
            << "\n";
        if (step % 100 == 0) say(ctx, stage + " step " + std::to_string(offset + step) + " loss " + std::to_string(loss));
    };
    const auto t0 = std::chrono::steady_clock::now();
    PretrainResult r;
    r.params = pretrain_lm(corpus, c.lm, c.pretrain.steps, c.pretrain.lr, o);
    if (c.pretrain.extend_steps > 0) {
        const auto longer = niah_pretrain_corpus(rng, c.pretrain.extend_corpus_size, c.pretrain.min_len, c.pretrain.extend_max_len);
        stage = "extend";
        offset = c.pretrain.steps;
        o.batch_tokens = c.pretrain.extend_batch_tokens;
        o.seed = c.pretrain.seed + 1;
        r.params = pretrain_lm(longer, c.lm, c.pretrain.extend_steps, c.pretrain.extend_lr, o, &r.params);
    }
    r.wall_seconds = seconds_since(t0);
    const std::string out = teacher_path(c);
    if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
    save_lm(out, r.params);
    write_text((fs::path(dir) / "pretrain_summary.json").string(),
               nlohmann::json{{"wall_seconds", r.wall_seconds},
                              {"checksum", std::to_string(r.params.checksum())},
                              {"parameters", r.params.parameter_count()}}
                       .dump(2) +
                   "\n");
    return r;
}

GenDataResult cmd_gen_data(const ExperimentConfig& c, const CommandContext& ctx) {
    prepare_run_dir(c);
    const TinyLMParams lm = require_teacher(c);
    const std::uint64_t before = lm.checksum();
    Rng rng(c.data.seed);
    const auto insts = gen_niah_dataset(rng, c.data.n_contexts, c.data.min_len, c.data.max_len, c.data.needle_digits);
    MetaDataset ds;
    std::vector<nlohmann::json> meta;
    GenDataResult r;
    const Tokenizer& tok = Tokenizer::instance();
    for (std::size_t i = 0; i < insts.size(); ++i) {
        const NiahInstance& in = insts[i];
        auto s = sample_self_response(lm, in.haystack, in.query, c.data.max_new, c.data.topk);
        if (!s) continue;
        if (strip(tok.decode(s->response)) != in.answer) ++r.teacher_mismatches;
        ds.contexts.push_back({s->context, {std::move(*s)}});
        meta.push_back({{"answer", in.answer}, {"position", in.position}, {"length", in.haystack.size()}, {"index", i}});
        if ((i + 1) % 1000 == 0) say(ctx, "gen-data " + std::to_string(i + 1) + "/" + std::to_string(insts.size()));
    }
    if (lm.checksum() != before) throw Error("gen-data: teacher weights changed");
    const std::string path = data_path(c);
    write_meta_dataset(path, ds, meta);
    r.count = static_cast<int>(ds.contexts.size());
    r.file_hash = file_hash(path);
    write_text((fs::path(path).parent_path() / "manifest.json").string(),
               nlohmann::json{{"count", r.count},
                              {"requested", c.data.n_contexts},
                              {"seed", c.data.seed},
                              {"teacher_checksum", std::to_string(before)},
                              {"teacher_mismatches", r.teacher_mismatches},
                              {"file", fs::path(path).filename().string()},
                              {"file_hash", r.file_hash}}
                       .dump(2) +
                   "\n");
    return r;
}

MetaTrainRun cmd_meta_train(const ExperimentConfig& c, const CommandContext& ctx) {
    const std::string dir = prepare_run_dir(c);
    const TinyLMParams lm = require_teacher(c);
    const std::uint64_t before = lm.checksum();
    MetaDataset ds = read_meta_dataset(data_path(c));
    const std::string ckpt = (fs::path(dir) / "hypernet.ckpt").string();

    MetaTrainHooks hooks;
    HypernetParams init = init_hypernet(c.hypernet, c.lm, c.schedule.seed + 17);
    const bool resuming = c.resume && fs::exists(ckpt);
    if (resuming) {
        HypernetCheckpoint ck = load_hypernet(ckpt);
        if (!(ck.params.config == c.hypernet)) throw ConfigError("resume checkpoint was written for another hypernet config");
        init = std::move(ck.params);
        hooks.start_step = ck.step;
        hooks.resume_optimizer = std::move(ck.optimizer);
        say(ctx, "resuming meta-train at step " + std::to_string(ck.step));
    }
    std::ofstream log(fs::path(dir) / "meta_train_log.jsonl", resuming ? std::ios::app : std::ios::trunc);
    MetaTrainRun run;
    bool first = true;
    std::vector<double> stage1_tail;
    hooks.on_step = [&](const TrainLogRow& r) {
        log << nlohmann::json{{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}, {"lr", r.lr}, {"wall_ms", r.wall_ms}}.dump()
            << "\n";
        if (first) {
            run.first_loss = r.loss;
            first = false;
        }
        if (r.stage == 1) {
            stage1_tail.push_back(r.loss);
            if (stage1_tail.size() > 50) stage1_tail.erase(stage1_tail.begin());
        }
        if (r.step == c.schedule.stage1_steps && r.stage == 2) say(ctx, "stage 2 begins at step " + std::to_string(r.step));
        if (r.step % 100 == 0) say(ctx, "meta-train step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
    };
    hooks.on_checkpoint = [&](int steps_done, const HypernetParams& p, const Adam& opt) {
        save_hypernet(ckpt, p, &opt, steps_done);
    };
    hooks.interrupt = ctx.interrupt;
    const auto t0 = std::chrono::steady_clock::now();
    MetaTrainResult res = meta_train(init, lm, ds, c.schedule, loss_kind_from_string(c.loss), hooks);
    run.wall_seconds = seconds_since(t0);
    if (lm.checksum() != before) throw Error("meta-train: teacher weights changed");
    for (double v : stage1_tail) run.stage1_final_loss += v / static_cast<double>(stage1_tail.size());
    run.params = std::move(res.params);
    run.steps_done = res.steps_done;
    run.interrupted = res.interrupted;
    if (run.interrupted) {
        say(ctx, "interrupted at step " + std::to_string(run.steps_done) + "; checkpoint " + ckpt);
        return run;
    }
    save_hypernet(hypernet_path(c), run.params);
    if (fs::exists(ckpt)) fs::remove(ckpt);
    write_text((fs::path(dir) / "meta_train_summary.json").string(),
               nlohmann::json{{"wall_seconds", run.wall_seconds},
                              {"steps", run.steps_done},
                              {"first_loss", run.first_loss},
                              {"stage1_final_loss", run.stage1_final_loss},
                              {"parameters", run.params.parameter_count()}}
                       .dump(2) +
                   "\n");
    return run;
}

namespace {

struct CdEvalOutcome {
    std::vector<MetricsRow> rows;
};

bool wants(const ExperimentConfig& c, const std::string& m) {
    return std::find(c.eval.methods.begin(), c.eval.methods.end(), m) != c.eval.methods.end();
}

// Oracle and generated-query CD on a few instances per length.
std::vector<MetricsRow> run_cd_methods(const ExperimentConfig& c, const TinyLMParams& lm, const CommandContext& ctx,
                                       const std::string& adapter_dir) {
    std::vector<MetricsRow> rows;
    const Tokenizer& tok = Tokenizer::instance();
    const int q_tokens = static_cast<int>(student_prompt(kNiahQuery).size());
    for (const std::string method : {"cd-oracle", "cd-generated-q"}) {
        if (!wants(c, method)) continue;
        for (int len : c.eval.lengths) {
            if (len > c.eval.cd_max_length) continue;
            Rng rng(c.eval.seed ^ (0x51ed27ull * static_cast<std::uint64_t>(len + 1)));
            Rng qrng(c.eval.seed + static_cast<std::uint64_t>(len));
            MetricsRow row;
            row.method = method;
            row.length = len;
            std::vector<double> ms;
            CdOptions opts;
            opts.steps = c.eval.cd_steps;
            opts.lr = c.eval.cd_lr;
            opts.rank = c.eval.cd_rank;
            opts.modules = c.hypernet.target_modules;
            int student_tokens = 0;
            for (int i = 0; i < c.eval.cd_n_per_length; ++i) {
                const NiahInstance inst = gen_niah_sample(rng, len, c.data.needle_digits);
                opts.seed = static_cast<std::uint64_t>(i);
                const auto t0 = std::chrono::steady_clock::now();
                LoraAdapter ad;
                if (method == "cd-oracle") {
                    ad = run_oracle_cd(lm, inst.haystack, inst.query, opts, c.data.max_new, c.data.topk);
                    student_tokens = q_tokens + c.data.max_new;
                } else {
                    const QueryBatch qb = gen_queries(inst.haystack, c.eval.n_generated_queries, qrng, QueryTemplateSet::defaults());
                    std::vector<DistillSample> samples;
                    student_tokens = 0;
                    for (const GeneratedQuery& q : qb.queries) {
                        auto s = sample_self_response(lm, inst.haystack, q.query, 24, c.data.topk);
                        if (!s) continue;
                        student_tokens += static_cast<int>(student_sequence(*s).size());
                        samples.push_back(std::move(*s));
                    }
                    if (samples.empty()) {
                        ad = init_cd_adapter(lm.config, opts);
                    } else {
                        ad = run_cd(lm, samples, opts);
                    }
                }
                ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
                GenerateOptions go;
                go.max_new = c.data.max_new;
                go.adapter = &ad;
                const auto out = generate(lm, student_prompt(inst.query), go);
                row.accuracy += strip(tok.decode(out)) == inst.answer ? 1.0 : 0.0;
                ++row.n;
                if (!adapter_dir.empty()) {
                    fs::create_directories(adapter_dir);
                    save_adapter((fs::path(adapter_dir) / (method + "_len" + std::to_string(len) + "_" + std::to_string(i) + ".d2la")).string(), ad);
                }
            }
            row.accuracy /= std::max(1, row.n);
            for (double v : ms) row.latency_ms_mean += v / static_cast<double>(ms.size());
            if (ms.size() > 1) {
                double sq = 0.0;
                for (double v : ms) sq += (v - row.latency_ms_mean) * (v - row.latency_ms_mean);
                row.latency_ms_std = std::sqrt(sq / static_cast<double>(ms.size() - 1));
            }
            row.update_memory_bytes = cd_update_memory(lm.config, opts, student_tokens);
            row.inference_footprint_bytes = internalized_footprint(lm.config, 0, q_tokens, c.data.max_new);
            rows.push_back(row);
            say(ctx, method + " len " + std::to_string(len) + " acc " + std::to_string(row.accuracy));
        }
    }
    return rows;
}

}  // namespace

std::vector<MetricsRow> cmd_cd_baseline(const ExperimentConfig& c, const CommandContext& ctx) {
    const std::string dir = prepare_run_dir(c);
    const TinyLMParams lm = require_teacher(c);
    const std::uint64_t before = lm.checksum();
    ExperimentConfig cc = c;
    if (!wants(cc, "cd-oracle") && !wants(cc, "cd-generated-q")) cc.eval.methods = {"cd-oracle", "cd-generated-q"};
    auto rows = run_cd_methods(cc, lm, ctx, (fs::path(dir) / "cd").string());
    if (lm.checksum() != before) throw Error("cd-baseline: teacher weights changed");
    write_text((fs::path(dir) / "cd_metrics.csv").string(), metrics_csv(rows));
    return rows;
}

std::vector<MetricsRow> cmd_eval(const ExperimentConfig& c, const CommandContext& ctx) {
    const std::string dir = prepare_run_dir(c);
    const TinyLMParams lm = require_teacher(c);
    const std::uint64_t before = lm.checksum();
    const Tokenizer& tok = Tokenizer::instance();
    const int q_tokens = static_cast<int>(student_prompt(kNiahQuery).size());
    std::vector<MetricsRow> rows;

    NiahEvalOptions eo;
    eo.lengths = c.eval.lengths;
    eo.n_per_length = c.eval.n_per_length;
    eo.seed = c.eval.seed;
    eo.max_new = c.data.max_new;

    if (wants(c, "in_context")) {
        for (const NiahEvalRow& r : eval_niah(lm, AdapterSource::in_context, {}, eo)) {
            MetricsRow m;
            m.method = "in_context";
            m.length = r.length;
            m.n = r.n;
            m.accuracy = r.accuracy();
            m.truncated = r.truncated_context;
            m.inference_footprint_bytes = icl_footprint(lm.config, r.length + 6, q_tokens, c.data.max_new);
            rows.push_back(m);
            say(ctx, "in_context len " + std::to_string(r.length) + " acc " + std::to_string(m.accuracy));
        }
    }

    const std::string hpath = hypernet_path(c);
    std::optional<HypernetParams> hp;
    if (fs::exists(hpath)) hp = load_hypernet(hpath).params;
    std::vector<std::pair<std::string, GenerationMode>> hyper_methods;
    if (hp && hp->config.output_mode == OutputMode::lora) {
        if (wants(c, "hypernet-batched")) hyper_methods.emplace_back("hypernet-batched", GenerationMode::batched);
        if (wants(c, "hypernet-iterative")) hyper_methods.emplace_back("hypernet-iterative", GenerationMode::iterative);
    } else if (hp && wants(c, "hyperkv")) {
        hyper_methods.emplace_back("hyperkv", GenerationMode::batched);
    }
    for (const auto& [name, mode] : hyper_methods) {
        const bool kv = hp->config.output_mode == OutputMode::prefix_kv;
        std::vector<double> ms;
        int cur_len = 0;
        int audited = 0;
        NiahEvalOptions o = eo;
        o.audit = [&](AdapterSource, std::span<const int> prompt) {
            // Internalized modes only ever see the query prompt.
            if (static_cast<int>(prompt.size()) != q_tokens) {
                throw Error("input audit: " + name + " fed " + std::to_string(prompt.size()) + " prompt tokens");
            }
            ++audited;
        };
        Internalizer f = [&](const std::string& hay) {
            const auto ids = tok.encode(hay);
            cur_len = static_cast<int>(ids.size());
            const auto t0 = std::chrono::steady_clock::now();
            Internalized in;
            if (kv) {
                in.prefix = internalize_prefix(*hp, lm, ids, mode);
            } else {
                in.adapter = internalize(*hp, lm, ids, mode);
            }
            ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
            return in;
        };
        for (int len : eo.lengths) {
            o.lengths = {len};
            ms.clear();
            const NiahEvalRow r = eval_niah(lm, kv ? AdapterSource::prefix : AdapterSource::hypernet, f, o).front();
            MetricsRow m;
            m.method = name;
            m.length = len;
            m.n = r.n;
            m.accuracy = r.accuracy();
            for (double v : ms) m.latency_ms_mean += v / static_cast<double>(ms.size());
            if (ms.size() > 1) {
                double sq = 0.0;
                for (double v : ms) sq += (v - m.latency_ms_mean) * (v - m.latency_ms_mean);
                m.latency_ms_std = std::sqrt(sq / static_cast<double>(ms.size() - 1));
            }
            m.update_memory_bytes = hypernet_update_memory(*hp, cur_len);
            const int n_prefix = kv ? chunk_context(cur_len, hp->config.max_chunk_tokens).count() * hp->config.n_latents : 0;
            m.inference_footprint_bytes = internalized_footprint(lm.config, n_prefix, q_tokens, c.data.max_new);
            rows.push_back(m);
            say(ctx, name + " len " + std::to_string(len) + " acc " + std::to_string(m.accuracy));
        }
        if (audited == 0) throw Error("input audit: no prompts observed for " + name);
    }

    const auto cd_rows = run_cd_methods(c, lm, ctx, "");
    rows.insert(rows.end(), cd_rows.begin(), cd_rows.end());
    if (lm.checksum() != before) throw Error("eval: teacher weights changed");
    write_text((fs::path(dir) / "metrics.csv").string(), metrics_csv(rows));
    write_text((fs::path(dir) / "metrics.json").string(), metrics_json(rows).dump(2) + "\n");
    return rows;
}

std::vector<MetricsRow> cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw ConfigError("report: no run directories given");
    std::vector<MetricsRow> all;
    for (const std::string& d : run_dirs) {
        const fs::path p = fs::path(d) / "metrics.csv";
        if (!fs::exists(p)) throw Error("report: missing " + p.string());
        const auto bytes = read_file(p.string());
        std::vector<MetricsRow> rows;
        try {
            rows = parse_metrics_csv(std::string(bytes.begin(), bytes.end()));
        } catch (const FormatError& e) {
            throw FormatError(p.string() + ": " + e.what());
        }
        std::string run = fs::path(d).filename().string();
        const fs::path cfg = fs::path(d) / "config.json";
        if (fs::exists(cfg)) {
            std::ifstream in(cfg);
            const auto j = nlohmann::json::parse(in, nullptr, false);
            if (j.is_object() && j.contains("name")) run = j["name"].get<std::string>();
        }
        for (MetricsRow& r : rows) {
            r.method = run + "/" + r.method;
            all.push_back(r);
        }
    }
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "report.csv").string(), metrics_csv(all));

    // Accuracy vs length (one column per method) and latency / memory summaries.
    std::set<int> lengths;
    std::vector<std::string> methods;
    for (const MetricsRow& r : all) {
        lengths.insert(r.length);
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    }
    std::ostringstream acc;
    acc << "schema_version," << kMetricsSchemaVersion << "\nlength";
    for (const auto& m : methods) acc << ',' << m;
    acc << "\n";
    for (int len : lengths) {
        acc << len;
        for (const auto& m : methods) {
            acc << ',';
            for (const MetricsRow& r : all) {
                if (r.method == m && r.length == len) acc << r.accuracy;
            }
        }
        acc << "\n";
    }
    write_text((fs::path(out_dir) / "accuracy_vs_length.csv").string(), acc.str());
    std::ostringstream lat;
    lat << "schema_version," << kMetricsSchemaVersion
        << "\nmethod,length,latency_ms_mean,latency_ms_std,update_memory_bytes,inference_footprint_bytes\n";
    for (const MetricsRow& r : all) {
        lat << r.method << ',' << r.length << ',' << r.latency_ms_mean << ',' << r.latency_ms_std << ','
            << r.update_memory_bytes << ',' << r.inference_footprint_bytes << "\n";
    }
    write_text((fs::path(out_dir) / "latency_memory.csv").string(), lat.str());
    write_text((fs::path(out_dir) / "report.json").string(), metrics_json(all).dump(2) + "\n");
    return all;
}

}  // namespace d2l
