#include "d2l/distill.hpp"

#include "d2l/optim.hpp"
#include "d2l/tasks.hpp"
#include "d2l/tokenizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace d2l {

void TopKTargetRecord::validate() const {
    if (positions.size() != response.size()) throw FormatError("top-k record: positions and response differ in length");
    for (const auto& p : positions) {
        if (p.tokens.empty() || p.tokens.size() != p.logits.size()) throw FormatError("top-k record: malformed row");
        for (std::size_t j = 1; j < p.logits.size(); ++j) {
            if (p.logits[j] > p.logits[j - 1]) throw FormatError("top-k record: logits not sorted");
        }
        std::vector<int> ids = p.tokens;
        std::sort(ids.begin(), ids.end());
        if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw FormatError("top-k record: duplicate ids");
        for (float v : p.logits) {
            if (!std::isfinite(v)) throw FormatError("top-k record: non-finite logit");
        }
    }
}

TopKTargetRecord topk_targets(const Matrix& teacher_logits, int k) {
    if (k <= 0) throw ConfigError("topk_targets: k must be positive");
    TopKTargetRecord rec;
    const int v = static_cast<int>(teacher_logits.cols());
    const int kk = std::min(k, v);
    std::vector<int> idx(static_cast<std::size_t>(v));
    for (Eigen::Index r = 0; r < teacher_logits.rows(); ++r) {
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int a, int b) {
            const float la = teacher_logits(r, a), lb = teacher_logits(r, b);
            return la > lb || (la == lb && a < b);
        });
        ops::SparseDistribution d;
        for (int j = 0; j < kk; ++j) {
            d.tokens.push_back(idx[static_cast<std::size_t>(j)]);
            d.logits.push_back(teacher_logits(r, idx[static_cast<std::size_t>(j)]));
        }
        rec.positions.push_back(std::move(d));
    }
    return rec;
}

double kl_loss(const TopKTargetRecord& targets, const Matrix& student_logits) {
    require_shape(static_cast<Eigen::Index>(targets.positions.size()) == student_logits.rows(),
                  "kl_loss: one record per student row required");
    if (targets.positions.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < targets.positions.size(); ++i) {
        const auto& p = targets.positions[i];
        const std::size_t k = p.tokens.size();
        double pm = -1e300, qm = -1e300;
        for (std::size_t j = 0; j < k; ++j) {
            require_shape(p.tokens[j] >= 0 && p.tokens[j] < student_logits.cols(), "kl_loss: token id out of range");
            pm = std::max(pm, static_cast<double>(p.logits[j]));
            qm = std::max(qm, static_cast<double>(student_logits(static_cast<Eigen::Index>(i), p.tokens[j])));
        }
        double ps = 0.0, qs = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            ps += std::exp(p.logits[j] - pm);
            qs += std::exp(student_logits(static_cast<Eigen::Index>(i), p.tokens[j]) - qm);
        }
        const double lps = std::log(ps), lqs = std::log(qs);
        double kl = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double lp = p.logits[j] - pm - lps;
            const double lq = student_logits(static_cast<Eigen::Index>(i), p.tokens[j]) - qm - lqs;
            kl += std::exp(lp) * (lp - lq);
        }
        total += std::max(0.0, kl);
    }
    return total / static_cast<double>(targets.positions.size());
}

double ce_loss(const Matrix& student_logits, std::span<const int> gold) {
    require_shape(static_cast<Eigen::Index>(gold.size()) == student_logits.rows(), "ce_loss: one gold token per row");
    if (gold.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const auto row = student_logits.row(static_cast<Eigen::Index>(i));
        require_shape(gold[i] >= 0 && gold[i] < row.size(), "ce_loss: gold id out of range");
        const double mx = row.maxCoeff();
        double s = 0.0;
        for (Eigen::Index j = 0; j < row.size(); ++j) s += std::exp(row(j) - mx);
        total += mx + std::log(s) - row(gold[i]);
    }
    return total / static_cast<double>(gold.size());
}

void DistillSample::validate() const {
    if (response.empty()) throw FormatError("distill sample: empty response");
    if (!targets.positions.empty()) {
        targets.validate();
        if (targets.response != response) throw FormatError("distill sample: targets do not match response");
    }
}

std::vector<int> student_sequence(const DistillSample& s, int* first_response_row) {
    std::vector<int> seq{Tokenizer::kBos};
    seq.insert(seq.end(), s.query.begin(), s.query.end());
    seq.push_back(Tokenizer::instance().id_of('\n'));
    if (first_response_row) *first_response_row = static_cast<int>(seq.size()) - 1;
    seq.insert(seq.end(), s.response.begin(), s.response.end());
    seq.pop_back();  // the last response token is only a target
    return seq;
}

void MetaDataset::validate() const {
    if (contexts.empty()) throw FormatError("meta dataset: no contexts");
    if (packing_budget <= 0) throw ConfigError("meta dataset: packing_budget must be positive");
    for (const auto& c : contexts) {
        if (c.context.empty()) throw FormatError("meta dataset: empty context");
        if (c.samples.empty()) throw FormatError("meta dataset: context without samples");
        for (const auto& s : c.samples) s.validate();
    }
}

std::string to_string(LossKind k) { return k == LossKind::kl ? "kl" : "ntp"; }

LossKind loss_kind_from_string(std::string_view s) {
    if (s == "kl") return LossKind::kl;
    if (s == "ntp") return LossKind::ntp;
    throw ConfigError("unknown loss kind: " + std::string(s));
}

void TrainSchedule::validate() const {
    if (stage1_steps < 0 || stage2_steps < 0) throw ConfigError("schedule.stage1_steps, schedule.stage2_steps: must be >= 0");
    if (!(lr > 0.0f) || !std::isfinite(lr)) throw ConfigError("schedule.lr: must be positive");
    if (batch_context_tokens <= 0 || max_batch_contexts <= 0 || samples_per_context <= 0) {
        throw ConfigError("schedule.batch_context_tokens, max_batch_contexts, samples_per_context: must be positive");
    }
    if (max_chunks < 1) throw ConfigError("schedule.max_chunks: must be >= 1");
}

}  // namespace d2l

// ---------------------------------------------------------------------------
// Meta-training.

namespace d2l {

namespace {

struct StudentBatch {
    std::vector<int> tokens;
    SequenceLayout layout;
    std::vector<int> targets;                         // -1 outside responses
    std::vector<const ops::SparseDistribution*> rows;  // null outside responses
    std::vector<float> weights;
};

// Packs samples into one student sequence; segment slot = item index and
// positions start after that item's prefix (if any).
StudentBatch pack_students(std::span<const MetaBatchItem> items, const std::vector<int>& prefix_len) {
    StudentBatch b;
    int n_samples = 0;
    for (const auto& it : items) n_samples += static_cast<int>(it.samples.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        for (const DistillSample* s : items[i].samples) {
            int first = 0;
            const std::vector<int> seq = student_sequence(*s, &first);
            const int start = static_cast<int>(b.tokens.size());
            const int n = static_cast<int>(seq.size());
            b.tokens.insert(b.tokens.end(), seq.begin(), seq.end());
            b.layout.segments.push_back({start, n, prefix_len.empty() ? 0 : prefix_len[i], static_cast<int>(i)});
            const int m = static_cast<int>(s->response.size());
            const float w = 1.0f / (static_cast<float>(m) * static_cast<float>(n_samples));
            for (int r = 0; r < n; ++r) {
                const int j = r - first;
                if (j >= 0 && j < m) {
                    b.targets.push_back(s->response[static_cast<std::size_t>(j)]);
                    b.rows.push_back(s->targets.positions.empty() ? nullptr
                                                                  : &s->targets.positions[static_cast<std::size_t>(j)]);
                    b.weights.push_back(w);
                } else {
                    b.targets.push_back(-1);
                    b.rows.push_back(nullptr);
                    b.weights.push_back(0.0f);
                }
            }
        }
    }
    b.layout.total = static_cast<int>(b.tokens.size());
    return b;
}

}  // namespace

Var meta_batch_loss(Tape& tape, const HypernetGraph& hg, const LmGraph& lm, std::span<const MetaBatchItem> items,
                    LossKind loss, GenerationMode mode) {
    const HypernetParams& hp = *hg.params;
    require_shape(!items.empty(), "meta_batch_loss: empty batch");
    const int n_blocks = required_lm_blocks(hp);

    // Frozen-model encoding of every chunk of every item in one packed pass.
    std::vector<int> tokens;
    SequenceLayout lay;
    for (const MetaBatchItem& it : items) {
        const auto parts = split_tokens(it.context->context, it.plan);
        for (const auto& p : parts) {
            const int start = static_cast<int>(tokens.size());
            tokens.push_back(Tokenizer::kBos);
            tokens.insert(tokens.end(), p.begin(), p.end());
            lay.segments.push_back({start, static_cast<int>(p.size()) + 1, 0, -1});
        }
    }
    lay.total = static_cast<int>(tokens.size());
    GraphRequest enc;
    enc.n_blocks = n_blocks;
    enc.logits = false;
    const GraphOutput z = lm_graph_forward(tape, lm, tokens, lay, enc);

    std::set<int> used;
    for (const HeadTarget& t : hp.targets()) used.insert(t.source_tap);
    std::vector<ChunkTaps> ctx(items.size());
    std::size_t seg = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        for (int k = 0; k < items[i].plan.count(); ++k, ++seg) {
            const Segment& s = lay.segments[seg];
            std::vector<Var> taps(z.taps.size());
            for (int tap : used) taps[static_cast<std::size_t>(tap)] = ops::rows(tape, z.taps[static_cast<std::size_t>(tap)], s.start, s.length);
            ctx[i].taps.push_back(std::move(taps));
        }
    }

    GraphAdapters adapters;
    GraphPrefixes prefixes;
    GraphRequest req;
    std::vector<int> prefix_len;
    if (hp.config.output_mode == OutputMode::lora) {
        const auto slots = hypernet_lora(tape, hg, ctx, mode);
        for (const auto& per_item : slots) {
            for (const auto& [id, s] : per_item) adapters[id].push_back(s);
        }
        req.adapters = &adapters;
    } else {
        const auto slots = hypernet_prefix(tape, hg, lm, ctx, mode);
        prefixes.assign(static_cast<std::size_t>(hp.lm.n_layers), {});
        for (const auto& per_item : slots) {
            for (std::size_t l = 0; l < per_item.size(); ++l) prefixes[l].push_back(per_item[l]);
            prefix_len.push_back(static_cast<int>(per_item.front().keys.rows()));
        }
        req.prefixes = &prefixes;
    }

    const StudentBatch sb = pack_students(items, prefix_len);
    const GraphOutput o = lm_graph_forward(tape, lm, sb.tokens, sb.layout, req);
    if (loss == LossKind::kl) {
        for (std::size_t r = 0; r < sb.rows.size(); ++r) {
            if (sb.weights[r] > 0.0f && sb.rows[r] == nullptr) throw FormatError("meta_batch_loss: sample without top-k targets");
        }
        return ops::sparse_kl(tape, o.logits, sb.rows, sb.weights);
    }
    return ops::cross_entropy(tape, o.logits, sb.targets, sb.weights);
}

namespace {

std::uint64_t step_seed(std::uint64_t seed, int step) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(step + 1));
    x ^= x >> 31;
    x *= 0xbf58476d1ce4e5b9ull;
    return x ^ (x >> 29);
}

std::vector<MetaBatchItem> sample_batch(const MetaDataset& ds, const TrainSchedule& sch, int step, int stage,
                                        int min_chunk) {
    Rng rng(step_seed(sch.seed, step));
    std::uniform_int_distribution<std::size_t> pick(0, ds.contexts.size() - 1);
    std::vector<MetaBatchItem> items;
    int tokens = 0;
    const int budget = std::min(sch.batch_context_tokens, ds.packing_budget);
    while (static_cast<int>(items.size()) < sch.max_batch_contexts) {
        const MetaContext& c = ds.contexts[pick(rng)];
        const int n = static_cast<int>(c.context.size());
        if (!items.empty() && tokens + n > budget) break;
        MetaBatchItem it;
        it.context = &c;
        it.plan = stage == 1 ? ChunkPlan{{n}} : sample_training_chunk_plan(rng, n, min_chunk, sch.max_chunks);
        std::vector<std::size_t> order(c.samples.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(sch.samples_per_context));
        for (std::size_t j = 0; j < take; ++j) it.samples.push_back(&c.samples[order[j]]);
        items.push_back(std::move(it));
        tokens += n;
    }
    return items;
}

}  // namespace

MetaTrainResult meta_train(const HypernetParams& init, const TinyLMParams& lm, const MetaDataset& dataset,
                           const TrainSchedule& schedule, LossKind loss, const MetaTrainHooks& hooks) {
    schedule.validate();
    dataset.validate();
    if (!(init.lm == lm.config)) throw ConfigError("meta_train: hypernetwork built for a different model config");
    const int total = schedule.stage1_steps + schedule.stage2_steps;
    if (hooks.start_step < 0 || hooks.start_step > total) throw ConfigError("meta_train: start_step outside schedule");

    MetaTrainResult res{init, hooks.resume_optimizer.value_or(Adam(AdamConfig{0.9f, 0.999f, 1e-8f, schedule.weight_decay})),
                        hooks.start_step, false, {}};
    HypernetParams grads = init.zeros_like();
    std::vector<Matrix*> pp, gp;
    res.params.visit([&](const std::string&, Matrix& m) { pp.push_back(&m); });
    grads.visit([&](const std::string&, Matrix& m) { gp.push_back(&m); });

    for (int step = hooks.start_step; step < total; ++step) {
        if (hooks.interrupt && hooks.interrupt->load()) {
            res.interrupted = true;
            if (hooks.on_checkpoint) hooks.on_checkpoint(step, res.params, res.optimizer);
            return res;
        }
        const auto t0 = std::chrono::steady_clock::now();
        const int stage = step < schedule.stage1_steps ? 1 : 2;
        const auto items = sample_batch(dataset, schedule, step, stage, init.config.min_chunk_tokens);
        for (Matrix* g : gp) g->setZero();
        double lv;
        {
            Tape tape(true);
            HypernetGraph hg = bind_hypernet(tape, res.params, &grads);
            LmGraph lg = bind_lm(tape, lm, nullptr);
            Var l = meta_batch_loss(tape, hg, lg, items, loss, GenerationMode::batched);
            lv = l.item();
            if (!std::isfinite(lv)) throw DivergenceError("meta_train: non-finite loss at step " + std::to_string(step));
            tape.backward(l);
        }
        clip_grad_norm(gp, schedule.grad_clip);
        const float lr = warmup_cosine(step, total, schedule.lr, schedule.warmup_frac);
        res.optimizer.step(pp, gp, lr);
        res.steps_done = step + 1;
        TrainLogRow row{step, stage, lv, lr,
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
        res.log.push_back(row);
        if (hooks.on_step) hooks.on_step(row);
        if (hooks.on_checkpoint && schedule.checkpoint_every > 0 && res.steps_done % schedule.checkpoint_every == 0) {
            hooks.on_checkpoint(res.steps_done, res.params, res.optimizer);
        }
    }
    return res;
}

double meta_loss(const HypernetParams& hp, const TinyLMParams& lm, std::span<const MetaContext> contexts, LossKind loss,
                 GenerationMode mode) {
    std::vector<MetaBatchItem> items;
    for (const MetaContext& c : contexts) {
        MetaBatchItem it;
        it.context = &c;
        it.plan = chunk_context(static_cast<int>(c.context.size()), hp.config.max_chunk_tokens);
        for (const DistillSample& s : c.samples) it.samples.push_back(&s);
        items.push_back(std::move(it));
    }
    Tape tape(false);
    HypernetGraph hg = bind_hypernet(tape, hp, nullptr);
    LmGraph lg = bind_lm(tape, lm, nullptr);
    return meta_batch_loss(tape, hg, lg, items, loss, mode).item();
}

// ---------------------------------------------------------------------------
// Context distillation baselines.

LoraAdapter init_cd_adapter(const LMConfig& c, const CdOptions& opts) {
    if (opts.rank <= 0) throw ConfigError("cd: rank must be positive");
    if (opts.modules.empty()) throw ConfigError("cd: no target modules");
    Rng rng(opts.seed);
    LoraAdapter ad;
    ad.chunk_rank = opts.rank;
    ad.n_chunks = 1;
    ad.generator_version = "cd-1";
    for (int b = 0; b < c.n_layers; ++b) {
        for (const auto& m : opts.modules) {
            const auto [dout, din] = linear_shape(c, m);
            LoraLayerDelta d;
            d.a = randn(opts.rank, din, opts.init_scale, rng);
            d.b = Matrix::Zero(dout, opts.rank);
            d.alpha = {opts.alpha};
            d.mode = AlphaMode::per_layer;
            ad.layers[layer_id(b, m)] = std::move(d);
        }
    }
    return ad;
}

namespace {

// Student loss over samples with a single adapter slot, as a tape value.
Var cd_loss(Tape& tape, const LmGraph& lg, const GraphAdapters& ga, std::span<const DistillSample> samples) {
    std::vector<MetaBatchItem> items(1);
    for (const DistillSample& s : samples) items[0].samples.push_back(&s);
    const StudentBatch sb = pack_students(items, {});
    GraphRequest req;
    req.adapters = &ga;
    const GraphOutput o = lm_graph_forward(tape, lg, sb.tokens, sb.layout, req);
    return ops::sparse_kl(tape, o.logits, sb.rows, sb.weights);
}

}  // namespace

LoraAdapter run_cd(const TinyLMParams& lm, std::span<const DistillSample> samples, const CdOptions& opts) {
    if (samples.empty()) throw ConfigError("cd: no samples");
    if (opts.steps < 0) throw ConfigError("cd: steps must be >= 0");
    for (const DistillSample& s : samples) {
        s.validate();
        if (s.targets.positions.empty()) throw FormatError("cd: sample without teacher targets");
    }
    LoraAdapter ad = init_cd_adapter(lm.config, opts);
    // Trainable copies: A and B^T per layer.
    std::vector<std::string> ids;
    std::vector<Matrix> a, bt, ga, gbt;
    for (const auto& [id, d] : ad.layers) {
        ids.push_back(id);
        a.push_back(d.a);
        bt.push_back(d.b.transpose());
    }
    ga.resize(a.size());
    gbt.resize(a.size());
    std::vector<Matrix*> params, grads;
    for (std::size_t i = 0; i < a.size(); ++i) {
        params.push_back(&a[i]);
        params.push_back(&bt[i]);
        grads.push_back(&ga[i]);
        grads.push_back(&gbt[i]);
    }
    const Matrix alpha = Matrix::Constant(1, opts.rank, opts.alpha);
    for (int step = 0; step < opts.steps; ++step) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            ga[i] = Matrix::Zero(a[i].rows(), a[i].cols());
            gbt[i] = Matrix::Zero(bt[i].rows(), bt[i].cols());
        }
        Tape tape(true);
        LmGraph lg = bind_lm(tape, lm, nullptr);
        GraphAdapters slots;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            slots[ids[i]].push_back({tape.leaf(a[i], &ga[i]), tape.leaf(bt[i], &gbt[i]), tape.constant_ref(alpha)});
        }
        Var l = cd_loss(tape, lg, slots, samples);
        if (!std::isfinite(l.item())) throw DivergenceError("cd: non-finite loss at step " + std::to_string(step));
        tape.backward(l);
        if (opts.on_step) opts.on_step(step, l.item());
        sgd_step(params, grads, opts.lr);
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        LoraLayerDelta& d = ad.layers[ids[i]];
        d.a = a[i];
        d.b = bt[i].transpose();
    }
    return ad;
}

LoraAdapter run_oracle_cd(const TinyLMParams& lm, std::string_view context, std::string_view query,
                          const CdOptions& opts, int max_new, int k) {
    auto s = sample_self_response(lm, context, query, max_new, k);
    if (!s) throw Error("oracle cd: teacher produced an empty response");
    return run_cd(lm, std::span<const DistillSample>(&*s, 1), opts);
}

double cd_objective(const TinyLMParams& lm, const LoraAdapter& adapter, std::span<const DistillSample> samples) {
    Tape tape(false);
    LmGraph lg = bind_lm(tape, lm, nullptr);
    const GraphAdapters ga = bind_adapter(tape, lm.config, adapter);
    return cd_loss(tape, lg, ga, samples).item();
}

}  // namespace d2l
