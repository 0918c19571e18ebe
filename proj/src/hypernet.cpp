#include "d2l/hypernet.hpp"

#include "d2l/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace d2l {

std::string to_string(OutputMode m) { return m == OutputMode::lora ? "lora" : "prefix_kv"; }
std::string to_string(ActivationSource s) { return s == ActivationSource::per_layer ? "per_layer" : "single_layer"; }
std::string to_string(GenerationMode m) { return m == GenerationMode::batched ? "batched" : "iterative"; }

OutputMode output_mode_from_string(std::string_view s) {
    if (s == "lora") return OutputMode::lora;
    if (s == "prefix_kv") return OutputMode::prefix_kv;
    throw ConfigError("unknown output mode: " + std::string(s));
}

ActivationSource activation_source_from_string(std::string_view s) {
    if (s == "per_layer") return ActivationSource::per_layer;
    if (s == "single_layer") return ActivationSource::single_layer;
    throw ConfigError("unknown activation source: " + std::string(s));
}

GenerationMode generation_mode_from_string(std::string_view s) {
    if (s == "batched") return GenerationMode::batched;
    if (s == "iterative") return GenerationMode::iterative;
    throw ConfigError("unknown generation mode: " + std::string(s));
}

void HypernetConfig::validate(const LMConfig& lm) const {
    if (d_latent <= 0 || n_latents <= 0 || n_xattn_blocks <= 0 || n_heads <= 0 || d_proj_hidden <= 0 || d_mlp <= 0) {
        throw ConfigError("hypernet: sizes must be positive");
    }
    if (d_latent % n_heads != 0) throw ShapeError("hypernet.d_latent: must be divisible by hypernet.n_heads");
    if (output_mode == OutputMode::lora) {
        if (target_modules.empty()) throw ConfigError("hypernet.target_modules: empty");
        std::set<std::string> seen;
        for (const auto& m : target_modules) {
            if (std::find(std::begin(kLinearModules), std::end(kLinearModules), m) == std::end(kLinearModules)) {
                throw ConfigError("hypernet.target_modules: unknown module " + m);
            }
            if (!seen.insert(m).second) throw ConfigError("hypernet.target_modules: duplicate module " + m);
        }
    }
    if (activation_source == ActivationSource::single_layer && (source_layer < 0 || source_layer > lm.n_layers)) {
        throw ConfigError("hypernet.source_layer: must be in [0, lm.n_layers]");
    }
    if (!std::isfinite(alpha_init)) throw ConfigError("hypernet.alpha_init: must be finite");
    if (min_chunk_tokens < 1 || max_chunk_tokens < min_chunk_tokens) {
        throw ConfigError("hypernet.min_chunk_tokens: need 1 <= min_chunk_tokens <= max_chunk_tokens");
    }
}

void to_json(nlohmann::json& j, const HypernetConfig& c) {
    j = nlohmann::json{{"d_latent", c.d_latent},
                       {"n_latents", c.n_latents},
                       {"n_xattn_blocks", c.n_xattn_blocks},
                       {"n_heads", c.n_heads},
                       {"d_proj_hidden", c.d_proj_hidden},
                       {"d_mlp", c.d_mlp},
                       {"latent_self_attention", c.latent_self_attention},
                       {"output_mode", to_string(c.output_mode)},
                       {"target_modules", c.target_modules},
                       {"activation_source", to_string(c.activation_source)},
                       {"source_layer", c.source_layer},
                       {"alpha_mode", to_string(c.alpha_mode)},
                       {"alpha_init", short_float(c.alpha_init)},
                       {"rope_on_keys", c.rope_on_keys},
                       {"max_chunk_tokens", c.max_chunk_tokens},
                       {"min_chunk_tokens", c.min_chunk_tokens},
                       {"norm_eps", short_float(c.norm_eps)}};
}

void from_json(const nlohmann::json& j, HypernetConfig& c) {
    HypernetConfig d;
    c.d_latent = j.value("d_latent", d.d_latent);
    c.n_latents = j.value("n_latents", d.n_latents);
    c.n_xattn_blocks = j.value("n_xattn_blocks", d.n_xattn_blocks);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_proj_hidden = j.value("d_proj_hidden", d.d_proj_hidden);
    c.d_mlp = j.value("d_mlp", d.d_mlp);
    c.latent_self_attention = j.value("latent_self_attention", d.latent_self_attention);
    c.output_mode = output_mode_from_string(j.value("output_mode", to_string(d.output_mode)));
    c.target_modules = j.value("target_modules", d.target_modules);
    c.activation_source = activation_source_from_string(j.value("activation_source", to_string(d.activation_source)));
    c.source_layer = j.value("source_layer", d.source_layer);
    c.alpha_mode = alpha_mode_from_string(j.value("alpha_mode", to_string(d.alpha_mode)));
    c.alpha_init = j.value("alpha_init", d.alpha_init);
    c.rope_on_keys = j.value("rope_on_keys", d.rope_on_keys);
    c.max_chunk_tokens = j.value("max_chunk_tokens", d.max_chunk_tokens);
    c.min_chunk_tokens = j.value("min_chunk_tokens", d.min_chunk_tokens);
    c.norm_eps = j.value("norm_eps", d.norm_eps);
}

std::vector<HeadTarget> head_targets(const HypernetConfig& c, const LMConfig& lm) {
    std::vector<HeadTarget> out;
    for (int b = 0; b < lm.n_layers; ++b) {
        const int tap = c.activation_source == ActivationSource::per_layer ? b : c.source_layer;
        if (c.output_mode == OutputMode::prefix_kv) {
            out.push_back({"block" + std::to_string(b) + ".kv", b, tap, 0, 2 * lm.n_heads * lm.d_head});
            continue;
        }
        for (const auto& m : c.target_modules) {
            const auto [dout, din] = linear_shape(lm, m);
            out.push_back({layer_id(b, m), b, tap, din, dout});
        }
    }
    return out;
}

std::vector<HeadTarget> HypernetParams::targets() const { return head_targets(config, lm); }

void HypernetParams::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
    fn("latents", latents);
    fn("in_norm", in_norm);
    fn("in_w1", in_w1);
    fn("in_w2", in_w2);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "xattn" + std::to_string(i) + ".";
        XAttnBlockParams& b = blocks[i];
        fn(p + "lat_norm", b.lat_norm);
        fn(p + "ctx_norm", b.ctx_norm);
        fn(p + "wq", b.wq);
        fn(p + "wk", b.wk);
        fn(p + "wv", b.wv);
        fn(p + "wo", b.wo);
        if (config.latent_self_attention) {
            fn(p + "sa_norm", b.sa_norm);
            fn(p + "sa_wq", b.sa_wq);
            fn(p + "sa_wk", b.sa_wk);
            fn(p + "sa_wv", b.sa_wv);
            fn(p + "sa_wo", b.sa_wo);
        }
        fn(p + "mlp_norm", b.mlp_norm);
        fn(p + "w_up", b.w_up);
        fn(p + "w_down", b.w_down);
    }
    fn("out_norm", out_norm);
    for (std::size_t i = 0; i < heads.size(); ++i) fn("head" + std::to_string(i), heads[i]);
    if (config.output_mode == OutputMode::lora) fn("alpha", alpha);
}

void HypernetParams::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    const_cast<HypernetParams*>(this)->visit([&](const std::string& n, Matrix& m) { fn(n, m); });
}

std::size_t HypernetParams::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

HypernetParams HypernetParams::zeros_like() const {
    HypernetParams z = *this;
    z.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

HypernetParams init_hypernet(const HypernetConfig& config, const LMConfig& lm, std::uint64_t seed) {
    lm.validate();
    config.validate(lm);
    Rng rng(seed);
    const int d = config.d_latent;
    const int D = lm.d_model;
    auto lin = [&](int out, int in, float gain = 1.0f) {
        return randn(out, in, gain / std::sqrt(static_cast<float>(in)), rng);
    };
    const float resid = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_xattn_blocks));
    HypernetParams p;
    p.config = config;
    p.lm = lm;
    p.latents = randn(config.n_latents, d, 1.0f, rng);
    p.in_norm = Matrix::Ones(1, D);
    p.in_w1 = lin(config.d_proj_hidden, D);
    p.in_w2 = lin(d, config.d_proj_hidden);
    for (int i = 0; i < config.n_xattn_blocks; ++i) {
        XAttnBlockParams b;
        b.lat_norm = Matrix::Ones(1, d);
        b.ctx_norm = Matrix::Ones(1, d);
        b.wq = lin(d, d);
        b.wk = lin(d, d);
        b.wv = lin(d, d);
        b.wo = lin(d, d, resid);
        if (config.latent_self_attention) {
            b.sa_norm = Matrix::Ones(1, d);
            b.sa_wq = lin(d, d);
            b.sa_wk = lin(d, d);
            b.sa_wv = lin(d, d);
            b.sa_wo = lin(d, d, resid);
        }
        b.mlp_norm = Matrix::Ones(1, d);
        b.w_up = lin(config.d_mlp, d);
        b.w_down = lin(d, config.d_mlp, resid);
        p.blocks.push_back(std::move(b));
    }
    p.out_norm = Matrix::Ones(1, d);
    const auto targets = head_targets(config, lm);
    for (const HeadTarget& t : targets) {
        const int width = config.output_mode == OutputMode::lora ? t.d_in + t.d_out : t.d_out;
        p.heads.push_back(lin(width, d));
    }
    if (config.output_mode == OutputMode::lora) {
        const int cols = config.alpha_mode == AlphaMode::per_rank ? config.n_latents : 1;
        p.alpha = Matrix::Constant(static_cast<Eigen::Index>(targets.size()), cols, config.alpha_init);
    }
    return p;
}

// ---------------------------------------------------------------------------

ChunkPlan chunk_context(int n_tokens, int max_chunk_tokens) {
    if (n_tokens < 0) throw ConfigError("chunk_context: negative length");
    if (max_chunk_tokens <= 0) throw ConfigError("chunk_context: max_chunk_tokens must be positive");
    ChunkPlan plan;
    if (n_tokens <= max_chunk_tokens) {
        plan.sizes.push_back(n_tokens);
        return plan;
    }
    const int k = (n_tokens + max_chunk_tokens - 1) / max_chunk_tokens;
    const int base = n_tokens / k;
    const int rem = n_tokens % k;
    for (int i = 0; i < k; ++i) plan.sizes.push_back(base + (i < rem ? 1 : 0));
    return plan;
}

int sample_chunk_count(Rng& rng, int max_k) {
    if (max_k < 1) throw ConfigError("sample_chunk_count: max_k must be >= 1");
    // Weights 50 / 12 / 37.5 spread over 3..max_k, normalised by their sum.
    std::vector<double> w{50.0};
    if (max_k >= 2) w.push_back(12.0);
    for (int k = 3; k <= max_k; ++k) w.push_back(37.5 / (max_k - 2));
    std::discrete_distribution<int> d(w.begin(), w.end());
    return d(rng) + 1;
}

ChunkPlan sample_training_chunk_plan(Rng& rng, int n_tokens, int min_chunk, int max_k) {
    if (n_tokens <= 0) throw ConfigError("sample_training_chunk_plan: empty context");
    if (min_chunk < 1) throw ConfigError("sample_training_chunk_plan: min_chunk must be >= 1");
    int k = sample_chunk_count(rng, max_k);
    k = std::max(1, std::min(k, n_tokens / min_chunk));
    ChunkPlan plan;
    if (k == 1) {
        plan.sizes.push_back(n_tokens);
        return plan;
    }
    // Each chunk gets min_chunk plus a share of the slack at uniformly random cut points.
    const int slack = n_tokens - k * min_chunk;
    std::uniform_int_distribution<int> cut(0, slack);
    std::vector<int> cuts{0, slack};
    for (int i = 0; i < k - 1; ++i) cuts.push_back(cut(rng));
    std::sort(cuts.begin(), cuts.end());
    for (int i = 0; i < k; ++i) plan.sizes.push_back(min_chunk + cuts[static_cast<std::size_t>(i) + 1] - cuts[static_cast<std::size_t>(i)]);
    return plan;
}

std::vector<std::vector<int>> split_tokens(std::span<const int> tokens, const ChunkPlan& plan) {
    std::vector<std::vector<int>> out;
    std::size_t at = 0;
    for (int n : plan.sizes) {
        require_shape(n >= 0 && at + static_cast<std::size_t>(n) <= tokens.size(), "split_tokens: plan exceeds input");
        out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(at), tokens.begin() + static_cast<std::ptrdiff_t>(at + n));
        at += static_cast<std::size_t>(n);
    }
    require_shape(at == tokens.size(), "split_tokens: plan does not cover the input");
    return out;
}

// ---------------------------------------------------------------------------

HypernetGraph bind_hypernet(Tape& tape, const HypernetParams& params, HypernetParams* grads) {
    HypernetGraph g;
    g.params = &params;
    std::vector<Var> vars;
    std::vector<Matrix*> sinks;
    if (grads) grads->visit([&](const std::string&, Matrix& m) { sinks.push_back(&m); });
    std::size_t i = 0;
    params.visit([&](const std::string&, const Matrix& m) {
        vars.push_back(grads ? tape.leaf(m, sinks[i]) : tape.constant_ref(m));
        ++i;
    });
    std::size_t k = 0;
    auto next = [&]() { return vars[k++]; };
    const HypernetConfig& c = params.config;
    g.latents = next();
    g.in_norm = next();
    g.in_w1 = next();
    g.in_w2 = next();
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        XAttnBlockVars v;
        v.lat_norm = next();
        v.ctx_norm = next();
        v.wq = next();
        v.wk = next();
        v.wv = next();
        v.wo = next();
        if (c.latent_self_attention) {
            v.sa_norm = next();
            v.sa_wq = next();
            v.sa_wk = next();
            v.sa_wv = next();
            v.sa_wo = next();
        }
        v.mlp_norm = next();
        v.w_up = next();
        v.w_down = next();
        g.blocks.push_back(v);
    }
    g.out_norm = next();
    for (std::size_t h = 0; h < params.heads.size(); ++h) g.heads.push_back(next());
    if (c.output_mode == OutputMode::lora) g.alpha = next();
    return g;
}

Var hypernet_latents(Tape& tape, const HypernetGraph& g, std::span<const Var> inputs,
                     std::span<const std::vector<std::uint8_t>* const> masks) {
    require_shape(!inputs.empty() && masks.size() == inputs.size(), "hypernet_latents: one mask slot per input");
    const HypernetParams& p = *g.params;
    const HypernetConfig& c = p.config;
    const int m = c.n_latents;
    const int n_in = static_cast<int>(inputs.size());

    std::vector<GroupRange> groups;
    std::vector<std::uint8_t> valid;
    bool any_mask = false;
    int off = 0;
    for (int i = 0; i < n_in; ++i) {
        const int n = static_cast<int>(inputs[static_cast<std::size_t>(i)].rows());
        require_shape(inputs[static_cast<std::size_t>(i)].cols() == p.lm.d_model, "hypernet_latents: activation width mismatch");
        groups.push_back({i * m, m, off, n});
        const auto* mk = masks[static_cast<std::size_t>(i)];
        if (mk && !mk->empty()) {
            require_shape(static_cast<int>(mk->size()) == n, "hypernet_latents: mask length mismatch");
            valid.insert(valid.end(), mk->begin(), mk->end());
            any_mask = true;
        } else {
            valid.insert(valid.end(), static_cast<std::size_t>(n), 1);
        }
        off += n;
    }
    if (!any_mask) valid.clear();

    Var x = n_in == 1 ? inputs[0] : ops::concat_rows(tape, inputs);
    Var ctx = ops::matmul_nt(
        tape, ops::gelu(tape, ops::matmul_nt(tape, ops::rmsnorm(tape, x, g.in_norm, c.norm_eps), g.in_w1)), g.in_w2);
    Var lat = n_in == 1 ? g.latents : ops::tile_rows(tape, g.latents, n_in);

    std::vector<GroupRange> self_groups;
    if (c.latent_self_attention) {
        for (int i = 0; i < n_in; ++i) self_groups.push_back({i * m, m, i * m, m});
    }
    for (const XAttnBlockVars& b : g.blocks) {
        Var cn = ops::rmsnorm(tape, ctx, b.ctx_norm, c.norm_eps);
        Var k = ops::matmul_nt(tape, cn, b.wk);
        Var v = ops::matmul_nt(tape, cn, b.wv);
        Var q = ops::matmul_nt(tape, ops::rmsnorm(tape, lat, b.lat_norm, c.norm_eps), b.wq);
        Var a = ops::cross_attention(tape, q, k, v, groups, valid, c.n_heads);
        lat = ops::add(tape, lat, ops::matmul_nt(tape, a, b.wo));
        if (c.latent_self_attention) {
            Var ln = ops::rmsnorm(tape, lat, b.sa_norm, c.norm_eps);
            Var sq = ops::matmul_nt(tape, ln, b.sa_wq);
            Var sk = ops::matmul_nt(tape, ln, b.sa_wk);
            Var sv = ops::matmul_nt(tape, ln, b.sa_wv);
            Var sa = ops::cross_attention(tape, sq, sk, sv, self_groups, {}, c.n_heads);
            lat = ops::add(tape, lat, ops::matmul_nt(tape, sa, b.sa_wo));
        }
        Var h = ops::gelu(tape, ops::matmul_nt(tape, ops::rmsnorm(tape, lat, b.mlp_norm, c.norm_eps), b.w_up));
        lat = ops::add(tape, lat, ops::matmul_nt(tape, h, b.w_down));
    }
    return ops::rmsnorm(tape, lat, g.out_norm, c.norm_eps);
}

namespace {

// [1 x cols] row repeated horizontally `times` times.
Var tile_cols(Tape& tape, Var row, int times) {
    if (times == 1) return row;
    return ops::transpose(tape, ops::tile_rows(tape, ops::transpose(tape, row), times));
}

struct LatentPlan {
    // For each source tap: latents of every (context, chunk), contiguous in
    // context-major chunk order.
    std::map<int, Var> by_tap;
    std::vector<int> ctx_offset;  // chunk offset of each context
    int total_chunks = 0;
};

void check_contexts(std::span<const ChunkTaps> contexts, int needed_tap) {
    for (const ChunkTaps& c : contexts) {
        require_shape(!c.taps.empty(), "hypernet: context without chunks");
        require_shape(c.masks.empty() || c.masks.size() == c.taps.size(), "hypernet: one mask per chunk");
        for (const auto& t : c.taps) {
            require_shape(static_cast<int>(t.size()) > needed_tap, "hypernet: activation stack too shallow");
        }
    }
}

LatentPlan run_latents(Tape& tape, const HypernetGraph& g, std::span<const ChunkTaps> contexts, const std::vector<int>& taps) {
    LatentPlan plan;
    for (const ChunkTaps& c : contexts) {
        plan.ctx_offset.push_back(plan.total_chunks);
        plan.total_chunks += static_cast<int>(c.taps.size());
    }
    std::vector<Var> inputs;
    std::vector<const std::vector<std::uint8_t>*> masks;
    for (int tap : taps) {
        for (const ChunkTaps& c : contexts) {
            for (std::size_t k = 0; k < c.taps.size(); ++k) {
                inputs.push_back(c.taps[k][static_cast<std::size_t>(tap)]);
                masks.push_back(c.masks.empty() ? nullptr : &c.masks[k]);
            }
        }
    }
    Var u = hypernet_latents(tape, g, inputs, masks);
    const int per_tap = plan.total_chunks * g.params->config.n_latents;
    for (std::size_t i = 0; i < taps.size(); ++i) {
        plan.by_tap[taps[i]] = taps.size() == 1 ? u : ops::rows(tape, u, static_cast<int>(i) * per_tap, per_tap);
    }
    return plan;
}

// Head outputs [total_chunks*M x width] for one target, from a latent plan.
Var head_outputs(Tape& tape, const HypernetGraph& g, const LatentPlan& plan, const HeadTarget& t, std::size_t ti) {
    return ops::matmul_nt(tape, plan.by_tap.at(t.source_tap), g.heads[ti]);
}

template <typename Emit>
void for_each_target(Tape& tape, const HypernetGraph& g, std::span<const ChunkTaps> contexts, GenerationMode mode,
                     Emit emit) {
    const auto targets = g.params->targets();
    int deepest = 0;
    std::set<int> taps;
    for (const HeadTarget& t : targets) {
        taps.insert(t.source_tap);
        deepest = std::max(deepest, t.source_tap);
    }
    check_contexts(contexts, deepest);
    if (mode == GenerationMode::batched) {
        const LatentPlan plan = run_latents(tape, g, contexts, std::vector<int>(taps.begin(), taps.end()));
        for (std::size_t ti = 0; ti < targets.size(); ++ti) {
            emit(ti, targets[ti], plan, head_outputs(tape, g, plan, targets[ti], ti));
        }
        return;
    }
    // One target layer at a time: latents are recomputed for every head.
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        const LatentPlan plan = run_latents(tape, g, contexts, {targets[ti].source_tap});
        emit(ti, targets[ti], plan, head_outputs(tape, g, plan, targets[ti], ti));
    }
}

}  // namespace

std::vector<std::map<std::string, LoraSlot>> hypernet_lora(Tape& tape, const HypernetGraph& g,
                                                           std::span<const ChunkTaps> contexts, GenerationMode mode) {
    const HypernetConfig& c = g.params->config;
    if (c.output_mode != OutputMode::lora) throw ConfigError("hypernet_lora: hypernetwork emits prefix keys/values");
    const int m = c.n_latents;
    std::vector<std::map<std::string, LoraSlot>> out(contexts.size());
    for_each_target(tape, g, contexts, mode, [&](std::size_t ti, const HeadTarget& t, const LatentPlan& plan, Var h) {
        Var alpha_row = ops::rows(tape, g.alpha, static_cast<int>(ti), 1);
        for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
            const int kc = static_cast<int>(contexts[ci].taps.size());
            Var hc = plan.total_chunks == kc ? h : ops::rows(tape, h, plan.ctx_offset[ci] * m, kc * m);
            LoraSlot s;
            s.a = ops::cols(tape, hc, 0, t.d_in);
            s.bt = ops::cols(tape, hc, t.d_in, t.d_out);
            s.alpha = c.alpha_mode == AlphaMode::per_rank ? tile_cols(tape, alpha_row, kc)
                                                           : tile_cols(tape, alpha_row, kc * m);
            out[ci][t.id] = s;
        }
    });
    return out;
}

std::vector<std::vector<PrefixSlot>> hypernet_prefix(Tape& tape, const HypernetGraph& g, const LmGraph& lm,
                                                     std::span<const ChunkTaps> contexts, GenerationMode mode) {
    const HypernetConfig& c = g.params->config;
    if (c.output_mode != OutputMode::prefix_kv) throw ConfigError("hypernet_prefix: hypernetwork emits LoRA");
    const LMConfig& lc = g.params->lm;
    const int m = c.n_latents;
    const int width = lc.n_heads * lc.d_head;
    std::vector<std::vector<PrefixSlot>> out(contexts.size(), std::vector<PrefixSlot>(static_cast<std::size_t>(lc.n_layers)));
    for_each_target(tape, g, contexts, mode, [&](std::size_t, const HeadTarget& t, const LatentPlan& plan, Var h) {
        for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
            const int kc = static_cast<int>(contexts[ci].taps.size());
            Var hc = plan.total_chunks == kc ? h : ops::rows(tape, h, plan.ctx_offset[ci] * m, kc * m);
            Var keys = ops::cols(tape, hc, 0, width);
            if (c.rope_on_keys) {
                keys = ops::head_rmsnorm(tape, keys, lm.blocks[static_cast<std::size_t>(t.block)].k_norm, lc.n_heads,
                                         lc.norm_eps);
                std::vector<int> pos(static_cast<std::size_t>(kc * m));
                for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
                keys = ops::rope(tape, keys, pos, lc.n_heads, lc.rope_base);
            }
            out[ci][static_cast<std::size_t>(t.block)] = {keys, ops::cols(tape, hc, width, width)};
        }
    });
    return out;
}

int required_lm_blocks(const HypernetParams& hp) {
    int deepest = 0;
    for (const HeadTarget& t : hp.targets()) deepest = std::max(deepest, t.source_tap);
    return deepest;
}

// ---------------------------------------------------------------------------

Matrix cross_attend(const HypernetParams& hp, const Matrix& z, std::span<const std::uint8_t> mask) {
    Tape tape(false);
    HypernetGraph g = bind_hypernet(tape, hp, nullptr);
    const std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    const std::vector<std::uint8_t>* mp = &mk;
    Var in = tape.constant_ref(z);
    return hypernet_latents(tape, g, std::span<const Var>(&in, 1), std::span<const std::vector<std::uint8_t>* const>(&mp, 1))
        .value();
}

LoraLayerDelta emit_lora_layer(const HypernetParams& hp, int target_index, const Matrix& u) {
    const auto targets = hp.targets();
    require_shape(target_index >= 0 && target_index < static_cast<int>(targets.size()), "emit_lora_layer: bad target");
    require_shape(hp.config.output_mode == OutputMode::lora, "emit_lora_layer: hypernetwork emits prefix keys/values");
    require_shape(u.cols() == hp.config.d_latent, "emit_lora_layer: latent width mismatch");
    const HeadTarget& t = targets[static_cast<std::size_t>(target_index)];
    const Matrix h = u * hp.heads[static_cast<std::size_t>(target_index)].transpose();
    LoraLayerDelta d;
    d.a = h.leftCols(t.d_in);
    d.b = h.middleCols(t.d_in, t.d_out).transpose();
    d.mode = hp.config.alpha_mode;
    const auto row = hp.alpha.row(target_index);
    d.alpha.assign(row.data(), row.data() + row.size());
    if (d.mode == AlphaMode::per_rank) require_shape(d.rank() == static_cast<int>(d.alpha.size()), "emit_lora_layer: rank mismatch");
    return d;
}

namespace {

ChunkTaps const_taps(Tape& tape, std::span<const ActivationStack> chunks) {
    ChunkTaps ct;
    for (const ActivationStack& s : chunks) {
        std::vector<Var> taps;
        for (const Matrix& z : s.z) taps.push_back(tape.constant_ref(z));
        ct.taps.push_back(std::move(taps));
        ct.masks.push_back(s.mask);
    }
    return ct;
}

}  // namespace

LoraAdapter generate_adapter(const HypernetParams& hp, std::span<const ActivationStack> chunks, GenerationMode mode) {
    require_shape(!chunks.empty(), "generate_adapter: no chunks");
    Tape tape(false);
    HypernetGraph g = bind_hypernet(tape, hp, nullptr);
    const ChunkTaps ct = const_taps(tape, chunks);
    const auto slots = hypernet_lora(tape, g, std::span<const ChunkTaps>(&ct, 1), mode);
    const int k = static_cast<int>(chunks.size());
    LoraAdapter ad;
    ad.chunk_rank = hp.config.n_latents;
    ad.n_chunks = k;
    for (const auto& [id, s] : slots.front()) {
        LoraLayerDelta d;
        d.a = s.a.value();
        d.b = s.bt.value().transpose();
        if (hp.config.alpha_mode == AlphaMode::per_layer && k == 1) {
            d.mode = AlphaMode::per_layer;
            d.alpha = {s.alpha.value()(0, 0)};
        } else {
            d.mode = AlphaMode::per_rank;
            d.alpha.assign(s.alpha.value().data(), s.alpha.value().data() + s.alpha.value().size());
        }
        ad.layers[id] = std::move(d);
    }
    ad.validate();
    return ad;
}

PrefixKV generate_prefix_kv(const HypernetParams& hp, const TinyLMParams& lm, std::span<const ActivationStack> chunks,
                            GenerationMode mode) {
    require_shape(!chunks.empty(), "generate_prefix_kv: no chunks");
    require_shape(lm.config == hp.lm, "generate_prefix_kv: model config mismatch");
    Tape tape(false);
    HypernetGraph g = bind_hypernet(tape, hp, nullptr);
    LmGraph lg = bind_lm(tape, lm, nullptr);
    const ChunkTaps ct = const_taps(tape, chunks);
    const auto slots = hypernet_prefix(tape, g, lg, std::span<const ChunkTaps>(&ct, 1), mode);
    PrefixKV kv;
    kv.rope_applied = hp.config.rope_on_keys;
    for (const PrefixSlot& s : slots.front()) {
        kv.keys.push_back(s.keys.value());
        kv.values.push_back(s.values.value());
    }
    kv.validate(lm.config);
    return kv;
}

std::vector<ActivationStack> encode_chunks(const TinyLMParams& lm, std::span<const int> context, const ChunkPlan& plan,
                                           int n_blocks) {
    const auto parts = split_tokens(context, plan);
    // Each chunk is encoded as its own document (BOS + chunk), packed into one pass.
    std::vector<int> tokens;
    SequenceLayout lay;
    for (const auto& p : parts) {
        const int start = static_cast<int>(tokens.size());
        tokens.push_back(Tokenizer::kBos);
        tokens.insert(tokens.end(), p.begin(), p.end());
        lay.segments.push_back({start, static_cast<int>(p.size()) + 1, 0, -1});
    }
    lay.total = static_cast<int>(tokens.size());
    require_shape(n_blocks >= 0 && n_blocks <= lm.config.n_layers, "encode_chunks: bad block count");
    Tape tape(false);
    LmGraph g = bind_lm(tape, lm, nullptr);
    GraphRequest req;
    req.n_blocks = n_blocks;
    req.logits = false;
    const GraphOutput o = lm_graph_forward(tape, g, tokens, lay, req);
    std::vector<ActivationStack> out;
    for (const Segment& s : lay.segments) {
        ActivationStack st;
        for (const Var& z : o.taps) st.z.push_back(z.value().middleRows(s.start, s.length));
        st.mask.assign(static_cast<std::size_t>(s.length), 1);
        out.push_back(std::move(st));
    }
    return out;
}

LoraAdapter internalize(const HypernetParams& hp, const TinyLMParams& lm, std::span<const int> context,
                        GenerationMode mode) {
    const ChunkPlan plan = chunk_context(static_cast<int>(context.size()), hp.config.max_chunk_tokens);
    const auto chunks = encode_chunks(lm, context, plan, required_lm_blocks(hp));
    return generate_adapter(hp, chunks, mode);
}

PrefixKV internalize_prefix(const HypernetParams& hp, const TinyLMParams& lm, std::span<const int> context,
                            GenerationMode mode) {
    const ChunkPlan plan = chunk_context(static_cast<int>(context.size()), hp.config.max_chunk_tokens);
    const auto chunks = encode_chunks(lm, context, plan, required_lm_blocks(hp));
    return generate_prefix_kv(hp, lm, chunks, mode);
}

}  // namespace d2l
