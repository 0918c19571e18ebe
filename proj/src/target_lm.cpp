#include "d2l/target_lm.hpp"

#include "d2l/optim.hpp"
#include "d2l/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>

namespace d2l {

void LMConfig::validate() const {
    std::string bad;
    auto need = [&](bool ok, const char* what) {
        if (!ok) bad += std::string(bad.empty() ? "" : "; ") + what;
    };
    need(vocab_size >= 1, "vocab_size must be >= 1");
    need(d_model >= 1, "d_model must be >= 1");
    need(n_layers >= 1, "n_layers must be >= 1");
    need(n_heads >= 1, "n_heads must be >= 1");
    need(d_mlp >= 1, "d_mlp must be >= 1");
    need(max_seq_len >= 1, "max_seq_len must be >= 1");
    need(rope_base > 0.0f, "rope_base must be positive");
    need(norm_eps > 0.0f, "norm_eps must be positive");
    if (!bad.empty()) throw ConfigError("invalid LMConfig: " + bad);
    if (d_model % n_heads != 0) {
        throw ShapeError("invalid dimension: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                         std::to_string(n_heads));
    }
    if (d_head != d_model / n_heads) throw ShapeError("invalid dimension: d_head must equal d_model / n_heads");
    if (d_head % 2 != 0) throw ShapeError("invalid dimension: d_head must be even for rotary embeddings");
}

void to_json(nlohmann::json& j, const LMConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},       {"d_head", c.d_head},         {"d_mlp", c.d_mlp},
                       {"max_seq_len", c.max_seq_len}, {"rope_base", short_float(c.rope_base)}, {"norm_eps", short_float(c.norm_eps)}};
}

void from_json(const nlohmann::json& j, LMConfig& c) {
    LMConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_head = j.value("d_head", c.d_model / std::max(1, c.n_heads));
    c.d_mlp = j.value("d_mlp", d.d_mlp);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.rope_base = j.value("rope_base", d.rope_base);
    c.norm_eps = j.value("norm_eps", d.norm_eps);
}

// ---------------------------------------------------------------------------

namespace {

template <typename Params, typename Fn>
void visit_impl(Params& p, Fn&& fn) {
    fn("tok_emb", p.tok_emb);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        const std::string pre = "block" + std::to_string(i) + ".";
        fn(pre + "attn_norm", b.attn_norm);
        fn(pre + "attn.q", b.wq);
        fn(pre + "attn.k", b.wk);
        fn(pre + "attn.v", b.wv);
        fn(pre + "attn.o", b.wo);
        fn(pre + "attn.q_norm", b.q_norm);
        fn(pre + "attn.k_norm", b.k_norm);
        fn(pre + "mlp_norm", b.mlp_norm);
        fn(pre + "mlp.up", b.w_up);
        fn(pre + "mlp.down", b.w_down);
    }
    fn("final_norm", p.final_norm);
    fn("lm_head", p.lm_head);
}

}  // namespace

void TinyLMParams::visit(const std::function<void(const std::string&, Matrix&)>& fn) { visit_impl(*this, fn); }
void TinyLMParams::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    visit_impl(*this, fn);
}

std::uint64_t TinyLMParams::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    visit([&](const std::string& name, const Matrix& m) {
        h = hash_bytes(name.data(), name.size(), h);
        h = hash_matrix(m, h);
    });
    return h;
}

std::size_t TinyLMParams::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

TinyLMParams TinyLMParams::zeros_like() const {
    TinyLMParams z = *this;
    z.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

std::pair<int, int> linear_shape(const LMConfig& c, const std::string& module) {
    if (module == "attn.q" || module == "attn.k" || module == "attn.v" || module == "attn.o") {
        return {c.d_model, c.d_model};
    }
    if (module == "mlp.up") return {c.d_mlp, c.d_model};
    if (module == "mlp.down") return {c.d_model, c.d_mlp};
    throw ConfigError("unknown linear module: " + module);
}

TinyLMParams init_lm(const LMConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const int d = config.d_model;
    const float lin = 1.0f / std::sqrt(static_cast<float>(d));
    const float resid = lin / std::sqrt(2.0f * static_cast<float>(config.n_layers));
    TinyLMParams p;
    p.config = config;
    p.tok_emb = randn(config.vocab_size, d, 1.0f, rng);
    for (int l = 0; l < config.n_layers; ++l) {
        BlockParams b;
        b.attn_norm = Matrix::Ones(1, d);
        b.wq = randn(d, d, lin, rng);
        b.wk = randn(d, d, lin, rng);
        b.wv = randn(d, d, lin, rng);
        b.wo = randn(d, d, resid, rng);
        b.q_norm = Matrix::Ones(1, config.d_head);
        b.k_norm = Matrix::Ones(1, config.d_head);
        b.mlp_norm = Matrix::Ones(1, d);
        b.w_up = randn(config.d_mlp, d, lin, rng);
        b.w_down = randn(d, config.d_mlp, resid * std::sqrt(static_cast<float>(d) / config.d_mlp), rng);
        p.blocks.push_back(std::move(b));
    }
    p.final_norm = Matrix::Ones(1, d);
    p.lm_head = randn(config.vocab_size, d, lin, rng);
    return p;
}

void PrefixKV::validate(const LMConfig& c) const {
    if (static_cast<int>(keys.size()) != c.n_layers || static_cast<int>(values.size()) != c.n_layers) {
        throw ShapeError("prefix has " + std::to_string(keys.size()) + " layers, model has " +
                         std::to_string(c.n_layers));
    }
    for (std::size_t l = 0; l < keys.size(); ++l) {
        require_shape(keys[l].cols() == c.d_model && values[l].cols() == c.d_model, "prefix width mismatch");
        require_shape(keys[l].rows() == keys.front().rows() && values[l].rows() == keys[l].rows(),
                      "prefix length differs across layers");
    }
}

Matrix prepare_prefix_keys(const TinyLMParams& params, int layer, const Matrix& raw_keys) {
    const LMConfig& c = params.config;
    Tape t(false);
    Var k = t.constant_ref(raw_keys);
    Var g = t.constant_ref(params.blocks.at(static_cast<std::size_t>(layer)).k_norm);
    Var kn = ops::head_rmsnorm(t, k, g, c.n_heads, c.norm_eps);
    std::vector<int> pos(static_cast<std::size_t>(raw_keys.rows()));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    return ops::rope(t, kn, pos, c.n_heads, c.rope_base).value();
}

std::pair<Matrix, Matrix> inject_prefix_kv(const PrefixKV& prefix, int layer, int n_layers, const Matrix& keys,
                                           const Matrix& values) {
    if (static_cast<int>(prefix.keys.size()) != n_layers || static_cast<int>(prefix.values.size()) != n_layers) {
        throw ShapeError("prefix layer count mismatch");
    }
    const Matrix& pk = prefix.keys.at(static_cast<std::size_t>(layer));
    const Matrix& pv = prefix.values.at(static_cast<std::size_t>(layer));
    require_shape(pk.cols() == keys.cols() && pv.cols() == values.cols(), "prefix width mismatch");
    Matrix k(pk.rows() + keys.rows(), keys.cols());
    Matrix v(pv.rows() + values.rows(), values.cols());
    k << pk, keys;
    v << pv, values;
    return {std::move(k), std::move(v)};
}

// ---------------------------------------------------------------------------

LmGraph bind_lm(Tape& tape, const TinyLMParams& params, TinyLMParams* grads) {
    LmGraph g;
    g.params = &params;
    auto bind = [&](const Matrix& v, Matrix* sink) { return grads ? tape.leaf(v, sink) : tape.constant_ref(v); };
    g.tok_emb = bind(params.tok_emb, grads ? &grads->tok_emb : nullptr);
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        const BlockParams& b = params.blocks[i];
        BlockParams* gb = grads ? &grads->blocks[i] : nullptr;
        BlockVars v;
        v.attn_norm = bind(b.attn_norm, gb ? &gb->attn_norm : nullptr);
        v.wq = bind(b.wq, gb ? &gb->wq : nullptr);
        v.wk = bind(b.wk, gb ? &gb->wk : nullptr);
        v.wv = bind(b.wv, gb ? &gb->wv : nullptr);
        v.wo = bind(b.wo, gb ? &gb->wo : nullptr);
        v.q_norm = bind(b.q_norm, gb ? &gb->q_norm : nullptr);
        v.k_norm = bind(b.k_norm, gb ? &gb->k_norm : nullptr);
        v.mlp_norm = bind(b.mlp_norm, gb ? &gb->mlp_norm : nullptr);
        v.w_up = bind(b.w_up, gb ? &gb->w_up : nullptr);
        v.w_down = bind(b.w_down, gb ? &gb->w_down : nullptr);
        g.blocks.push_back(v);
    }
    g.final_norm = bind(params.final_norm, grads ? &grads->final_norm : nullptr);
    g.lm_head = bind(params.lm_head, grads ? &grads->lm_head : nullptr);
    return g;
}

namespace {

Var linear(Tape& t, Var x, Var w, int block, const char* module, const GraphAdapters* adapters,
           const SequenceLayout& layout) {
    Var y = ops::matmul_nt(t, x, w);
    if (adapters) {
        auto it = adapters->find(layer_id(block, module));
        if (it != adapters->end() && !it->second.empty()) y = ops::add(t, y, ops::lora_path(t, x, layout, it->second));
    }
    return y;
}

}  // namespace

GraphOutput lm_graph_forward(Tape& t, const LmGraph& g, std::span<const int> tokens, const SequenceLayout& layout,
                             const GraphRequest& req) {
    const LMConfig& c = g.params->config;
    layout.check();
    require_shape(static_cast<int>(tokens.size()) == layout.total, "forward: token count does not match layout");
    if (req.prefixes) {
        require_shape(static_cast<int>(req.prefixes->size()) == c.n_layers, "forward: prefix layer count != n_layers");
    }
    const int n_blocks = req.n_blocks < 0 ? c.n_layers : std::min(req.n_blocks, c.n_layers);
    const std::vector<int> pos = layout.positions();

    GraphOutput out;
    Var x = ops::embedding(t, g.tok_emb, tokens);
    out.taps.push_back(x);
    for (int l = 0; l < n_blocks; ++l) {
        const BlockVars& b = g.blocks[static_cast<std::size_t>(l)];
        Var h = ops::rmsnorm(t, x, b.attn_norm, c.norm_eps);
        Var q = linear(t, h, b.wq, l, "attn.q", req.adapters, layout);
        Var k = linear(t, h, b.wk, l, "attn.k", req.adapters, layout);
        Var v = linear(t, h, b.wv, l, "attn.v", req.adapters, layout);
        q = ops::rope(t, ops::head_rmsnorm(t, q, b.q_norm, c.n_heads, c.norm_eps), pos, c.n_heads, c.rope_base);
        k = ops::rope(t, ops::head_rmsnorm(t, k, b.k_norm, c.n_heads, c.norm_eps), pos, c.n_heads, c.rope_base);
        std::span<const PrefixSlot> pre;
        if (req.prefixes) pre = (*req.prefixes)[static_cast<std::size_t>(l)];
        Var a = ops::causal_attention(t, q, k, v, layout, pre, c.n_heads);
        x = ops::add(t, x, linear(t, a, b.wo, l, "attn.o", req.adapters, layout));
        Var m = ops::rmsnorm(t, x, b.mlp_norm, c.norm_eps);
        Var u = ops::gelu(t, linear(t, m, b.w_up, l, "mlp.up", req.adapters, layout));
        x = ops::add(t, x, linear(t, u, b.w_down, l, "mlp.down", req.adapters, layout));
        out.taps.push_back(x);
    }
    if (req.logits) {
        require_shape(n_blocks == c.n_layers, "forward: logits need every block");
        out.logits = ops::matmul_nt(t, ops::rmsnorm(t, x, g.final_norm, c.norm_eps), g.lm_head);
    }
    return out;
}

GraphAdapters bind_adapter(Tape& tape, const LMConfig& c, const LoraAdapter& adapter) {
    adapter.validate();
    GraphAdapters out;
    for (const auto& [name, d] : adapter.layers) {
        const auto dot = name.find('.');
        if (name.rfind("block", 0) != 0 || dot == std::string::npos) throw ShapeError("bad adapter layer id: " + name);
        const int block = std::stoi(name.substr(5, dot - 5));
        if (block < 0 || block >= c.n_layers) throw ShapeError("adapter layer " + name + " outside the model");
        const auto [dout, din] = linear_shape(c, name.substr(dot + 1));
        require_shape(d.d_in() == din && d.d_out() == dout,
                      "adapter layer " + name + " is " + std::to_string(d.d_out()) + "x" + std::to_string(d.d_in()) +
                          ", model expects " + std::to_string(dout) + "x" + std::to_string(din));
        LoraSlot s;
        s.a = tape.constant_ref(d.a);
        s.bt = tape.constant(d.b.transpose());
        s.alpha = tape.constant(d.alpha_per_rank());
        out[name].push_back(s);
    }
    return out;
}

GraphPrefixes bind_prefix(Tape& tape, const LMConfig& c, const PrefixKV& prefix) {
    prefix.validate(c);
    GraphPrefixes out(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        out[static_cast<std::size_t>(l)].push_back(
            {tape.constant_ref(prefix.keys[static_cast<std::size_t>(l)]), tape.constant_ref(prefix.values[static_cast<std::size_t>(l)])});
    }
    return out;
}

namespace {

SequenceLayout inference_layout(int n, std::span<const std::uint8_t> mask, bool slotted, int n_prefix) {
    SequenceLayout lay = SequenceLayout::single(n, n_prefix, slotted ? 0 : -1);
    if (!mask.empty()) {
        require_shape(static_cast<int>(mask.size()) == n, "forward: mask length mismatch");
        lay.key_valid.assign(mask.begin(), mask.end());
    }
    return lay;
}

void check_tokens(const LMConfig& c, std::span<const int> tokens) {
    for (int tok : tokens) {
        if (tok < 0 || tok >= c.vocab_size) throw ShapeError("token id " + std::to_string(tok) + " outside vocabulary");
    }
}

ActivationStack collect(const GraphOutput& g, std::span<const std::uint8_t> mask) {
    ActivationStack s;
    for (const Var& v : g.taps) s.z.push_back(v.value());
    if (mask.empty()) {
        s.mask.assign(static_cast<std::size_t>(s.n_tokens()), 1);
    } else {
        s.mask.assign(mask.begin(), mask.end());
        for (auto& z : s.z) {
            for (Eigen::Index i = 0; i < z.rows(); ++i) {
                if (!mask[static_cast<std::size_t>(i)]) z.row(i).setZero();
            }
        }
    }
    return s;
}

}  // namespace

LmForward forward_with_activations(const TinyLMParams& params, std::span<const int> tokens,
                                   std::span<const std::uint8_t> mask, const LoraAdapter* adapter,
                                   const PrefixKV* prefix) {
    const LMConfig& c = params.config;
    check_tokens(c, tokens);
    Tape t(false);
    LmGraph g = bind_lm(t, params, nullptr);
    GraphAdapters ga;
    GraphPrefixes gp;
    GraphRequest req;
    if (adapter) {
        ga = bind_adapter(t, c, *adapter);
        req.adapters = &ga;
    }
    int n_prefix = 0;
    if (prefix) {
        gp = bind_prefix(t, c, *prefix);
        req.prefixes = &gp;
        n_prefix = prefix->n_prefix();
    }
    const SequenceLayout lay =
        inference_layout(static_cast<int>(tokens.size()), mask, adapter != nullptr || prefix != nullptr, n_prefix);
    GraphOutput o = lm_graph_forward(t, g, tokens, lay, req);
    LmForward f;
    f.logits = o.logits.value();
    f.activations = collect(o, mask);
    return f;
}

ActivationStack encode_context(const TinyLMParams& params, std::span<const int> tokens,
                               std::span<const std::uint8_t> mask, int n_blocks) {
    check_tokens(params.config, tokens);
    Tape t(false);
    LmGraph g = bind_lm(t, params, nullptr);
    const SequenceLayout lay = inference_layout(static_cast<int>(tokens.size()), mask, false, 0);
    GraphRequest req;
    req.n_blocks = n_blocks;
    req.logits = false;
    return collect(lm_graph_forward(t, g, tokens, lay, req), mask);
}

int argmax_lowest(const Eigen::Ref<const RowVector>& row) {
    int best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (row(j) > row(best)) best = static_cast<int>(j);
    }
    return best;
}

std::vector<int> generate(const TinyLMParams& params, std::span<const int> prompt, const GenerateOptions& opts) {
    const LMConfig& c = params.config;
    const int n_prefix = opts.prefix ? opts.prefix->n_prefix() : 0;
    if (static_cast<int>(prompt.size()) + opts.max_new + n_prefix > c.max_seq_len) {
        throw Error("generation budget exceeded: prompt " + std::to_string(prompt.size()) + " + max_new " +
                    std::to_string(opts.max_new) + " + prefix " + std::to_string(n_prefix) + " > max_seq_len " +
                    std::to_string(c.max_seq_len));
    }
    if (opts.on_prompt) opts.on_prompt(prompt);
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < opts.max_new; ++step) {
        LmForward f = forward_with_activations(params, seq, {}, opts.adapter, opts.prefix);
        const int next = argmax_lowest(f.logits.row(f.logits.rows() - 1));
        if (next == Tokenizer::kEos) break;
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

std::uint64_t kv_cache_footprint(std::uint64_t n_ctx_tokens, std::uint64_t n_gen_tokens, const LMConfig& c,
                                 std::uint64_t bytes_per_scalar) {
    return 2ull * static_cast<std::uint64_t>(c.n_layers) * static_cast<std::uint64_t>(c.n_heads) *
           static_cast<std::uint64_t>(c.d_head) * (n_ctx_tokens + n_gen_tokens) * bytes_per_scalar;
}

// ---------------------------------------------------------------------------

namespace {

struct PackedLmBatch {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<float> weights;
    SequenceLayout layout;
};

PackedLmBatch pack_lm_batch(std::span<const LmExample* const> examples, float context_weight) {
    PackedLmBatch b;
    const float per_example = 1.0f / static_cast<float>(examples.size());
    for (const LmExample* ex : examples) {
        const int n = static_cast<int>(ex->tokens.size()) - 1;
        require_shape(n >= 1, "lm example needs at least two tokens");
        const int start = static_cast<int>(b.inputs.size());
        int n_resp = 0, n_ctx = 0;
        for (int i = 0; i < n; ++i) (i + 1 >= ex->response_start ? n_resp : n_ctx)++;
        for (int i = 0; i < n; ++i) {
            b.inputs.push_back(ex->tokens[static_cast<std::size_t>(i)]);
            b.targets.push_back(ex->tokens[static_cast<std::size_t>(i) + 1]);
            float w;
            if (i + 1 >= ex->response_start) {
                w = 1.0f / static_cast<float>(n_resp);
            } else {
                w = n_ctx > 0 ? context_weight / static_cast<float>(n_ctx) : 0.0f;
            }
            b.weights.push_back(w * per_example);
        }
        b.layout.segments.push_back({start, n, 0, -1});
    }
    b.layout.total = static_cast<int>(b.inputs.size());
    return b;
}

}  // namespace

double lm_batch_loss(const TinyLMParams& params, std::span<const LmExample> batch, float context_loss_weight) {
    std::vector<const LmExample*> ptrs;
    for (const LmExample& e : batch) ptrs.push_back(&e);
    PackedLmBatch b = pack_lm_batch(ptrs, context_loss_weight);
    Tape t(false);
    LmGraph g = bind_lm(t, params, nullptr);
    GraphOutput o = lm_graph_forward(t, g, b.inputs, b.layout, {});
    return ops::cross_entropy(t, o.logits, b.targets, b.weights).item();
}

TinyLMParams pretrain_lm(std::span<const LmExample> corpus, const LMConfig& config, int steps, float lr,
                         const PretrainOptions& opts, const TinyLMParams* init) {
    if (corpus.empty()) throw Error("pretrain_lm: empty corpus");
    TinyLMParams params = init ? *init : init_lm(config, opts.seed);
    if (steps <= 0) return params;
    Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    Adam adam(AdamConfig{0.9f, 0.98f, 1e-8f, opts.weight_decay});
    TinyLMParams grads = params.zeros_like();
    std::vector<Matrix*> pp, gp;
    params.visit([&](const std::string&, Matrix& m) { pp.push_back(&m); });
    grads.visit([&](const std::string&, Matrix& m) { gp.push_back(&m); });

    for (int step = 0; step < steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<const LmExample*> batch;
        int tokens = 0;
        while (batch.empty() || tokens < opts.batch_tokens) {
            const LmExample* ex = &corpus[pick(rng)];
            if (!batch.empty() && tokens + static_cast<int>(ex->tokens.size()) > opts.batch_tokens) break;
            batch.push_back(ex);
            tokens += static_cast<int>(ex->tokens.size());
        }
        PackedLmBatch b = pack_lm_batch(batch, opts.context_loss_weight);
        for (Matrix* g : gp) g->setZero();
        Tape t(true);
        LmGraph g = bind_lm(t, params, &grads);
        GraphOutput o = lm_graph_forward(t, g, b.inputs, b.layout, {});
        Var loss = ops::cross_entropy(t, o.logits, b.targets, b.weights);
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw DivergenceError("pretrain_lm: non-finite loss at step " + std::to_string(step));
        t.backward(loss);
        clip_grad_norm(gp, opts.grad_clip);
        const float cur = warmup_cosine(step, steps, lr, opts.warmup_frac);
        adam.step(pp, gp, cur);
        if (opts.on_step) {
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            opts.on_step(step, lv, cur, ms);
        }
    }
    return params;
}

}  // namespace d2l
