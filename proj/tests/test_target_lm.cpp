#include "support.hpp"

#include <fstream>

using namespace d2l;
using namespace d2l::test;

namespace {

using MatD = Eigen::MatrixXd;

MatD to_d(const Matrix& m) { return m.cast<double>(); }

MatD ref_rmsnorm(const MatD& x, const Matrix& g, double eps) {
    MatD y = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
        for (Eigen::Index j = 0; j < x.cols(); ++j) y(i, j) = x(i, j) * inv * g(0, j);
    }
    return y;
}

// y = x W^T with W stored [d_out x d_in].
MatD ref_linear(const MatD& x, const Matrix& w) {
    MatD y = MatD::Zero(x.rows(), w.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index o = 0; o < w.rows(); ++o)
            for (Eigen::Index k = 0; k < w.cols(); ++k) y(i, o) += x(i, k) * w(o, k);
    return y;
}

MatD ref_head_norm_rope(const MatD& x, const Matrix& g, const LMConfig& c, const std::vector<int>& pos, bool rope) {
    MatD y = x;
    const int dh = c.d_head;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (int h = 0; h < c.n_heads; ++h) {
            double ss = 0.0;
            for (int j = 0; j < dh; ++j) ss += x(i, h * dh + j) * x(i, h * dh + j);
            const double inv = 1.0 / std::sqrt(ss / dh + c.norm_eps);
            std::vector<double> v(static_cast<std::size_t>(dh));
            for (int j = 0; j < dh; ++j) v[static_cast<std::size_t>(j)] = x(i, h * dh + j) * inv * g(0, j);
            for (int j = 0; j < dh; ++j) y(i, h * dh + j) = v[static_cast<std::size_t>(j)];
            if (!rope) continue;
            for (int j = 0; j < dh / 2; ++j) {
                const double ang = pos[static_cast<std::size_t>(i)] * std::pow(static_cast<double>(c.rope_base), -2.0 * j / dh);
                const double x1 = v[static_cast<std::size_t>(j)], x2 = v[static_cast<std::size_t>(j + dh / 2)];
                y(i, h * dh + j) = x1 * std::cos(ang) - x2 * std::sin(ang);
                y(i, h * dh + j + dh / 2) = x1 * std::sin(ang) + x2 * std::cos(ang);
            }
        }
    }
    return y;
}

double ref_gelu(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

// Plain-loop decoder with optional merged adapter and prefix keys/values.
MatD reference_logits(const TinyLMParams& p, const std::vector<int>& tokens, const LoraAdapter* ad = nullptr,
                      const PrefixKV* prefix = nullptr) {
    const LMConfig& c = p.config;
    const int n = static_cast<int>(tokens.size());
    const int np = prefix ? prefix->n_prefix() : 0;
    std::vector<int> pos(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pos[static_cast<std::size_t>(i)] = i + np;
    auto weight = [&](int l, const std::string& m, const Matrix& w) -> Matrix {
        if (!ad) return w;
        auto it = ad->layers.find(layer_id(l, m));
        return it == ad->layers.end() ? w : apply_lora(w, it->second);
    };
    MatD x(n, c.d_model);
    for (int i = 0; i < n; ++i) x.row(i) = p.tok_emb.row(tokens[static_cast<std::size_t>(i)]).cast<double>();
    for (int l = 0; l < c.n_layers; ++l) {
        const BlockParams& b = p.blocks[static_cast<std::size_t>(l)];
        const MatD h = ref_rmsnorm(x, b.attn_norm, c.norm_eps);
        const MatD q = ref_head_norm_rope(ref_linear(h, weight(l, "attn.q", b.wq)), b.q_norm, c, pos, true);
        const MatD k = ref_head_norm_rope(ref_linear(h, weight(l, "attn.k", b.wk)), b.k_norm, c, pos, true);
        const MatD v = ref_linear(h, weight(l, "attn.v", b.wv));
        MatD att = MatD::Zero(n, c.n_heads * c.d_head);
        for (int hd = 0; hd < c.n_heads; ++hd) {
            const int o = hd * c.d_head;
            for (int i = 0; i < n; ++i) {
                std::vector<double> s;
                std::vector<MatD> vals;
                for (int j = 0; j < np; ++j) {
                    double d = 0.0;
                    for (int e = 0; e < c.d_head; ++e) d += q(i, o + e) * prefix->keys[static_cast<std::size_t>(l)](j, o + e);
                    s.push_back(d / std::sqrt(static_cast<double>(c.d_head)));
                    vals.push_back(prefix->values[static_cast<std::size_t>(l)].row(j).middleCols(o, c.d_head).cast<double>());
                }
                for (int j = 0; j <= i; ++j) {
                    double d = 0.0;
                    for (int e = 0; e < c.d_head; ++e) d += q(i, o + e) * k(j, o + e);
                    s.push_back(d / std::sqrt(static_cast<double>(c.d_head)));
                    vals.push_back(v.row(j).middleCols(o, c.d_head));
                }
                double mx = -1e300;
                for (double e : s) mx = std::max(mx, e);
                double z = 0.0;
                for (double& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < s.size(); ++j) att.row(i).middleCols(o, c.d_head) += (s[j] / z) * vals[j];
            }
        }
        x += ref_linear(att, weight(l, "attn.o", b.wo));
        MatD u = ref_linear(ref_rmsnorm(x, b.mlp_norm, c.norm_eps), weight(l, "mlp.up", b.w_up));
        for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = ref_gelu(u.data()[i]);
        x += ref_linear(u, weight(l, "mlp.down", b.w_down));
    }
    return ref_linear(ref_rmsnorm(x, p.final_norm, c.norm_eps), p.lm_head);
}

double max_abs(const MatD& a, const Matrix& b) { return (a - b.cast<double>()).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("forward matches a plain-loop reference decoder") {
    const TinyLMParams p = random_lm(micro_lm(), 11);
    Rng rng(5);
    for (int n : {1, 2, 7, 20}) {
        const auto tokens = random_tokens(rng, n);
        const LmForward f = forward_with_activations(p, tokens);
        CHECK(max_abs(reference_logits(p, tokens), f.logits) < 1e-4);
    }
}

TEST_CASE("forward with an adapter equals the reference with merged weights") {
    const LMConfig c = micro_lm();
    const TinyLMParams p = random_lm(c, 12);
    Rng rng(6);
    std::vector<std::string> mods(std::begin(kLinearModules), std::end(kLinearModules));
    const LoraAdapter ad = random_adapter(c, rng, 3, mods);
    const auto tokens = random_tokens(rng, 15);
    const LmForward f = forward_with_activations(p, tokens, {}, &ad);
    CHECK(max_abs(reference_logits(p, tokens, &ad), f.logits) < 1e-4);
}

TEST_CASE("forward with prefix kv equals the reference attention over prepended keys") {
    const LMConfig c = micro_lm();
    const TinyLMParams p = random_lm(c, 13);
    Rng rng(7);
    PrefixKV pk;
    pk.rope_applied = true;
    for (int l = 0; l < c.n_layers; ++l) {
        pk.keys.push_back(randn(3, c.n_heads * c.d_head, 1.0f, rng));
        pk.values.push_back(randn(3, c.n_heads * c.d_head, 1.0f, rng));
    }
    const auto tokens = random_tokens(rng, 9);
    const LmForward f = forward_with_activations(p, tokens, {}, nullptr, &pk);
    CHECK(max_abs(reference_logits(p, tokens, nullptr, &pk), f.logits) < 1e-4);
}

TEST_CASE("apply_lora matches a double loop") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> dim(1, 9);
        const int r = dim(rng), din = dim(rng), dout = dim(rng);
        const AlphaMode mode = trial % 2 ? AlphaMode::per_rank : AlphaMode::per_layer;
        const LoraLayerDelta d = random_delta(rng, r, din, dout, mode);
        const Matrix w = randn(dout, din, 1.0f, rng);
        const Matrix got = apply_lora(w, d);
        for (int o = 0; o < dout; ++o) {
            for (int i = 0; i < din; ++i) {
                double acc = w(o, i);
                for (int k = 0; k < r; ++k) {
                    const double a = mode == AlphaMode::per_rank ? d.alpha[static_cast<std::size_t>(k)] : d.alpha[0];
                    acc += a * static_cast<double>(d.b(o, k)) * static_cast<double>(d.a(k, i));
                }
                CHECK(std::abs(got(o, i) - acc) < 1e-5);
            }
        }
    }
}

TEST_CASE("null adapter leaves logits bit-identical") {
    const LMConfig c = micro_lm();
    const TinyLMParams p = random_lm(c, 14);
    Rng rng(9);
    LoraAdapter ad = random_adapter(c, rng, 2, {"mlp.down", "attn.q"});
    for (auto& [id, d] : ad.layers) d.b.setZero();
    const auto tokens = random_tokens(rng, 12);
    const Matrix base = forward_with_activations(p, tokens).logits;
    const Matrix with = forward_with_activations(p, tokens, {}, &ad).logits;
    CHECK(base == with);
    const Matrix before = p.blocks[0].w_down;
    (void)apply_lora(p.blocks[0].w_down, ad.layers.at("block0.mlp.down"));
    CHECK(before == p.blocks[0].w_down);
}

TEST_CASE("causality: earlier logits ignore later tokens") {
    const TinyLMParams p = random_lm(micro_lm(), 15);
    Rng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        auto a = random_tokens(rng, 16);
        auto b = a;
        std::uniform_int_distribution<int> cut(1, 15);
        const int t = cut(rng);
        const auto tail = random_tokens(rng, 16 - t);
        std::copy(tail.begin(), tail.end(), b.begin() + t);
        const Matrix la = forward_with_activations(p, a).logits;
        const Matrix lb = forward_with_activations(p, b).logits;
        CHECK(la.topRows(t) == lb.topRows(t));
    }
}

TEST_CASE("masked rows hold zeros and do not influence valid positions") {
    const TinyLMParams p = random_lm(micro_lm(), 16);
    Rng rng(11);
    auto tokens = random_tokens(rng, 10);
    std::vector<std::uint8_t> mask(10, 1);
    mask[3] = mask[7] = 0;
    const ActivationStack a = encode_context(p, tokens, mask);
    tokens[3] = 5;
    tokens[7] = 9;
    const ActivationStack b = encode_context(p, tokens, mask);
    CHECK(a.z.size() == static_cast<std::size_t>(p.config.n_layers + 1));
    for (std::size_t l = 0; l < a.z.size(); ++l) {
        CHECK(a.z[l].row(3).isZero(0.0f));
        CHECK(a.z[l].row(7).isZero(0.0f));
        CHECK(max_abs_diff(a.z[l], b.z[l]) == 0.0f);
    }
}

TEST_CASE("activation stack has shape [N x D] per tap and truncates to n_blocks") {
    const TinyLMParams p = random_lm(micro_lm(), 17);
    Rng rng(12);
    const auto tokens = random_tokens(rng, 6);
    const ActivationStack s = encode_context(p, tokens, {}, 1);
    REQUIRE(s.z.size() == 2);
    CHECK(s.z[1].rows() == 6);
    CHECK(s.z[1].cols() == p.config.d_model);
    CHECK(max_abs_diff(s.z[1], forward_with_activations(p, tokens).activations.z[1]) < 1e-6f);
}

TEST_CASE("generation is greedy, deterministic and audited") {
    const TinyLMParams p = random_lm(micro_lm(), 18);
    const auto prompt = student_prompt("hello");
    int seen = 0;
    GenerateOptions o;
    o.max_new = 5;
    o.on_prompt = [&](std::span<const int> pr) { seen += static_cast<int>(pr.size()); };
    const auto a = generate(p, prompt, o);
    const auto b = generate(p, prompt, o);
    CHECK(a == b);
    CHECK(a.size() <= 5u);
    CHECK(seen > 0);
    // First token is the argmax of the last prompt row.
    const Matrix lg = forward_with_activations(p, prompt).logits;
    if (!a.empty()) CHECK(a[0] == argmax_lowest(lg.row(lg.rows() - 1)));
}

TEST_CASE("argmax ties go to the lowest id") {
    RowVector r(5);
    r << 1.0f, 3.0f, 3.0f, -1.0f, 3.0f;
    CHECK(argmax_lowest(r) == 1);
}

TEST_CASE("generation refuses to exceed the positional budget") {
    LMConfig c = micro_lm();
    c.max_seq_len = 16;
    const TinyLMParams p = init_lm(c, 1);
    GenerateOptions o;
    o.max_new = 8;
    std::vector<int> prompt(10, 5);
    CHECK_THROWS_AS(generate(p, prompt, o), Error);
}

TEST_CASE("init is deterministic and config validation catches shape errors") {
    const LMConfig c = micro_lm();
    CHECK(init_lm(c, 3) == init_lm(c, 3));
    CHECK(init_lm(c, 3).checksum() != init_lm(c, 4).checksum());
    LMConfig bad = c;
    bad.d_head = 3;  // odd head width cannot be rotated
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = c;
    bad.n_heads = 3;  // 3 * 4 != 8
    CHECK_THROWS(bad.validate());
}

TEST_CASE("kv footprint formula") {
    const LMConfig c;
    CHECK(kv_cache_footprint(100, 10, c, 4) == 2ull * 4 * 4 * 16 * 110 * 4);
    CHECK(kv_cache_footprint(0, 0, c, 4) == 0);
}

TEST_CASE("packed batch loss equals the mean of unpacked losses") {
    const TinyLMParams p = random_lm(micro_lm(), 19);
    Rng rng(13);
    std::vector<LmExample> batch;
    for (int i = 0; i < 5; ++i) {
        LmExample e;
        e.tokens = random_tokens(rng, 6 + 5 * i);
        e.response_start = 3 + i;
        batch.push_back(e);
    }
    double mean = 0.0;
    for (const auto& e : batch) mean += lm_batch_loss(p, std::span<const LmExample>(&e, 1), 0.1f) / batch.size();
    CHECK(std::abs(lm_batch_loss(p, batch, 0.1f) - mean) < 1e-5);
}

TEST_CASE("pretraining lowers loss and is reproducible from the seed") {
    const LMConfig c = micro_lm();
    Rng rng(14);
    const auto corpus = niah_pretrain_corpus(rng, 40, 32, 48);
    PretrainOptions o;
    o.batch_tokens = 512;
    o.seed = 2;
    const TinyLMParams a = pretrain_lm(corpus, c, 30, 1e-2f, o);
    const TinyLMParams b = pretrain_lm(corpus, c, 30, 1e-2f, o);
    CHECK(a.checksum() == b.checksum());
    const TinyLMParams init = init_lm(c, o.seed);
    std::vector<LmExample> few(corpus.begin(), corpus.begin() + 8);
    CHECK(lm_batch_loss(a, few, 0.1f) < lm_batch_loss(init, few, 0.1f));
}
