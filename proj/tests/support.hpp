#pragma once

#include "d2l/distill.hpp"
#include "d2l/hypernet.hpp"
#include "d2l/target_lm.hpp"
#include "d2l/tasks.hpp"
#include "d2l/tokenizer.hpp"

#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

namespace d2l::test {

// 2 layers, d=8: small enough for finite differences and naive references.
inline LMConfig micro_lm() {
    LMConfig c;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_head = 4;
    c.d_mlp = 16;
    c.max_seq_len = 512;
    return c;
}

inline HypernetConfig micro_hypernet() {
    HypernetConfig h;
    h.d_latent = 8;
    h.n_latents = 2;
    h.n_xattn_blocks = 1;
    h.n_heads = 2;
    h.d_proj_hidden = 8;
    h.d_mlp = 8;
    h.source_layer = 1;
    h.max_chunk_tokens = 32;
    h.min_chunk_tokens = 4;
    return h;
}

inline std::vector<int> random_tokens(Rng& rng, int n, int lo = 3) {
    std::uniform_int_distribution<int> d(lo, Tokenizer::instance().vocab_size() - 1);
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int& x : t) x = d(rng);
    return t;
}

inline float max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    return a.size() == 0 ? 0.0f : (a - b).cwiseAbs().maxCoeff();
}

// Perturbs every LM weight so tests do not depend on init structure.
inline TinyLMParams random_lm(const LMConfig& c, std::uint64_t seed, float scale = 0.3f) {
    TinyLMParams p = init_lm(c, seed);
    Rng rng(seed + 99);
    p.visit([&](const std::string& name, Matrix& m) {
        if (name.find("norm") != std::string::npos) {
            m.array() += randn(m.rows(), m.cols(), 0.1f, rng).array();
        } else {
            m += randn(m.rows(), m.cols(), scale / std::sqrt(static_cast<float>(m.cols())), rng);
        }
    });
    return p;
}

inline LoraLayerDelta random_delta(Rng& rng, int r, int d_in, int d_out, AlphaMode mode, float scale = 0.2f) {
    LoraLayerDelta d;
    d.a = randn(r, d_in, scale, rng);
    d.b = randn(d_out, r, scale, rng);
    d.mode = mode;
    std::uniform_real_distribution<float> u(0.2f, 1.5f);
    d.alpha.resize(mode == AlphaMode::per_rank ? static_cast<std::size_t>(r) : 1);
    for (float& a : d.alpha) a = u(rng);
    return d;
}

inline LoraAdapter random_adapter(const LMConfig& c, Rng& rng, int r, const std::vector<std::string>& modules,
                                  float scale = 0.2f) {
    LoraAdapter ad;
    ad.chunk_rank = r;
    for (int b = 0; b < c.n_layers; ++b) {
        for (const auto& m : modules) {
            const auto [dout, din] = linear_shape(c, m);
            ad.layers[layer_id(b, m)] = random_delta(rng, r, din, dout, AlphaMode::per_rank, scale);
        }
    }
    return ad;
}

}  // namespace d2l::test

namespace d2l::test {

// Teacher-with-context targets for a fixed response.
inline DistillSample make_sample(const TinyLMParams& lm, const std::string& context, const std::string& query,
                                 const std::string& answer, int k = 16) {
    const Tokenizer& tok = Tokenizer::instance();
    DistillSample s;
    s.context = tok.encode(context);
    s.query = tok.encode(query);
    s.response = response_tokens(answer);
    std::vector<int> seq = teacher_prompt(context, query);
    const int first = static_cast<int>(seq.size()) - 1;
    seq.insert(seq.end(), s.response.begin(), s.response.end() - 1);
    const Matrix logits = forward_with_activations(lm, seq).logits;
    s.targets = topk_targets(logits.middleRows(first, static_cast<Eigen::Index>(s.response.size())), k);
    s.targets.response = s.response;
    return s;
}

}  // namespace d2l::test
