#pragma once

// Perceiver-style hypernetwork: a fixed set of learned latent queries
// cross-attends to context activations of the frozen model and is read out by
// per-target-layer heads into LoRA rows/columns (or prefix keys/values).
//
// Latent i of layer l's head output gives row i of A_l and column i of B_l.

#include "d2l/adapters.hpp"
#include "d2l/autograd.hpp"
#include "d2l/target_lm.hpp"

#include <nlohmann/json_fwd.hpp>

#include <map>
#include <span>
#include <string>
#include <vector>

namespace d2l {

enum class OutputMode { lora, prefix_kv };
enum class ActivationSource { per_layer, single_layer };
enum class GenerationMode { batched, iterative };

std::string to_string(OutputMode m);
std::string to_string(ActivationSource s);
std::string to_string(GenerationMode m);
OutputMode output_mode_from_string(std::string_view s);
ActivationSource activation_source_from_string(std::string_view s);
GenerationMode generation_mode_from_string(std::string_view s);

struct HypernetConfig {
    int d_latent = 64;
    int n_latents = 8;  // LoRA rank per chunk, or prefix tokens per chunk
    int n_xattn_blocks = 2;
    int n_heads = 4;
    int d_proj_hidden = 128;
    int d_mlp = 128;
    bool latent_self_attention = false;
    OutputMode output_mode = OutputMode::lora;
    std::vector<std::string> target_modules = {"mlp.down"};
    ActivationSource activation_source = ActivationSource::per_layer;
    int source_layer = 2;  // tap index used by single_layer
    AlphaMode alpha_mode = AlphaMode::per_rank;
    float alpha_init = 1e-3f;
    bool rope_on_keys = true;  // prefix_kv only
    int max_chunk_tokens = 256;
    int min_chunk_tokens = 25;
    float norm_eps = 1e-5f;

    void validate(const LMConfig& lm) const;
    bool operator==(const HypernetConfig&) const = default;
};

void to_json(nlohmann::json& j, const HypernetConfig& c);
void from_json(const nlohmann::json& j, HypernetConfig& c);

struct XAttnBlockParams {
    Matrix lat_norm, ctx_norm;  // [1 x d]
    Matrix wq, wk, wv, wo;      // [d x d]
    Matrix sa_norm, sa_wq, sa_wk, sa_wv, sa_wo;  // latent self-attention (empty when disabled)
    Matrix mlp_norm;            // [1 x d]
    Matrix w_up;                // [d_mlp x d]
    Matrix w_down;              // [d x d_mlp]

    bool operator==(const XAttnBlockParams&) const = default;
};

// A head slot: one target layer id (lora) or one model block (prefix_kv).
struct HeadTarget {
    std::string id;
    int block = 0;
    int source_tap = 0;  // activation tap index feeding the head
    int d_in = 0;        // lora only
    int d_out = 0;       // lora: output width; prefix_kv: 2 * n_heads * d_head
};

struct HypernetParams {
    HypernetConfig config;
    LMConfig lm;
    Matrix latents;               // [M x d]
    Matrix in_norm;               // [1 x D]
    Matrix in_w1;                 // [h x D]
    Matrix in_w2;                 // [d x h]
    std::vector<XAttnBlockParams> blocks;
    Matrix out_norm;              // [1 x d]
    std::vector<Matrix> heads;    // per target, [(d_in + d_out) x d] or [2 D_attn x d]
    Matrix alpha;                 // [n_targets x M] (per_rank) or [n_targets x 1]

    std::vector<HeadTarget> targets() const;
    void visit(const std::function<void(const std::string&, Matrix&)>& fn);
    void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::size_t parameter_count() const;
    HypernetParams zeros_like() const;
    bool operator==(const HypernetParams&) const = default;
};

std::vector<HeadTarget> head_targets(const HypernetConfig& c, const LMConfig& lm);
HypernetParams init_hypernet(const HypernetConfig& config, const LMConfig& lm, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Chunking.

struct ChunkPlan {
    std::vector<int> sizes;  // consecutive, sums to the context length
    int count() const { return static_cast<int>(sizes.size()); }
};

// Contexts longer than max_chunk_tokens are split into ceil(n / max) chunks of
// near-equal size (earlier chunks take the remainder); otherwise one chunk.
ChunkPlan chunk_context(int n_tokens, int max_chunk_tokens);

// Training plan: K = 1 w.p. 0.5, K = 2 w.p. 0.125, otherwise uniform over
// 3..max_k, reduced until every chunk has at least min_chunk tokens.
ChunkPlan sample_training_chunk_plan(Rng& rng, int n_tokens, int min_chunk, int max_k = 8);
int sample_chunk_count(Rng& rng, int max_k = 8);

std::vector<std::vector<int>> split_tokens(std::span<const int> tokens, const ChunkPlan& plan);

// ---------------------------------------------------------------------------
// Differentiable generation.

struct XAttnBlockVars {
    Var lat_norm, ctx_norm, wq, wk, wv, wo, sa_norm, sa_wq, sa_wk, sa_wv, sa_wo, mlp_norm, w_up, w_down;
};

struct HypernetGraph {
    const HypernetParams* params = nullptr;
    Var latents, in_norm, in_w1, in_w2, out_norm, alpha;
    std::vector<XAttnBlockVars> blocks;
    std::vector<Var> heads;
};

HypernetGraph bind_hypernet(Tape& tape, const HypernetParams& params, HypernetParams* grads);

// Activation taps of one context's chunks, as tape values: taps[k][i] = Z_i of chunk k.
struct ChunkTaps {
    std::vector<std::vector<Var>> taps;
    std::vector<std::vector<std::uint8_t>> masks;  // per chunk; empty = all valid
};

// Runs input projection and cross-attention blocks over any number of inputs
// in one grouped pass; returns final-normed latents, [n_inputs*M x d], in input order.
Var hypernet_latents(Tape& tape, const HypernetGraph& g, std::span<const Var> inputs,
                     std::span<const std::vector<std::uint8_t>* const> masks);

// Per context: one LoraSlot per target layer id (chunks rank-concatenated).
std::vector<std::map<std::string, LoraSlot>> hypernet_lora(Tape& tape, const HypernetGraph& g,
                                                           std::span<const ChunkTaps> contexts, GenerationMode mode);

// Per context: one PrefixSlot per model block.
std::vector<std::vector<PrefixSlot>> hypernet_prefix(Tape& tape, const HypernetGraph& g, const LmGraph& lm,
                                                     std::span<const ChunkTaps> contexts, GenerationMode mode);

// Number of LM blocks that must run to obtain every tap the heads read.
int required_lm_blocks(const HypernetParams& hp);

// ---------------------------------------------------------------------------
// Plain API.

// Final-normed latents for a single activation matrix Z [N x D].
Matrix cross_attend(const HypernetParams& hp, const Matrix& z, std::span<const std::uint8_t> mask = {});

// Reads one target head on latents U [M x d].
LoraLayerDelta emit_lora_layer(const HypernetParams& hp, int target_index, const Matrix& u);

// Chunk activations -> composed adapter (K = chunks.size()).
LoraAdapter generate_adapter(const HypernetParams& hp, std::span<const ActivationStack> chunks,
                             GenerationMode mode = GenerationMode::batched);
PrefixKV generate_prefix_kv(const HypernetParams& hp, const TinyLMParams& lm, std::span<const ActivationStack> chunks,
                            GenerationMode mode = GenerationMode::batched);

// Tokenised context -> chunk plan -> frozen-model activations per chunk.
std::vector<ActivationStack> encode_chunks(const TinyLMParams& lm, std::span<const int> context, const ChunkPlan& plan,
                                           int n_blocks);

// Convenience: chunk with max_chunk_tokens, encode, generate.
LoraAdapter internalize(const HypernetParams& hp, const TinyLMParams& lm, std::span<const int> context,
                        GenerationMode mode = GenerationMode::batched);
PrefixKV internalize_prefix(const HypernetParams& hp, const TinyLMParams& lm, std::span<const int> context,
                            GenerationMode mode = GenerationMode::batched);

}  // namespace d2l
