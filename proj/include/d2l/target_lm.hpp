#pragma once

// Small decoder-only transformer used as teacher (context in prompt) and as
// student (adapter or prefix applied, no context).
//
// Block l (0-based) reads the residual stream Z_l and writes Z_{l+1}:
//   h  = Z_l + Wo * attn(rope(qnorm(Wq n1)), rope(knorm(Wk n1)), Wv n1),  n1 = rms(Z_l)
//   Z' = h + Wdown * gelu(Wup * rms(h))
// Linear layers store weights as [d_out x d_in].

#include "d2l/adapters.hpp"
#include "d2l/autograd.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace d2l {

struct LMConfig {
    int vocab_size = 78;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_head = 16;
    int d_mlp = 256;
    int max_seq_len = 2048;
    float rope_base = 10000.0f;
    float norm_eps = 1e-5f;

    void validate() const;
    bool operator==(const LMConfig&) const = default;
};

void to_json(nlohmann::json& j, const LMConfig& c);
void from_json(const nlohmann::json& j, LMConfig& c);

// Linear modules that can carry an adapter.
inline constexpr const char* kLinearModules[] = {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"};

struct BlockParams {
    Matrix attn_norm;  // [1 x D]
    Matrix wq, wk, wv, wo;  // [D x D]
    Matrix q_norm, k_norm;  // [1 x d_head]
    Matrix mlp_norm;   // [1 x D]
    Matrix w_up;       // [d_mlp x D]
    Matrix w_down;     // [D x d_mlp]

    bool operator==(const BlockParams&) const = default;
};

struct TinyLMParams {
    LMConfig config;
    Matrix tok_emb;  // [V x D]
    std::vector<BlockParams> blocks;
    Matrix final_norm;  // [1 x D]
    Matrix lm_head;     // [V x D]

    // Visits every tensor with its checkpoint name, in a fixed order.
    void visit(const std::function<void(const std::string&, Matrix&)>& fn);
    void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::uint64_t checksum() const;
    std::size_t parameter_count() const;
    // Same layout, all tensors zero.
    TinyLMParams zeros_like() const;
    bool operator==(const TinyLMParams&) const = default;
};

// Shape of the weight a layer id addresses, as (d_out, d_in).
std::pair<int, int> linear_shape(const LMConfig& c, const std::string& module);

TinyLMParams init_lm(const LMConfig& config, std::uint64_t seed);

struct ActivationStack {
    std::vector<Matrix> z;            // n_layers + 1 slices, each [N x D]; z[0] = embeddings
    std::vector<std::uint8_t> mask;   // 1 = real token; masked rows hold zeros
    int n_tokens() const { return z.empty() ? 0 : static_cast<int>(z.front().rows()); }
};

struct PrefixKV {
    std::vector<Matrix> keys;    // per layer, [n_prefix x n_heads*d_head]
    std::vector<Matrix> values;  // same shape
    bool rope_applied = false;
    int n_prefix() const { return keys.empty() ? 0 : static_cast<int>(keys.front().rows()); }
    void validate(const LMConfig& c) const;
};

// Key normalisation (the model's own k-norm) followed by rotary embedding at
// positions 0..n-1; raw: [n x n_heads*d_head] for block `layer`.
Matrix prepare_prefix_keys(const TinyLMParams& params, int layer, const Matrix& raw_keys);

// Prepends prefix keys/values to one layer's real-token keys/values.
std::pair<Matrix, Matrix> inject_prefix_kv(const PrefixKV& prefix, int layer, int n_layers, const Matrix& keys,
                                           const Matrix& values);

// ---------------------------------------------------------------------------
// Differentiable forward.

struct BlockVars {
    Var attn_norm, wq, wk, wv, wo, q_norm, k_norm, mlp_norm, w_up, w_down;
};

struct LmGraph {
    const TinyLMParams* params = nullptr;
    Var tok_emb;
    std::vector<BlockVars> blocks;
    Var final_norm, lm_head;
};

// Binds weights into the tape; with grads == nullptr they are constants.
LmGraph bind_lm(Tape& tape, const TinyLMParams& params, TinyLMParams* grads);

// Per target layer id, one LoraSlot per layout slot.
using GraphAdapters = std::map<std::string, std::vector<LoraSlot>>;
// Per block, one PrefixSlot per layout slot.
using GraphPrefixes = std::vector<std::vector<PrefixSlot>>;

struct GraphOutput {
    Var logits;             // invalid when logits were not requested
    std::vector<Var> taps;  // Z_0 .. Z_k for the blocks run
};

struct GraphRequest {
    const GraphAdapters* adapters = nullptr;
    const GraphPrefixes* prefixes = nullptr;
    int n_blocks = -1;  // run only the first n blocks (-1 = all)
    bool logits = true;
};

GraphOutput lm_graph_forward(Tape& tape, const LmGraph& g, std::span<const int> tokens, const SequenceLayout& layout,
                             const GraphRequest& req);

// Slots of a concrete adapter bound as constants; validates shapes against the model.
GraphAdapters bind_adapter(Tape& tape, const LMConfig& c, const LoraAdapter& adapter);
GraphPrefixes bind_prefix(Tape& tape, const LMConfig& c, const PrefixKV& prefix);

// ---------------------------------------------------------------------------
// Plain inference API.

struct LmForward {
    Matrix logits;  // [N x V]
    ActivationStack activations;
};

LmForward forward_with_activations(const TinyLMParams& params, std::span<const int> tokens,
                                   std::span<const std::uint8_t> mask = {}, const LoraAdapter* adapter = nullptr,
                                   const PrefixKV* prefix = nullptr);

// Activations only, for blocks 0..n_blocks-1 (Z_0..Z_{n_blocks}); no logits.
ActivationStack encode_context(const TinyLMParams& params, std::span<const int> tokens,
                               std::span<const std::uint8_t> mask = {}, int n_blocks = -1);

struct GenerateOptions {
    int max_new = 8;
    const LoraAdapter* adapter = nullptr;
    const PrefixKV* prefix = nullptr;
    // Receives every prompt the model is actually fed (for input audits).
    std::function<void(std::span<const int>)> on_prompt;
};

// Greedy decoding, ties to the lowest token id; stops after EOS (not returned) or max_new.
std::vector<int> generate(const TinyLMParams& params, std::span<const int> prompt, const GenerateOptions& opts);

int argmax_lowest(const Eigen::Ref<const RowVector>& row);

// Bytes of key/value cache: 2 * L * heads * d_head * (ctx + gen) * bytes_per_scalar.
std::uint64_t kv_cache_footprint(std::uint64_t n_ctx_tokens, std::uint64_t n_gen_tokens, const LMConfig& c,
                                 std::uint64_t bytes_per_scalar);

// ---------------------------------------------------------------------------
// Pretraining.

struct LmExample {
    std::vector<int> tokens;
    int response_start = 0;  // loss weight 1 for targets at >= response_start
};

struct PretrainOptions {
    int batch_tokens = 4096;
    float context_loss_weight = 0.1f;  // weight for targets before response_start
    float warmup_frac = 0.05f;
    float weight_decay = 0.0f;
    float grad_clip = 1.0f;
    std::uint64_t seed = 0;
    std::function<void(int step, double loss, double lr, double wall_ms)> on_step;
};

TinyLMParams pretrain_lm(std::span<const LmExample> corpus, const LMConfig& config, int steps, float lr,
                         const PretrainOptions& opts = {}, const TinyLMParams* init = nullptr);

// Mean per-example loss of a packed batch (test hook for packing transparency).
double lm_batch_loss(const TinyLMParams& params, std::span<const LmExample> batch, float context_loss_weight);

}  // namespace d2l
