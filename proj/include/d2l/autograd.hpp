#pragma once

// Minimal reverse-mode autodiff over row-major float matrices.
//
// A Tape records every op in creation order; backward() walks the record in
// reverse. Ops are coarse (fused attention, fused losses) so the per-node
// overhead stays small next to the GEMMs. With grad disabled, ops compute
// values only and keep nothing needed for backward.

#include "d2l/tensor.hpp"

#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace d2l {

class Tape;

class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool requires_grad() const;
    // Gradient accumulated by the last backward(); empty if none reached it.
    const Matrix& grad() const;
    bool valid() const { return tape_ != nullptr; }
    float item() const { return value()(0, 0); }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    // Value copied into the tape, never differentiated.
    Var constant(Matrix value);
    // Refers to external storage, which must outlive the tape; never differentiated.
    Var constant_ref(const Matrix& value);
    // Trainable leaf referring to external storage. backward() adds the
    // gradient into *grad_sink (allocated on first use).
    Var leaf(const Matrix& value, Matrix* grad_sink);

    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

    // Internal node access for op implementations.
    struct Node {
        Matrix owned;
        const Matrix* external = nullptr;
        Matrix grad;
        Matrix* sink = nullptr;
        bool requires_grad = false;
        std::function<void()> backward;
        const Matrix& value() const { return external ? *external : owned; }
    };

    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id_)]; }
    const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)]; }

    // Creates an op output. requires_grad is true iff any input requires it
    // and recording is enabled.
    Var make(Matrix value, bool requires_grad);
    bool any_requires_grad(std::initializer_list<Var> inputs) const;

    // Adds g into v's gradient if v requires one.
    template <typename Expr>
    void accumulate(Var v, const Expr& g) {
        Node& n = node(v);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }
    Matrix& grad_buffer(Var v);  // zero-initialised on first access

private:
    friend class Var;
    bool grad_enabled_;
    std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Sequence layout shared by the language-model attention ops.

struct Segment {
    int start = 0;
    int length = 0;
    int position_offset = 0;  // rotary position of the first token
    int slot = -1;            // adapter / prefix slot; -1 = none
};

struct SequenceLayout {
    int total = 0;
    std::vector<Segment> segments;
    std::vector<std::uint8_t> key_valid;  // empty = every position valid

    static SequenceLayout single(int n, int position_offset = 0, int slot = -1);
    bool valid(int t) const { return key_valid.empty() || key_valid[static_cast<std::size_t>(t)] != 0; }
    std::vector<int> positions() const;
    void check() const;
};

struct PrefixSlot {
    Var keys;    // [n_prefix x n_heads*d_head], already in attention space
    Var values;  // same shape
};

struct LoraSlot {
    Var a;      // [R x d_in]
    Var bt;     // [R x d_out]  (B transposed)
    Var alpha;  // [1 x R]
};

struct GroupRange {
    int q_begin = 0;
    int q_count = 0;
    int k_begin = 0;
    int k_count = 0;
};

// ---------------------------------------------------------------------------
// Ops.

namespace ops {

Var matmul(Tape& t, Var x, Var w);     // x w
Var matmul_nt(Tape& t, Var x, Var w);  // x w^T
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, float s);
Var gelu(Tape& t, Var x);
Var silu(Tape& t, Var x);
Var rmsnorm(Tape& t, Var x, Var gain, float eps);
// Per-head rms norm: x is [T x heads*d_head], gain is [1 x d_head].
Var head_rmsnorm(Tape& t, Var x, Var gain, int heads, float eps);
Var rope(Tape& t, Var x, std::span<const int> positions, int heads, float base);
Var embedding(Tape& t, Var table, std::span<const int> tokens);

Var rows(Tape& t, Var x, int begin, int count);
Var cols(Tape& t, Var x, int begin, int count);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var tile_rows(Tape& t, Var x, int times);
Var broadcast_row(Tape& t, Var row, int times);  // [1 x C] -> [times x C]
Var transpose(Tape& t, Var x);
Var sum(Tape& t, Var x);  // -> [1 x 1]

// Causal multi-head attention within each segment of the layout. Keys at
// invalid positions are excluded. Segments with a slot in [0, prefixes.size())
// additionally attend to that slot's prefix keys/values (prepended, non-causal).
// A query row with no admissible key returns zeros.
Var causal_attention(Tape& t, Var q, Var k, Var v, const SequenceLayout& layout,
                     std::span<const PrefixSlot> prefixes, int heads);

// Multi-head cross attention; each group's queries attend only to that group's
// keys. key_valid (empty = all valid) indexes key rows.
Var cross_attention(Tape& t, Var q, Var k, Var v, std::span<const GroupRange> groups,
                    std::span<const std::uint8_t> key_valid, int heads);

// Low-rank path ((x A^T) * alpha) Bt applied per segment according to the
// segment slot; segments without a slot produce zeros.
Var lora_path(Tape& t, Var x, const SequenceLayout& layout, std::span<const LoraSlot> slots);

// Weighted mean cross entropy: sum_t w_t * -log softmax(logits_t)[target_t].
// Rows with target < 0 are skipped.
Var cross_entropy(Tape& t, Var logits, std::span<const int> targets, std::span<const float> weights);

// Weighted KL(p || q) where, for each row with a record, p is the softmax of
// the record's teacher logits and q is the student softmax renormalised over
// the same token set.
struct SparseDistribution {
    std::vector<int> tokens;
    std::vector<float> logits;
};
Var sparse_kl(Tape& t, Var logits, std::span<const SparseDistribution* const> rows, std::span<const float> weights);

}  // namespace ops
}  // namespace d2l
