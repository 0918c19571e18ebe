#include "d2l/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace d2l {

const Matrix& Var::value() const { return tape_->node(*this).value(); }
bool Var::requires_grad() const { return tape_->node(*this).requires_grad; }
const Matrix& Var::grad() const { return tape_->node(*this).grad; }

Var Tape::constant(Matrix value) {
    nodes_.emplace_back();
    nodes_.back().owned = std::move(value);
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant_ref(const Matrix& value) {
    nodes_.emplace_back();
    nodes_.back().external = &value;
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(const Matrix& value, Matrix* grad_sink) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.external = &value;
    n.sink = grad_sink;
    n.requires_grad = grad_enabled_;
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::make(Matrix value, bool requires_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.owned = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

bool Tape::any_requires_grad(std::initializer_list<Var> inputs) const {
    if (!grad_enabled_) return false;
    for (const Var& v : inputs) {
        if (v.valid() && node(v).requires_grad) return true;
    }
    return false;
}

Matrix& Tape::grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value().rows(), n.value().cols());
    return n.grad;
}

void Tape::backward(Var loss) {
    if (!grad_enabled_) throw Error("backward() on a tape with grad disabled");
    Node& root = node(loss);
    if (!root.requires_grad) return;
    root.grad = Matrix::Ones(root.value().rows(), root.value().cols());
    for (int i = loss.id_; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward();
        if (n.sink) {
            if (n.sink->size() == 0) {
                *n.sink = n.grad;
            } else {
                *n.sink += n.grad;
            }
        }
    }
}

// ---------------------------------------------------------------------------

std::vector<int> SequenceLayout::positions() const {
    std::vector<int> pos(static_cast<std::size_t>(total), 0);
    for (const Segment& s : segments) {
        for (int i = 0; i < s.length; ++i) pos[static_cast<std::size_t>(s.start + i)] = s.position_offset + i;
    }
    return pos;
}

SequenceLayout SequenceLayout::single(int n, int position_offset, int slot) {
    SequenceLayout l;
    l.total = n;
    l.segments.push_back({0, n, position_offset, slot});
    return l;
}

void SequenceLayout::check() const {
    int covered = 0;
    for (const Segment& s : segments) {
        require_shape(s.start >= 0 && s.length >= 0 && s.start + s.length <= total, "segment out of range");
        covered += s.length;
    }
    require_shape(covered <= total, "overlapping segments");
    require_shape(key_valid.empty() || static_cast<int>(key_valid.size()) == total, "key mask length mismatch");
}

namespace ops {
namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// Row-wise softmax. Column j is admissible when col_ok[j] != 0 (null = all)
// and, with causal_from >= 0, when j <= causal_from + i. Others become 0.
void masked_softmax_rows(Matrix& s, const std::uint8_t* col_ok, int causal_from) {
    const Eigen::Index n = s.cols();
    if (col_ok) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (!col_ok[j]) s.col(j).setConstant(kNegInf);
        }
    }
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const Eigen::Index lim = causal_from < 0 ? n : std::min<Eigen::Index>(n, causal_from + i + 1);
        auto head = s.row(i).head(lim);
        auto tail = s.row(i).tail(n - lim);
        tail.setZero();
        const float mx = lim > 0 ? head.maxCoeff() : kNegInf;
        if (mx == kNegInf) {
            head.setZero();
            continue;
        }
        head = (head.array() - mx).exp();
        head /= head.sum();
    }
}

// dS = P * (dP - rowsum(dP * P))
Matrix softmax_backward(const Matrix& p, const Matrix& dp) {
    Eigen::VectorXf dot = (dp.array() * p.array()).rowwise().sum();
    Matrix ds = p.array() * (dp.array().colwise() - dot.array());
    return ds;
}

}  // namespace

Var matmul(Tape& t, Var x, Var w) {
    require_shape(x.cols() == w.rows(), "matmul: inner dimension mismatch");
    Matrix y = x.value() * w.value();
    Var out = t.make(std::move(y), t.any_requires_grad({x, w}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, w, out]() {
            const Matrix& g = t.node(out).grad;
            if (x.requires_grad()) t.accumulate(x, g * w.value().transpose());
            if (w.requires_grad()) t.accumulate(w, x.value().transpose() * g);
        };
    }
    return out;
}

Var matmul_nt(Tape& t, Var x, Var w) {
    require_shape(x.cols() == w.cols(), "matmul_nt: inner dimension mismatch");
    Matrix y(x.rows(), w.rows());
    y.noalias() = x.value() * w.value().transpose();
    Var out = t.make(std::move(y), t.any_requires_grad({x, w}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, w, out]() {
            const Matrix& g = t.node(out).grad;
            if (x.requires_grad()) {
                Matrix& gx = t.grad_buffer(x);
                gx.noalias() += g * w.value();
            }
            if (w.requires_grad()) {
                Matrix& gw = t.grad_buffer(w);
                gw.noalias() += g.transpose() * x.value();
            }
        };
    }
    return out;
}

Var add(Tape& t, Var a, Var b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Var out = t.make(a.value() + b.value(), t.any_requires_grad({a, b}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, a, b, out]() {
            const Matrix& g = t.node(out).grad;
            t.accumulate(a, g);
            t.accumulate(b, g);
        };
    }
    return out;
}

Var sub(Tape& t, Var a, Var b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    Var out = t.make(a.value() - b.value(), t.any_requires_grad({a, b}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, a, b, out]() {
            const Matrix& g = t.node(out).grad;
            t.accumulate(a, g);
            t.accumulate(b, -g);
        };
    }
    return out;
}

Var mul(Tape& t, Var a, Var b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    Var out = t.make(a.value().cwiseProduct(b.value()), t.any_requires_grad({a, b}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, a, b, out]() {
            const Matrix& g = t.node(out).grad;
            if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
            if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
        };
    }
    return out;
}

Var scale(Tape& t, Var a, float s) {
    Var out = t.make(a.value() * s, t.any_requires_grad({a}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, a, out, s]() { t.accumulate(a, t.node(out).grad * s); };
    }
    return out;
}

namespace {
constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2/pi)
}

Var gelu(Tape& t, Var x) {
    constexpr float k = kGeluK;
    const auto xa = x.value().array();
    Matrix th = (k * (xa + 0.044715f * xa.cube())).tanh().matrix();
    Matrix y = (0.5f * xa * (1.0f + th.array())).matrix();
    Var out = t.make(std::move(y), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        auto tanh_cache = std::make_shared<Matrix>(std::move(th));
        t.node(out).backward = [&t, x, out, tanh_cache]() {
            const auto g = t.node(out).grad.array();
            const auto xa = x.value().array();
            const auto th = tanh_cache->array();
            const auto du = kGeluK * (1.0f + 3.0f * 0.044715f * xa.square());
            Matrix dx = (g * (0.5f * (1.0f + th) + 0.5f * xa * (1.0f - th.square()) * du)).matrix();
            t.accumulate(x, dx);
        };
    }
    return out;
}

Var silu(Tape& t, Var x) {
    const Matrix& xv = x.value();
    Matrix y = xv.array() / (1.0f + (-xv.array()).exp());
    Var out = t.make(std::move(y), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out]() {
            const Matrix& g = t.node(out).grad;
            Eigen::ArrayXXf s = 1.0f / (1.0f + (-x.value().array()).exp());
            Matrix dx = g.array() * (s * (1.0f + x.value().array() * (1.0f - s)));
            t.accumulate(x, dx);
        };
    }
    return out;
}

Var rmsnorm(Tape& t, Var x, Var gain, float eps) {
    const Matrix& xv = x.value();
    const Eigen::Index d = xv.cols();
    require_shape(gain.rows() == 1 && gain.cols() == d, "rmsnorm: gain shape mismatch");
    Eigen::VectorXf inv = ((xv.array().square().rowwise().sum() / static_cast<float>(d)) + eps).rsqrt();
    Matrix y = (xv.array().colwise() * inv.array()).rowwise() * gain.value().row(0).array();
    Var out = t.make(std::move(y), t.any_requires_grad({x, gain}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, gain, out, inv, d]() {
            const Matrix& g = t.node(out).grad;
            const Matrix& xv = x.value();
            if (gain.requires_grad()) {
                RowVector dg = (g.array() * (xv.array().colwise() * inv.array())).colwise().sum();
                t.accumulate(gain, dg);
            }
            if (x.requires_grad()) {
                Matrix gg = g.array().rowwise() * gain.value().row(0).array();
                Eigen::VectorXf dot = (gg.array() * xv.array()).rowwise().sum();
                Eigen::VectorXf c = dot.array() * inv.array().cube() / static_cast<float>(d);
                Matrix dx = (gg.array().colwise() * inv.array()) - (xv.array().colwise() * c.array());
                t.accumulate(x, dx);
            }
        };
    }
    return out;
}

Var head_rmsnorm(Tape& t, Var x, Var gain, int heads, float eps) {
    const Matrix& xv = x.value();
    const int dh = static_cast<int>(gain.cols());
    require_shape(xv.cols() == static_cast<Eigen::Index>(heads) * dh, "head_rmsnorm: width mismatch");
    const Eigen::Index n = xv.rows();
    Matrix inv(n, heads);
    Matrix y(n, xv.cols());
    for (int h = 0; h < heads; ++h) {
        auto xb = xv.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
        inv.col(h) = ((xb.array().square().rowwise().sum() / static_cast<float>(dh)) + eps).rsqrt().matrix();
        y.middleCols(static_cast<Eigen::Index>(h) * dh, dh) =
            (xb.array().colwise() * inv.col(h).array()).rowwise() * gain.value().row(0).array();
    }
    Var out = t.make(std::move(y), t.any_requires_grad({x, gain}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, gain, out, inv, heads, dh]() {
            const Matrix& g = t.node(out).grad;
            const Matrix& xv = x.value();
            RowVector dg = RowVector::Zero(dh);
            Matrix dx(xv.rows(), xv.cols());
            for (int h = 0; h < heads; ++h) {
                const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                auto xb = xv.middleCols(c0, dh);
                auto gb = g.middleCols(c0, dh);
                Eigen::ArrayXf iv = inv.col(h).array();
                dg += (gb.array() * (xb.array().colwise() * iv)).colwise().sum().matrix();
                Matrix gg = gb.array().rowwise() * gain.value().row(0).array();
                Eigen::ArrayXf dot = (gg.array() * xb.array()).rowwise().sum();
                Eigen::ArrayXf c = dot * iv.cube() / static_cast<float>(dh);
                dx.middleCols(c0, dh) = (gg.array().colwise() * iv) - (xb.array().colwise() * c);
            }
            if (gain.requires_grad()) t.accumulate(gain, dg);
            if (x.requires_grad()) t.accumulate(x, dx);
        };
    }
    return out;
}

namespace {

struct RopeTable {
    int dh = 0;
    float base = 0.0f;
    Matrix cos, sin;  // [positions x dh/2]
};

// Per-thread table of rotary angles, grown on demand.
const RopeTable& rope_table(int dh, float base, std::span<const int> positions) {
    thread_local RopeTable tab;
    int need = 1;
    for (int p : positions) {
        require_shape(p >= 0, "rope: negative position");
        need = std::max(need, p + 1);
    }
    if (tab.dh != dh || tab.base != base || tab.cos.rows() < need) {
        const int rows = std::max<int>(need, 4096);
        const int half = dh / 2;
        tab.dh = dh;
        tab.base = base;
        tab.cos.resize(rows, half);
        tab.sin.resize(rows, half);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < half; ++j) {
                const double freq = std::pow(static_cast<double>(base), -2.0 * j / dh);
                const double ang = i * freq;
                tab.cos(i, j) = static_cast<float>(std::cos(ang));
                tab.sin(i, j) = static_cast<float>(std::sin(ang));
            }
        }
    }
    return tab;
}

}  // namespace

Var rope(Tape& t, Var x, std::span<const int> positions, int heads, float base) {
    const Matrix& xv = x.value();
    const Eigen::Index n = xv.rows();
    require_shape(static_cast<Eigen::Index>(positions.size()) == n, "rope: positions length mismatch");
    require_shape(xv.cols() % heads == 0, "rope: width not divisible by heads");
    const int dh = static_cast<int>(xv.cols()) / heads;
    require_shape(dh % 2 == 0, "rope: head dim must be even");
    const int half = dh / 2;
    const RopeTable& tab = rope_table(dh, base, positions);
    Matrix cos_t(n, half), sin_t(n, half);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int p = positions[static_cast<std::size_t>(i)];
        cos_t.row(i) = tab.cos.row(p);
        sin_t.row(i) = tab.sin.row(p);
    }
    Matrix y(n, xv.cols());
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
        auto x1 = xv.middleCols(c0, half).array();
        auto x2 = xv.middleCols(c0 + half, half).array();
        y.middleCols(c0, half) = (x1 * cos_t.array() - x2 * sin_t.array()).matrix();
        y.middleCols(c0 + half, half) = (x1 * sin_t.array() + x2 * cos_t.array()).matrix();
    }
    Var out = t.make(std::move(y), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out, cos_t, sin_t, heads, dh, half]() {
            const Matrix& g = t.node(out).grad;
            Matrix dx(g.rows(), g.cols());
            for (int h = 0; h < heads; ++h) {
                const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                auto g1 = g.middleCols(c0, half).array();
                auto g2 = g.middleCols(c0 + half, half).array();
                dx.middleCols(c0, half) = (g1 * cos_t.array() + g2 * sin_t.array()).matrix();
                dx.middleCols(c0 + half, half) = (g2 * cos_t.array() - g1 * sin_t.array()).matrix();
            }
            t.accumulate(x, dx);
        };
    }
    return out;
}

Var embedding(Tape& t, Var table, std::span<const int> tokens) {
    const Matrix& tv = table.value();
    Matrix y(static_cast<Eigen::Index>(tokens.size()), tv.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        require_shape(tokens[i] >= 0 && tokens[i] < tv.rows(), "embedding: token id out of range");
        y.row(static_cast<Eigen::Index>(i)) = tv.row(tokens[i]);
    }
    Var out = t.make(std::move(y), t.any_requires_grad({table}));
    if (t.node(out).requires_grad) {
        std::vector<int> ids(tokens.begin(), tokens.end());
        t.node(out).backward = [&t, table, out, ids]() {
            const Matrix& g = t.node(out).grad;
            Matrix& gt = t.grad_buffer(table);
            for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        };
    }
    return out;
}

Var rows(Tape& t, Var x, int begin, int count) {
    require_shape(begin >= 0 && count >= 0 && begin + count <= x.rows(), "rows: range out of bounds");
    Var out = t.make(x.value().middleRows(begin, count), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out, begin, count]() {
            t.grad_buffer(x).middleRows(begin, count) += t.node(out).grad;
        };
    }
    return out;
}

Var cols(Tape& t, Var x, int begin, int count) {
    require_shape(begin >= 0 && count >= 0 && begin + count <= x.cols(), "cols: range out of bounds");
    Var out = t.make(x.value().middleCols(begin, count), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out, begin, count]() {
            t.grad_buffer(x).middleCols(begin, count) += t.node(out).grad;
        };
    }
    return out;
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
    require_shape(!parts.empty(), "concat_rows: empty input");
    Eigen::Index total = 0;
    const Eigen::Index c = parts.front().cols();
    bool req = false;
    for (const Var& p : parts) {
        require_shape(p.cols() == c, "concat_rows: column mismatch");
        total += p.rows();
        req = req || t.any_requires_grad({p});
    }
    Matrix y(total, c);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        y.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    Var out = t.make(std::move(y), req);
    if (t.node(out).requires_grad) {
        std::vector<Var> ps(parts.begin(), parts.end());
        t.node(out).backward = [&t, ps, out]() {
            const Matrix& g = t.node(out).grad;
            Eigen::Index r = 0;
            for (const Var& p : ps) {
                if (p.requires_grad()) t.accumulate(p, g.middleRows(r, p.rows()));
                r += p.rows();
            }
        };
    }
    return out;
}

Var tile_rows(Tape& t, Var x, int times) {
    const Eigen::Index r = x.rows();
    Matrix y(r * times, x.cols());
    for (int i = 0; i < times; ++i) y.middleRows(i * r, r) = x.value();
    Var out = t.make(std::move(y), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out, times, r]() {
            const Matrix& g = t.node(out).grad;
            Matrix& gx = t.grad_buffer(x);
            for (int i = 0; i < times; ++i) gx += g.middleRows(i * r, r);
        };
    }
    return out;
}

Var broadcast_row(Tape& t, Var row, int times) {
    require_shape(row.rows() == 1, "broadcast_row: expects a single row");
    Matrix y = row.value().replicate(times, 1);
    Var out = t.make(std::move(y), t.any_requires_grad({row}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, row, out]() { t.accumulate(row, t.node(out).grad.colwise().sum()); };
    }
    return out;
}

Var transpose(Tape& t, Var x) {
    Var out = t.make(x.value().transpose(), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out]() { t.accumulate(x, t.node(out).grad.transpose()); };
    }
    return out;
}

Var sum(Tape& t, Var x) {
    Matrix y(1, 1);
    y(0, 0) = x.value().sum();
    Var out = t.make(std::move(y), t.any_requires_grad({x}));
    if (t.node(out).requires_grad) {
        t.node(out).backward = [&t, x, out]() {
            const float g = t.node(out).grad(0, 0);
            t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g));
        };
    }
    return out;
}

Var causal_attention(Tape& t, Var q, Var k, Var v, const SequenceLayout& layout,
                     std::span<const PrefixSlot> prefixes, int heads) {
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    require_shape(qv.rows() == layout.total && kv.rows() == layout.total && vv.rows() == layout.total,
                  "causal_attention: layout length mismatch");
    require_shape(qv.cols() == kv.cols() && kv.cols() == vv.cols() && qv.cols() % heads == 0,
                  "causal_attention: width mismatch");
    const int width = static_cast<int>(qv.cols());
    const int dh = width / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

    bool req = t.any_requires_grad({q, k, v});
    for (const PrefixSlot& p : prefixes) {
        require_shape(p.keys.cols() == width && p.values.cols() == width && p.keys.rows() == p.values.rows(),
                      "causal_attention: prefix shape mismatch");
        req = req || t.any_requires_grad({p.keys, p.values});
    }

    Matrix y = Matrix::Zero(layout.total, width);
    // probs[segment * heads + head]
    auto probs = std::make_shared<std::vector<Matrix>>();
    if (req) probs->resize(layout.segments.size() * static_cast<std::size_t>(heads));

    auto prefix_of = [&](const Segment& s) -> const PrefixSlot* {
        if (s.slot < 0 || s.slot >= static_cast<int>(prefixes.size())) return nullptr;
        return &prefixes[static_cast<std::size_t>(s.slot)];
    };

    for (std::size_t si = 0; si < layout.segments.size(); ++si) {
        const Segment& s = layout.segments[si];
        if (s.length == 0) continue;
        const PrefixSlot* pre = prefix_of(s);
        const int np = pre ? static_cast<int>(pre->keys.rows()) : 0;
        const int len = s.length;
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
            Matrix kc(np + len, dh), vc(np + len, dh);
            if (np > 0) {
                kc.topRows(np) = pre->keys.value().middleCols(c0, dh);
                vc.topRows(np) = pre->values.value().middleCols(c0, dh);
            }
            kc.bottomRows(len) = kv.block(s.start, c0, len, dh);
            vc.bottomRows(len) = vv.block(s.start, c0, len, dh);
            Matrix sm(len, np + len);
            sm.noalias() = qv.block(s.start, c0, len, dh) * kc.transpose();
            sm *= sc;
            if (layout.key_valid.empty()) {
                masked_softmax_rows(sm, nullptr, np);
            } else {
                std::vector<std::uint8_t> ok(static_cast<std::size_t>(np + len), 1);
                for (int j = 0; j < len; ++j) ok[static_cast<std::size_t>(np + j)] = layout.valid(s.start + j) ? 1 : 0;
                masked_softmax_rows(sm, ok.data(), np);
            }
            y.block(s.start, c0, len, dh).noalias() = sm * vc;
            if (req) (*probs)[si * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(sm);
        }
    }

    Var out = t.make(std::move(y), req);
    if (t.node(out).requires_grad) {
        std::vector<PrefixSlot> pre_copy(prefixes.begin(), prefixes.end());
        SequenceLayout lay = layout;
        t.node(out).backward = [&t, q, k, v, out, lay, pre_copy, probs, heads, dh, sc]() {
            const Matrix& g = t.node(out).grad;
            const Matrix& qv = q.value();
            const Matrix& kv = k.value();
            const Matrix& vv = v.value();
            const int width = heads * dh;
            Matrix dq = Matrix::Zero(qv.rows(), width);
            Matrix dk = Matrix::Zero(kv.rows(), width);
            Matrix dv = Matrix::Zero(vv.rows(), width);
            std::vector<Matrix> dpk(pre_copy.size()), dpv(pre_copy.size());
            for (std::size_t si = 0; si < lay.segments.size(); ++si) {
                const Segment& s = lay.segments[si];
                if (s.length == 0) continue;
                const bool has_pre = s.slot >= 0 && s.slot < static_cast<int>(pre_copy.size());
                const PrefixSlot* pre = has_pre ? &pre_copy[static_cast<std::size_t>(s.slot)] : nullptr;
                const int np = pre ? static_cast<int>(pre->keys.rows()) : 0;
                const int len = s.length;
                if (pre) {
                    auto& a = dpk[static_cast<std::size_t>(s.slot)];
                    auto& b = dpv[static_cast<std::size_t>(s.slot)];
                    if (a.size() == 0) a = Matrix::Zero(np, width);
                    if (b.size() == 0) b = Matrix::Zero(np, width);
                }
                for (int h = 0; h < heads; ++h) {
                    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                    const Matrix& p = (*probs)[si * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                    Matrix kc(np + len, dh), vc(np + len, dh);
                    if (np > 0) {
                        kc.topRows(np) = pre->keys.value().middleCols(c0, dh);
                        vc.topRows(np) = pre->values.value().middleCols(c0, dh);
                    }
                    kc.bottomRows(len) = kv.block(s.start, c0, len, dh);
                    vc.bottomRows(len) = vv.block(s.start, c0, len, dh);
                    auto go = g.block(s.start, c0, len, dh);
                    Matrix dvc(np + len, dh);
                    dvc.noalias() = p.transpose() * go;
                    Matrix dp(len, np + len);
                    dp.noalias() = go * vc.transpose();
                    Matrix ds = softmax_backward(p, dp);
                    ds *= sc;
                    dq.block(s.start, c0, len, dh).noalias() += ds * kc;
                    Matrix dkc(np + len, dh);
                    dkc.noalias() = ds.transpose() * qv.block(s.start, c0, len, dh);
                    dk.block(s.start, c0, len, dh) += dkc.bottomRows(len);
                    dv.block(s.start, c0, len, dh) += dvc.bottomRows(len);
                    if (np > 0) {
                        dpk[static_cast<std::size_t>(s.slot)].middleCols(c0, dh) += dkc.topRows(np);
                        dpv[static_cast<std::size_t>(s.slot)].middleCols(c0, dh) += dvc.topRows(np);
                    }
                }
            }
            t.accumulate(q, dq);
            t.accumulate(k, dk);
            t.accumulate(v, dv);
            for (std::size_t i = 0; i < pre_copy.size(); ++i) {
                if (dpk[i].size() > 0) t.accumulate(pre_copy[i].keys, dpk[i]);
                if (dpv[i].size() > 0) t.accumulate(pre_copy[i].values, dpv[i]);
            }
        };
    }
    return out;
}

Var cross_attention(Tape& t, Var q, Var k, Var v, std::span<const GroupRange> groups,
                    std::span<const std::uint8_t> key_valid, int heads) {
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    require_shape(qv.cols() == kv.cols() && kv.cols() == vv.cols() && qv.cols() % heads == 0,
                  "cross_attention: width mismatch");
    require_shape(kv.rows() == vv.rows(), "cross_attention: key/value length mismatch");
    require_shape(key_valid.empty() || static_cast<Eigen::Index>(key_valid.size()) == kv.rows(),
                  "cross_attention: mask length mismatch");
    const int width = static_cast<int>(qv.cols());
    const int dh = width / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    const bool req = t.any_requires_grad({q, k, v});

    Matrix y = Matrix::Zero(qv.rows(), width);
    auto probs = std::make_shared<std::vector<Matrix>>();
    if (req) probs->resize(groups.size() * static_cast<std::size_t>(heads));
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const GroupRange& gr = groups[gi];
        require_shape(gr.q_begin + gr.q_count <= qv.rows() && gr.k_begin + gr.k_count <= kv.rows(),
                      "cross_attention: group out of range");
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
            Matrix sm(gr.q_count, gr.k_count);
            sm.noalias() = qv.block(gr.q_begin, c0, gr.q_count, dh) * kv.block(gr.k_begin, c0, gr.k_count, dh).transpose();
            sm *= sc;
            masked_softmax_rows(sm, key_valid.empty() ? nullptr : key_valid.data() + gr.k_begin, -1);
            y.block(gr.q_begin, c0, gr.q_count, dh).noalias() = sm * vv.block(gr.k_begin, c0, gr.k_count, dh);
            if (req) (*probs)[gi * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(sm);
        }
    }
    Var out = t.make(std::move(y), req);
    if (t.node(out).requires_grad) {
        std::vector<GroupRange> gs(groups.begin(), groups.end());
        t.node(out).backward = [&t, q, k, v, out, gs, probs, heads, dh, sc]() {
            const Matrix& g = t.node(out).grad;
            const Matrix& qv = q.value();
            const Matrix& kv = k.value();
            const Matrix& vv = v.value();
            Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
            Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
            Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
            for (std::size_t gi = 0; gi < gs.size(); ++gi) {
                const GroupRange& gr = gs[gi];
                for (int h = 0; h < heads; ++h) {
                    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                    const Matrix& p = (*probs)[gi * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                    auto go = g.block(gr.q_begin, c0, gr.q_count, dh);
                    auto kb = kv.block(gr.k_begin, c0, gr.k_count, dh);
                    auto vb = vv.block(gr.k_begin, c0, gr.k_count, dh);
                    dv.block(gr.k_begin, c0, gr.k_count, dh).noalias() += p.transpose() * go;
                    Matrix dp(gr.q_count, gr.k_count);
                    dp.noalias() = go * vb.transpose();
                    Matrix ds = softmax_backward(p, dp);
                    ds *= sc;
                    dq.block(gr.q_begin, c0, gr.q_count, dh).noalias() += ds * kb;
                    dk.block(gr.k_begin, c0, gr.k_count, dh).noalias() +=
                        ds.transpose() * qv.block(gr.q_begin, c0, gr.q_count, dh);
                }
            }
            t.accumulate(q, dq);
            t.accumulate(k, dk);
            t.accumulate(v, dv);
        };
    }
    return out;
}

Var lora_path(Tape& t, Var x, const SequenceLayout& layout, std::span<const LoraSlot> slots) {
    const Matrix& xv = x.value();
    require_shape(xv.rows() == layout.total, "lora_path: layout length mismatch");
    require_shape(!slots.empty(), "lora_path: no adapter slots");
    const Eigen::Index d_out = slots.front().bt.cols();
    bool req = t.any_requires_grad({x});
    for (const LoraSlot& s : slots) {
        require_shape(s.a.cols() == xv.cols(), "lora_path: A width does not match input");
        require_shape(s.bt.cols() == d_out, "lora_path: B height mismatch across slots");
        require_shape(s.a.rows() == s.bt.rows() && s.alpha.rows() == 1 && s.alpha.cols() == s.a.rows(),
                      "lora_path: rank mismatch between A, B and alpha");
        req = req || t.any_requires_grad({s.a, s.bt, s.alpha});
    }
    Matrix y = Matrix::Zero(xv.rows(), d_out);
    for (const Segment& seg : layout.segments) {
        if (seg.slot < 0 || seg.slot >= static_cast<int>(slots.size()) || seg.length == 0) continue;
        const LoraSlot& s = slots[static_cast<std::size_t>(seg.slot)];
        Matrix h(seg.length, s.a.rows());
        h.noalias() = xv.middleRows(seg.start, seg.length) * s.a.value().transpose();
        h.array().rowwise() *= s.alpha.value().row(0).array();
        y.middleRows(seg.start, seg.length).noalias() = h * s.bt.value();
    }
    Var out = t.make(std::move(y), req);
    if (t.node(out).requires_grad) {
        std::vector<LoraSlot> ss(slots.begin(), slots.end());
        SequenceLayout lay = layout;
        t.node(out).backward = [&t, x, out, ss, lay]() {
            const Matrix& g = t.node(out).grad;
            const Matrix& xv = x.value();
            Matrix dx;
            if (x.requires_grad()) dx = Matrix::Zero(xv.rows(), xv.cols());
            for (const Segment& seg : lay.segments) {
                if (seg.slot < 0 || seg.slot >= static_cast<int>(ss.size()) || seg.length == 0) continue;
                const LoraSlot& s = ss[static_cast<std::size_t>(seg.slot)];
                auto xs = xv.middleRows(seg.start, seg.length);
                auto gs = g.middleRows(seg.start, seg.length);
                Matrix h(seg.length, s.a.rows());
                h.noalias() = xs * s.a.value().transpose();
                Matrix hs = h.array().rowwise() * s.alpha.value().row(0).array();
                if (s.bt.requires_grad()) t.grad_buffer(s.bt).noalias() += hs.transpose() * gs;
                Matrix dhs(seg.length, s.a.rows());
                dhs.noalias() = gs * s.bt.value().transpose();
                if (s.alpha.requires_grad()) t.grad_buffer(s.alpha) += (dhs.array() * h.array()).colwise().sum().matrix();
                Matrix dh = dhs.array().rowwise() * s.alpha.value().row(0).array();
                if (s.a.requires_grad()) t.grad_buffer(s.a).noalias() += dh.transpose() * xs;
                if (x.requires_grad()) dx.middleRows(seg.start, seg.length).noalias() += dh * s.a.value();
            }
            if (x.requires_grad()) t.accumulate(x, dx);
        };
    }
    return out;
}

Var cross_entropy(Tape& t, Var logits, std::span<const int> targets, std::span<const float> weights) {
    const Matrix& lv = logits.value();
    require_shape(static_cast<Eigen::Index>(targets.size()) == lv.rows() && targets.size() == weights.size(),
                  "cross_entropy: targets/weights must align with logits rows");
    double loss = 0.0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
        const int tgt = targets[static_cast<std::size_t>(i)];
        if (tgt < 0) continue;
        require_shape(tgt < lv.cols(), "cross_entropy: target id out of range");
        const float mx = lv.row(i).maxCoeff();
        const double lse = mx + std::log(static_cast<double>((lv.row(i).array() - mx).exp().sum()));
        loss += weights[static_cast<std::size_t>(i)] * (lse - lv(i, tgt));
    }
    Matrix y(1, 1);
    y(0, 0) = static_cast<float>(loss);
    Var out = t.make(std::move(y), t.any_requires_grad({logits}));
    if (t.node(out).requires_grad) {
        std::vector<int> tg(targets.begin(), targets.end());
        std::vector<float> wt(weights.begin(), weights.end());
        t.node(out).backward = [&t, logits, out, tg, wt]() {
            const float g = t.node(out).grad(0, 0);
            const Matrix& lv = logits.value();
            Matrix& gl = t.grad_buffer(logits);
            for (Eigen::Index i = 0; i < lv.rows(); ++i) {
                const int tgt = tg[static_cast<std::size_t>(i)];
                if (tgt < 0) continue;
                const float mx = lv.row(i).maxCoeff();
                RowVector p = (lv.row(i).array() - mx).exp();
                p /= p.sum();
                p(tgt) -= 1.0f;
                gl.row(i) += (g * wt[static_cast<std::size_t>(i)]) * p;
            }
        };
    }
    return out;
}

Var sparse_kl(Tape& t, Var logits, std::span<const SparseDistribution* const> rows, std::span<const float> weights) {
    const Matrix& lv = logits.value();
    require_shape(static_cast<Eigen::Index>(rows.size()) == lv.rows() && rows.size() == weights.size(),
                  "sparse_kl: records/weights must align with logits rows");
    double loss = 0.0;
    // Cache (p, q) per row for backward.
    auto cache = std::make_shared<std::vector<std::pair<std::vector<double>, std::vector<double>>>>(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const SparseDistribution* rec = rows[i];
        if (rec == nullptr || rec->tokens.empty()) continue;
        const std::size_t k = rec->tokens.size();
        std::vector<double> p(k), q(k);
        double pm = -1e300, qm = -1e300;
        for (std::size_t j = 0; j < k; ++j) {
            require_shape(rec->tokens[j] >= 0 && rec->tokens[j] < lv.cols(), "sparse_kl: token id out of range");
            pm = std::max(pm, static_cast<double>(rec->logits[j]));
            qm = std::max(qm, static_cast<double>(lv(static_cast<Eigen::Index>(i), rec->tokens[j])));
        }
        double ps = 0.0, qs = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = std::exp(rec->logits[j] - pm);
            q[j] = std::exp(lv(static_cast<Eigen::Index>(i), rec->tokens[j]) - qm);
            ps += p[j];
            qs += q[j];
        }
        double kl = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] /= ps;
            q[j] /= qs;
            if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(std::max(q[j], 1e-300)));
        }
        loss += weights[i] * kl;
        (*cache)[i] = {std::move(p), std::move(q)};
    }
    Matrix y(1, 1);
    y(0, 0) = static_cast<float>(loss);
    Var out = t.make(std::move(y), t.any_requires_grad({logits}));
    if (t.node(out).requires_grad) {
        std::vector<const SparseDistribution*> rs(rows.begin(), rows.end());
        std::vector<float> wt(weights.begin(), weights.end());
        t.node(out).backward = [&t, logits, out, rs, wt, cache]() {
            const float g = t.node(out).grad(0, 0);
            Matrix& gl = t.grad_buffer(logits);
            for (std::size_t i = 0; i < rs.size(); ++i) {
                if (rs[i] == nullptr || rs[i]->tokens.empty()) continue;
                const auto& [p, q] = (*cache)[i];
                for (std::size_t j = 0; j < p.size(); ++j) {
                    gl(static_cast<Eigen::Index>(i), rs[i]->tokens[j]) +=
                        static_cast<float>(g * wt[i] * (q[j] - p[j]));
                }
            }
        };
    }
    return out;
}

}  // namespace ops
}  // namespace d2l
