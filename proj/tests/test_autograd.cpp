#include "support.hpp"

#include "d2l/autograd.hpp"

using namespace d2l;
using namespace d2l::test;

namespace {

using Build = std::function<Var(Tape&, std::span<const Var>)>;

// Checks every input entry: analytic gradient of sum(R .* f(x)) vs central differences.
void grad_check(std::vector<Matrix> inputs, const Build& f, double tol = 2e-2, float h = 1e-2f) {
    Rng rng(77);
    Matrix proj;
    auto loss = [&](const std::vector<Matrix>& xs, std::vector<Matrix>* grads) {
        Tape t(grads != nullptr);
        std::vector<Var> vs;
        if (grads) grads->assign(xs.size(), Matrix());
        for (std::size_t i = 0; i < xs.size(); ++i) vs.push_back(grads ? t.leaf(xs[i], &(*grads)[i]) : t.constant_ref(xs[i]));
        Var y = f(t, vs);
        if (proj.size() == 0) proj = randn(y.rows(), y.cols(), 1.0f, rng);
        Var l = ops::sum(t, ops::mul(t, y, t.constant_ref(proj)));
        if (grads) t.backward(l);
        return static_cast<double>(l.item());
    };
    std::vector<Matrix> grads;
    loss(inputs, &grads);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (Eigen::Index e = 0; e < inputs[i].size(); ++e) {
            const float keep = inputs[i].data()[e];
            inputs[i].data()[e] = keep + h;
            const double up = loss(inputs, nullptr);
            inputs[i].data()[e] = keep - h;
            const double dn = loss(inputs, nullptr);
            inputs[i].data()[e] = keep;
            const double num = (up - dn) / (2.0 * h);
            const double ana = grads[i].size() ? grads[i].data()[e] : 0.0;
            const double scale = std::max({std::abs(num), std::abs(ana), 1e-2});
            INFO("input " << i << " entry " << e << " analytic " << ana << " numeric " << num);
            CHECK(std::abs(num - ana) / scale < tol);
        }
    }
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
    Rng rng(1);
    grad_check({randn(3, 4, 1.0f, rng), randn(5, 4, 1.0f, rng)},
               [](Tape& t, std::span<const Var> v) { return ops::matmul_nt(t, v[0], v[1]); });
    grad_check({randn(3, 4, 1.0f, rng), randn(4, 2, 1.0f, rng)},
               [](Tape& t, std::span<const Var> v) { return ops::matmul(t, v[0], v[1]); });
    grad_check({randn(3, 4, 1.0f, rng), randn(3, 4, 1.0f, rng)}, [](Tape& t, std::span<const Var> v) {
        return ops::sub(t, ops::mul(t, v[0], v[1]), ops::scale(t, ops::add(t, v[0], v[1]), 0.5f));
    });
    grad_check({randn(3, 5, 1.5f, rng)}, [](Tape& t, std::span<const Var> v) { return ops::gelu(t, v[0]); });
    grad_check({randn(3, 5, 1.5f, rng)}, [](Tape& t, std::span<const Var> v) { return ops::silu(t, v[0]); });
}

TEST_CASE("norms and rotary embedding match finite differences") {
    Rng rng(2);
    grad_check({randn(4, 6, 1.0f, rng), randn(1, 6, 1.0f, rng)},
               [](Tape& t, std::span<const Var> v) { return ops::rmsnorm(t, v[0], v[1], 1e-5f); });
    grad_check({randn(3, 8, 1.0f, rng), randn(1, 4, 1.0f, rng)},
               [](Tape& t, std::span<const Var> v) { return ops::head_rmsnorm(t, v[0], v[1], 2, 1e-5f); });
    const std::vector<int> pos{0, 3, 17};
    grad_check({randn(3, 8, 1.0f, rng)},
               [&](Tape& t, std::span<const Var> v) { return ops::rope(t, v[0], pos, 2, 10000.0f); });
}

TEST_CASE("structural ops match finite differences") {
    Rng rng(3);
    const std::vector<int> toks{2, 0, 2, 1};
    grad_check({randn(3, 4, 1.0f, rng)}, [&](Tape& t, std::span<const Var> v) { return ops::embedding(t, v[0], toks); });
    grad_check({randn(5, 3, 1.0f, rng), randn(2, 3, 1.0f, rng)}, [](Tape& t, std::span<const Var> v) {
        const std::vector<Var> parts{ops::rows(t, v[0], 1, 3), v[1], ops::transpose(t, ops::cols(t, ops::transpose(t, v[0]), 0, 1))};
        return ops::tile_rows(t, ops::concat_rows(t, parts), 2);
    });
    grad_check({randn(1, 3, 1.0f, rng)}, [](Tape& t, std::span<const Var> v) { return ops::broadcast_row(t, v[0], 4); });
}

TEST_CASE("packed causal attention with masks and prefixes matches finite differences") {
    Rng rng(4);
    SequenceLayout lay;
    lay.total = 7;
    lay.segments = {{0, 3, 0, 0}, {3, 4, 2, -1}};
    lay.key_valid = {1, 1, 1, 1, 0, 1, 1};
    grad_check({randn(7, 8, 1.0f, rng), randn(7, 8, 1.0f, rng), randn(7, 8, 1.0f, rng), randn(2, 8, 1.0f, rng),
                randn(2, 8, 1.0f, rng)},
               [&](Tape& t, std::span<const Var> v) {
                   const std::vector<PrefixSlot> pre{{v[3], v[4]}};
                   return ops::causal_attention(t, v[0], v[1], v[2], lay, pre, 2);
               });
}

TEST_CASE("grouped cross attention matches finite differences") {
    Rng rng(5);
    const std::vector<GroupRange> groups{{0, 2, 0, 3}, {2, 2, 3, 4}};
    const std::vector<std::uint8_t> valid{1, 0, 1, 1, 1, 0, 1};
    grad_check({randn(4, 8, 1.0f, rng), randn(7, 8, 1.0f, rng), randn(7, 8, 1.0f, rng)},
               [&](Tape& t, std::span<const Var> v) { return ops::cross_attention(t, v[0], v[1], v[2], groups, valid, 2); });
}

TEST_CASE("lora path matches finite differences") {
    Rng rng(6);
    SequenceLayout lay;
    lay.total = 5;
    lay.segments = {{0, 2, 0, 1}, {2, 3, 0, 0}};
    grad_check({randn(5, 4, 1.0f, rng), randn(2, 4, 1.0f, rng), randn(2, 3, 1.0f, rng), randn(1, 2, 1.0f, rng),
                randn(3, 4, 1.0f, rng), randn(3, 3, 1.0f, rng), randn(1, 3, 1.0f, rng)},
               [&](Tape& t, std::span<const Var> v) {
                   const std::vector<LoraSlot> s{{v[1], v[2], v[3]}, {v[4], v[5], v[6]}};
                   return ops::lora_path(t, v[0], lay, s);
               });
}

TEST_CASE("losses match finite differences") {
    Rng rng(7);
    const std::vector<int> tg{1, -1, 4};
    const std::vector<float> w{0.5f, 1.0f, 0.25f};
    grad_check({randn(3, 6, 1.0f, rng)}, [&](Tape& t, std::span<const Var> v) { return ops::cross_entropy(t, v[0], tg, w); });
    ops::SparseDistribution d0{{0, 3, 5}, {2.0f, 1.0f, -1.0f}}, d2{{1, 2}, {0.5f, 0.4f}};
    const std::vector<const ops::SparseDistribution*> rows{&d0, nullptr, &d2};
    grad_check({randn(3, 6, 1.0f, rng)}, [&](Tape& t, std::span<const Var> v) { return ops::sparse_kl(t, v[0], rows, w); });
}

TEST_CASE("cross attention by hand: 2 latents, 3 tokens, d = 4, one head") {
    Matrix q(2, 4), k(3, 4), v(3, 4);
    q << 1, 0, 0, 0,  //
        0, 2, 0, 0;
    k << 1, 0, 0, 0,  //
        0, 1, 0, 0,   //
        1, 1, 0, 0;
    v << 1, 2, 3, 4,  //
        0, 1, 0, 1,   //
        2, 0, 2, 0;
    Tape t(false);
    const std::vector<GroupRange> g{{0, 2, 0, 3}};
    const Matrix out =
        ops::cross_attention(t, t.constant(q), t.constant(k), t.constant(v), g, {}, 1).value();
    // Scores are q.k / sqrt(4): row 0 -> {0.5, 0, 0.5}; row 1 -> {0, 1, 1}.
    for (int i = 0; i < 2; ++i) {
        const double s[2][3] = {{0.5, 0.0, 0.5}, {0.0, 1.0, 1.0}};
        double z = 0.0, w[3];
        for (int j = 0; j < 3; ++j) z += (w[j] = std::exp(s[i][j]));
        for (int c = 0; c < 4; ++c) {
            double e = 0.0;
            for (int j = 0; j < 3; ++j) e += w[j] / z * v(j, c);
            CHECK(std::abs(out(i, c) - e) < 1e-6);
        }
    }
    // Masking the third token leaves a two-key softmax.
    const std::vector<std::uint8_t> valid{1, 1, 0};
    const Matrix m = ops::cross_attention(t, t.constant(q), t.constant(k), t.constant(v), g, valid, 1).value();
    const double w0 = std::exp(0.5) / (std::exp(0.5) + 1.0);
    CHECK(std::abs(m(0, 0) - (w0 * 1 + (1 - w0) * 0)) < 1e-6);
}

TEST_CASE("attention rows without admissible keys are zero") {
    Tape t(false);
    SequenceLayout lay;
    lay.total = 3;
    lay.segments = {{0, 3, 0, -1}};
    lay.key_valid = {0, 1, 1};
    Rng rng(8);
    const Matrix out = ops::causal_attention(t, t.constant(randn(3, 4, 1.0f, rng)), t.constant(randn(3, 4, 1.0f, rng)),
                                             t.constant(randn(3, 4, 1.0f, rng)), lay, {}, 1)
                           .value();
    CHECK(out.row(0).isZero(0.0f));
    CHECK_FALSE(out.row(1).isZero(0.0f));
}

TEST_CASE("no-grad tapes keep values only") {
    Tape t(false);
    Rng rng(9);
    Matrix g;
    Matrix x = randn(2, 2, 1.0f, rng);
    Var v = t.leaf(x, &g);
    CHECK_FALSE(v.requires_grad());
    CHECK_FALSE(ops::gelu(t, v).requires_grad());
}

TEST_CASE("layout validation") {
    SequenceLayout lay;
    lay.total = 4;
    lay.segments = {{0, 2, 0, -1}, {1, 3, 0, -1}};
    CHECK_THROWS_AS(lay.check(), ShapeError);
    CHECK(SequenceLayout::single(5, 3).positions() == std::vector<int>{3, 4, 5, 6, 7});
    Tape t(false);
    Rng rng(10);
    CHECK_THROWS(ops::rope(t, t.constant(randn(2, 4, 1.0f, rng)), std::vector<int>{0, -1}, 1, 10000.0f));
    CHECK_THROWS_AS(ops::matmul(t, t.constant(randn(2, 3, 1.0f, rng)), t.constant(randn(2, 3, 1.0f, rng))), ShapeError);
}
