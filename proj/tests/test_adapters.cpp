#include "support.hpp"

#include "d2l/adapters.hpp"

#include <filesystem>

using namespace d2l;
using namespace d2l::test;

namespace {

Eigen::MatrixXd delta_d(const LoraLayerDelta& d) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d.d_out(), d.d_in());
    const RowVector s = d.alpha_per_rank();
    for (int k = 0; k < d.rank(); ++k) {
        out += static_cast<double>(s(k)) * d.b.col(k).cast<double>() * d.a.row(k).cast<double>();
    }
    return out;
}

}  // namespace

TEST_CASE("composition fuzz: delta of the composition is the sum of chunk deltas") {
    Rng rng(2024);
    std::uniform_int_distribution<int> dim(1, 12), kdist(1, 6);
    for (int draw = 0; draw < 1000; ++draw) {
        const int r = dim(rng), din = dim(rng), dout = dim(rng), k = kdist(rng);
        std::vector<LoraLayerDelta> chunks;
        for (int i = 0; i < k; ++i) {
            const AlphaMode m = (draw + i) % 3 == 0 ? AlphaMode::per_layer : AlphaMode::per_rank;
            chunks.push_back(random_delta(rng, r, din, dout, m, draw % 2 ? 1.0f : 0.05f));
        }
        const LoraLayerDelta c = compose_chunks(chunks);
        REQUIRE(c.rank() == r * k);
        Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(dout, din);
        for (const auto& ch : chunks) sum += delta_d(ch);
        const Eigen::MatrixXd got = c.effective_delta().cast<double>();
        const double denom = std::max(sum.cwiseAbs().maxCoeff(), 1e-30);
        CHECK((got - sum).cwiseAbs().maxCoeff() / denom <= 1e-6);
        // Same quantity along the exact f64 path, where the only error is the sum order.
        CHECK((delta_d(c) - sum).cwiseAbs().maxCoeff() / denom <= 1e-12);
    }
}

TEST_CASE("composition keeps chunk order and each chunk's scaler") {
    Rng rng(3);
    auto a = random_delta(rng, 2, 3, 4, AlphaMode::per_layer);
    auto b = random_delta(rng, 2, 3, 4, AlphaMode::per_rank);
    const std::vector<LoraLayerDelta> parts{a, b};
    const auto c = compose_chunks(parts);
    CHECK(c.mode == AlphaMode::per_rank);
    CHECK(c.a.topRows(2) == a.a);
    CHECK(c.a.bottomRows(2) == b.a);
    CHECK(c.b.leftCols(2) == a.b);
    CHECK(c.alpha == std::vector<float>{a.alpha[0], a.alpha[0], b.alpha[0], b.alpha[1]});
    const std::vector<LoraLayerDelta> one{a};
    CHECK(compose_chunks(one) == a);
}

TEST_CASE("composition rejects heterogeneous and empty inputs") {
    Rng rng(4);
    const std::vector<LoraLayerDelta> bad{random_delta(rng, 2, 3, 4, AlphaMode::per_rank),
                                          random_delta(rng, 2, 5, 4, AlphaMode::per_rank)};
    CHECK_THROWS_AS(compose_chunks(bad), ShapeError);
    CHECK_THROWS(compose_chunks(std::span<const LoraLayerDelta>{}));
    LoraLayerDelta wrong = random_delta(rng, 2, 3, 4, AlphaMode::per_rank);
    wrong.alpha.push_back(1.0f);
    CHECK_THROWS_AS(wrong.validate(), ShapeError);
}

TEST_CASE("adapter composition: rank r*K and chunk counts add up") {
    const LMConfig c = micro_lm();
    Rng rng(5);
    std::vector<LoraAdapter> parts;
    for (int i = 0; i < 4; ++i) parts.push_back(random_adapter(c, rng, 3, {"mlp.down", "attn.v"}));
    const LoraAdapter all = compose_adapters(parts);
    CHECK(all.n_chunks == 4);
    CHECK(all.total_rank() == 12);
    for (const auto& [id, d] : all.layers) CHECK(d.rank() == 12);
}

TEST_CASE("adapter file round trip and corruption detection") {
    const LMConfig c = micro_lm();
    Rng rng(6);
    LoraAdapter ad = random_adapter(c, rng, 2, {"mlp.down"});
    ad.layers.begin()->second.mode = AlphaMode::per_layer;
    ad.layers.begin()->second.alpha = {0.25f};
    ad.n_chunks = 1;
    const auto bytes = serialize_adapter(ad);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "D2LA");
    CHECK(deserialize_adapter(bytes) == ad);

    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x10;
    CHECK_THROWS_AS(deserialize_adapter(flipped), ChecksumError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 7);
    CHECK_THROWS_AS(deserialize_adapter(truncated), FormatError);
    auto version = bytes;
    version[4] = 9;
    CHECK_THROWS_AS(deserialize_adapter(version), FormatError);

    const auto path = (std::filesystem::temp_directory_path() / "d2l_test_adapter.d2la").string();
    save_adapter(path, ad);
    CHECK(load_adapter(path) == ad);
    std::filesystem::remove(path);
}

TEST_CASE("crc32 matches the standard check value") {
    const std::string s = "123456789";
    CHECK(crc32_of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) ==
          0xCBF43926u);
}

TEST_CASE("layer ids") {
    CHECK(layer_id(3, "mlp.down") == "block3.mlp.down");
    CHECK(alpha_mode_from_string(to_string(AlphaMode::per_rank)) == AlphaMode::per_rank);
    CHECK_THROWS(alpha_mode_from_string("nope"));
}
