#pragma once

// Generated-adapter data model: low-rank deltas with per-layer or per-rank
// scalers, rank-concatenation of per-chunk adapters, and the .d2la file format.

#include "d2l/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace d2l {

enum class AlphaMode { per_layer, per_rank };

std::string to_string(AlphaMode m);
AlphaMode alpha_mode_from_string(std::string_view s);

struct LoraLayerDelta {
    Matrix a;                  // [r x d_in]
    Matrix b;                  // [d_out x r]
    std::vector<float> alpha;  // 1 entry (per_layer) or r entries (per_rank)
    AlphaMode mode = AlphaMode::per_rank;

    int rank() const { return static_cast<int>(a.rows()); }
    int d_in() const { return static_cast<int>(a.cols()); }
    int d_out() const { return static_cast<int>(b.rows()); }

    void validate() const;
    RowVector alpha_per_rank() const;
    // alpha (.) (B A), shape [d_out x d_in].
    Matrix effective_delta() const;

    bool operator==(const LoraLayerDelta&) const = default;
};

// Layer identifiers follow "block{i}.{module}", e.g. "block0.mlp.down".
std::string layer_id(int block, std::string_view module);

struct LoraAdapter {
    std::map<std::string, LoraLayerDelta> layers;
    int chunk_rank = 0;  // r
    int n_chunks = 1;    // K
    std::string generator_version = "d2l-1";

    int total_rank() const;
    void validate() const;
    bool operator==(const LoraAdapter&) const = default;
};

// W + alpha (.) (B A); W is left untouched.
Matrix apply_lora(const Matrix& w, const LoraLayerDelta& delta);

// Stacks A rows and B columns in chunk order. Each chunk keeps its own scaler:
// the result carries a per-rank alpha vector (except for a single chunk,
// which is returned unchanged).
LoraLayerDelta compose_chunks(std::span<const LoraLayerDelta> chunk_deltas);
LoraAdapter compose_adapters(std::span<const LoraAdapter> chunks);

// .d2la container:
//   "D2LA" | u32 version | u32 header_bytes | JSON header | f32 payload | u32 crc32
// All integers and floats little-endian; the CRC covers everything before it.
constexpr std::uint32_t kAdapterFormatVersion = 1;
std::vector<std::uint8_t> serialize_adapter(const LoraAdapter& adapter);
LoraAdapter deserialize_adapter(std::span<const std::uint8_t> bytes);
void save_adapter(const std::string& path, const LoraAdapter& adapter);
LoraAdapter load_adapter(const std::string& path);

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace d2l
