#pragma once

// Single-file tensor container used for model, hypernetwork and optimizer
// checkpoints:
//
//   u64 header_bytes (LE) | JSON header | raw little-endian f32 data
//
// The header maps each tensor name to {"dtype": "F32", "shape": [rows, cols],
// "data_offsets": [begin, end]} (offsets relative to the data section) and
// carries free-form JSON under "__metadata__".

#include "d2l/hypernet.hpp"
#include "d2l/optim.hpp"
#include "d2l/target_lm.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace d2l {

struct TensorFile {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix& at(const std::string& name) const;
    bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> encode_tensor_file(const TensorFile& f);
TensorFile decode_tensor_file(std::span<const std::uint8_t> bytes);
void write_tensor_file(const std::string& path, const TensorFile& f);
TensorFile read_tensor_file(const std::string& path);

// Writes to path + ".tmp" then renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

void save_lm(const std::string& path, const TinyLMParams& params);
TinyLMParams load_lm(const std::string& path);

struct HypernetCheckpoint {
    HypernetParams params;
    std::optional<Adam> optimizer;
    int step = 0;
};

void save_hypernet(const std::string& path, const HypernetParams& params, const Adam* optimizer = nullptr,
                   int step = 0);
HypernetCheckpoint load_hypernet(const std::string& path);

}  // namespace d2l
