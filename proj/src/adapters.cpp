#include "d2l/adapters.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace d2l {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

std::string to_string(AlphaMode m) { return m == AlphaMode::per_layer ? "per_layer" : "per_rank"; }

AlphaMode alpha_mode_from_string(std::string_view s) {
    if (s == "per_layer") return AlphaMode::per_layer;
    if (s == "per_rank") return AlphaMode::per_rank;
    throw ConfigError("unknown alpha mode: " + std::string(s));
}

void LoraLayerDelta::validate() const {
    require_shape(a.rows() == b.cols(), "lora delta: A rows (" + std::to_string(a.rows()) + ") != B cols (" +
                                            std::to_string(b.cols()) + ")");
    const std::size_t want = mode == AlphaMode::per_layer ? 1u : static_cast<std::size_t>(a.rows());
    require_shape(alpha.size() == want, "lora delta: alpha has " + std::to_string(alpha.size()) + " entries, expected " +
                                            std::to_string(want));
    for (float v : alpha) {
        if (!std::isfinite(v)) throw Error("lora delta: non-finite alpha");
    }
}

RowVector LoraLayerDelta::alpha_per_rank() const {
    validate();
    if (mode == AlphaMode::per_layer) return RowVector::Constant(rank(), alpha.front());
    return Eigen::Map<const RowVector>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
}

Matrix LoraLayerDelta::effective_delta() const {
    const Eigen::RowVectorXd s = alpha_per_rank().cast<double>();
    const Eigen::MatrixXd bs = b.cast<double>().array().rowwise() * s.array();
    return (bs * a.cast<double>()).cast<float>();
}

std::string layer_id(int block, std::string_view module) {
    return "block" + std::to_string(block) + "." + std::string(module);
}

int LoraAdapter::total_rank() const {
    if (layers.empty()) return 0;
    return layers.begin()->second.rank();
}

void LoraAdapter::validate() const {
    if (layers.empty()) throw FormatError("adapter has no layers");
    for (const auto& [name, d] : layers) d.validate();
}

Matrix apply_lora(const Matrix& w, const LoraLayerDelta& delta) {
    delta.validate();
    require_shape(w.rows() == delta.d_out() && w.cols() == delta.d_in(),
                  "apply_lora: weight is " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                      " but delta is " + std::to_string(delta.d_out()) + "x" + std::to_string(delta.d_in()));
    return w + delta.effective_delta();
}

LoraLayerDelta compose_chunks(std::span<const LoraLayerDelta> chunks) {
    if (chunks.empty()) throw Error("compose_chunks: empty chunk list");
    const LoraLayerDelta& first = chunks.front();
    first.validate();
    for (const LoraLayerDelta& c : chunks) {
        c.validate();
        require_shape(c.d_in() == first.d_in() && c.d_out() == first.d_out() && c.rank() == first.rank(),
                      "compose_chunks: heterogeneous chunk shapes");
    }
    if (chunks.size() == 1) return first;
    const int r = first.rank();
    const int k = static_cast<int>(chunks.size());
    LoraLayerDelta out;
    out.mode = AlphaMode::per_rank;
    out.a.resize(static_cast<Eigen::Index>(r) * k, first.d_in());
    out.b.resize(first.d_out(), static_cast<Eigen::Index>(r) * k);
    out.alpha.reserve(static_cast<std::size_t>(r) * static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const LoraLayerDelta& c = chunks[static_cast<std::size_t>(i)];
        out.a.middleRows(static_cast<Eigen::Index>(i) * r, r) = c.a;
        out.b.middleCols(static_cast<Eigen::Index>(i) * r, r) = c.b;
        const RowVector s = c.alpha_per_rank();
        out.alpha.insert(out.alpha.end(), s.data(), s.data() + s.size());
    }
    return out;
}

LoraAdapter compose_adapters(std::span<const LoraAdapter> chunks) {
    if (chunks.empty()) throw Error("compose_adapters: empty chunk list");
    if (chunks.size() == 1) return chunks.front();
    LoraAdapter out;
    out.chunk_rank = chunks.front().chunk_rank;
    out.generator_version = chunks.front().generator_version;
    out.n_chunks = 0;
    for (const LoraAdapter& c : chunks) {
        if (c.layers.size() != chunks.front().layers.size()) throw ShapeError("compose_adapters: layer sets differ");
        out.n_chunks += c.n_chunks;
    }
    for (const auto& [name, _] : chunks.front().layers) {
        std::vector<LoraLayerDelta> parts;
        parts.reserve(chunks.size());
        for (const LoraAdapter& c : chunks) {
            auto it = c.layers.find(name);
            if (it == c.layers.end()) throw ShapeError("compose_adapters: layer " + name + " missing in a chunk");
            parts.push_back(it->second);
        }
        out.layers.emplace(name, compose_chunks(parts));
    }
    return out;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    c = crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(c);
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

void put_floats(std::vector<std::uint8_t>& out, const float* data, std::size_t n) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n * sizeof(float));
}

}  // namespace

std::vector<std::uint8_t> serialize_adapter(const LoraAdapter& adapter) {
    adapter.validate();
    json header;
    header["chunk_rank"] = adapter.chunk_rank;
    header["n_chunks"] = adapter.n_chunks;
    header["generator_version"] = adapter.generator_version;
    json layers = json::array();
    std::size_t offset = 0;
    for (const auto& [name, d] : adapter.layers) {
        json l;
        l["name"] = name;
        l["rank"] = d.rank();
        l["d_in"] = d.d_in();
        l["d_out"] = d.d_out();
        l["alpha_mode"] = to_string(d.mode);
        l["offset"] = offset;  // in floats: A, then B, then alpha
        offset += static_cast<std::size_t>(d.a.size() + d.b.size()) + d.alpha.size();
        layers.push_back(std::move(l));
    }
    header["layers"] = std::move(layers);
    header["payload_floats"] = offset;
    const std::string hs = header.dump();

    std::vector<std::uint8_t> out = {'D', '2', 'L', 'A'};
    put_u32(out, kAdapterFormatVersion);
    put_u32(out, static_cast<std::uint32_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& [name, d] : adapter.layers) {
        put_floats(out, d.a.data(), static_cast<std::size_t>(d.a.size()));
        put_floats(out, d.b.data(), static_cast<std::size_t>(d.b.size()));
        put_floats(out, d.alpha.data(), d.alpha.size());
    }
    put_u32(out, crc32_of(out));
    return out;
}

LoraAdapter deserialize_adapter(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "D2LA", 4) != 0) throw FormatError("not a .d2la adapter");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kAdapterFormatVersion) throw FormatError("unknown adapter format version " + std::to_string(version));
    const std::uint32_t stored_crc = get_u32(bytes, bytes.size() - 4);
    if (crc32_of(bytes.first(bytes.size() - 4)) != stored_crc) throw ChecksumError("adapter checksum mismatch");
    const std::uint32_t hlen = get_u32(bytes, 8);
    if (12ull + hlen + 4 > bytes.size()) throw FormatError("truncated adapter header");
    json header;
    try {
        header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad adapter header: ") + e.what());
    }
    const std::size_t payload_begin = 12ull + hlen;
    const std::size_t payload_floats = header.at("payload_floats").get<std::size_t>();
    if (payload_begin + payload_floats * sizeof(float) + 4 != bytes.size()) throw FormatError("adapter payload size mismatch");
    const auto* payload = bytes.data() + payload_begin;
    auto read = [&](std::size_t float_off, float* dst, std::size_t n) {
        if (float_off + n > payload_floats) throw FormatError("adapter tensor out of payload range");
        std::memcpy(dst, payload + float_off * sizeof(float), n * sizeof(float));
    };

    LoraAdapter a;
    a.chunk_rank = header.at("chunk_rank").get<int>();
    a.n_chunks = header.at("n_chunks").get<int>();
    a.generator_version = header.at("generator_version").get<std::string>();
    for (const json& l : header.at("layers")) {
        LoraLayerDelta d;
        const int r = l.at("rank").get<int>();
        const int din = l.at("d_in").get<int>();
        const int dout = l.at("d_out").get<int>();
        if (r < 0 || din < 0 || dout < 0) throw FormatError("negative dimension in adapter header");
        d.mode = alpha_mode_from_string(l.at("alpha_mode").get<std::string>());
        std::size_t off = l.at("offset").get<std::size_t>();
        d.a.resize(r, din);
        read(off, d.a.data(), static_cast<std::size_t>(d.a.size()));
        off += static_cast<std::size_t>(d.a.size());
        d.b.resize(dout, r);
        read(off, d.b.data(), static_cast<std::size_t>(d.b.size()));
        off += static_cast<std::size_t>(d.b.size());
        d.alpha.resize(d.mode == AlphaMode::per_layer ? 1u : static_cast<std::size_t>(r));
        read(off, d.alpha.data(), d.alpha.size());
        a.layers.emplace(l.at("name").get<std::string>(), std::move(d));
    }
    a.validate();
    return a;
}

void save_adapter(const std::string& path, const LoraAdapter& adapter) {
    const auto bytes = serialize_adapter(adapter);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

LoraAdapter load_adapter(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_adapter(bytes);
}

}  // namespace d2l
