#include "d2l/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace d2l {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const Matrix& TensorFile::at(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return m;
    }
    throw FormatError("tensor file: missing tensor " + name);
}

bool TensorFile::contains(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.first == name) return true;
    }
    return false;
}

std::vector<std::uint8_t> encode_tensor_file(const TensorFile& f) {
    nlohmann::json header = nlohmann::json::object();
    header["__metadata__"] = f.metadata;
    std::uint64_t off = 0;
    for (const auto& [name, m] : f.tensors) {
        if (name == "__metadata__" || header.contains(name)) throw FormatError("tensor file: duplicate name " + name);
        const std::uint64_t n = static_cast<std::uint64_t>(m.size()) * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", {m.rows(), m.cols()}}, {"data_offsets", {off, off + n}}};
        off += n;
    }
    const std::string hs = header.dump();
    std::vector<std::uint8_t> out(8 + hs.size() + off);
    const std::uint64_t hn = hs.size();
    std::memcpy(out.data(), &hn, 8);
    std::memcpy(out.data() + 8, hs.data(), hs.size());
    std::uint8_t* data = out.data() + 8 + hs.size();
    for (const auto& [name, m] : f.tensors) {
        const auto& r = header[name]["data_offsets"];
        if (m.size() > 0) std::memcpy(data + r[0].get<std::uint64_t>(), m.data(), static_cast<std::size_t>(m.size()) * sizeof(float));
    }
    return out;
}

TensorFile decode_tensor_file(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw FormatError("tensor file: truncated header length");
    std::uint64_t hn = 0;
    std::memcpy(&hn, bytes.data(), 8);
    if (hn > bytes.size() - 8) throw FormatError("tensor file: header exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hn));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("tensor file: bad header: ") + e.what());
    }
    const std::uint8_t* data = bytes.data() + 8 + hn;
    const std::uint64_t data_n = bytes.size() - 8 - hn;
    TensorFile f;
    // Tensors come back in data order.
    std::vector<std::pair<std::uint64_t, std::string>> order;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            f.metadata = it.value();
            continue;
        }
        order.emplace_back(it.value().at("data_offsets").at(0).get<std::uint64_t>(), it.key());
    }
    std::sort(order.begin(), order.end());
    for (const auto& [begin, name] : order) {
        const auto& e = header[name];
        if (e.at("dtype") != "F32") throw FormatError("tensor file: unsupported dtype for " + name);
        const auto rows = e.at("shape").at(0).get<std::int64_t>();
        const auto cols = e.at("shape").at(1).get<std::int64_t>();
        const auto end = e.at("data_offsets").at(1).get<std::uint64_t>();
        if (rows < 0 || cols < 0 || end < begin || end > data_n ||
            end - begin != static_cast<std::uint64_t>(rows * cols) * sizeof(float)) {
            throw FormatError("tensor file: inconsistent extent for " + name);
        }
        Matrix m(rows, cols);
        if (m.size() > 0) std::memcpy(m.data(), data + begin, end - begin);
        f.tensors.emplace_back(name, std::move(m));
    }
    return f;
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_tensor_file(const std::string& path, const TensorFile& f) { write_file_atomic(path, encode_tensor_file(f)); }

TensorFile read_tensor_file(const std::string& path) { return decode_tensor_file(read_file(path)); }

// ---------------------------------------------------------------------------

void save_lm(const std::string& path, const TinyLMParams& params) {
    TensorFile f;
    f.metadata["kind"] = "target_lm";
    f.metadata["format_version"] = 1;
    f.metadata["config"] = params.config;
    f.metadata["checksum"] = std::to_string(params.checksum());
    params.visit([&](const std::string& n, const Matrix& m) { f.tensors.emplace_back(n, m); });
    write_tensor_file(path, f);
}

TinyLMParams load_lm(const std::string& path) {
    const TensorFile f = read_tensor_file(path);
    if (f.metadata.value("kind", "") != "target_lm") throw FormatError(path + ": not a target-model checkpoint");
    LMConfig c = f.metadata.at("config").get<LMConfig>();
    c.validate();
    TinyLMParams p = init_lm(c, 0);
    p.visit([&](const std::string& n, Matrix& m) {
        const Matrix& src = f.at(n);
        require_shape(src.rows() == m.rows() && src.cols() == m.cols(), path + ": shape mismatch for " + n);
        m = src;
    });
    if (f.metadata.contains("checksum") && f.metadata["checksum"].get<std::string>() != std::to_string(p.checksum())) {
        throw FormatError(path + ": checksum mismatch");
    }
    return p;
}

void save_hypernet(const std::string& path, const HypernetParams& params, const Adam* optimizer, int step) {
    TensorFile f;
    f.metadata["kind"] = "hypernet";
    f.metadata["format_version"] = 1;
    f.metadata["config"] = params.config;
    f.metadata["lm_config"] = params.lm;
    f.metadata["step"] = step;
    params.visit([&](const std::string& n, const Matrix& m) { f.tensors.emplace_back(n, m); });
    if (optimizer) {
        const Adam& o = *optimizer;
        f.metadata["adam"] = {{"t", o.steps()},
                              {"beta1", o.config().beta1},
                              {"beta2", o.config().beta2},
                              {"eps", o.config().eps},
                              {"weight_decay", o.config().weight_decay},
                              {"n", o.first_moments().size()}};
        for (std::size_t i = 0; i < o.first_moments().size(); ++i) {
            f.tensors.emplace_back("adam.m." + std::to_string(i), o.first_moments()[i]);
            f.tensors.emplace_back("adam.v." + std::to_string(i), o.second_moments()[i]);
        }
    }
    write_tensor_file(path, f);
}

HypernetCheckpoint load_hypernet(const std::string& path) {
    const TensorFile f = read_tensor_file(path);
    if (f.metadata.value("kind", "") != "hypernet") throw FormatError(path + ": not a hypernetwork checkpoint");
    const HypernetConfig c = f.metadata.at("config").get<HypernetConfig>();
    const LMConfig lc = f.metadata.at("lm_config").get<LMConfig>();
    HypernetCheckpoint ck;
    ck.params = init_hypernet(c, lc, 0);
    ck.params.visit([&](const std::string& n, Matrix& m) {
        const Matrix& src = f.at(n);
        require_shape(src.rows() == m.rows() && src.cols() == m.cols(), path + ": shape mismatch for " + n);
        m = src;
    });
    ck.step = f.metadata.value("step", 0);
    if (f.metadata.contains("adam")) {
        const auto& a = f.metadata["adam"];
        Adam o(AdamConfig{a.at("beta1").get<float>(), a.at("beta2").get<float>(), a.at("eps").get<float>(),
                          a.at("weight_decay").get<float>()});
        const std::size_t n = a.at("n").get<std::size_t>();
        for (std::size_t i = 0; i < n; ++i) {
            o.first_moments().push_back(f.at("adam.m." + std::to_string(i)));
            o.second_moments().push_back(f.at("adam.v." + std::to_string(i)));
        }
        o.set_steps(a.at("t").get<int>());
        ck.optimizer = std::move(o);
    }
    return ck;
}

}  // namespace d2l
