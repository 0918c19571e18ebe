#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>

namespace d2l {

// All tensors are 2-D row-major float32 matrices. Higher-rank quantities
// (per-head, per-layer) are laid out as row blocks or column blocks.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

// Shortest decimal that reads back as the same float, for JSON output.
inline double short_float(float f) {
    char buf[32];
    for (int prec = 6; prec < 9; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, static_cast<double>(f));
        if (std::strtof(buf, nullptr) == f) return std::strtod(buf, nullptr);
    }
    return static_cast<double>(f);
}

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

inline Matrix randn(Eigen::Index rows, Eigen::Index cols, float stddev, Rng& rng) {
    std::normal_distribution<float> dist(0.0f, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

// FNV-1a over the raw bytes of a matrix; used for frozen-weight checksums.
inline std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t hash_matrix(const Matrix& m, std::uint64_t h = 1469598103934665603ull) {
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    h = hash_bytes(shape, sizeof(shape), h);
    return hash_bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()), h);
}

}  // namespace d2l
