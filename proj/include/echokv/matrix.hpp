#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "echokv/error.hpp"
#include "echokv/rng.hpp"

namespace echokv {

// Dense row-major float32 matrix. All kernels accumulate in double with a
// fixed element order (rows outer, k ascending) so results are bit-stable
// across runs.
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> data; // rows * cols, row-major

    Matrix() = default;
    Matrix(size_t r, size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix randn(size_t r, size_t c, float stddev, Rng& rng) {
        Matrix m(r, c);
        for (auto& x : m.data) x = rng.gaussian_f(stddev);
        return m;
    }

    float& at(size_t r, size_t c) { return data[r * cols + c]; }
    float at(size_t r, size_t c) const { return data[r * cols + c]; }
    float* row(size_t r) { return data.data() + r * cols; }
    const float* row(size_t r) const { return data.data() + r * cols; }

    size_t size() const { return rows * cols; }
    size_t bytes() const { return size() * sizeof(float); }
    bool empty() const { return rows == 0 || cols == 0; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }

    void append_row(const float* src) {
        data.insert(data.end(), src, src + cols);
        ++rows;
    }

    // drops row 0; O(n) memmove, fine for window-sized matrices
    void pop_front_row() {
        data.erase(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(cols));
        --rows;
    }
};

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

inline bool all_finite(const Matrix& m) {
    for (float x : m.data)
        if (!std::isfinite(x)) return false;
    return true;
}

// FNV-1a over the raw float bits; used for determinism checks
inline uint64_t checksum(const Matrix& m) {
    uint64_t h = 1469598103934665603ull;
    for (float x : m.data) {
        uint32_t b;
        std::memcpy(&b, &x, 4);
        for (int i = 0; i < 4; ++i) {
            h ^= (b >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

inline uint64_t combine_checksum(uint64_t acc, uint64_t h) {
    acc ^= h + 0x9e3779b97f4a7c15ull + (acc << 6) + (acc >> 2);
    return acc;
}

// a [m×k] * b [k×n]; per output element k runs ascending in a double accumulator
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    require_shape(a.cols == b.rows, "matmul: inner dimensions " + std::to_string(a.cols) +
                                        " vs " + std::to_string(b.rows));
    Matrix out(a.rows, b.cols);
    // pack b columns contiguously; accumulation order per element is unchanged
    std::vector<float> bt(b.size());
    for (size_t k = 0; k < b.rows; ++k)
        for (size_t j = 0; j < b.cols; ++j) bt[j * b.rows + k] = b.at(k, j);
    for (size_t i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        for (size_t j = 0; j < b.cols; ++j) {
            const float* bcol = bt.data() + j * b.rows;
            double acc = 0.0;
            for (size_t k = 0; k < a.cols; ++k) acc += static_cast<double>(arow[k]) * bcol[k];
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

// a [m×k] * b^T where b is [n×k]
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    require_shape(a.cols == b.cols, "matmul_nt: inner dimensions " + std::to_string(a.cols) +
                                        " vs " + std::to_string(b.cols));
    Matrix out(a.rows, b.rows);
    for (size_t i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        for (size_t j = 0; j < b.rows; ++j) {
            const float* brow = b.row(j);
            double acc = 0.0;
            for (size_t k = 0; k < a.cols; ++k) acc += static_cast<double>(arow[k]) * brow[k];
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

// a^T * b where a is [k×m], b is [k×n]
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    require_shape(a.rows == b.rows, "matmul_tn: inner dimensions " + std::to_string(a.rows) +
                                        " vs " + std::to_string(b.rows));
    Matrix out(a.cols, b.cols);
    std::vector<double> acc(a.cols * b.cols, 0.0);
    for (size_t k = 0; k < a.rows; ++k) {
        const float* arow = a.row(k);
        const float* brow = b.row(k);
        for (size_t i = 0; i < a.cols; ++i) {
            double ai = arow[i];
            double* accrow = acc.data() + i * b.cols;
            for (size_t j = 0; j < b.cols; ++j) accrow[j] += ai * brow[j];
        }
    }
    for (size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(acc[i]);
    return out;
}

inline Matrix slice_rows(const Matrix& m, size_t r0, size_t r1) {
    require_shape(r0 <= r1 && r1 <= m.rows, "slice_rows: range out of bounds");
    Matrix out(r1 - r0, m.cols);
    std::memcpy(out.data.data(), m.row(r0), out.bytes());
    return out;
}

inline Matrix slice_cols(const Matrix& m, size_t c0, size_t c1) {
    require_shape(c0 <= c1 && c1 <= m.cols, "slice_cols: range out of bounds");
    Matrix out(m.rows, c1 - c0);
    for (size_t r = 0; r < m.rows; ++r)
        std::memcpy(out.row(r), m.row(r) + c0, out.cols * sizeof(float));
    return out;
}

// [a ; b] along columns
inline Matrix concat_cols(const Matrix& a, const Matrix& b) {
    require_shape(a.rows == b.rows, "concat_cols: row counts " + std::to_string(a.rows) +
                                        " vs " + std::to_string(b.rows));
    Matrix out(a.rows, a.cols + b.cols);
    for (size_t r = 0; r < a.rows; ++r) {
        std::memcpy(out.row(r), a.row(r), a.cols * sizeof(float));
        std::memcpy(out.row(r) + a.cols, b.row(r), b.cols * sizeof(float));
    }
    return out;
}

inline Matrix concat_rows(const Matrix& a, const Matrix& b) {
    if (a.empty() && a.rows == 0) return b;
    if (b.empty() && b.rows == 0) return a;
    require_shape(a.cols == b.cols, "concat_rows: column counts differ");
    Matrix out(a.rows + b.rows, a.cols);
    std::memcpy(out.data.data(), a.data.data(), a.bytes());
    std::memcpy(out.data.data() + a.size(), b.data.data(), b.bytes());
    return out;
}

} // namespace echokv
