#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "echokv/echo.hpp"
#include "echokv/error.hpp"

namespace echokv {

namespace detail {

// All multi-byte fields are written little-endian byte by byte, so files are
// identical regardless of host endianness.
inline void write_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw IoError("truncated checkpoint: " + path);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32(os, v);
}

inline float read_f32(std::istream& is, const std::string& path) {
    const uint32_t v = read_u32(is, path);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

inline void write_f32_block(std::ostream& os, const float* src, size_t n) {
    for (size_t i = 0; i < n; ++i) write_f32(os, src[i]);
}

inline void read_f32_block(std::istream& is, float* dst, size_t n, const std::string& path) {
    for (size_t i = 0; i < n; ++i) dst[i] = read_f32(is, path);
}

inline void write_geometry(std::ostream& os, const BankGeometry& g) {
    write_u32(os, g.n_layers);
    write_u32(os, g.group_size);
    write_u32(os, g.local_dim);
    write_u32(os, g.d_kv);
    write_u32(os, g.n_kv_heads);
    write_u32(os, g.d_head);
}

inline BankGeometry read_geometry(std::istream& is, const std::string& path) {
    BankGeometry g;
    g.n_layers = read_u32(is, path);
    g.group_size = read_u32(is, path);
    g.local_dim = read_u32(is, path);
    g.d_kv = read_u32(is, path);
    g.n_kv_heads = read_u32(is, path);
    g.d_head = read_u32(is, path);
    return g;
}

inline void check_magic(std::istream& is, const char expect[4], const std::string& path) {
    char m[4];
    if (!is.read(m, 4) || std::memcmp(m, expect, 4) != 0)
        throw IoError("bad magic — not a " + std::string(expect, 4) + " file: " + path);
}

} // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

// Predictor checkpoint ("ECKV"): magic, version, geometry fingerprint, then
// per compressed layer ascending: w_key then w_value, row-major f32 of shape
// [(d_kv−D_local) × (d_kv+D_local)].
inline void save_bank(const PredictorBank& bank, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("ECKV", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_geometry(os, bank.geom);
    for (const auto& p : bank.predictors) {
        detail::write_f32_block(os, p.w_key.data.data(), p.w_key.size());
        detail::write_f32_block(os, p.w_value.data.data(), p.w_value.size());
    }
    if (!os) throw IoError("write failure: " + path);
}

// Loads a bank and, when expected geometry is supplied, refuses fingerprint
// mismatches (geometry drift is a configuration error, not a file error).
inline PredictorBank load_bank(const std::string& path, const BankGeometry* expected = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    detail::check_magic(is, "ECKV", path);
    const uint32_t version = detail::read_u32(is, path);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    const BankGeometry geom = detail::read_geometry(is, path);
    if (expected && !(geom == *expected))
        throw ConfigError("checkpoint geometry does not match the configured model: " + path);
    if (geom.group_size == 0 || geom.n_layers % geom.group_size != 0 ||
        geom.local_dim >= geom.d_kv)
        throw IoError("checkpoint header is inconsistent: " + path);

    PredictorBank bank;
    bank.geom = geom;
    const auto layout = partition_layers(geom.n_layers, geom.group_size);
    const size_t out_dim = geom.d_kv - geom.local_dim;
    const size_t in_dim = geom.d_kv + geom.local_dim;
    for (size_t layer : layout.compressed()) {
        Predictor p;
        p.layer = layer;
        p.w_key = Matrix(out_dim, in_dim);
        p.w_value = Matrix(out_dim, in_dim);
        detail::read_f32_block(is, p.w_key.data.data(), p.w_key.size(), path);
        detail::read_f32_block(is, p.w_value.data.data(), p.w_value.size(), path);
        bank.predictors.push_back(std::move(p));
    }
    char extra;
    if (is.read(&extra, 1)) throw IoError("trailing bytes after checkpoint payload: " + path);
    return bank;
}

// Channel-score sidecar ("ECKS"): same header style, then one f32 vector of
// length d_kv per layer, ascending layer order.
inline void save_scores(const std::vector<std::vector<float>>& scores, const BankGeometry& geom,
                        const std::string& path) {
    if (scores.size() != geom.n_layers)
        throw ConfigError("save_scores: score vector count != n_layers");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("ECKS", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_geometry(os, geom);
    for (const auto& layer_scores : scores) {
        if (layer_scores.size() != geom.d_kv)
            throw ConfigError("save_scores: score vector length != d_kv");
        detail::write_f32_block(os, layer_scores.data(), layer_scores.size());
    }
    if (!os) throw IoError("write failure: " + path);
}

inline std::vector<std::vector<float>> load_scores(const std::string& path,
                                                   const BankGeometry* expected = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open score file: " + path);
    detail::check_magic(is, "ECKS", path);
    const uint32_t version = detail::read_u32(is, path);
    if (version != kCheckpointVersion)
        throw IoError("unsupported score-file version " + std::to_string(version) + ": " + path);
    const BankGeometry geom = detail::read_geometry(is, path);
    if (expected && !(geom == *expected))
        throw ConfigError("score-file geometry does not match the configured model: " + path);
    std::vector<std::vector<float>> scores(geom.n_layers, std::vector<float>(geom.d_kv));
    for (auto& layer_scores : scores)
        detail::read_f32_block(is, layer_scores.data(), layer_scores.size(), path);
    char extra;
    if (is.read(&extra, 1)) throw IoError("trailing bytes after score payload: " + path);
    return scores;
}

} // namespace echokv
