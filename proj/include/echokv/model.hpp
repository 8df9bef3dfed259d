#pragma once

#include <cstdint>
#include <vector>

#include "echokv/attention.hpp"
#include "echokv/matrix.hpp"
#include "echokv/rng.hpp"

namespace echokv {

struct ModelConfig {
    size_t n_layers = 8;
    AttentionGeometry geometry{8, 4, 16};
    size_t d_model = 128;
    size_t vocab = 256;
    uint64_t seed = 42;

    size_t d_kv() const { return geometry.kv_dim(); }

    void validate() const {
        geometry.validate();
        if (n_layers == 0) throw ConfigError("model: n_layers must be positive");
        if (vocab == 0) throw ConfigError("model: vocab must be positive");
        if (d_model != geometry.q_dim())
            throw ConfigError("model: d_model must equal n_q_heads*d_head");
    }
};

// Per-layer cache entry. Keys are stored BEFORE the rotary rotation; the
// rotation is applied at attention time, so a key row depends only on the
// token's hidden state, not its position.
struct LayerKV {
    size_t layer = 0;
    Matrix k_pre_rope; // [tokens × n_kv_heads*d_head]
    Matrix v;          // same shape

    size_t tokens() const { return k_pre_rope.rows; }
};

// Everything a predictor-training step needs from one frozen forward pass.
struct LayerTrace {
    Matrix q_post_rope; // [tokens × n_q_heads*d_head]
    LayerKV kv;
    Matrix attn_out; // [tokens × n_q_heads*d_head], context before the output projection
};

struct TraceBatch {
    std::vector<int> tokens;
    std::vector<LayerTrace> layers;
    Matrix logits; // [tokens × vocab]
};

namespace detail {

constexpr double kRmsEps = 1e-6;

inline Matrix rmsnorm(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (size_t r = 0; r < x.rows; ++r) {
        const float* src = x.row(r);
        double acc = 0.0;
        for (size_t c = 0; c < x.cols; ++c) acc += static_cast<double>(src[c]) * src[c];
        const double inv = 1.0 / std::sqrt(acc / static_cast<double>(x.cols) + kRmsEps);
        float* dst = out.row(r);
        for (size_t c = 0; c < x.cols; ++c)
            dst[c] = static_cast<float>(static_cast<double>(src[c]) * inv);
    }
    return out;
}

inline void silu_inplace(Matrix& x) {
    for (float& v : x.data) {
        const double d = v;
        v = static_cast<float>(d / (1.0 + std::exp(-d)));
    }
}

} // namespace detail

// Pre-norm decoder-only transformer with rotary positions, grouped-query
// attention, a SiLU MLP (4× expansion) and tied unembedding. Weights are
// random (std 0.02) — the compression mechanism is exercised on a fixed
// backbone, not a pretrained one.
struct Model {
    ModelConfig cfg;

    Matrix embedding; // [vocab × d_model], also the unembedding (tied)
    struct LayerWeights {
        Matrix wq; // [d_model × n_q*d]
        Matrix wk; // [d_model × n_kv*d]
        Matrix wv; // [d_model × n_kv*d]
        Matrix wo; // [n_q*d × d_model]
        Matrix w1; // [d_model × 4*d_model]
        Matrix w2; // [4*d_model × d_model]
    };
    std::vector<LayerWeights> layers;

    uint64_t weight_checksum() const {
        uint64_t h = checksum(embedding);
        for (const auto& l : layers) {
            h = combine_checksum(h, checksum(l.wq));
            h = combine_checksum(h, checksum(l.wk));
            h = combine_checksum(h, checksum(l.wv));
            h = combine_checksum(h, checksum(l.wo));
            h = combine_checksum(h, checksum(l.w1));
            h = combine_checksum(h, checksum(l.w2));
        }
        return h;
    }
};

// identical seed → bit-identical weights (fixed draw order, pinned generator)
inline Model init_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    constexpr float kStd = 0.02f;
    const size_t dm = cfg.d_model, qd = cfg.geometry.q_dim(), kd = cfg.geometry.kv_dim();
    m.embedding = Matrix::randn(cfg.vocab, dm, kStd, rng);
    m.layers.resize(cfg.n_layers);
    for (auto& l : m.layers) {
        l.wq = Matrix::randn(dm, qd, kStd, rng);
        l.wk = Matrix::randn(dm, kd, kStd, rng);
        l.wv = Matrix::randn(dm, kd, kStd, rng);
        l.wo = Matrix::randn(qd, dm, kStd, rng);
        l.w1 = Matrix::randn(dm, 4 * dm, kStd, rng);
        l.w2 = Matrix::randn(4 * dm, dm, kStd, rng);
    }
    return m;
}

// Full forward pass over a token sequence, recording per-layer post-rotary
// queries, pre-rotary keys, values, and attention context for the trainer.
inline TraceBatch prefill(const Model& model, const std::vector<int>& tokens) {
    if (tokens.empty()) throw InputError("prefill: empty token list");
    const auto& cfg = model.cfg;
    for (int t : tokens)
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab)
            throw InputError("prefill: token id out of vocab range");

    const size_t n = tokens.size();
    TraceBatch trace;
    trace.tokens = tokens;
    trace.layers.resize(cfg.n_layers);

    Matrix x(n, cfg.d_model);
    for (size_t i = 0; i < n; ++i)
        std::memcpy(x.row(i), model.embedding.row(static_cast<size_t>(tokens[i])),
                    cfg.d_model * sizeof(float));

    const auto pos = position_range(0, n);
    for (size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& w = model.layers[li];
        Matrix xn = detail::rmsnorm(x);
        Matrix q = matmul(xn, w.wq);
        Matrix k = matmul(xn, w.wk);
        Matrix v = matmul(xn, w.wv);

        LayerTrace& lt = trace.layers[li];
        lt.kv.layer = li;
        lt.kv.k_pre_rope = k; // cached before rotation
        lt.kv.v = v;

        rope_apply(q, cfg.geometry.n_q_heads, cfg.geometry.d_head, pos);
        rope_apply(k, cfg.geometry.n_kv_heads, cfg.geometry.d_head, pos);
        lt.q_post_rope = q;

        Matrix attn = causal_attention(q, k, v, cfg.geometry, 0);
        lt.attn_out = attn;

        Matrix proj = matmul(attn, w.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += proj.data[i];

        Matrix hn = detail::rmsnorm(x);
        Matrix h = matmul(hn, w.w1);
        detail::silu_inplace(h);
        Matrix mlp = matmul(h, w.w2);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp.data[i];
    }

    trace.logits = matmul_nt(detail::rmsnorm(x), model.embedding);
    return trace;
}

} // namespace echokv
