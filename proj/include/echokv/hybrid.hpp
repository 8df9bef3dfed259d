#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "echokv/echo.hpp"
#include "echokv/losses.hpp"
#include "echokv/model.hpp"

namespace echokv {

// Key-channel pruning for keys combined with echo reconstruction for values.
// Following the doubled-rate convention for key-only methods, the blended
// ratio averages the key keep ratio with the value-side echo ratio.
struct HybridConfig {
    double key_keep_ratio = 0.5;  // r_k in (0, 1]
    EchoConfig value_echo;        // the value side reuses the echo layout
    size_t calibration_samples = 4;

    void validate(size_t n_layers, size_t d_head) const {
        if (key_keep_ratio <= 0.0 || key_keep_ratio > 1.0)
            throw ConfigError("hybrid: key_keep_ratio must be in (0, 1]");
        value_echo.validate(n_layers, d_head);
    }
};

inline double blended_ratio(const HybridConfig& cfg) {
    return (cfg.key_keep_ratio + compute_ratio(cfg.value_echo)) / 2.0;
}

// Per-layer key-channel importance: mean squared key activation weighted by
// the mean squared activation of the matching query channel across the
// grouped query heads. A zero channel scores zero and is pruned first. The
// interface accepts any external score vector, so a different criterion can
// drop in unchanged.
inline std::vector<std::vector<float>> calibrate_key_channels(
    const Model& model, const std::vector<std::vector<int>>& corpus, size_t samples) {
    if (corpus.empty() || samples == 0)
        throw InputError("calibrate_key_channels: need at least one calibration sequence");
    const auto& cfg = model.cfg;
    const AttentionGeometry& g = cfg.geometry;
    const size_t d_kv = cfg.d_kv();
    const size_t n_use = std::min(samples, corpus.size());

    std::vector<std::vector<double>> k_sq(cfg.n_layers, std::vector<double>(d_kv, 0.0));
    std::vector<std::vector<double>> q_sq(cfg.n_layers, std::vector<double>(g.q_dim(), 0.0));
    size_t total_tokens = 0;
    for (size_t s = 0; s < n_use; ++s) {
        TraceBatch trace = prefill(model, corpus[s]);
        total_tokens += corpus[s].size();
        for (size_t l = 0; l < cfg.n_layers; ++l) {
            const Matrix& k = trace.layers[l].kv.k_pre_rope;
            for (size_t r = 0; r < k.rows; ++r)
                for (size_t c = 0; c < d_kv; ++c)
                    k_sq[l][c] += static_cast<double>(k.at(r, c)) * k.at(r, c);
            const Matrix& q = trace.layers[l].q_post_rope;
            for (size_t r = 0; r < q.rows; ++r)
                for (size_t c = 0; c < q.cols; ++c)
                    q_sq[l][c] += static_cast<double>(q.at(r, c)) * q.at(r, c);
        }
    }

    std::vector<std::vector<float>> scores(cfg.n_layers, std::vector<float>(d_kv, 0.0f));
    const double inv_n = 1.0 / static_cast<double>(total_tokens);
    const size_t group = g.gqa_group();
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        for (size_t c = 0; c < d_kv; ++c) {
            const size_t kv_head = c / g.d_head;
            const size_t cc = c % g.d_head;
            double q_energy = 0.0;
            for (size_t gq = 0; gq < group; ++gq) {
                const size_t qh = kv_head * group + gq;
                q_energy += q_sq[l][qh * g.d_head + cc] * inv_n;
            }
            q_energy /= static_cast<double>(group);
            scores[l][c] = static_cast<float>(k_sq[l][c] * inv_n * q_energy);
        }
    }
    return scores;
}

// Kept channels of one layer's keys plus the membership bitmap needed to
// zero-fill at read time. The kept set is shared by every token of the layer.
struct PrunedKeys {
    size_t d_kv = 0;
    std::vector<size_t> kept_channels; // ascending
    std::vector<uint8_t> bitmap;       // ⌈d_kv/8⌉ bytes, bit c set ⇔ channel kept
    Matrix kept;                       // [tokens × kept_channels.size()]

    size_t stored_bytes() const { return kept.bytes() + bitmap.size(); }
};

// keep the top-⌈r_k·d_kv⌉ channels by score, ties broken by lower index
inline PrunedKeys prune_keys(const Matrix& k, const std::vector<float>& scores, double r_k) {
    if (r_k <= 0.0 || r_k > 1.0) throw ConfigError("prune_keys: r_k must be in (0, 1]");
    require_shape(scores.size() == k.cols, "prune_keys: scores length != d_kv");
    const size_t d_kv = k.cols;
    const size_t n_keep = std::min(
        d_kv, static_cast<size_t>(std::ceil(r_k * static_cast<double>(d_kv))));

    std::vector<size_t> order(d_kv);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    PrunedKeys out;
    out.d_kv = d_kv;
    out.kept_channels.assign(order.begin(), order.begin() + n_keep);
    std::sort(out.kept_channels.begin(), out.kept_channels.end());
    out.bitmap.assign((d_kv + 7) / 8, 0);
    for (size_t c : out.kept_channels) out.bitmap[c / 8] |= static_cast<uint8_t>(1u << (c % 8));
    out.kept = Matrix(k.rows, n_keep);
    for (size_t r = 0; r < k.rows; ++r) {
        const float* src = k.row(r);
        float* dst = out.kept.row(r);
        for (size_t i = 0; i < n_keep; ++i) dst[i] = src[out.kept_channels[i]];
    }
    return out;
}

// full-width view with pruned channels zero-filled
inline Matrix zero_fill(const PrunedKeys& p) {
    Matrix out(p.kept.rows, p.d_kv);
    for (size_t r = 0; r < p.kept.rows; ++r) {
        float* dst = out.row(r);
        const float* src = p.kept.row(r);
        for (size_t i = 0; i < p.kept_channels.size(); ++i) dst[p.kept_channels[i]] = src[i];
    }
    return out;
}

// Supplier of dropped VALUE rows for the hybrid forward: receives the
// assembled features and the stream's true middle values (so an exact test
// double is possible without retaining a separate cache).
using HybridValueFn =
    std::function<Matrix(size_t layer, const Matrix& features, const Matrix& true_middle_v)>;

inline HybridValueFn hybrid_bank_values(const PredictorBank& bank) {
    return [&bank](size_t layer, const Matrix& features, const Matrix&) {
        return predict_dropped(bank.for_layer(layer), features, Component::value);
    };
}

inline HybridValueFn hybrid_oracle_values(size_t local_dim, size_t d_kv) {
    return [local_dim, d_kv](size_t, const Matrix&, const Matrix& true_mid_v) {
        return slice_cols(true_mid_v, local_dim, d_kv);
    };
}

struct HybridReport {
    Matrix logits;                 // [tokens × vocab] from the hybrid stream
    std::vector<double> layer_mse; // attention-output MSE vs the full forward, per layer
    double blended_ratio = 0.0;
};

// Full-sequence forward where every layer attends with pruned+zero-filled
// keys (rotary applied after zero-fill) and echo-reconstructed values; the
// reconstructed outputs propagate through the residual stream.
inline HybridReport hybrid_forward(const Model& model, const std::vector<int>& tokens,
                                   const HybridConfig& hcfg,
                                   const std::vector<std::vector<float>>& scores,
                                   const HybridValueFn& values) {
    const auto& cfg = model.cfg;
    hcfg.validate(cfg.n_layers, cfg.geometry.d_head);
    if (hcfg.value_echo.d_kv != cfg.d_kv())
        throw ConfigError("hybrid_forward: echo d_kv != model kv width");
    if (scores.size() != cfg.n_layers)
        throw ConfigError("hybrid_forward: need one score vector per layer");
    const AttentionGeometry& g = cfg.geometry;
    const EchoConfig& ec = hcfg.value_echo;
    const size_t L = tokens.size();
    const auto pos = position_range(0, L);
    const RowSplit rs = split_rows(L, ec.sink_tokens, ec.window);
    const LayerLayout layout = partition_layers(cfg.n_layers, ec.group_size);

    TraceBatch full_trace = prefill(model, tokens); // fidelity reference

    Matrix x(L, cfg.d_model);
    for (size_t i = 0; i < L; ++i)
        std::memcpy(x.row(i), model.embedding.row(static_cast<size_t>(tokens[i])),
                    cfg.d_model * sizeof(float));

    HybridReport report;
    report.blended_ratio = blended_ratio(hcfg);
    report.layer_mse.resize(cfg.n_layers, 0.0);
    Matrix leader_v; // group leader's value cache from this stream
    for (size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& w = model.layers[li];
        Matrix xn = detail::rmsnorm(x);
        Matrix q = matmul(xn, w.wq);
        Matrix k = matmul(xn, w.wk);
        Matrix v = matmul(xn, w.wv);
        rope_apply(q, g.n_q_heads, g.d_head, pos);

        Matrix k_read = zero_fill(prune_keys(k, scores[li], hcfg.key_keep_ratio));
        rope_apply(k_read, g.n_kv_heads, g.d_head, pos);

        Matrix v_read;
        if (layout.is_leader(li)) {
            leader_v = v;
            v_read = v;
        } else {
            Matrix mid_v = slice_rows(v, rs.sink, rs.sink + rs.middle);
            Matrix feat = concat_cols(slice_rows(leader_v, rs.sink, rs.sink + rs.middle),
                                      slice_cols(mid_v, 0, ec.local_dim));
            Matrix pred = values(li, feat, mid_v);
            Matrix recon_mid = reconstruct_layer(slice_cols(mid_v, 0, ec.local_dim), pred);
            v_read = concat_rows(concat_rows(slice_rows(v, 0, rs.sink), recon_mid),
                                 slice_rows(v, rs.sink + rs.middle, L));
        }

        Matrix attn = causal_attention(q, k_read, v_read, g, 0);
        report.layer_mse[li] = mse(attn, full_trace.layers[li].attn_out);

        Matrix proj = matmul(attn, w.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += proj.data[i];
        Matrix hn = detail::rmsnorm(x);
        Matrix h = matmul(hn, w.w1);
        detail::silu_inplace(h);
        Matrix mlp = matmul(h, w.w2);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp.data[i];
    }
    report.logits = matmul_nt(detail::rmsnorm(x), model.embedding);
    return report;
}

inline HybridReport hybrid_forward(const Model& model, const std::vector<int>& tokens,
                                   const HybridConfig& hcfg,
                                   const std::vector<std::vector<float>>& scores,
                                   const PredictorBank& bank) {
    return hybrid_forward(model, tokens, hcfg, scores, hybrid_bank_values(bank));
}

} // namespace echokv
