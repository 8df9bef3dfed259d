#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "echokv/alloc.hpp"
#include "echokv/matrix.hpp"

namespace echokv {

// Head layout shared by the attention kernels. Query head h reads the
// key/value head h / gqa_group() (grouped-query attention).
struct AttentionGeometry {
    size_t n_q_heads = 0;
    size_t n_kv_heads = 0;
    size_t d_head = 0;

    size_t gqa_group() const { return n_q_heads / n_kv_heads; }
    size_t q_dim() const { return n_q_heads * d_head; }
    size_t kv_dim() const { return n_kv_heads * d_head; }
    double scale() const { return 1.0 / std::sqrt(static_cast<double>(d_head)); }

    void validate() const {
        if (n_q_heads == 0 || n_kv_heads == 0 || d_head == 0)
            throw ConfigError("attention geometry: head counts and d_head must be positive");
        if (n_q_heads % n_kv_heads != 0)
            throw ConfigError("attention geometry: n_q_heads must be a multiple of n_kv_heads");
        if (d_head % 2 != 0)
            throw ConfigError("attention geometry: d_head must be even for rotary pairs");
    }
};

// Rotary position embedding over consecutive channel pairs (2p, 2p+1) of each
// head; angle = position * base^(-2p/d_head). Rotations are orthogonal, so
// applying with negated positions inverts them (used by the backward pass).
// x is [len × n_heads*d_head]; positions[i] is the absolute position of row i.
inline void rope_apply(Matrix& x, size_t n_heads, size_t d_head,
                       const std::vector<long>& positions, double base = 10000.0) {
    require_shape(x.cols == n_heads * d_head, "rope_apply: cols != n_heads*d_head");
    require_shape(x.rows == positions.size(), "rope_apply: rows != positions.size()");
    const size_t half = d_head / 2;
    std::vector<double> inv_freq(half);
    for (size_t p = 0; p < half; ++p)
        inv_freq[p] = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(d_head));
    for (size_t r = 0; r < x.rows; ++r) {
        float* row = x.row(r);
        const double pos = static_cast<double>(positions[r]);
        for (size_t p = 0; p < half; ++p) {
            const double a = pos * inv_freq[p];
            const double c = std::cos(a), s = std::sin(a);
            for (size_t h = 0; h < n_heads; ++h) {
                float* pair = row + h * d_head + 2 * p;
                const double x0 = pair[0], x1 = pair[1];
                pair[0] = static_cast<float>(x0 * c - x1 * s);
                pair[1] = static_cast<float>(x0 * s + x1 * c);
            }
        }
    }
}

// convenience: rows at consecutive absolute positions start..start+len-1
inline std::vector<long> position_range(long start, size_t len) {
    std::vector<long> pos(len);
    for (size_t i = 0; i < len; ++i) pos[i] = start + static_cast<long>(i);
    return pos;
}

namespace detail {

constexpr size_t kKeyChunk = 128; // keys are streamed through a buffer this wide

// One query row against keys[0..limit): streaming softmax over key chunks.
// Auxiliary state is O(d_head + kKeyChunk) regardless of limit.
inline void attention_row(const float* q, const Matrix& k, const Matrix& v, size_t limit,
                          double scale, float* out, size_t d) {
    double m = -std::numeric_limits<double>::infinity();
    double l = 0.0;
    std::vector<double> acc(d, 0.0);
    std::vector<double> s(kKeyChunk);
    for (size_t j0 = 0; j0 < limit; j0 += kKeyChunk) {
        const size_t j1 = std::min(limit, j0 + kKeyChunk);
        double chunk_max = -std::numeric_limits<double>::infinity();
        for (size_t j = j0; j < j1; ++j) {
            const float* krow = k.row(j);
            double dot = 0.0;
            for (size_t c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * krow[c];
            s[j - j0] = dot * scale;
            chunk_max = std::max(chunk_max, s[j - j0]);
        }
        if (chunk_max > m) {
            const double r = (l == 0.0) ? 0.0 : std::exp(m - chunk_max);
            l *= r;
            for (size_t c = 0; c < d; ++c) acc[c] *= r;
            m = chunk_max;
        }
        for (size_t j = j0; j < j1; ++j) {
            const double w = std::exp(s[j - j0] - m);
            l += w;
            const float* vrow = v.row(j);
            for (size_t c = 0; c < d; ++c) acc[c] += w * static_cast<double>(vrow[c]);
        }
    }
    for (size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / l);
}

} // namespace detail

// Causal attention for one head. q is [Lq × d] at absolute positions
// q_start..q_start+Lq-1; k and v are [Lk × d] at positions 0..Lk-1. Query row
// i attends to keys 0..q_start+i. Keys are never materialised as an Lq×Lk
// score matrix; auxiliary memory stays O(d) per row.
inline Matrix causal_attention_head(const Matrix& q, const Matrix& k, const Matrix& v,
                                    size_t q_start, double scale) {
    require_shape(q.cols == k.cols && k.same_shape(v), "causal_attention_head: shape mismatch");
    Matrix out(q.rows, q.cols);
    for (size_t i = 0; i < q.rows; ++i) {
        const size_t limit = std::min(k.rows, q_start + i + 1);
        require_shape(limit > 0, "causal_attention_head: query precedes all keys");
        detail::attention_row(q.row(i), k, v, limit, scale, out.row(i), q.cols);
    }
    return out;
}

// Multi-head causal attention with grouped-query head mapping.
// q: [Lq × n_q*d] (post-rotary), k/v: [Lk × n_kv*d] (k post-rotary).
inline Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AttentionGeometry& g, size_t q_start) {
    require_shape(q.cols == g.q_dim(), "causal_attention: q cols != n_q_heads*d_head");
    require_shape(k.cols == g.kv_dim() && v.cols == g.kv_dim(),
                  "causal_attention: kv cols != n_kv_heads*d_head");
    require_shape(k.rows == v.rows, "causal_attention: k/v length mismatch");
    const size_t d = g.d_head;
    Matrix out(q.rows, q.cols);
    for (size_t h = 0; h < g.n_q_heads; ++h) {
        const size_t kvh = h / g.gqa_group();
        Matrix qh = slice_cols(q, h * d, (h + 1) * d);
        Matrix kh = slice_cols(k, kvh * d, (kvh + 1) * d);
        Matrix vh = slice_cols(v, kvh * d, (kvh + 1) * d);
        Matrix oh = causal_attention_head(qh, kh, vh, q_start, g.scale());
        for (size_t r = 0; r < out.rows; ++r)
            std::memcpy(out.row(r) + h * d, oh.row(r), d * sizeof(float));
    }
    return out;
}

// Gradients of causal attention w.r.t. keys and values for one head, given the
// upstream gradient d_out on the outputs. Queries are treated as constants.
// Per query row i with p = softmax(s_i), u = d_out row i:
//   dV_j += p_ij u_i
//   ds_ij = p_ij (u_i·v_j − d_i),  d_i = Σ_l p_il (u_i·v_l)
//   dK_j += ds_ij * scale * q_i
// Row buffers are O(Lk); the Lq×Lk weight matrix is never materialised.
inline void attention_grad_kv_head(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const Matrix& d_out, size_t q_start, double scale,
                                   Matrix& d_k, Matrix& d_v, AllocTracker* tracker = nullptr) {
    require_shape(q.same_shape(d_out), "attention_grad_kv_head: q/d_out shape mismatch");
    require_shape(k.same_shape(v), "attention_grad_kv_head: k/v shape mismatch");
    const size_t d = q.cols;
    ScopedCharge charge(tracker, (2 * k.size() + 2 * k.rows) * sizeof(double));
    std::vector<double> dk_acc(k.size(), 0.0), dv_acc(v.size(), 0.0);
    std::vector<double> p(k.rows), uv(k.rows);
    for (size_t i = 0; i < q.rows; ++i) {
        const size_t limit = std::min(k.rows, q_start + i + 1);
        const float* qi = q.row(i);
        const float* ui = d_out.row(i);
        double smax = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < limit; ++j) {
            const float* kj = k.row(j);
            double dot = 0.0;
            for (size_t c = 0; c < d; ++c) dot += static_cast<double>(qi[c]) * kj[c];
            p[j] = dot * scale;
            smax = std::max(smax, p[j]);
        }
        double l = 0.0;
        double di = 0.0;
        for (size_t j = 0; j < limit; ++j) {
            p[j] = std::exp(p[j] - smax);
            l += p[j];
            const float* vj = v.row(j);
            double dot = 0.0;
            for (size_t c = 0; c < d; ++c) dot += static_cast<double>(ui[c]) * vj[c];
            uv[j] = dot;
            di += p[j] * dot;
        }
        di /= l;
        for (size_t j = 0; j < limit; ++j) {
            const double pij = p[j] / l;
            double* dvj = dv_acc.data() + j * d;
            for (size_t c = 0; c < d; ++c) dvj[c] += pij * static_cast<double>(ui[c]);
            const double coef = pij * (uv[j] - di) * scale;
            double* dkj = dk_acc.data() + j * d;
            for (size_t c = 0; c < d; ++c) dkj[c] += coef * static_cast<double>(qi[c]);
        }
    }
    d_k = Matrix(k.rows, k.cols);
    d_v = Matrix(v.rows, v.cols);
    for (size_t i = 0; i < d_k.size(); ++i) d_k.data[i] = static_cast<float>(dk_acc[i]);
    for (size_t i = 0; i < d_v.size(); ++i) d_v.data[i] = static_cast<float>(dv_acc[i]);
}

// Multi-head variant; gradients for a shared key/value head sum over the
// query heads of its group (ascending head order, so results are bit-stable).
inline void attention_grad_kv(const Matrix& q, const Matrix& k, const Matrix& v,
                              const Matrix& d_out, const AttentionGeometry& g, size_t q_start,
                              Matrix& d_k, Matrix& d_v, AllocTracker* tracker = nullptr) {
    require_shape(q.cols == g.q_dim() && d_out.same_shape(q), "attention_grad_kv: q shape");
    require_shape(k.cols == g.kv_dim() && v.same_shape(k), "attention_grad_kv: kv shape");
    const size_t d = g.d_head;
    d_k = Matrix(k.rows, k.cols);
    d_v = Matrix(v.rows, v.cols);
    for (size_t h = 0; h < g.n_q_heads; ++h) {
        const size_t kvh = h / g.gqa_group();
        Matrix qh = slice_cols(q, h * d, (h + 1) * d);
        Matrix kh = slice_cols(k, kvh * d, (kvh + 1) * d);
        Matrix vh = slice_cols(v, kvh * d, (kvh + 1) * d);
        Matrix uh = slice_cols(d_out, h * d, (h + 1) * d);
        ScopedCharge head_charge(tracker, (qh.bytes() + kh.bytes() + vh.bytes() + uh.bytes()));
        Matrix dkh, dvh;
        attention_grad_kv_head(qh, kh, vh, uh, q_start, g.scale(), dkh, dvh, tracker);
        for (size_t r = 0; r < k.rows; ++r) {
            float* dst_k = d_k.row(r) + kvh * d;
            float* dst_v = d_v.row(r) + kvh * d;
            for (size_t c = 0; c < d; ++c) {
                dst_k[c] += dkh.at(r, c);
                dst_v[c] += dvh.at(r, c);
            }
        }
    }
}

} // namespace echokv
