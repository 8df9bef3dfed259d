#pragma once

#include <cmath>
#include <vector>

#include "echokv/alloc.hpp"
#include "echokv/attention.hpp"
#include "echokv/matrix.hpp"

namespace echokv {

// mean squared difference, double accumulator
inline double mse(const Matrix& a, const Matrix& b) {
    require_shape(a.same_shape(b), "mse: shape mismatch");
    if (a.size() == 0) return 0.0;
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

namespace detail {

// Row i of a causal attention matrix: softmax of q·k^T*scale over keys
// 0..limit, zeros beyond. Written into arow (length Lk).
inline void softmax_row(const float* q, const Matrix& k, size_t limit, double scale,
                        float* arow, size_t d) {
    double smax = -std::numeric_limits<double>::infinity();
    std::vector<double> s(limit);
    for (size_t j = 0; j < limit; ++j) {
        const float* kj = k.row(j);
        double dot = 0.0;
        for (size_t c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * kj[c];
        s[j] = dot * scale;
        smax = std::max(smax, s[j]);
    }
    double l = 0.0;
    for (size_t j = 0; j < limit; ++j) {
        s[j] = std::exp(s[j] - smax);
        l += s[j];
    }
    for (size_t j = 0; j < limit; ++j) arow[j] = static_cast<float>(s[j] / l);
    for (size_t j = limit; j < k.rows; ++j) arow[j] = 0.0f;
}

// [Lq × Lk] causal attention weights for one query head
inline Matrix attention_weights(const Matrix& qh, const Matrix& kh, size_t q_start,
                                double scale) {
    Matrix a(qh.rows, kh.rows);
    for (size_t i = 0; i < qh.rows; ++i) {
        const size_t limit = std::min(kh.rows, q_start + i + 1);
        softmax_row(qh.row(i), kh, limit, scale, a.row(i), qh.cols);
    }
    return a;
}

constexpr double kKlFloor = 1e-9; // probability floor inside the logs

// Σ_j A_ij log(A_ij/Ã_ij) over the causal prefix of row i
inline double kl_row(const float* arow, const float* brow, size_t limit) {
    double acc = 0.0;
    for (size_t j = 0; j < limit; ++j) {
        const double p = arow[j];
        if (p <= 0.0) continue;
        const double lp = std::log(std::max(p, kKlFloor));
        const double lq = std::log(std::max(static_cast<double>(brow[j]), kKlFloor));
        acc += p * (lp - lq);
    }
    return acc;
}

} // namespace detail

// Row-wise KL divergence between the attention maps induced by two key sets
// under the same queries: mean over heads of (1/Lq) Σ_i KL(A_i ‖ Ã_i), where
// A uses k_teacher and Ã uses k_student. Deliberately materialises the full
// Lq×Lk weight matrices per head — auxiliary memory grows quadratically with
// sequence length, unlike the streaming output-difference objective.
inline double qk_kl_loss(const Matrix& q, const Matrix& k_teacher, const Matrix& k_student,
                         const AttentionGeometry& g, size_t q_start,
                         AllocTracker* tracker = nullptr) {
    require_shape(q.cols == g.q_dim(), "qk_kl_loss: q cols != n_q_heads*d_head");
    require_shape(k_teacher.same_shape(k_student), "qk_kl_loss: key shapes differ");
    require_shape(k_teacher.cols == g.kv_dim(), "qk_kl_loss: kv cols != n_kv_heads*d_head");
    const size_t d = g.d_head;
    double loss = 0.0;
    for (size_t h = 0; h < g.n_q_heads; ++h) {
        const size_t kvh = h / g.gqa_group();
        Matrix qh = slice_cols(q, h * d, (h + 1) * d);
        Matrix kt = slice_cols(k_teacher, kvh * d, (kvh + 1) * d);
        Matrix ks = slice_cols(k_student, kvh * d, (kvh + 1) * d);
        ScopedCharge charge(tracker, 2 * q.rows * k_teacher.rows * sizeof(float));
        Matrix a = detail::attention_weights(qh, kt, q_start, g.scale());
        Matrix b = detail::attention_weights(qh, ks, q_start, g.scale());
        double head_acc = 0.0;
        for (size_t i = 0; i < q.rows; ++i) {
            const size_t limit = std::min(k_teacher.rows, q_start + i + 1);
            head_acc += detail::kl_row(a.row(i), b.row(i), limit);
        }
        loss += head_acc / static_cast<double>(q.rows);
    }
    return loss / static_cast<double>(g.n_q_heads);
}

struct QkKlResult {
    double loss = 0.0;
    Matrix d_k_student; // gradient w.r.t. the student keys (post-rotary)
};

// Forward and backward of qk_kl_loss w.r.t. the student keys. The backward
// pass needs every head's teacher and student weight matrices, so both stacks
// stay resident until all gradients are accumulated; peak auxiliary memory is
// 2 · n_q_heads · Lq · Lk floats.
inline QkKlResult qkkl_forward_backward(const Matrix& q, const Matrix& k_teacher,
                                        const Matrix& k_student, const AttentionGeometry& g,
                                        size_t q_start, AllocTracker* tracker = nullptr) {
    require_shape(q.cols == g.q_dim(), "qkkl_forward_backward: q cols");
    require_shape(k_teacher.same_shape(k_student), "qkkl_forward_backward: key shapes differ");
    const size_t d = g.d_head;
    const size_t lq = q.rows, lk = k_teacher.rows;
    const double scale = g.scale();

    std::vector<Matrix> teacher_stack(g.n_q_heads), student_stack(g.n_q_heads);
    ScopedCharge charge(tracker, 2 * g.n_q_heads * lq * lk * sizeof(float));
    for (size_t h = 0; h < g.n_q_heads; ++h) {
        const size_t kvh = h / g.gqa_group();
        Matrix qh = slice_cols(q, h * d, (h + 1) * d);
        Matrix kt = slice_cols(k_teacher, kvh * d, (kvh + 1) * d);
        Matrix ks = slice_cols(k_student, kvh * d, (kvh + 1) * d);
        teacher_stack[h] = detail::attention_weights(qh, kt, q_start, scale);
        student_stack[h] = detail::attention_weights(qh, ks, q_start, scale);
    }

    QkKlResult res;
    res.d_k_student = Matrix(lk, k_student.cols);
    const double norm = 1.0 / (static_cast<double>(lq) * static_cast<double>(g.n_q_heads));
    std::vector<double> dk_acc(lk * k_student.cols, 0.0);
    std::vector<double> ds(lk);
    for (size_t h = 0; h < g.n_q_heads; ++h) {
        const size_t kvh = h / g.gqa_group();
        Matrix qh = slice_cols(q, h * d, (h + 1) * d);
        const Matrix& a = teacher_stack[h];
        const Matrix& b = student_stack[h];
        double head_acc = 0.0;
        for (size_t i = 0; i < lq; ++i) {
            const size_t limit = std::min(lk, q_start + i + 1);
            head_acc += detail::kl_row(a.row(i), b.row(i), limit);
            // dL/dÃ_ij = -norm · A_ij / Ã_ij; softmax backward gives
            // ds̃_ij = Ã_ij (g_ij − Σ_l Ã_il g_il)
            const float* ai = a.row(i);
            const float* bi = b.row(i);
            double gdot = 0.0;
            for (size_t j = 0; j < limit; ++j) {
                const double gij =
                    -norm * static_cast<double>(ai[j]) /
                    std::max(static_cast<double>(bi[j]), detail::kKlFloor);
                ds[j] = gij;
                gdot += static_cast<double>(bi[j]) * gij;
            }
            const float* qi = qh.row(i);
            for (size_t j = 0; j < limit; ++j) {
                const double dsij = static_cast<double>(bi[j]) * (ds[j] - gdot);
                const double coef = dsij * scale;
                double* dkj = dk_acc.data() + j * k_student.cols + kvh * d;
                for (size_t c = 0; c < d; ++c) dkj[c] += coef * static_cast<double>(qi[c]);
            }
        }
        res.loss += head_acc / static_cast<double>(lq);
    }
    res.loss /= static_cast<double>(g.n_q_heads);
    for (size_t i = 0; i < dk_acc.size(); ++i)
        res.d_k_student.data[i] = static_cast<float>(dk_acc[i]);
    return res;
}

} // namespace echokv
