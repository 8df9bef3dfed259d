#pragma once

#include <chrono>
#include <cstdint>
#include <utility>
#include <vector>

#include "echokv/alloc.hpp"
#include "echokv/echo.hpp"
#include "echokv/losses.hpp"
#include "echokv/model.hpp"
#include "echokv/optim.hpp"
#include "echokv/rng.hpp"

namespace echokv {

enum class Stage2Loss { o_mse, qk_kl };

struct TrainConfig {
    double lr = 5e-4;
    size_t steps_stage1 = 600;
    size_t steps_stage2 = 1000;
    size_t batch = 1;
    uint64_t seed = 42;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    Stage2Loss loss_stage2 = Stage2Loss::o_mse;
    size_t max_seq = 512; // sequences truncated for desk-scale training
    FeatureMode features = FeatureMode::combined;
    // Off (default): stage 2 compares attention per layer with the true
    // residual stream (teacher forcing). On: reconstructed attention outputs
    // propagate to later layers; gradients stay layer-local either way.
    bool compound_stream = false;

    AdamWConfig adamw() const { return AdamWConfig{lr, beta1, beta2, 1e-8, weight_decay}; }

    void validate() const {
        if (lr <= 0.0) throw ConfigError("train: lr must be positive");
        if (batch != 1) throw ConfigError("train: only batch size 1 is supported");
    }
};

struct StepRecord {
    size_t step = 0;
    int stage = 1;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    double wall_ms = 0.0;          // real elapsed time of the run
    uint64_t final_checksum = 0;   // bank weights after the run
    size_t peak_aux_bytes = 0;     // accounted auxiliary allocations of the loss path
};

// Everything a predictor step needs from one frozen forward pass of one
// sequence: the evicted store, assembled features, true dropped-row targets,
// and the teacher's queries/attention outputs. Indexed per compressed layer
// in ascending-layer order.
struct SeqInstance {
    std::vector<int> tokens;
    EchoStore store;
    std::vector<Matrix> feat_k, feat_v;     // [middle × (d_kv+D_local)]
    std::vector<Matrix> target_k, target_v; // [middle × (d_kv−D_local)]
    std::vector<Matrix> q;                  // [L × n_q*d], post-rotary
    std::vector<Matrix> teacher_out;        // [L × n_q*d]
};

struct TrainDataset {
    EchoConfig echo;
    FeatureMode features = FeatureMode::combined;
    std::vector<SeqInstance> train;
    std::vector<SeqInstance> held; // last 10% of corpus lines (at least one)
};

inline SeqInstance make_instance(const Model& model, const std::vector<int>& tokens,
                                 const EchoConfig& ec, FeatureMode mode) {
    SeqInstance inst;
    inst.tokens = tokens;
    TraceBatch trace = prefill(model, tokens);
    std::vector<LayerKV> kvs;
    kvs.reserve(trace.layers.size());
    for (const auto& lt : trace.layers) kvs.push_back(lt.kv);
    inst.store = evict(kvs, ec);

    const RowSplit rs = split_rows(tokens.size(), ec.sink_tokens, ec.window);
    for (size_t layer : inst.store.layout.compressed()) {
        const size_t g = inst.store.layout.group_of(layer);
        const size_t m = inst.store.layout.member_of(layer);
        inst.feat_k.push_back(assemble_features(inst.store, g, m, rs.sink, rs.sink + rs.middle,
                                                Component::key, mode));
        inst.feat_v.push_back(assemble_features(inst.store, g, m, rs.sink, rs.sink + rs.middle,
                                                Component::value, mode));
        Matrix mid_k = slice_rows(trace.layers[layer].kv.k_pre_rope, rs.sink, rs.sink + rs.middle);
        Matrix mid_v = slice_rows(trace.layers[layer].kv.v, rs.sink, rs.sink + rs.middle);
        inst.target_k.push_back(slice_cols(mid_k, ec.local_dim, ec.d_kv));
        inst.target_v.push_back(slice_cols(mid_v, ec.local_dim, ec.d_kv));
        inst.q.push_back(trace.layers[layer].q_post_rope);
        inst.teacher_out.push_back(trace.layers[layer].attn_out);
    }
    return inst;
}

inline TrainDataset build_dataset(const Model& model, const std::vector<std::vector<int>>& corpus,
                                  const EchoConfig& ec, const TrainConfig& cfg) {
    ec.validate(model.cfg.n_layers, model.cfg.geometry.d_head);
    TrainDataset ds;
    ds.echo = ec;
    ds.features = cfg.features;
    const size_t n_held = std::max<size_t>(1, corpus.size() / 10);
    if (corpus.size() <= n_held)
        throw InputError("build_dataset: corpus too small to split off a held-out set");
    for (size_t i = 0; i < corpus.size(); ++i) {
        std::vector<int> tokens = corpus[i];
        if (cfg.max_seq > 0 && tokens.size() > cfg.max_seq) tokens.resize(cfg.max_seq);
        SeqInstance inst = make_instance(model, tokens, ec, cfg.features);
        (i < corpus.size() - n_held ? ds.train : ds.held).push_back(std::move(inst));
    }
    return ds;
}

namespace detail {

// flat AdamW over every predictor weight, fixed order: ascending compressed
// layer, w_key then w_value
class BankOptimizer {
public:
    BankOptimizer(const PredictorBank& bank, const AdamWConfig& cfg)
        : cfg_(cfg), m_(bank.param_count(), 0.0), v_(bank.param_count(), 0.0) {}

    void step(PredictorBank& bank, const std::vector<Matrix>& grad_k,
              const std::vector<Matrix>& grad_v, double lr) {
        ++t_;
        size_t off = 0;
        for (size_t i = 0; i < bank.predictors.size(); ++i) {
            Predictor& p = bank.predictors[i];
            adamw_step(p.w_key.data.data(), grad_k[i].data.data(), m_.data() + off,
                       v_.data() + off, p.w_key.size(), t_, lr, cfg_);
            off += p.w_key.size();
            adamw_step(p.w_value.data.data(), grad_v[i].data.data(), m_.data() + off,
                       v_.data() + off, p.w_value.size(), t_, lr, cfg_);
            off += p.w_value.size();
        }
    }

private:
    AdamWConfig cfg_;
    std::vector<double> m_, v_;
    size_t t_ = 0;
};

inline double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

inline void check_finite_loss(double loss, const char* stage) {
    if (!std::isfinite(loss))
        throw TrainingError(std::string(stage) + ": loss is not finite — aborting");
}

// K̃ or Ṽ for one compressed layer: [sink ; [local ; features·Wᵀ] ; window]
inline Matrix reconstruct_full_rows(const SeqInstance& inst, size_t comp_ix, size_t layer,
                                    const PredictorBank& bank, Component which) {
    const CompressedLayer& c = inst.store.comp_layers[layer];
    const Matrix& feats = which == Component::key ? inst.feat_k[comp_ix] : inst.feat_v[comp_ix];
    Matrix pred = predict_dropped(bank.for_layer(layer), feats, which);
    const Matrix& local = which == Component::key ? c.local_k : c.local_v;
    const Matrix& sink = which == Component::key ? c.sink_k : c.sink_v;
    const Matrix& window = which == Component::key ? c.window_k : c.window_v;
    return concat_rows(concat_rows(sink, reconstruct_layer(local, pred)), window);
}

// true K for one compressed layer, rebuilt from stored pieces + targets
inline Matrix true_full_rows(const SeqInstance& inst, size_t comp_ix, size_t layer,
                             Component which) {
    const CompressedLayer& c = inst.store.comp_layers[layer];
    const Matrix& local = which == Component::key ? c.local_k : c.local_v;
    const Matrix& target = which == Component::key ? inst.target_k[comp_ix]
                                                   : inst.target_v[comp_ix];
    const Matrix& sink = which == Component::key ? c.sink_k : c.sink_v;
    const Matrix& window = which == Component::key ? c.window_k : c.window_v;
    return concat_rows(concat_rows(sink, reconstruct_layer(local, target)), window);
}

// Stage-1 reconstruction loss and gradient for one compressed layer and one
// component. Loss contribution = mse(pred, target)/(2·n_comp); if grad is
// non-null it receives dW = dPredᵀ · F.
inline double kv_mse_layer_step(const SeqInstance& inst, size_t comp_ix,
                                const PredictorBank& bank, Component which, Matrix* grad) {
    const size_t n_comp = bank.predictors.size();
    const Predictor& p = bank.predictors[comp_ix];
    const Matrix& feats = which == Component::key ? inst.feat_k[comp_ix] : inst.feat_v[comp_ix];
    const Matrix& target =
        which == Component::key ? inst.target_k[comp_ix] : inst.target_v[comp_ix];
    Matrix pred = predict_dropped(p, feats, which);
    const double loss = mse(pred, target) / (2.0 * static_cast<double>(n_comp));
    if (grad) {
        // d(loss)/d(pred) = 2(pred−target)/numel · 1/(2·n_comp)
        Matrix dpred(pred.rows, pred.cols);
        const double scale =
            pred.size() == 0 ? 0.0 : 1.0 / (static_cast<double>(pred.size()) * n_comp);
        for (size_t i = 0; i < pred.size(); ++i)
            dpred.data[i] = static_cast<float>((pred.data[i] - target.data[i]) * scale);
        *grad = matmul_tn(dpred, feats);
    }
    return loss;
}

} // namespace detail

// Stage 1: reconstruction loss. Per step: one sampled sequence, loss = mean
// over compressed layers of (key MSE + value MSE)/2 on the dropped middle
// rows, one joint AdamW step over all predictors. The backbone is frozen.
inline std::pair<PredictorBank, TrainReport> stage1_train(const Model& model,
                                                          const TrainDataset& ds,
                                                          PredictorBank bank,
                                                          const TrainConfig& cfg) {
    cfg.validate();
    const double t0 = detail::now_ms();
    TrainReport report;
    detail::BankOptimizer opt(bank, cfg.adamw());
    Rng sampler(cfg.seed);
    const size_t n_comp = bank.predictors.size();

    for (size_t step = 0; step < cfg.steps_stage1; ++step) {
        const SeqInstance& inst = ds.train[sampler.index(ds.train.size())];
        std::vector<Matrix> grad_k(n_comp), grad_v(n_comp);
        double loss = 0.0;
        for (size_t ci = 0; ci < n_comp; ++ci) {
            loss += detail::kv_mse_layer_step(inst, ci, bank, Component::key, &grad_k[ci]);
            loss += detail::kv_mse_layer_step(inst, ci, bank, Component::value, &grad_v[ci]);
        }
        detail::check_finite_loss(loss, "stage1");
        const double lr = cosine_lr(cfg.lr, step, cfg.steps_stage1);
        report.steps.push_back({step, 1, loss, lr});
        opt.step(bank, grad_k, grad_v, lr);
    }
    report.wall_ms = detail::now_ms() - t0;
    report.final_checksum = bank.weight_checksum();
    return {std::move(bank), std::move(report)};
}

namespace detail {

// Output-difference loss and gradients for one layer of one instance.
// Forward: K̃,Ṽ via the bank, rotary on K̃, attention against the teacher's
// queries; loss = ‖õ − o‖² (mean). Backward walks attention → inverse rotary
// → the dropped middle rows → dW = dPredᵀ·F.
inline double o_mse_layer_step(const SeqInstance& inst, size_t comp_ix, size_t layer,
                               const PredictorBank& bank, const AttentionGeometry& g,
                               double layer_weight, Matrix* grad_k, Matrix* grad_v,
                               AllocTracker* tracker) {
    const size_t L = inst.tokens.size();
    const auto pos = position_range(0, L);

    Matrix k_recon = reconstruct_full_rows(inst, comp_ix, layer, bank, Component::key);
    Matrix v_recon = reconstruct_full_rows(inst, comp_ix, layer, bank, Component::value);
    ScopedCharge c_recon(tracker, k_recon.bytes() + v_recon.bytes());
    rope_apply(k_recon, g.n_kv_heads, g.d_head, pos);

    Matrix out = causal_attention(inst.q[comp_ix], k_recon, v_recon, g, 0);
    ScopedCharge c_out(tracker, out.bytes());
    const Matrix& teacher = inst.teacher_out[comp_ix];
    const double loss = mse(out, teacher);
    if (!grad_k) return loss;

    Matrix d_out(out.rows, out.cols);
    ScopedCharge c_dout(tracker, d_out.bytes());
    const double scale = 2.0 * layer_weight / static_cast<double>(out.size());
    for (size_t i = 0; i < out.size(); ++i)
        d_out.data[i] = static_cast<float>((out.data[i] - teacher.data[i]) * scale);

    Matrix d_k, d_v;
    attention_grad_kv(inst.q[comp_ix], k_recon, v_recon, d_out, g, 0, d_k, d_v, tracker);
    ScopedCharge c_dkv(tracker, d_k.bytes() + d_v.bytes());
    // undo the rotation: it is orthogonal, so the adjoint is rotation by −pos
    std::vector<long> neg(L);
    for (size_t i = 0; i < L; ++i) neg[i] = -pos[i];
    rope_apply(d_k, g.n_kv_heads, g.d_head, neg);

    const CompressedLayer& c = inst.store.comp_layers[layer];
    const size_t sink = c.sink_k.rows, middle = c.local_k.rows;
    const size_t d0 = inst.store.cfg.local_dim, d1 = inst.store.cfg.d_kv;
    Matrix dpred_k = slice_cols(slice_rows(d_k, sink, sink + middle), d0, d1);
    Matrix dpred_v = slice_cols(slice_rows(d_v, sink, sink + middle), d0, d1);
    Matrix gk = matmul_tn(dpred_k, inst.feat_k[comp_ix]);
    Matrix gv = matmul_tn(dpred_v, inst.feat_v[comp_ix]);
    for (size_t i = 0; i < gk.size(); ++i) grad_k->data[i] += gk.data[i];
    for (size_t i = 0; i < gv.size(); ++i) grad_v->data[i] += gv.data[i];
    return loss;
}

// Attention-map KL for one layer: teacher weights from true keys, student
// from reconstructed keys. Only the key predictor receives gradients.
inline double qkkl_layer_step(const SeqInstance& inst, size_t comp_ix, size_t layer,
                              const PredictorBank& bank, const AttentionGeometry& g,
                              double layer_weight, Matrix* grad_k, AllocTracker* tracker) {
    const size_t L = inst.tokens.size();
    const auto pos = position_range(0, L);

    Matrix k_true = true_full_rows(inst, comp_ix, layer, Component::key);
    Matrix k_recon = reconstruct_full_rows(inst, comp_ix, layer, bank, Component::key);
    ScopedCharge c_keys(tracker, k_true.bytes() + k_recon.bytes());
    rope_apply(k_true, g.n_kv_heads, g.d_head, pos);
    rope_apply(k_recon, g.n_kv_heads, g.d_head, pos);

    if (!grad_k) return qk_kl_loss(inst.q[comp_ix], k_true, k_recon, g, 0, tracker);

    QkKlResult res = qkkl_forward_backward(inst.q[comp_ix], k_true, k_recon, g, 0, tracker);
    ScopedCharge c_dk(tracker, res.d_k_student.bytes());
    for (float& x : res.d_k_student.data) x = static_cast<float>(x * layer_weight);
    std::vector<long> neg(L);
    for (size_t i = 0; i < L; ++i) neg[i] = -pos[i];
    rope_apply(res.d_k_student, g.n_kv_heads, g.d_head, neg);

    const CompressedLayer& c = inst.store.comp_layers[layer];
    const size_t sink = c.sink_k.rows, middle = c.local_k.rows;
    const size_t d0 = inst.store.cfg.local_dim, d1 = inst.store.cfg.d_kv;
    Matrix dpred = slice_cols(slice_rows(res.d_k_student, sink, sink + middle), d0, d1);
    Matrix gk = matmul_tn(dpred, inst.feat_k[comp_ix]);
    for (size_t i = 0; i < gk.size(); ++i) grad_k->data[i] += gk.data[i];
    return res.loss;
}

} // namespace detail

// Stage 2 with the streaming output-difference objective. Teacher-forced by
// default; see TrainConfig::compound_stream. The L×L weight matrix is never
// materialised on this path.
inline std::pair<PredictorBank, TrainReport> stage2_train(const Model& model,
                                                          const TrainDataset& ds,
                                                          PredictorBank bank,
                                                          const TrainConfig& cfg);

// Evaluates the mean output-difference loss of a drop source over instances
// (teacher-forced, no gradients).
inline double eval_o_mse(const Model& model, const std::vector<SeqInstance>& instances,
                         const DropSource& source) {
    const AttentionGeometry& g = model.cfg.geometry;
    double total = 0.0;
    size_t count = 0;
    for (const auto& inst : instances) {
        const auto comp = inst.store.layout.compressed();
        const auto pos = position_range(0, inst.tokens.size());
        for (size_t ci = 0; ci < comp.size(); ++ci) {
            LayerKV view = materialize_layer(inst.store, comp[ci], source);
            rope_apply(view.k_pre_rope, g.n_kv_heads, g.d_head, pos);
            Matrix out = causal_attention(inst.q[ci], view.k_pre_rope, view.v, g, 0);
            total += mse(out, inst.teacher_out[ci]);
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

inline double eval_o_mse(const Model& model, const std::vector<SeqInstance>& instances,
                         const PredictorBank& bank,
                         FeatureMode mode = FeatureMode::combined) {
    BankSource src(bank, mode);
    return eval_o_mse(model, instances, src);
}

namespace detail {

// One compound-stream stage-2 step: rerun the forward pass with reconstructed
// attention outputs feeding later layers. Teacher targets stay the full
// model's outputs; gradients remain layer-local.
inline double compound_step(const Model& model, const SeqInstance& inst,
                            const PredictorBank& bank, const EchoConfig& ec, FeatureMode mode,
                            std::vector<Matrix>* grad_k, std::vector<Matrix>* grad_v) {
    const auto& cfg = model.cfg;
    const AttentionGeometry& g = cfg.geometry;
    const size_t L = inst.tokens.size();
    const auto pos = position_range(0, L);
    const RowSplit rs = split_rows(L, ec.sink_tokens, ec.window);
    const LayerLayout layout = partition_layers(cfg.n_layers, ec.group_size);

    Matrix x(L, cfg.d_model);
    for (size_t i = 0; i < L; ++i)
        std::memcpy(x.row(i), model.embedding.row(static_cast<size_t>(inst.tokens[i])),
                    cfg.d_model * sizeof(float));

    Matrix leader_k, leader_v; // current group leader's compound-stream cache
    double loss = 0.0;
    size_t comp_seen = 0;
    const size_t n_comp = layout.compressed().size();
    for (size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& w = model.layers[li];
        Matrix xn = rmsnorm(x);
        Matrix q = matmul(xn, w.wq);
        Matrix k = matmul(xn, w.wk);
        Matrix v = matmul(xn, w.wv);
        rope_apply(q, g.n_q_heads, g.d_head, pos);

        Matrix attn;
        if (layout.is_leader(li)) {
            leader_k = k;
            leader_v = v;
            Matrix k_rot = k;
            rope_apply(k_rot, g.n_kv_heads, g.d_head, pos);
            attn = causal_attention(q, k_rot, v, g, 0);
        } else {
            // features from the compound stream's own leader cache and local slice
            Matrix mid_k = slice_rows(k, rs.sink, rs.sink + rs.middle);
            Matrix mid_v = slice_rows(v, rs.sink, rs.sink + rs.middle);
            Matrix feat_k = concat_cols(slice_rows(leader_k, rs.sink, rs.sink + rs.middle),
                                        slice_cols(mid_k, 0, ec.local_dim));
            Matrix feat_v = concat_cols(slice_rows(leader_v, rs.sink, rs.sink + rs.middle),
                                        slice_cols(mid_v, 0, ec.local_dim));
            if (mode == FeatureMode::global_only)
                for (size_t r = 0; r < feat_k.rows; ++r) {
                    std::memset(feat_k.row(r) + ec.d_kv, 0, ec.local_dim * sizeof(float));
                    std::memset(feat_v.row(r) + ec.d_kv, 0, ec.local_dim * sizeof(float));
                }
            if (mode == FeatureMode::local_only)
                for (size_t r = 0; r < feat_k.rows; ++r) {
                    std::memset(feat_k.row(r), 0, ec.d_kv * sizeof(float));
                    std::memset(feat_v.row(r), 0, ec.d_kv * sizeof(float));
                }
            const Predictor& p = bank.for_layer(li);
            Matrix pred_k = predict_dropped(p, feat_k, Component::key);
            Matrix pred_v = predict_dropped(p, feat_v, Component::value);
            Matrix recon_mid_k =
                reconstruct_layer(slice_cols(mid_k, 0, ec.local_dim), pred_k);
            Matrix recon_mid_v =
                reconstruct_layer(slice_cols(mid_v, 0, ec.local_dim), pred_v);
            Matrix k_recon = concat_rows(
                concat_rows(slice_rows(k, 0, rs.sink), recon_mid_k),
                slice_rows(k, rs.sink + rs.middle, L));
            Matrix v_recon = concat_rows(
                concat_rows(slice_rows(v, 0, rs.sink), recon_mid_v),
                slice_rows(v, rs.sink + rs.middle, L));
            rope_apply(k_recon, g.n_kv_heads, g.d_head, pos);
            attn = causal_attention(q, k_recon, v_recon, g, 0);

            const Matrix& teacher = inst.teacher_out[comp_seen];
            loss += mse(attn, teacher) / static_cast<double>(n_comp);
            if (grad_k) {
                Matrix d_out(attn.rows, attn.cols);
                const double scale =
                    2.0 / (static_cast<double>(attn.size()) * static_cast<double>(n_comp));
                for (size_t i = 0; i < attn.size(); ++i)
                    d_out.data[i] =
                        static_cast<float>((attn.data[i] - teacher.data[i]) * scale);
                Matrix d_k, d_v;
                attention_grad_kv(q, k_recon, v_recon, d_out, g, 0, d_k, d_v);
                std::vector<long> neg(L);
                for (size_t i = 0; i < L; ++i) neg[i] = -pos[i];
                rope_apply(d_k, g.n_kv_heads, g.d_head, neg);
                Matrix dpk = slice_cols(slice_rows(d_k, rs.sink, rs.sink + rs.middle),
                                        ec.local_dim, ec.d_kv);
                Matrix dpv = slice_cols(slice_rows(d_v, rs.sink, rs.sink + rs.middle),
                                        ec.local_dim, ec.d_kv);
                Matrix gk = matmul_tn(dpk, feat_k);
                Matrix gv = matmul_tn(dpv, feat_v);
                for (size_t i = 0; i < gk.size(); ++i)
                    (*grad_k)[comp_seen].data[i] += gk.data[i];
                for (size_t i = 0; i < gv.size(); ++i)
                    (*grad_v)[comp_seen].data[i] += gv.data[i];
            }
            ++comp_seen;
        }

        Matrix proj = matmul(attn, w.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += proj.data[i];
        Matrix hn = rmsnorm(x);
        Matrix h = matmul(hn, w.w1);
        silu_inplace(h);
        Matrix mlp = matmul(h, w.w2);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp.data[i];
    }
    return loss;
}

} // namespace detail

inline std::pair<PredictorBank, TrainReport> stage2_train(const Model& model,
                                                          const TrainDataset& ds,
                                                          PredictorBank bank,
                                                          const TrainConfig& cfg) {
    cfg.validate();
    const double t0 = detail::now_ms();
    TrainReport report;
    AllocTracker tracker;
    detail::BankOptimizer opt(bank, cfg.adamw());
    Rng sampler(cfg.seed);
    const size_t n_comp = bank.predictors.size();
    const AttentionGeometry& g = model.cfg.geometry;

    for (size_t step = 0; step < cfg.steps_stage2; ++step) {
        const SeqInstance& inst = ds.train[sampler.index(ds.train.size())];
        std::vector<Matrix> grad_k(n_comp), grad_v(n_comp);
        for (size_t ci = 0; ci < n_comp; ++ci) {
            grad_k[ci] = Matrix(bank.predictors[ci].w_key.rows, bank.predictors[ci].w_key.cols);
            grad_v[ci] = grad_k[ci];
        }
        double loss = 0.0;
        if (cfg.compound_stream) {
            loss = detail::compound_step(model, inst, bank, ds.echo, ds.features, &grad_k,
                                         &grad_v);
        } else {
            const auto comp = inst.store.layout.compressed();
            for (size_t ci = 0; ci < n_comp; ++ci)
                loss += detail::o_mse_layer_step(inst, ci, comp[ci], bank, g,
                                                 1.0 / static_cast<double>(n_comp),
                                                 &grad_k[ci], &grad_v[ci], &tracker) /
                        static_cast<double>(n_comp);
        }
        detail::check_finite_loss(loss, "stage2");
        const double lr = cosine_lr(cfg.lr, step, cfg.steps_stage2);
        report.steps.push_back({step, 2, loss, lr});
        opt.step(bank, grad_k, grad_v, lr);
    }
    report.wall_ms = detail::now_ms() - t0;
    report.final_checksum = bank.weight_checksum();
    report.peak_aux_bytes = tracker.peak;
    return {std::move(bank), std::move(report)};
}

// Stage-2 alternative: attention-map KL on keys only. The backward pass keeps
// every head's Lq×Lk weight stacks resident, so its accounted peak memory
// grows quadratically with sequence length; value predictors stay frozen.
inline std::pair<PredictorBank, TrainReport> stage2_train_qkkl(const Model& model,
                                                               const TrainDataset& ds,
                                                               PredictorBank bank,
                                                               const TrainConfig& cfg) {
    cfg.validate();
    const double t0 = detail::now_ms();
    TrainReport report;
    AllocTracker tracker;
    detail::BankOptimizer opt(bank, cfg.adamw());
    Rng sampler(cfg.seed);
    const size_t n_comp = bank.predictors.size();
    const AttentionGeometry& g = model.cfg.geometry;

    for (size_t step = 0; step < cfg.steps_stage2; ++step) {
        const SeqInstance& inst = ds.train[sampler.index(ds.train.size())];
        std::vector<Matrix> grad_k(n_comp), grad_v(n_comp);
        for (size_t ci = 0; ci < n_comp; ++ci) {
            grad_k[ci] = Matrix(bank.predictors[ci].w_key.rows, bank.predictors[ci].w_key.cols);
            grad_v[ci] = grad_k[ci]; // stays zero: loss has no value dependence
        }
        double loss = 0.0;
        const auto comp = inst.store.layout.compressed();
        for (size_t ci = 0; ci < n_comp; ++ci)
            loss += detail::qkkl_layer_step(inst, ci, comp[ci], bank, g,
                                            1.0 / static_cast<double>(n_comp), &grad_k[ci],
                                            &tracker) /
                    static_cast<double>(n_comp);
        detail::check_finite_loss(loss, "stage2-qkkl");
        const double lr = cosine_lr(cfg.lr, step, cfg.steps_stage2);
        report.steps.push_back({step, 2, loss, lr});
        opt.step(bank, grad_k, grad_v, lr);
    }
    report.wall_ms = detail::now_ms() - t0;
    report.final_checksum = bank.weight_checksum();
    report.peak_aux_bytes = tracker.peak;
    return {std::move(bank), std::move(report)};
}

// corpus-level entry points (build the frozen-model dataset, then train)
inline std::pair<PredictorBank, TrainReport> stage1_train(
    const Model& model, const std::vector<std::vector<int>>& corpus, PredictorBank bank,
    const TrainConfig& cfg, const EchoConfig& ec) {
    return stage1_train(model, build_dataset(model, corpus, ec, cfg), std::move(bank), cfg);
}

inline std::pair<PredictorBank, TrainReport> stage2_train(
    const Model& model, const std::vector<std::vector<int>>& corpus, PredictorBank bank,
    const TrainConfig& cfg, const EchoConfig& ec) {
    return stage2_train(model, build_dataset(model, corpus, ec, cfg), std::move(bank), cfg);
}

inline std::pair<PredictorBank, TrainReport> stage2_train_qkkl(
    const Model& model, const std::vector<std::vector<int>>& corpus, PredictorBank bank,
    const TrainConfig& cfg, const EchoConfig& ec) {
    return stage2_train_qkkl(model, build_dataset(model, corpus, ec, cfg), std::move(bank), cfg);
}

} // namespace echokv
