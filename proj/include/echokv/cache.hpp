#pragma once

#include <memory>
#include <vector>

#include "echokv/echo.hpp"
#include "echokv/model.hpp"

namespace echokv {

enum class CacheMode { full, echo };

inline const char* cache_mode_name(CacheMode m) { return m == CacheMode::full ? "full" : "echo"; }

// Live decode cache with two interchangeable backends: the plain full-width
// store, and the compressed store that reconstructs dropped heads on every
// read. Both feed the identical attention path, so an exact drop source makes
// the backends bit-equivalent.
struct KvCache {
    ModelConfig model_cfg;
    EchoConfig echo_cfg;
    CacheMode mode = CacheMode::full;
    size_t tokens = 0;

    std::vector<LayerKV> full;            // populated in full mode
    EchoStore store;                      // populated in echo mode
    std::shared_ptr<DropSource> source;   // reconstruction source for echo reads

    static KvCache from_prefill(const Model& model, const TraceBatch& trace, CacheMode mode,
                                const EchoConfig& echo_cfg,
                                std::shared_ptr<DropSource> source = nullptr) {
        echo_cfg.validate(model.cfg.n_layers, model.cfg.geometry.d_head);
        if (echo_cfg.d_kv != model.cfg.d_kv())
            throw ConfigError("cache: echo d_kv != model kv width");
        KvCache cache;
        cache.model_cfg = model.cfg;
        cache.echo_cfg = echo_cfg;
        cache.mode = mode;
        cache.tokens = trace.tokens.size();
        cache.source = std::move(source);
        std::vector<LayerKV> layers;
        layers.reserve(trace.layers.size());
        for (const auto& lt : trace.layers) layers.push_back(lt.kv);
        if (mode == CacheMode::full) {
            cache.full = std::move(layers);
        } else {
            cache.store = evict(layers, echo_cfg);
        }
        return cache;
    }

    size_t stored_bytes() const {
        if (mode == CacheMode::full) {
            size_t n = 0;
            for (const auto& l : full) n += l.k_pre_rope.bytes() + l.v.bytes();
            return n;
        }
        return compute_bytes(store).total();
    }

    // Full-width pre-rotary view of one layer (reconstructed in echo mode).
    LayerKV layer_view(size_t layer) const {
        if (mode == CacheMode::full) return full[layer];
        if (!source) throw UsageError("cache: echo mode requires a reconstruction source");
        return materialize_layer(store, layer, *source);
    }

    void append_layer_row(size_t layer, const float* k_row, const float* v_row) {
        if (mode == CacheMode::full) {
            full[layer].k_pre_rope.append_row(k_row);
            full[layer].v.append_row(v_row);
            return;
        }
        store_append_layer(store, layer, k_row, v_row);
        if (source) source->observe_append(layer, k_row, v_row, echo_cfg.d_kv);
    }

    void commit_token() {
        ++tokens;
        if (mode == CacheMode::echo) store_commit_token(store);
    }
};

// full→echo evicts (always allowed); echo→full materialises every layer
// through the cache's reconstruction source.
inline void switch_mode(KvCache& cache, CacheMode target) {
    if (cache.mode == target) return;
    if (target == CacheMode::echo) {
        cache.store = evict(cache.full, cache.echo_cfg);
        cache.full.clear();
        cache.mode = CacheMode::echo;
        return;
    }
    if (!cache.source)
        throw UsageError("switch_mode: echo→full needs predictors to rebuild dropped heads");
    cache.full.resize(cache.store.layout.n_layers);
    for (size_t l = 0; l < cache.store.layout.n_layers; ++l)
        cache.full[l] = materialize_layer(cache.store, l, *cache.source);
    cache.store = EchoStore{};
    cache.mode = CacheMode::full;
}

// The bench/serving policy: stay full while the full cache fits the cap.
// cap_bytes == 0 means uncapped.
inline CacheMode choose_mode(size_t tokens, size_t cap_bytes, size_t n_layers, size_t d_kv) {
    if (cap_bytes == 0) return CacheMode::full;
    return full_cache_bytes(n_layers, tokens, d_kv) <= cap_bytes ? CacheMode::full
                                                                 : CacheMode::echo;
}

// One-token forward against the cache: appends the token's k/v to every layer
// and attends over the materialised view (reconstruct-on-read in echo mode).
inline Matrix decode_step(const Model& model, KvCache& cache, int token) {
    const auto& cfg = model.cfg;
    if (!(cache.model_cfg.n_layers == cfg.n_layers && cache.model_cfg.d_model == cfg.d_model &&
          cache.model_cfg.vocab == cfg.vocab &&
          cache.model_cfg.geometry.n_q_heads == cfg.geometry.n_q_heads &&
          cache.model_cfg.geometry.n_kv_heads == cfg.geometry.n_kv_heads &&
          cache.model_cfg.geometry.d_head == cfg.geometry.d_head))
        throw ConfigError("decode_step: cache was built for a different model geometry");
    if (token < 0 || static_cast<size_t>(token) >= cfg.vocab)
        throw InputError("decode_step: token id out of vocab range");

    const size_t pos = cache.tokens; // absolute position of the new token
    Matrix x(1, cfg.d_model);
    std::memcpy(x.row(0), model.embedding.row(static_cast<size_t>(token)),
                cfg.d_model * sizeof(float));

    const std::vector<long> qpos{static_cast<long>(pos)};
    for (size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& w = model.layers[li];
        Matrix xn = detail::rmsnorm(x);
        Matrix q = matmul(xn, w.wq);
        Matrix k = matmul(xn, w.wk);
        Matrix v = matmul(xn, w.wv);

        cache.append_layer_row(li, k.row(0), v.row(0));
        LayerKV view = cache.layer_view(li);

        rope_apply(q, cfg.geometry.n_q_heads, cfg.geometry.d_head, qpos);
        Matrix k_rot = view.k_pre_rope;
        rope_apply(k_rot, cfg.geometry.n_kv_heads, cfg.geometry.d_head,
                   position_range(0, k_rot.rows));

        Matrix attn = causal_attention(q, k_rot, view.v, cfg.geometry, pos);

        Matrix proj = matmul(attn, w.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += proj.data[i];

        Matrix hn = detail::rmsnorm(x);
        Matrix h = matmul(hn, w.w1);
        detail::silu_inplace(h);
        Matrix mlp = matmul(h, w.w2);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp.data[i];
    }
    cache.commit_token();
    return matmul_nt(detail::rmsnorm(x), model.embedding);
}

} // namespace echokv
