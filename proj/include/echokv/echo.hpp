#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "echokv/matrix.hpp"
#include "echokv/model.hpp"
#include "echokv/rng.hpp"

namespace echokv {

enum class Component { key, value };
enum class FeatureMode { combined, global_only, local_only };

inline const char* feature_mode_name(FeatureMode m) {
    switch (m) {
        case FeatureMode::global_only: return "global_only";
        case FeatureMode::local_only: return "local_only";
        default: return "combined";
    }
}

// Compression plan: layers are grouped in blocks of S; the first layer of
// each group keeps its full cache (the global feature source) and the other
// S−1 layers keep only their first m heads (width D_local = m·d_head) outside
// the sink/window region.
struct EchoConfig {
    size_t group_size = 2;  // S
    size_t local_dim = 0;   // D_local, multiple of d_head
    size_t sink_tokens = 4; // first rows always kept at full precision
    size_t window = 128;    // most recent rows always kept at full precision
    size_t d_kv = 64;       // n_kv_heads * d_head

    size_t local_heads(size_t d_head) const { return local_dim / d_head; }
    size_t feature_dim() const { return d_kv + local_dim; }
    size_t dropped_dim() const { return d_kv - local_dim; }

    void validate(size_t n_layers, size_t d_head) const {
        if (group_size == 0) throw ConfigError("echo: group_size must be >= 1");
        if (n_layers % group_size != 0)
            throw ConfigError("echo: n_layers must be divisible by group_size");
        if (local_dim >= d_kv) throw ConfigError("echo: local_dim must be < d_kv");
        if (d_head == 0 || local_dim % d_head != 0)
            throw ConfigError("echo: local_dim must be a multiple of d_head");
    }
};

// Pure arithmetic — usable for any published configuration regardless of the
// running model's geometry.
inline double compute_ratio(size_t d_kv, size_t group_size, size_t local_dim) {
    return static_cast<double>(d_kv + local_dim * (group_size - 1)) /
           static_cast<double>(d_kv * group_size);
}

inline double compute_ratio(const EchoConfig& cfg) {
    return compute_ratio(cfg.d_kv, cfg.group_size, cfg.local_dim);
}

// n_layers·(S−1)/S predictors, each two bias-free maps of
// (d_kv+D_local) × (d_kv−D_local) weights.
inline uint64_t predictor_param_count(size_t n_layers, size_t d_kv, size_t group_size,
                                      size_t local_dim) {
    const uint64_t n_compressed = static_cast<uint64_t>(n_layers) * (group_size - 1) / group_size;
    return n_compressed * 2ull * (d_kv + local_dim) * (d_kv - local_dim);
}

// Group k spans layers [k·S, (k+1)·S); layer k·S is the leader.
struct LayerLayout {
    size_t n_layers = 0;
    size_t group_size = 1;

    bool is_leader(size_t layer) const { return layer % group_size == 0; }
    size_t leader_of(size_t layer) const { return layer - layer % group_size; }
    size_t group_of(size_t layer) const { return layer / group_size; }
    size_t member_of(size_t layer) const { return layer % group_size; }

    std::vector<size_t> leaders() const {
        std::vector<size_t> out;
        for (size_t l = 0; l < n_layers; l += group_size) out.push_back(l);
        return out;
    }
    std::vector<size_t> compressed() const {
        std::vector<size_t> out;
        for (size_t l = 0; l < n_layers; ++l)
            if (!is_leader(l)) out.push_back(l);
        return out;
    }
};

inline LayerLayout partition_layers(size_t n_layers, size_t group_size) {
    if (group_size == 0 || n_layers % group_size != 0)
        throw ConfigError("partition_layers: n_layers must be divisible by group_size");
    return LayerLayout{n_layers, group_size};
}

// Bias-free linear maps from [global ; local] features to the dropped heads.
struct Predictor {
    size_t layer = 0;
    Matrix w_key;   // [(d_kv−D_local) × (d_kv+D_local)], output = features · Wᵀ
    Matrix w_value; // same shape

    size_t in_dim() const { return w_key.cols; }
    size_t out_dim() const { return w_key.rows; }
    const Matrix& weights(Component which) const {
        return which == Component::key ? w_key : w_value;
    }
    Matrix& weights(Component which) { return which == Component::key ? w_key : w_value; }
};

// Geometry fingerprint carried by banks and their checkpoints; loaders refuse
// to mix predictors across differently shaped models.
struct BankGeometry {
    uint32_t n_layers = 0;
    uint32_t group_size = 0;
    uint32_t local_dim = 0;
    uint32_t d_kv = 0;
    uint32_t n_kv_heads = 0;
    uint32_t d_head = 0;

    bool operator==(const BankGeometry&) const = default;
};

inline BankGeometry make_geometry(const ModelConfig& mc, const EchoConfig& ec) {
    return BankGeometry{static_cast<uint32_t>(mc.n_layers),
                        static_cast<uint32_t>(ec.group_size),
                        static_cast<uint32_t>(ec.local_dim),
                        static_cast<uint32_t>(ec.d_kv),
                        static_cast<uint32_t>(mc.geometry.n_kv_heads),
                        static_cast<uint32_t>(mc.geometry.d_head)};
}

// One predictor per compressed layer, ascending layer order.
struct PredictorBank {
    BankGeometry geom;
    std::vector<Predictor> predictors;

    static PredictorBank make(const ModelConfig& mc, const EchoConfig& ec) {
        mc.validate();
        ec.validate(mc.n_layers, mc.geometry.d_head);
        if (ec.d_kv != mc.d_kv()) throw ConfigError("bank: echo d_kv != model kv width");
        PredictorBank bank;
        bank.geom = make_geometry(mc, ec);
        const auto layout = partition_layers(mc.n_layers, ec.group_size);
        for (size_t layer : layout.compressed()) {
            Predictor p;
            p.layer = layer;
            p.w_key = Matrix(ec.dropped_dim(), ec.feature_dim());
            p.w_value = Matrix(ec.dropped_dim(), ec.feature_dim());
            bank.predictors.push_back(std::move(p));
        }
        return bank;
    }

    static PredictorBank zeros(const ModelConfig& mc, const EchoConfig& ec) {
        return make(mc, ec);
    }

    static PredictorBank random(const ModelConfig& mc, const EchoConfig& ec, uint64_t seed,
                                float stddev = 0.02f) {
        PredictorBank bank = make(mc, ec);
        Rng rng(seed);
        for (auto& p : bank.predictors) {
            for (auto& w : p.w_key.data) w = rng.gaussian_f(stddev);
            for (auto& w : p.w_value.data) w = rng.gaussian_f(stddev);
        }
        return bank;
    }

    const Predictor& for_layer(size_t layer) const {
        for (const auto& p : predictors)
            if (p.layer == layer) return p;
        throw UsageError("bank: no predictor for layer " + std::to_string(layer) +
                         " (leader layers are never predicted)");
    }
    Predictor& for_layer(size_t layer) {
        return const_cast<Predictor&>(static_cast<const PredictorBank&>(*this).for_layer(layer));
    }

    uint64_t param_count() const {
        uint64_t n = 0;
        for (const auto& p : predictors) n += p.w_key.size() + p.w_value.size();
        return n;
    }

    uint64_t weight_checksum() const {
        uint64_t h = 0;
        for (const auto& p : predictors) {
            h = combine_checksum(h, checksum(p.w_key));
            h = combine_checksum(h, checksum(p.w_value));
        }
        return h;
    }
};

// How a layer's rows divide into always-full head and tail regions plus the
// compressible middle. Short sequences have no middle.
struct RowSplit {
    size_t sink = 0;
    size_t middle = 0;
    size_t window = 0;
};

inline RowSplit split_rows(size_t tokens, size_t sink_tokens, size_t window) {
    RowSplit s;
    s.sink = std::min(tokens, sink_tokens);
    const size_t rest = tokens - s.sink;
    s.window = std::min(rest, window);
    s.middle = rest - s.window;
    return s;
}

// Compressed layer storage: sink and window rows at full width, middle rows
// at local width (first m heads only).
struct CompressedLayer {
    Matrix sink_k, sink_v;     // [sink × d_kv], pre-rotary keys
    Matrix local_k, local_v;   // [middle × D_local]
    Matrix window_k, window_v; // [window × d_kv]

    size_t tokens() const { return sink_k.rows + local_k.rows + window_k.rows; }
    size_t window_start() const { return sink_k.rows + local_k.rows; }
};

// Per-layer cache after eviction: leaders full, the rest compressed.
struct EchoStore {
    EchoConfig cfg;
    LayerLayout layout;
    size_t tokens = 0;

    std::vector<LayerKV> full_layers;          // populated for leader layers
    std::vector<CompressedLayer> comp_layers;  // populated for compressed layers
};

// Drops the predicted heads of every non-leader layer outside the sink/window
// region. The input full cache can be discarded afterwards.
inline EchoStore evict(const std::vector<LayerKV>& full, const EchoConfig& cfg) {
    const size_t n_layers = full.size();
    if (n_layers == 0) throw InputError("evict: no layers");
    EchoStore store;
    store.cfg = cfg;
    store.layout = partition_layers(n_layers, cfg.group_size);
    store.tokens = full[0].tokens();
    store.full_layers.resize(n_layers);
    store.comp_layers.resize(n_layers);

    const RowSplit rs = split_rows(store.tokens, cfg.sink_tokens, cfg.window);
    for (size_t l = 0; l < n_layers; ++l) {
        require_shape(full[l].tokens() == store.tokens, "evict: ragged layer token counts");
        require_shape(full[l].k_pre_rope.cols == cfg.d_kv, "evict: layer width != d_kv");
        if (store.layout.is_leader(l)) {
            store.full_layers[l] = full[l];
            continue;
        }
        CompressedLayer& c = store.comp_layers[l];
        c.sink_k = slice_rows(full[l].k_pre_rope, 0, rs.sink);
        c.sink_v = slice_rows(full[l].v, 0, rs.sink);
        Matrix mid_k = slice_rows(full[l].k_pre_rope, rs.sink, rs.sink + rs.middle);
        Matrix mid_v = slice_rows(full[l].v, rs.sink, rs.sink + rs.middle);
        c.local_k = slice_cols(mid_k, 0, cfg.local_dim);
        c.local_v = slice_cols(mid_v, 0, cfg.local_dim);
        c.window_k = slice_rows(full[l].k_pre_rope, rs.sink + rs.middle, store.tokens);
        c.window_v = slice_rows(full[l].v, rs.sink + rs.middle, store.tokens);
    }
    return store;
}

// Appends one token's k/v row to a single layer, demoting the oldest window
// row of a compressed layer to local width once the window is full. Callers
// append to every layer and then bump the token count once.
inline void store_append_layer(EchoStore& store, size_t layer, const float* k_row,
                               const float* v_row) {
    if (store.layout.is_leader(layer)) {
        store.full_layers[layer].k_pre_rope.append_row(k_row);
        store.full_layers[layer].v.append_row(v_row);
        return;
    }
    CompressedLayer& c = store.comp_layers[layer];
    if (c.sink_k.rows < store.cfg.sink_tokens && c.local_k.rows == 0 && c.window_k.rows == 0) {
        c.sink_k.append_row(k_row);
        c.sink_v.append_row(v_row);
        return;
    }
    c.window_k.append_row(k_row);
    c.window_v.append_row(v_row);
    if (c.window_k.rows > store.cfg.window) {
        c.local_k.append_row(c.window_k.row(0)); // first D_local columns survive
        c.local_v.append_row(c.window_v.row(0));
        c.window_k.pop_front_row();
        c.window_v.pop_front_row();
    }
}

inline void store_commit_token(EchoStore& store) { ++store.tokens; }

// [leader full row ; current-layer local slice] per middle-region token —
// key features from pre-rotary keys, value features from values. Ablation
// modes zero one block so the feature width (and therefore the predictor
// geometry) never changes.
inline Matrix assemble_features(const EchoStore& store, size_t group, size_t member,
                                size_t row0, size_t row1, Component which,
                                FeatureMode mode = FeatureMode::combined) {
    const size_t layer = group * store.cfg.group_size + member;
    if (layer >= store.layout.n_layers)
        throw UsageError("assemble_features: layer index out of range");
    if (store.layout.is_leader(layer))
        throw UsageError("assemble_features: layer " + std::to_string(layer) +
                         " is a group leader (nothing to predict)");
    const size_t leader = store.layout.leader_of(layer);
    const CompressedLayer& c = store.comp_layers[layer];
    const size_t sink = c.sink_k.rows;
    require_shape(row0 >= sink && row1 >= row0 && row1 <= sink + c.local_k.rows,
                  "assemble_features: rows outside the stored middle region");

    const Matrix& global_src = which == Component::key ? store.full_layers[leader].k_pre_rope
                                                       : store.full_layers[leader].v;
    const Matrix& local_src = which == Component::key ? c.local_k : c.local_v;
    const size_t d_kv = store.cfg.d_kv;
    const size_t d_local = store.cfg.local_dim;
    Matrix out(row1 - row0, d_kv + d_local);
    for (size_t t = row0; t < row1; ++t) {
        float* dst = out.row(t - row0);
        std::memcpy(dst, global_src.row(t), d_kv * sizeof(float));
        std::memcpy(dst + d_kv, local_src.row(t - sink), d_local * sizeof(float));
    }
    if (mode == FeatureMode::global_only)
        for (size_t r = 0; r < out.rows; ++r)
            std::memset(out.row(r) + d_kv, 0, d_local * sizeof(float));
    if (mode == FeatureMode::local_only)
        for (size_t r = 0; r < out.rows; ++r) std::memset(out.row(r), 0, d_kv * sizeof(float));
    return out;
}

// features · Wᵀ → one row per token, width d_kv − D_local (heads m..n_kv)
inline Matrix predict_dropped(const Predictor& p, const Matrix& features, Component which) {
    const Matrix& w = p.weights(which);
    if (features.cols != w.cols)
        throw ConfigError("predict_dropped: feature width " + std::to_string(features.cols) +
                          " != predictor input dim " + std::to_string(w.cols));
    return matmul_nt(features, w);
}

// [local ; predicted] — first m heads verbatim, remaining heads predicted
inline Matrix reconstruct_layer(const Matrix& local, const Matrix& predicted) {
    require_shape(local.rows == predicted.rows, "reconstruct_layer: row counts differ");
    return concat_cols(local, predicted);
}

// Supplier of the dropped-head middle rows of a compressed layer. The bank
//-backed source is the real mechanism; the oracle and mean sources exist for
// equivalence tests and baselines.
class DropSource {
public:
    virtual ~DropSource() = default;
    // [middle × (d_kv − D_local)] rows for the given compressed layer
    virtual Matrix dropped(const EchoStore& store, size_t layer, Component which) const = 0;
    // Decode appends flow through here so sources that track ground truth can
    // extend it; the real bank-backed source ignores the notification.
    virtual void observe_append(size_t /*layer*/, const float* /*k_row*/,
                                const float* /*v_row*/, size_t /*d_kv*/) {}
};

class BankSource final : public DropSource {
public:
    BankSource(const PredictorBank& bank, FeatureMode mode = FeatureMode::combined)
        : bank_(&bank), mode_(mode) {}

    Matrix dropped(const EchoStore& store, size_t layer, Component which) const override {
        const CompressedLayer& c = store.comp_layers[layer];
        const size_t sink = c.sink_k.rows;
        Matrix feats = assemble_features(store, store.layout.group_of(layer),
                                         store.layout.member_of(layer), sink,
                                         sink + c.local_k.rows, which, mode_);
        return predict_dropped(bank_->for_layer(layer), feats, which);
    }

private:
    const PredictorBank* bank_;
    FeatureMode mode_;
};

// Returns the true dropped values from a retained copy of the full cache;
// reconstruction through this source is exact by construction.
class OracleSource final : public DropSource {
public:
    explicit OracleSource(std::vector<LayerKV> truth) : truth_(std::move(truth)) {}

    Matrix dropped(const EchoStore& store, size_t layer, Component which) const override {
        const CompressedLayer& c = store.comp_layers[layer];
        const size_t sink = c.sink_k.rows;
        const Matrix& src = which == Component::key ? truth_[layer].k_pre_rope : truth_[layer].v;
        Matrix mid = slice_rows(src, sink, sink + c.local_k.rows);
        return slice_cols(mid, store.cfg.local_dim, store.cfg.d_kv);
    }

    void observe_append(size_t layer, const float* k_row, const float* v_row,
                        size_t d_kv) override {
        require_shape(truth_[layer].k_pre_rope.cols == d_kv, "oracle: width mismatch on append");
        truth_[layer].k_pre_rope.append_row(k_row);
        truth_[layer].v.append_row(v_row);
    }

private:
    std::vector<LayerKV> truth_;
};

// Baseline: every dropped row is the mean of the layer's stored full-width
// rows (sink + window) over the dropped columns — the cheapest store-derived
// constant predictor.
class MeanSource final : public DropSource {
public:
    Matrix dropped(const EchoStore& store, size_t layer, Component which) const override {
        const CompressedLayer& c = store.comp_layers[layer];
        const Matrix& sink = which == Component::key ? c.sink_k : c.sink_v;
        const Matrix& window = which == Component::key ? c.window_k : c.window_v;
        const size_t d0 = store.cfg.local_dim, d1 = store.cfg.d_kv;
        std::vector<double> mean(d1 - d0, 0.0);
        const size_t n = sink.rows + window.rows;
        for (size_t r = 0; r < sink.rows; ++r)
            for (size_t cix = d0; cix < d1; ++cix) mean[cix - d0] += sink.at(r, cix);
        for (size_t r = 0; r < window.rows; ++r)
            for (size_t cix = d0; cix < d1; ++cix) mean[cix - d0] += window.at(r, cix);
        Matrix out(c.local_k.rows, d1 - d0);
        if (n == 0) return out;
        for (size_t j = 0; j < mean.size(); ++j) mean[j] /= static_cast<double>(n);
        for (size_t r = 0; r < out.rows; ++r)
            for (size_t j = 0; j < out.cols; ++j) out.at(r, j) = static_cast<float>(mean[j]);
        return out;
    }
};

// Full-width view of one layer: leaders verbatim; compressed layers as
// [sink ; [local ; predicted] ; window]. Recomputed on every call — the store
// itself never grows past its compressed footprint.
inline LayerKV materialize_layer(const EchoStore& store, size_t layer, const DropSource& src) {
    LayerKV out;
    out.layer = layer;
    if (store.layout.is_leader(layer)) {
        out = store.full_layers[layer];
        out.layer = layer;
        return out;
    }
    const CompressedLayer& c = store.comp_layers[layer];
    Matrix mid_k = reconstruct_layer(c.local_k, src.dropped(store, layer, Component::key));
    Matrix mid_v = reconstruct_layer(c.local_v, src.dropped(store, layer, Component::value));
    out.k_pre_rope = concat_rows(concat_rows(c.sink_k, mid_k), c.window_k);
    out.v = concat_rows(concat_rows(c.sink_v, mid_v), c.window_v);
    return out;
}

// exact element count × 4, itemized per layer
struct LayerBytes {
    size_t leader = 0;
    size_t sink = 0;
    size_t local = 0;
    size_t window = 0;

    size_t total() const { return leader + sink + local + window; }
};

struct ByteBreakdown {
    std::vector<LayerBytes> per_layer;

    size_t total() const {
        size_t n = 0;
        for (const auto& l : per_layer) n += l.total();
        return n;
    }
};

inline ByteBreakdown compute_bytes(const EchoStore& store) {
    ByteBreakdown b;
    b.per_layer.resize(store.layout.n_layers);
    for (size_t l = 0; l < store.layout.n_layers; ++l) {
        LayerBytes& lb = b.per_layer[l];
        if (store.layout.is_leader(l)) {
            lb.leader = store.full_layers[l].k_pre_rope.bytes() + store.full_layers[l].v.bytes();
            continue;
        }
        const CompressedLayer& c = store.comp_layers[l];
        lb.sink = c.sink_k.bytes() + c.sink_v.bytes();
        lb.local = c.local_k.bytes() + c.local_v.bytes();
        lb.window = c.window_k.bytes() + c.window_v.bytes();
    }
    return b;
}

inline size_t full_cache_bytes(size_t n_layers, size_t tokens, size_t d_kv) {
    return n_layers * tokens * d_kv * 2 * sizeof(float);
}

} // namespace echokv
