#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "echokv/cache.hpp"
#include "echokv/checkpoint.hpp"
#include "echokv/corpus.hpp"
#include "echokv/echo.hpp"
#include "echokv/hybrid.hpp"
#include "echokv/model.hpp"
#include "echokv/trainer.hpp"

namespace echokv {

// ---------------------------------------------------------------------------
// clocks: report files default to a deterministic tick so identical runs are
// byte-identical; real wall time is opt-in (--wall-clock)
// ---------------------------------------------------------------------------

class Clock {
public:
    virtual ~Clock() = default;
    virtual double now_ms() = 0;
    virtual bool deterministic() const = 0;
};

class WallClock final : public Clock {
public:
    double now_ms() override {
        using namespace std::chrono;
        return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
    }
    bool deterministic() const override { return false; }
};

class FixedClock final : public Clock {
public:
    explicit FixedClock(double tick_ms = 1.0) : tick_(tick_ms) {}
    double now_ms() override { return t_ += tick_; }
    bool deterministic() const override { return true; }

private:
    double tick_;
    double t_ = 0.0;
};

// ---------------------------------------------------------------------------
// run configuration: structured text with dotted keys, unknown keys rejected
// ---------------------------------------------------------------------------

enum class RunMode { full, echo, hybrid };

inline const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::echo: return "echo";
        case RunMode::hybrid: return "hybrid";
        default: return "full";
    }
}

struct RunConfig {
    ModelConfig model;
    EchoConfig echo;
    TrainConfig train;
    HybridConfig hybrid;
    std::string corpus_path;
    std::string out_dir = "out";
    RunMode mode = RunMode::echo;
    FeatureMode features = FeatureMode::combined;
    std::vector<size_t> bench_lengths{256, 512, 1024, 2048};
    size_t bench_cap_bytes = 0; // 0 = uncapped
    size_t bench_decode_tokens = 32;
    size_t needle_context = 384;
    size_t needle_decode = 1;

    void finalize() {
        model.d_model = model.geometry.q_dim();
        echo.d_kv = model.d_kv();
        hybrid.value_echo = echo;
        train.features = features;
        model.validate();
        echo.validate(model.n_layers, model.geometry.d_head);
    }
};

namespace detail {

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        // stoull would wrap a leading minus around instead of rejecting it
        if (v.empty() || v[0] == '-' || v[0] == '+')
            throw std::invalid_argument(v);
        size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs an unsigned integer, got '" + v + "'");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' needs true/false, got '" + v + "'");
}

inline std::vector<size_t> parse_size_list(const std::string& key, const std::string& v) {
    std::vector<size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(parse_u64(key, item));
    if (out.empty()) throw ConfigError("config: key '" + key + "' needs a comma list");
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline void apply_config_key(RunConfig& rc, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_f64;
    using detail::parse_u64;
    if (key == "model.layers") rc.model.n_layers = parse_u64(key, value);
    else if (key == "model.q_heads") rc.model.geometry.n_q_heads = parse_u64(key, value);
    else if (key == "model.kv_heads") rc.model.geometry.n_kv_heads = parse_u64(key, value);
    else if (key == "model.d_head") rc.model.geometry.d_head = parse_u64(key, value);
    else if (key == "model.vocab") rc.model.vocab = parse_u64(key, value);
    else if (key == "model.seed") rc.model.seed = parse_u64(key, value);
    else if (key == "echo.group_size") rc.echo.group_size = parse_u64(key, value);
    else if (key == "echo.local_dim") rc.echo.local_dim = parse_u64(key, value);
    else if (key == "echo.sink_tokens") rc.echo.sink_tokens = parse_u64(key, value);
    else if (key == "echo.window") rc.echo.window = parse_u64(key, value);
    else if (key == "train.lr") rc.train.lr = parse_f64(key, value);
    else if (key == "train.steps_stage1") rc.train.steps_stage1 = parse_u64(key, value);
    else if (key == "train.steps_stage2") rc.train.steps_stage2 = parse_u64(key, value);
    else if (key == "train.batch") rc.train.batch = parse_u64(key, value);
    else if (key == "train.seed") rc.train.seed = parse_u64(key, value);
    else if (key == "train.beta1") rc.train.beta1 = parse_f64(key, value);
    else if (key == "train.beta2") rc.train.beta2 = parse_f64(key, value);
    else if (key == "train.weight_decay") rc.train.weight_decay = parse_f64(key, value);
    else if (key == "train.max_seq") rc.train.max_seq = parse_u64(key, value);
    else if (key == "train.compound_stream")
        rc.train.compound_stream = parse_bool(key, value);
    else if (key == "train.loss_stage2") {
        if (value == "o_mse") rc.train.loss_stage2 = Stage2Loss::o_mse;
        else if (value == "qk_kl") rc.train.loss_stage2 = Stage2Loss::qk_kl;
        else throw ConfigError("config: train.loss_stage2 must be o_mse or qk_kl");
    } else if (key == "hybrid.key_keep_ratio")
        rc.hybrid.key_keep_ratio = parse_f64(key, value);
    else if (key == "hybrid.samples") rc.hybrid.calibration_samples = parse_u64(key, value);
    else if (key == "corpus") rc.corpus_path = value;
    else if (key == "out_dir") rc.out_dir = value;
    else if (key == "mode") {
        if (value == "full") rc.mode = RunMode::full;
        else if (value == "echo") rc.mode = RunMode::echo;
        else if (value == "hybrid") rc.mode = RunMode::hybrid;
        else throw ConfigError("config: mode must be full, echo or hybrid");
    } else if (key == "features") {
        if (value == "combined") rc.features = FeatureMode::combined;
        else if (value == "global_only") rc.features = FeatureMode::global_only;
        else if (value == "local_only") rc.features = FeatureMode::local_only;
        else throw ConfigError("config: features must be combined, global_only or local_only");
    } else if (key == "bench.lengths")
        rc.bench_lengths = detail::parse_size_list(key, value);
    else if (key == "bench.cap_bytes") rc.bench_cap_bytes = parse_u64(key, value);
    else if (key == "bench.decode_tokens") rc.bench_decode_tokens = parse_u64(key, value);
    else if (key == "needle.context") rc.needle_context = parse_u64(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig rc;
    std::stringstream ss(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
        apply_config_key(rc, key, value);
    }
    rc.finalize();
    return rc;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

// worker cap from the environment; absent or empty means single-threaded
inline size_t worker_threads() {
    const char* env = std::getenv("ECHOKV_THREADS");
    if (!env || !*env) return 1;
    const uint64_t n = detail::parse_u64("ECHOKV_THREADS", env);
    return n == 0 ? 1 : static_cast<size_t>(n);
}

// ---------------------------------------------------------------------------
// report plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
}

inline std::ofstream open_report(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open report for write: " + path);
    return os;
}

// seeded printable-ASCII filler for synthetic benchmark/needle sequences
inline std::vector<int> synth_tokens(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> out(n);
    for (auto& t : out) t = 32 + static_cast<int>(rng.index(95));
    return out;
}

inline size_t argmax_row(const Matrix& logits, size_t row) {
    const float* p = logits.row(row);
    size_t best = 0;
    for (size_t c = 1; c < logits.cols; ++c)
        if (p[c] > p[best]) best = c;
    return best;
}

constexpr uint64_t kBankInitSalt = 0x5eedba5eu; // keeps init draws off the sampler stream

} // namespace detail

// ---------------------------------------------------------------------------
// train driver
// ---------------------------------------------------------------------------

enum class StageSelect { stage1, stage2, both };

struct TrainOutcome {
    PredictorBank bank;
    TrainReport stage1;
    TrainReport stage2;
    std::string checkpoint_path;
};

inline void write_train_report(const std::string& path, const std::vector<TrainReport*>& stages,
                               Clock& clock) {
    auto os = detail::open_report(path);
    for (const TrainReport* rep : stages) {
        for (const StepRecord& rec : rep->steps) {
            nlohmann::json row;
            row["step"] = rec.step;
            row["stage"] = rec.stage;
            row["loss"] = rec.loss;
            row["lr"] = rec.lr;
            row["elapsed_ms"] = clock.now_ms();
            os << row.dump() << "\n";
        }
    }
    if (!os) throw IoError("write failure: " + path);
}

inline TrainOutcome run_train(const RunConfig& rc, StageSelect sel, Clock& clock) {
    Model model = init_model(rc.model);
    const uint64_t before = model.weight_checksum();
    auto corpus = load_corpus(rc.corpus_path, rc.train.max_seq);
    TrainDataset ds = build_dataset(model, corpus, rc.echo, rc.train);

    TrainOutcome out{
        PredictorBank::random(rc.model, rc.echo, rc.train.seed ^ detail::kBankInitSalt),
        {}, {}, ""};
    if (sel != StageSelect::stage2) {
        auto [bank, rep] = stage1_train(model, ds, std::move(out.bank), rc.train);
        out.bank = std::move(bank);
        out.stage1 = std::move(rep);
    }
    if (sel != StageSelect::stage1) {
        auto [bank, rep] = rc.train.loss_stage2 == Stage2Loss::qk_kl
                               ? stage2_train_qkkl(model, ds, std::move(out.bank), rc.train)
                               : stage2_train(model, ds, std::move(out.bank), rc.train);
        out.bank = std::move(bank);
        out.stage2 = std::move(rep);
    }
    if (model.weight_checksum() != before)
        throw NumericError("run_train: backbone weights changed during training");

    detail::ensure_dir(rc.out_dir);
    out.checkpoint_path = rc.out_dir + "/checkpoint.eckv";
    save_bank(out.bank, out.checkpoint_path);
    std::vector<TrainReport*> stages;
    if (sel != StageSelect::stage2) stages.push_back(&out.stage1);
    if (sel != StageSelect::stage1) stages.push_back(&out.stage2);
    write_train_report(rc.out_dir + "/train_report.jsonl", stages, clock);
    return out;
}

// ---------------------------------------------------------------------------
// eval driver
// ---------------------------------------------------------------------------

enum class BankSelect { checkpoint, zero, oracle };

struct EvalResult {
    std::vector<double> layer_o_mse; // per compressed layer, held-out mean
    double logit_mse = 0.0;
    double argmax_agreement = 0.0;
};

// Per-compressed-layer O-MSE on held-out instances plus decode-time logit
// fidelity: the tail of each held-out sequence is decoded once with the full
// cache and once with the selected backend after mid-stream eviction.
inline EvalResult run_eval_core(const Model& model, const TrainDataset& ds,
                                const EchoConfig& ec, BankSelect sel, const PredictorBank* bank,
                                FeatureMode features) {
    const AttentionGeometry& g = model.cfg.geometry;
    EvalResult res;
    const size_t n_comp = ds.held.empty() ? 0 : ds.held[0].store.layout.compressed().size();
    res.layer_o_mse.assign(n_comp, 0.0);

    size_t decode_positions = 0, agreements = 0;
    double logit_se = 0.0;
    size_t logit_elems = 0;
    for (const auto& inst : ds.held) {
        // teacher-forced per-layer loss
        std::shared_ptr<DropSource> src;
        TraceBatch trace = prefill(model, inst.tokens);
        std::vector<LayerKV> kvs;
        for (const auto& lt : trace.layers) kvs.push_back(lt.kv);
        if (sel == BankSelect::oracle) src = std::make_shared<OracleSource>(kvs);
        else src = std::make_shared<BankSource>(*bank, features);

        const auto comp = inst.store.layout.compressed();
        const auto pos = position_range(0, inst.tokens.size());
        for (size_t ci = 0; ci < comp.size(); ++ci) {
            LayerKV view = materialize_layer(inst.store, comp[ci], *src);
            rope_apply(view.k_pre_rope, g.n_kv_heads, g.d_head, pos);
            Matrix out = causal_attention(inst.q[ci], view.k_pre_rope, view.v, g, 0);
            res.layer_o_mse[ci] += mse(out, inst.teacher_out[ci]) /
                                   static_cast<double>(ds.held.size());
        }

        // decode-time fidelity: prefill a prefix, evict, decode the tail
        const size_t L = inst.tokens.size();
        const size_t tail = std::min<size_t>(8, std::max<size_t>(1, L / 4));
        if (L <= tail + 1) continue;
        const std::vector<int> prefix(inst.tokens.begin(), inst.tokens.end() - tail);
        TraceBatch ptrace = prefill(model, prefix);
        KvCache full_cache =
            KvCache::from_prefill(model, ptrace, CacheMode::full, ec, nullptr);
        std::vector<LayerKV> pkvs;
        for (const auto& lt : ptrace.layers) pkvs.push_back(lt.kv);
        std::shared_ptr<DropSource> dsrc;
        if (sel == BankSelect::oracle) dsrc = std::make_shared<OracleSource>(pkvs);
        else dsrc = std::make_shared<BankSource>(*bank, features);
        KvCache echo_cache = KvCache::from_prefill(model, ptrace, CacheMode::echo, ec, dsrc);
        for (size_t i = L - tail; i < L; ++i) {
            Matrix lf = decode_step(model, full_cache, inst.tokens[i]);
            Matrix le = decode_step(model, echo_cache, inst.tokens[i]);
            logit_se += mse(lf, le) * static_cast<double>(lf.size());
            logit_elems += lf.size();
            agreements += detail::argmax_row(lf, 0) == detail::argmax_row(le, 0) ? 1 : 0;
            ++decode_positions;
        }
    }
    res.logit_mse = logit_elems == 0 ? 0.0 : logit_se / static_cast<double>(logit_elems);
    res.argmax_agreement =
        decode_positions == 0 ? 1.0
                              : static_cast<double>(agreements) /
                                    static_cast<double>(decode_positions);
    return res;
}

inline EvalResult run_eval(const RunConfig& rc, BankSelect sel,
                           const std::string& checkpoint_path) {
    Model model = init_model(rc.model);
    auto corpus = load_corpus(rc.corpus_path, rc.train.max_seq);
    TrainDataset ds = build_dataset(model, corpus, rc.echo, rc.train);

    PredictorBank bank = PredictorBank::zeros(rc.model, rc.echo);
    if (sel == BankSelect::checkpoint) {
        const BankGeometry expect = make_geometry(rc.model, rc.echo);
        bank = load_bank(checkpoint_path, &expect);
    }
    EvalResult res = run_eval_core(model, ds, rc.echo, sel, &bank, rc.features);

    detail::ensure_dir(rc.out_dir);
    auto os = detail::open_report(rc.out_dir + "/eval_report.jsonl");
    const auto comp = partition_layers(rc.model.n_layers, rc.echo.group_size).compressed();
    for (size_t ci = 0; ci < res.layer_o_mse.size(); ++ci) {
        nlohmann::json row;
        row["kind"] = "layer";
        row["layer"] = comp[ci];
        row["o_mse"] = res.layer_o_mse[ci];
        os << row.dump() << "\n";
    }
    nlohmann::json tail;
    tail["kind"] = "logits";
    tail["logit_mse"] = res.logit_mse;
    tail["argmax_agreement"] = res.argmax_agreement;
    tail["mode"] = run_mode_name(rc.mode);
    tail["features"] = feature_mode_name(rc.features);
    os << tail.dump() << "\n";
    if (!os) throw IoError("write failure: eval_report.jsonl");
    return res;
}

// ---------------------------------------------------------------------------
// bench driver
// ---------------------------------------------------------------------------

struct BenchRow {
    size_t tokens = 0;
    CacheMode mode = CacheMode::full;
    size_t bytes_full = 0;
    size_t bytes_compressed = 0;
    double achieved_ratio = 1.0;
    double decode_tokens_per_sec = 0.0;
    double output_mse_vs_full = 0.0;
    double logit_argmax_agreement = 1.0;
    bool oom_simulated = false;
    bool echo_over_cap = false;
};

struct BenchReport {
    std::vector<BenchRow> rows; // one per requested length, ascending request order
};

inline BenchRow bench_one_length(const Model& model, const RunConfig& rc,
                                 const PredictorBank& bank, size_t length, Clock& clock) {
    BenchRow row;
    row.tokens = length;
    const auto tokens = detail::synth_tokens(length, rc.model.seed + length);
    TraceBatch trace = prefill(model, tokens);

    row.bytes_full = full_cache_bytes(rc.model.n_layers, length, rc.model.d_kv());
    row.mode = choose_mode(length, rc.bench_cap_bytes, rc.model.n_layers, rc.model.d_kv());
    row.oom_simulated = row.mode == CacheMode::echo; // full cache would exceed the cap

    auto src = std::make_shared<BankSource>(bank, rc.features);
    KvCache cache = KvCache::from_prefill(model, trace, row.mode, rc.echo,
                                          row.mode == CacheMode::echo ? src : nullptr);
    row.bytes_compressed = cache.stored_bytes();
    row.achieved_ratio =
        static_cast<double>(row.bytes_compressed) / static_cast<double>(row.bytes_full);
    row.echo_over_cap =
        rc.bench_cap_bytes > 0 && row.bytes_compressed > rc.bench_cap_bytes;

    // reference decode with an always-full cache for fidelity metrics
    KvCache ref = KvCache::from_prefill(model, trace, CacheMode::full, rc.echo, nullptr);
    const auto cont = detail::synth_tokens(rc.bench_decode_tokens, rc.model.seed ^ length);
    double se = 0.0;
    size_t elems = 0, agree = 0;
    const double t0 = clock.now_ms();
    std::vector<Matrix> measured;
    measured.reserve(cont.size());
    for (int t : cont) measured.push_back(decode_step(model, cache, t));
    const double t1 = clock.now_ms();
    for (size_t i = 0; i < cont.size(); ++i) {
        Matrix lf = decode_step(model, ref, cont[i]);
        se += mse(lf, measured[i]) * static_cast<double>(lf.size());
        elems += lf.size();
        agree += detail::argmax_row(lf, 0) == detail::argmax_row(measured[i], 0) ? 1 : 0;
    }
    row.output_mse_vs_full = elems == 0 ? 0.0 : se / static_cast<double>(elems);
    row.logit_argmax_agreement =
        cont.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(cont.size());
    const double elapsed_ms = std::max(t1 - t0, 1e-6);
    row.decode_tokens_per_sec = static_cast<double>(cont.size()) * 1000.0 / elapsed_ms;
    return row;
}

inline BenchReport run_bench(const RunConfig& rc, const PredictorBank& bank,
                             const std::string& out_path, bool wall_clock) {
    Model model = init_model(rc.model);
    BenchReport report;
    report.rows.resize(rc.bench_lengths.size());

    const size_t n_workers = std::min(worker_threads(), rc.bench_lengths.size());
    if (n_workers <= 1) {
        for (size_t i = 0; i < rc.bench_lengths.size(); ++i) {
            std::unique_ptr<Clock> clock =
                wall_clock ? std::unique_ptr<Clock>(new WallClock())
                           : std::unique_ptr<Clock>(new FixedClock());
            report.rows[i] = bench_one_length(model, rc, bank, rc.bench_lengths[i], *clock);
        }
    } else {
        // lengths are independent; each worker owns its caches and clock
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (size_t w = 0; w < n_workers; ++w)
            pool.emplace_back([&]() {
                for (size_t i = next.fetch_add(1); i < rc.bench_lengths.size();
                     i = next.fetch_add(1)) {
                    std::unique_ptr<Clock> clock =
                        wall_clock ? std::unique_ptr<Clock>(new WallClock())
                                   : std::unique_ptr<Clock>(new FixedClock());
                    report.rows[i] =
                        bench_one_length(model, rc, bank, rc.bench_lengths[i], *clock);
                }
            });
        for (auto& t : pool) t.join();
    }

    auto os = detail::open_report(out_path);
    for (const BenchRow& row : report.rows) {
        nlohmann::json j;
        j["tokens"] = row.tokens;
        j["mode"] = cache_mode_name(row.mode);
        j["bytes_full"] = row.bytes_full;
        j["bytes_compressed"] = row.bytes_compressed;
        j["achieved_ratio"] = row.achieved_ratio;
        j["decode_tokens_per_sec"] = row.decode_tokens_per_sec;
        j["output_mse_vs_full"] = row.output_mse_vs_full;
        j["logit_argmax_agreement"] = row.logit_argmax_agreement;
        j["oom_simulated"] = row.oom_simulated;
        j["echo_over_cap"] = row.echo_over_cap;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failure: " + out_path);
    return report;
}

// ---------------------------------------------------------------------------
// needle driver: synthetic retrieval stress with a marked byte pattern
// ---------------------------------------------------------------------------

struct NeedleRow {
    double depth = 0.0;
    size_t argmax_full = 0;
    size_t argmax_echo = 0;
    bool agree = false;
};

struct NeedleReport {
    std::vector<NeedleRow> rows;
    double mean_agreement = 0.0;
};

// Plants "@@NDL<d>@@" at controlled depths of a seeded haystack, appends a
// probe cue, and checks whether full and compressed decode agree on the next
// token. Agreement-based: the backbone is untrained, so there is no "right"
// answer, only consistency with the uncompressed model.
using SourceFactory = std::function<std::shared_ptr<DropSource>(const TraceBatch&)>;

inline NeedleReport needle_task(const Model& model, const EchoConfig& ec,
                                const SourceFactory& make_source, const PredictorBank* bank,
                                FeatureMode features, size_t context_len, uint64_t seed) {
    NeedleReport report;
    const std::vector<double> depths{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    size_t agree_count = 0;
    for (double depth : depths) {
        std::vector<int> tokens = detail::synth_tokens(context_len, seed + 1000 +
                                                       static_cast<uint64_t>(depth * 10));
        const std::string needle =
            "@@NDL" + std::to_string(static_cast<int>(depth * 10)) + "@@";
        const std::string probe = "@@NDL";
        const size_t pos = static_cast<size_t>(
            depth * static_cast<double>(context_len - needle.size() - probe.size() - 1));
        for (size_t i = 0; i < needle.size(); ++i)
            tokens[pos + i] = static_cast<unsigned char>(needle[i]);
        for (size_t i = 0; i < probe.size(); ++i)
            tokens[context_len - probe.size() + i] = static_cast<unsigned char>(probe[i]);

        // prefill everything but the last token, then decode it in both modes
        const std::vector<int> prefix(tokens.begin(), tokens.end() - 1);
        TraceBatch trace = prefill(model, prefix);
        KvCache full_cache = KvCache::from_prefill(model, trace, CacheMode::full, ec, nullptr);
        std::shared_ptr<DropSource> src;
        if (make_source) src = make_source(trace);
        else src = std::make_shared<BankSource>(*bank, features);
        KvCache echo_cache = KvCache::from_prefill(model, trace, CacheMode::echo, ec, src);

        Matrix lf = decode_step(model, full_cache, tokens.back());
        Matrix le = decode_step(model, echo_cache, tokens.back());
        NeedleRow row;
        row.depth = depth;
        row.argmax_full = detail::argmax_row(lf, 0);
        row.argmax_echo = detail::argmax_row(le, 0);
        row.agree = row.argmax_full == row.argmax_echo;
        agree_count += row.agree ? 1 : 0;
        report.rows.push_back(row);
    }
    report.mean_agreement = static_cast<double>(agree_count) / static_cast<double>(depths.size());
    return report;
}

inline void write_needle_report(const NeedleReport& report, const std::string& path) {
    auto os = detail::open_report(path);
    for (const NeedleRow& row : report.rows) {
        nlohmann::json j;
        j["depth"] = row.depth;
        j["argmax_full"] = row.argmax_full;
        j["argmax_echo"] = row.argmax_echo;
        j["agree"] = row.agree;
        os << j.dump() << "\n";
    }
    nlohmann::json tail;
    tail["kind"] = "summary";
    tail["mean_agreement"] = report.mean_agreement;
    os << tail.dump() << "\n";
    if (!os) throw IoError("write failure: " + path);
}

// ---------------------------------------------------------------------------
// export driver: channel-score sidecar + checkpoint summary
// ---------------------------------------------------------------------------

inline void run_export(const RunConfig& rc, const std::string& checkpoint_path) {
    Model model = init_model(rc.model);
    auto corpus = load_corpus(rc.corpus_path, rc.train.max_seq);
    const BankGeometry geom = make_geometry(rc.model, rc.echo);

    detail::ensure_dir(rc.out_dir);
    auto scores = calibrate_key_channels(model, corpus, rc.hybrid.calibration_samples);
    save_scores(scores, geom, rc.out_dir + "/channel_scores.ecks");

    nlohmann::json summary;
    summary["ratio"] = compute_ratio(rc.echo);
    summary["param_count"] = predictor_param_count(rc.model.n_layers, rc.echo.d_kv,
                                                   rc.echo.group_size, rc.echo.local_dim);
    summary["geometry"] = {{"n_layers", geom.n_layers},     {"group_size", geom.group_size},
                           {"local_dim", geom.local_dim},   {"d_kv", geom.d_kv},
                           {"n_kv_heads", geom.n_kv_heads}, {"d_head", geom.d_head}};
    if (!checkpoint_path.empty()) {
        PredictorBank bank = load_bank(checkpoint_path, &geom);
        summary["checkpoint"] = checkpoint_path;
        summary["checkpoint_params"] = bank.param_count();
        summary["checkpoint_checksum"] = bank.weight_checksum();
    }
    auto os = detail::open_report(rc.out_dir + "/export_summary.json");
    os << summary.dump(2) << "\n";
    if (!os) throw IoError("write failure: export_summary.json");
}

} // namespace echokv
