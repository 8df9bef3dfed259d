// Acceptance gate: one pass/fail line per criterion, deterministic output,
// nonzero exit if anything fails. Takes the training corpus path as argv[1].
//
//  1. closed-form footprint ratios match the reference constants exactly
//  2. predictor parameter totals match the reference constants exactly
//  3. analytic gradients of both training losses match finite differences
//  4. oracle reconstruction is exact: attention matches and mode round-trips
//  5. the default schedule halves stage-1 loss and beats both baselines
//  6. stage-1 initialization helps stage 2 at equal total steps
//  7. the probability-matching loss needs >8x the working memory
//  8. measured store bytes track the closed form within two points
//  9. the cap policy serves short inputs full and long inputs compressed
// 10. the full artifact set is byte-identical across repeated runs

#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "echokv/harness.hpp"

using namespace echokv;
namespace fs = std::filesystem;

namespace {

int g_passed = 0;
int g_failed = 0;

void report(int number, bool ok, const std::string& text) {
    std::printf("criterion %2d %s — %s\n", number, ok ? "pass" : "FAIL", text.c_str());
    (ok ? g_passed : g_failed)++;
}

void run_criterion(int number, const std::function<std::pair<bool, std::string>()>& body) {
    try {
        auto [ok, text] = body();
        report(number, ok, text);
    } catch (const std::exception& e) {
        report(number, false, std::string("exception: ") + e.what());
    }
}

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof(buf), pattern, args);
    va_end(args);
    return std::string(buf);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "<unreadable:" + path + ">";
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// central finite difference over every entry of w against an analytic
// gradient; returns max deviation normalized by the gradient's max magnitude
double fd_rel_gap(Matrix& w, const Matrix& analytic, const std::function<double()>& loss) {
    const double h = 1e-3;
    double max_diff = 0.0, max_an = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        const float old = w.data[i];
        w.data[i] = static_cast<float>(old + h);
        const double wp = w.data[i], fp = loss();
        w.data[i] = static_cast<float>(old - h);
        const double wm = w.data[i], fm = loss();
        w.data[i] = old;
        const double fd = (fp - fm) / (wp - wm);
        max_diff = std::max(max_diff, std::fabs(fd - static_cast<double>(analytic.data[i])));
        max_an = std::max(max_an, std::fabs(static_cast<double>(analytic.data[i])));
    }
    return max_diff / std::max(max_an, 1e-12);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(static_cast<double>(a.data[i]) -
                                  static_cast<double>(b.data[i])));
    return m;
}

double tail_mean(const TrainReport& rep, size_t n) {
    double acc = 0.0;
    const size_t start = rep.steps.size() > n ? rep.steps.size() - n : 0;
    for (size_t i = start; i < rep.steps.size(); ++i) acc += rep.steps[i].loss;
    return acc / static_cast<double>(rep.steps.size() - start);
}

// the desk-scale compression shape used by the training criteria: second
// layer of every pair compressed, first kv head kept, short window so the
// checked-in corpus lines still have middle rows to learn from
EchoConfig desk_echo(size_t window) {
    EchoConfig ec;
    ec.group_size = 2;
    ec.local_dim = 16;
    ec.sink_tokens = 4;
    ec.window = window;
    ec.d_kv = 64;
    return ec;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <corpus.txt>\n");
        return 2;
    }
    const std::string corpus_path = argv[1];
    const fs::path work = fs::temp_directory_path() / "echokv_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);

    // --- 1: closed-form footprint ratios ------------------------------------
    run_criterion(1, [] {
        const double r1 = compute_ratio(1024, 2, 384);
        const double r2 = compute_ratio(1024, 2, 0);
        const double r3 = compute_ratio(1024, 4, 64);
        const bool ok = std::fabs(r1 - 0.6875) < 1e-9 && std::fabs(r2 - 0.5) < 1e-9 &&
                        std::fabs(r3 - 0.296875) < 1e-9;
        return std::make_pair(ok, fmt("footprint ratios %.9g / %.9g / %.9g", r1, r2, r3));
    });

    // --- 2: predictor parameter totals ---------------------------------------
    run_criterion(2, [] {
        const uint64_t p1 = predictor_param_count(32, 1024, 2, 384);
        const uint64_t p2 = predictor_param_count(32, 1024, 2, 0);
        const uint64_t p3 = predictor_param_count(32, 1024, 4, 64);
        const bool ok = p1 == 28835840ULL && p2 == 33554432ULL && p3 == 50135040ULL;
        return std::make_pair(
            ok, fmt("parameter totals %llu / %llu / %llu", (unsigned long long)p1,
                    (unsigned long long)p2, (unsigned long long)p3));
    });

    // --- 3: analytic gradients vs finite differences -------------------------
    run_criterion(3, [] {
        ModelConfig mc;
        mc.n_layers = 2;
        mc.geometry = AttentionGeometry{2, 2, 4};
        mc.d_model = 8;
        mc.vocab = 256;
        mc.seed = 5;
        EchoConfig ec;
        ec.group_size = 2;
        ec.local_dim = 4;
        ec.sink_tokens = 1;
        ec.window = 2;
        ec.d_kv = 8;
        Model model = init_model(mc);
        // fresh-init weights leave softmax rows near-uniform, which drives the
        // key-path gradient toward zero and turns the normalized comparison
        // into a noise ratio; amplify the projections so every path carries
        // a measurable gradient
        for (auto& layer : model.layers) {
            for (auto& x : layer.wq.data) x *= 12.0f;
            for (auto& x : layer.wk.data) x *= 12.0f;
            for (auto& x : layer.wv.data) x *= 6.0f;
        }
        const SeqInstance inst =
            make_instance(model, detail::synth_tokens(6, 3), ec, FeatureMode::combined);
        PredictorBank bank = PredictorBank::random(mc, ec, 7, 0.05f);
        Predictor& p = bank.predictors[0];

        // reconstruction loss: dW against central differences on both maps
        Matrix g_rk, g_rv;
        detail::kv_mse_layer_step(inst, 0, bank, Component::key, &g_rk);
        detail::kv_mse_layer_step(inst, 0, bank, Component::value, &g_rv);
        const double rk = fd_rel_gap(p.w_key, g_rk, [&] {
            return detail::kv_mse_layer_step(inst, 0, bank, Component::key, nullptr);
        });
        const double rv = fd_rel_gap(p.w_value, g_rv, [&] {
            return detail::kv_mse_layer_step(inst, 0, bank, Component::value, nullptr);
        });

        // attention-output loss: dW flows through softmax attention
        Matrix g_ok(p.w_key.rows, p.w_key.cols, 0.0f);
        Matrix g_ov(p.w_value.rows, p.w_value.cols, 0.0f);
        detail::o_mse_layer_step(inst, 0, 1, bank, mc.geometry, 1.0, &g_ok, &g_ov, nullptr);
        auto o_loss = [&] {
            return detail::o_mse_layer_step(inst, 0, 1, bank, mc.geometry, 1.0, nullptr,
                                            nullptr, nullptr);
        };
        const double ok_gap = fd_rel_gap(p.w_key, g_ok, o_loss);
        const double ov_gap = fd_rel_gap(p.w_value, g_ov, o_loss);

        const double worst = std::max(std::max(rk, rv), std::max(ok_gap, ov_gap));
        return std::make_pair(worst < 1e-3,
                              fmt("worst normalized gradient gap %.3g (limit 1e-3)", worst));
    });

    // --- 4: oracle reconstruction is exact ------------------------------------
    run_criterion(4, [] {
        ModelConfig mc; // desk defaults
        Model model = init_model(mc);
        const EchoConfig ec = desk_echo(128);
        double worst = 0.0;
        for (size_t len : {300U, 512U}) {
            TraceBatch trace = prefill(model, detail::synth_tokens(len, 42 + len));
            std::vector<LayerKV> kvs;
            for (const auto& lt : trace.layers) kvs.push_back(lt.kv);
            auto src = std::make_shared<OracleSource>(std::move(kvs));
            KvCache full_cache = KvCache::from_prefill(model, trace, CacheMode::full, ec);
            KvCache echo_cache = KvCache::from_prefill(model, trace, CacheMode::echo, ec, src);
            for (int t : {101, 32, 64, 119}) {
                Matrix lf = decode_step(model, full_cache, t);
                Matrix le = decode_step(model, echo_cache, t);
                worst = std::max(worst, max_abs_diff(lf, le));
            }
        }

        // mode round trip with an exact source must be bit-identical
        TraceBatch trace = prefill(model, detail::synth_tokens(300, 9));
        std::vector<LayerKV> kvs;
        for (const auto& lt : trace.layers) kvs.push_back(lt.kv);
        auto src = std::make_shared<OracleSource>(std::move(kvs));
        KvCache cache = KvCache::from_prefill(model, trace, CacheMode::full, ec, src);
        std::vector<uint64_t> before;
        for (const auto& l : cache.full) {
            before.push_back(checksum(l.k_pre_rope));
            before.push_back(checksum(l.v));
        }
        switch_mode(cache, CacheMode::echo);
        switch_mode(cache, CacheMode::full);
        bool round_trip = cache.mode == CacheMode::full;
        size_t ix = 0;
        for (const auto& l : cache.full) {
            round_trip = round_trip && checksum(l.k_pre_rope) == before[ix++];
            round_trip = round_trip && checksum(l.v) == before[ix++];
        }
        return std::make_pair(worst <= 1e-6 && round_trip,
                              fmt("decode max-abs gap %.3g, round trip %s", worst,
                                  round_trip ? "bit-identical" : "DIFFERS"));
    });

    // shared state for the training criteria: desk model, checked-in corpus
    ModelConfig desk_mc;
    Model desk_model = init_model(desk_mc);
    const EchoConfig train_ec = desk_echo(32);
    TrainConfig tc; // default schedule: 600 + 1000 steps, lr 5e-4, cosine
    const TrainDataset dataset =
        build_dataset(desk_model, load_corpus(corpus_path, tc.max_seq), train_ec, tc);
    const PredictorBank init_bank = PredictorBank::random(desk_mc, train_ec, tc.seed, 0.02f);
    PredictorBank trained = PredictorBank::zeros(desk_mc, train_ec);
    double trained_o_mse = 0.0;

    // --- 5: default schedule halves stage-1 loss, beats both baselines -------
    run_criterion(5, [&] {
        auto [bank1, rep1] = stage1_train(desk_model, dataset, init_bank, tc);
        const double first = rep1.steps.front().loss;
        const double last = tail_mean(rep1, 10);
        auto [bank2, rep2] = stage2_train(desk_model, dataset, std::move(bank1), tc);
        trained = std::move(bank2);
        trained_o_mse = eval_o_mse(desk_model, dataset.held, trained);
        const double zero_o_mse =
            eval_o_mse(desk_model, dataset.held, PredictorBank::zeros(desk_mc, train_ec));
        MeanSource mean_baseline;
        const double mean_o_mse = eval_o_mse(desk_model, dataset.held, mean_baseline);
        const bool ok = last < 0.5 * first && trained_o_mse < zero_o_mse &&
                        trained_o_mse < mean_o_mse;
        return std::make_pair(
            ok, fmt("stage-1 loss %.4g→%.4g, held-out %.4g vs zero %.4g / mean %.4g", first,
                    last, trained_o_mse, zero_o_mse, mean_o_mse));
    });

    // --- 6: stage-1 initialization helps at equal total steps -----------------
    run_criterion(6, [&] {
        TrainConfig flat = tc;
        flat.steps_stage2 = tc.steps_stage1 + tc.steps_stage2; // 1600, same budget
        auto [bank_flat, rep] = stage2_train(desk_model, dataset, init_bank, flat);
        const double flat_o_mse = eval_o_mse(desk_model, dataset.held, bank_flat);
        const bool ok = trained_o_mse <= flat_o_mse;
        return std::make_pair(ok, fmt("held-out: two-stage %.4g vs single-stage %.4g",
                                      trained_o_mse, flat_o_mse));
    });

    // --- 7: probability-matching loss needs >8x working memory ---------------
    run_criterion(7, [&] {
        TrainConfig long_cfg = tc;
        long_cfg.max_seq = 1024;
        const SeqInstance inst = make_instance(desk_model, detail::synth_tokens(1024, 99),
                                               desk_echo(128), FeatureMode::combined);
        PredictorBank bank = PredictorBank::random(desk_mc, desk_echo(128), 3, 0.02f);
        Matrix gk(bank.predictors[0].w_key.rows, bank.predictors[0].w_key.cols, 0.0f);
        Matrix gv(bank.predictors[0].w_value.rows, bank.predictors[0].w_value.cols, 0.0f);
        AllocTracker out_mem, kl_mem;
        detail::o_mse_layer_step(inst, 0, 1, bank, desk_mc.geometry, 1.0, &gk, &gv, &out_mem);
        Matrix gk2(gk.rows, gk.cols, 0.0f);
        detail::qkkl_layer_step(inst, 0, 1, bank, desk_mc.geometry, 1.0, &gk2, &kl_mem);
        const double factor = static_cast<double>(kl_mem.peak) /
                              static_cast<double>(std::max<size_t>(out_mem.peak, 1));
        return std::make_pair(out_mem.peak > 0 && factor > 8.0,
                              fmt("peak aux bytes %zu vs %zu (%.1fx)", kl_mem.peak,
                                  out_mem.peak, factor));
    });

    // --- 8: measured bytes track the closed form within two points -----------
    run_criterion(8, [] {
        const size_t tokens = 4096, n_layers = 8, d_kv = 64;
        std::vector<LayerKV> layers;
        for (size_t l = 0; l < n_layers; ++l)
            layers.push_back({l, Matrix(tokens, d_kv), Matrix(tokens, d_kv)});
        double worst = 0.0;
        for (auto [s, local] : {std::pair<size_t, size_t>{2, 16}, {2, 0}, {4, 16}}) {
            EchoConfig ec;
            ec.group_size = s;
            ec.local_dim = local;
            ec.sink_tokens = 4;
            ec.window = 128;
            ec.d_kv = d_kv;
            const EchoStore store = evict(layers, ec);
            const double measured =
                static_cast<double>(compute_bytes(store).total()) /
                static_cast<double>(full_cache_bytes(n_layers, tokens, d_kv));
            worst = std::max(worst, std::fabs(measured - compute_ratio(ec)));
        }
        return std::make_pair(worst < 0.02,
                              fmt("worst |measured − closed form| = %.4f", worst));
    });

    // --- 9: cap policy — short stays full, long compresses and completes -----
    run_criterion(9, [&] {
        RunConfig rc;
        rc.echo = desk_echo(128);
        rc.finalize();
        rc.bench_lengths = {256, 2048};
        rc.bench_cap_bytes = full_cache_bytes(8, 1024, 64);
        rc.bench_decode_tokens = 8;
        const PredictorBank bank = PredictorBank::zeros(rc.model, rc.echo);
        detail::ensure_dir((work / "bench").string());
        BenchReport rep =
            run_bench(rc, bank, (work / "bench" / "bench_report.jsonl").string(), false);
        const BenchRow& small = rep.rows[0];
        const BenchRow& large = rep.rows[1];
        const bool ok = small.mode == CacheMode::full && !small.oom_simulated &&
                        small.output_mse_vs_full == 0.0 && large.mode == CacheMode::echo &&
                        large.oom_simulated && large.bytes_compressed < large.bytes_full &&
                        large.decode_tokens_per_sec > 0.0 &&
                        std::isfinite(large.output_mse_vs_full);
        return std::make_pair(
            ok, fmt("256 tokens %s (gap %.3g), 2048 tokens %s (ratio %.4f, decode ran)",
                    cache_mode_name(small.mode), small.output_mse_vs_full,
                    cache_mode_name(large.mode), large.achieved_ratio));
    });

    // --- 10: artifact bytes reproduce across consecutive runs ----------------
    run_criterion(10, [&] {
        auto one_run = [&](const std::string& out_dir) {
            RunConfig rc;
            rc.echo = desk_echo(32);
            rc.finalize();
            rc.corpus_path = corpus_path;
            rc.out_dir = out_dir;
            rc.train.steps_stage1 = 25;
            rc.train.steps_stage2 = 15;
            rc.train.max_seq = 96;
            rc.bench_lengths = {128, 256};
            rc.bench_decode_tokens = 4;
            rc.needle_context = 192;
            FixedClock clock;
            TrainOutcome outcome = run_train(rc, StageSelect::both, clock);
            run_eval(rc, BankSelect::checkpoint, outcome.checkpoint_path);
            run_bench(rc, outcome.bank, out_dir + "/bench_report.jsonl", false);
            Model model = init_model(rc.model);
            NeedleReport needle = needle_task(model, rc.echo, nullptr, &outcome.bank,
                                              rc.features, rc.needle_context, rc.model.seed);
            write_needle_report(needle, out_dir + "/needle_report.jsonl");
        };
        const std::string dir_a = (work / "run_a").string();
        const std::string dir_b = (work / "run_b").string();
        one_run(dir_a);
        one_run(dir_b);
        size_t matched = 0;
        const char* files[] = {"train_report.jsonl", "checkpoint.eckv", "eval_report.jsonl",
                               "bench_report.jsonl", "needle_report.jsonl"};
        for (const char* f : files)
            matched += slurp(dir_a + "/" + f) == slurp(dir_b + "/" + f) ? 1 : 0;
        return std::make_pair(matched == 5,
                              fmt("%zu/5 artifact files byte-identical", matched));
    });

    std::printf("acceptance: %d/%d criteria passed\n", g_passed, g_passed + g_failed);
    std::error_code ec_rm;
    fs::remove_all(work, ec_rm);
    return g_failed == 0 ? 0 : 1;
}
