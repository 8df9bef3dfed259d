// Command-line surface: ratio arithmetic, predictor training, fidelity
// evaluation, length benchmarks, needle retrieval stress, and artifact export.
// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
// failure.

#include <cstdio>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "echokv/checkpoint.hpp"
#include "echokv/harness.hpp"

namespace {

using namespace echokv;

struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "run configuration file");
    cmd->add_option("--seed", flags.seed, "override model and train seeds")
        ->each([&flags](const std::string&) { flags.seed_set = true; });
    cmd->add_option("--out", flags.out_dir, "output directory");
}

RunConfig make_run_config(const CommonFlags& flags, bool config_required = true) {
    RunConfig rc;
    if (!flags.config_path.empty()) {
        rc = load_config(flags.config_path);
    } else if (config_required) {
        throw ConfigError("this subcommand needs --config");
    } else {
        rc.finalize();
    }
    if (flags.seed_set) {
        rc.model.seed = flags.seed;
        rc.train.seed = flags.seed;
        rc.finalize();
    }
    if (!flags.out_dir.empty()) rc.out_dir = flags.out_dir;
    return rc;
}

int cmd_ratio(uint64_t d_kv, uint64_t n_layers, uint64_t s, uint64_t local) {
    if (s == 0) throw ConfigError("ratio: --s must be >= 1");
    if (n_layers % s != 0) throw ConfigError("ratio: --layers must be divisible by --s");
    if (local >= d_kv) throw ConfigError("ratio: --local must be < --dkv");
    std::printf("ratio %.9f\n", compute_ratio(d_kv, s, local));
    std::printf("input_dim %llu\n", static_cast<unsigned long long>(d_kv + local));
    std::printf("output_dim %llu\n", static_cast<unsigned long long>(d_kv - local));
    std::printf("params %llu\n", static_cast<unsigned long long>(
                                     predictor_param_count(n_layers, d_kv, s, local)));
    return 0;
}

StageSelect parse_stage(const std::string& s) {
    if (s == "1") return StageSelect::stage1;
    if (s == "2") return StageSelect::stage2;
    if (s == "both") return StageSelect::both;
    throw ConfigError("train: --stage must be 1, 2 or both");
}

BankSelect parse_bank(const std::string& s) {
    if (s == "zero") return BankSelect::zero;
    if (s == "oracle") return BankSelect::oracle;
    if (s == "checkpoint") return BankSelect::checkpoint;
    throw ConfigError("--bank must be zero, oracle or checkpoint");
}

PredictorBank bench_bank(const RunConfig& rc, const std::string& checkpoint) {
    if (checkpoint.empty()) return PredictorBank::zeros(rc.model, rc.echo);
    const BankGeometry expect = make_geometry(rc.model, rc.echo);
    return load_bank(checkpoint, &expect);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache compression workbench"};
    app.require_subcommand(1);

    // ratio
    auto* ratio = app.add_subcommand("ratio", "compression ratio and predictor dimensions");
    uint64_t r_dkv = 1024, r_layers = 32, r_s = 2, r_local = 0;
    ratio->add_option("--dkv", r_dkv, "KV width (n_kv_heads*d_head)");
    ratio->add_option("--layers", r_layers, "layer count");
    ratio->add_option("--s", r_s, "group size");
    ratio->add_option("--local", r_local, "retained local width");

    // train
    auto* train = app.add_subcommand("train", "two-stage predictor training");
    CommonFlags train_flags;
    add_common(train, train_flags);
    std::string train_stage = "both";
    long long train_steps = -1;
    bool train_wall = false;
    train->add_option("--stage", train_stage, "1, 2 or both");
    train->add_option("--steps", train_steps, "step override for the selected single stage");
    train->add_flag("--wall-clock", train_wall,
                    "real timings in reports (breaks byte-reproducibility)");

    // eval
    auto* eval = app.add_subcommand("eval", "held-out fidelity report");
    CommonFlags eval_flags;
    add_common(eval, eval_flags);
    std::string eval_checkpoint, eval_bank = "";
    eval->add_option("--checkpoint", eval_checkpoint, "predictor checkpoint (.eckv)");
    eval->add_option("--bank", eval_bank, "zero, oracle or checkpoint");

    // bench
    auto* bench = app.add_subcommand("bench", "bytes/throughput/fidelity across lengths");
    CommonFlags bench_flags;
    add_common(bench, bench_flags);
    std::string bench_checkpoint;
    uint64_t bench_cap = 0;
    bool bench_cap_set = false, bench_wall = false;
    bench->add_option("--checkpoint", bench_checkpoint, "predictor checkpoint (.eckv)");
    bench->add_option("--cap", bench_cap, "simulated memory cap in bytes")
        ->each([&bench_cap_set](const std::string&) { bench_cap_set = true; });
    bench->add_flag("--wall-clock", bench_wall,
                    "real timings in reports (breaks byte-reproducibility)");

    // needle
    auto* needle = app.add_subcommand("needle", "synthetic retrieval agreement across depths");
    CommonFlags needle_flags;
    add_common(needle, needle_flags);
    std::string needle_checkpoint, needle_bank = "";
    uint64_t needle_context = 0;
    needle->add_option("--checkpoint", needle_checkpoint, "predictor checkpoint (.eckv)");
    needle->add_option("--bank", needle_bank, "zero, oracle or checkpoint");
    needle->add_option("--context", needle_context, "haystack length in tokens");

    // export
    auto* exp = app.add_subcommand("export", "channel-score sidecar and checkpoint summary");
    CommonFlags exp_flags;
    add_common(exp, exp_flags);
    std::string exp_checkpoint;
    exp->add_option("--checkpoint", exp_checkpoint, "predictor checkpoint to summarize");

    try {
        app.parse(argc, argv);

        if (ratio->parsed()) return cmd_ratio(r_dkv, r_layers, r_s, r_local);

        if (train->parsed()) {
            RunConfig rc = make_run_config(train_flags);
            const StageSelect sel = parse_stage(train_stage);
            if (train_steps >= 0) {
                if (sel == StageSelect::both)
                    throw ConfigError("train: --steps needs --stage 1 or --stage 2");
                if (sel == StageSelect::stage1)
                    rc.train.steps_stage1 = static_cast<size_t>(train_steps);
                else
                    rc.train.steps_stage2 = static_cast<size_t>(train_steps);
            }
            std::unique_ptr<Clock> clock =
                train_wall ? std::unique_ptr<Clock>(new WallClock())
                           : std::unique_ptr<Clock>(new FixedClock());
            TrainOutcome out = run_train(rc, sel, *clock);
            std::fprintf(stderr, "wrote %s (stage1 %.1f ms, stage2 %.1f ms)\n",
                         out.checkpoint_path.c_str(), out.stage1.wall_ms, out.stage2.wall_ms);
            return 0;
        }

        if (eval->parsed()) {
            RunConfig rc = make_run_config(eval_flags);
            BankSelect sel = eval_bank.empty()
                                 ? (eval_checkpoint.empty() ? BankSelect::zero
                                                            : BankSelect::checkpoint)
                                 : parse_bank(eval_bank);
            if (sel == BankSelect::checkpoint && eval_checkpoint.empty())
                throw ConfigError("eval: --bank checkpoint needs --checkpoint");
            EvalResult res = run_eval(rc, sel, eval_checkpoint);
            std::fprintf(stderr, "logit_mse %.6g, argmax_agreement %.4f\n", res.logit_mse,
                         res.argmax_agreement);
            return 0;
        }

        if (bench->parsed()) {
            RunConfig rc = make_run_config(bench_flags);
            if (bench_cap_set) rc.bench_cap_bytes = bench_cap;
            PredictorBank bank = bench_bank(rc, bench_checkpoint);
            detail::ensure_dir(rc.out_dir);
            run_bench(rc, bank, rc.out_dir + "/bench_report.jsonl", bench_wall);
            return 0;
        }

        if (needle->parsed()) {
            RunConfig rc = make_run_config(needle_flags);
            if (needle_context > 0) rc.needle_context = needle_context;
            BankSelect sel = needle_bank.empty()
                                 ? (needle_checkpoint.empty() ? BankSelect::zero
                                                              : BankSelect::checkpoint)
                                 : parse_bank(needle_bank);
            Model model = init_model(rc.model);
            PredictorBank bank = PredictorBank::zeros(rc.model, rc.echo);
            if (sel == BankSelect::checkpoint) {
                if (needle_checkpoint.empty())
                    throw ConfigError("needle: --bank checkpoint needs --checkpoint");
                const BankGeometry expect = make_geometry(rc.model, rc.echo);
                bank = load_bank(needle_checkpoint, &expect);
            }
            SourceFactory factory;
            if (sel == BankSelect::oracle)
                factory = [](const TraceBatch& trace) -> std::shared_ptr<DropSource> {
                    std::vector<LayerKV> kvs;
                    for (const auto& lt : trace.layers) kvs.push_back(lt.kv);
                    return std::make_shared<OracleSource>(std::move(kvs));
                };
            NeedleReport report = needle_task(model, rc.echo, factory, &bank, rc.features,
                                              rc.needle_context, rc.model.seed);
            detail::ensure_dir(rc.out_dir);
            write_needle_report(report, rc.out_dir + "/needle_report.jsonl");
            std::fprintf(stderr, "mean_agreement %.4f\n", report.mean_agreement);
            return 0;
        }

        if (exp->parsed()) {
            RunConfig rc = make_run_config(exp_flags);
            run_export(rc, exp_checkpoint);
            return 0;
        }
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2; // bad flags are configuration errors
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
    return 0;
}
