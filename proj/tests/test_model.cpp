// Toy-transformer checks: deterministic initialisation, trace contents,
// causal prefix stability, pre-rotary key caching, decode/prefill agreement
// in both cache modes, and byte-level corpus handling.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "echokv/cache.hpp"
#include "echokv/corpus.hpp"
#include "echokv/model.hpp"

using namespace echokv;

namespace {

ModelConfig small_config(uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.geometry = AttentionGeometry{4, 2, 8};
    cfg.d_model = 32;
    cfg.vocab = 256;
    cfg.seed = seed;
    return cfg;
}

EchoConfig small_echo(const ModelConfig& cfg) {
    EchoConfig ec;
    ec.group_size = 2;
    ec.local_dim = 8;
    ec.sink_tokens = 2;
    ec.window = 4;
    ec.d_kv = cfg.d_kv();
    return ec;
}

std::vector<int> toy_tokens(size_t n) {
    std::vector<int> t(n);
    for (size_t i = 0; i < n; ++i) t[i] = static_cast<int>(32 + (i * 13 + 7) % 90);
    return t;
}

} // namespace

TEST_CASE("initialisation is deterministic in the seed", "[model]") {
    Model a = init_model(small_config(42));
    Model b = init_model(small_config(42));
    Model c = init_model(small_config(43));
    REQUIRE(a.weight_checksum() == b.weight_checksum());
    REQUIRE(a.weight_checksum() != c.weight_checksum());
    REQUIRE(a.layers.size() == 2);
    REQUIRE(a.embedding.rows == 256);
    REQUIRE(a.embedding.cols == 32);
}

TEST_CASE("initial weights have the expected scale", "[model]") {
    Model m = init_model(small_config(7));
    double sum = 0.0, sq = 0.0;
    const size_t n = m.embedding.data.size();
    for (float x : m.embedding.data) {
        sum += x;
        sq += static_cast<double>(x) * x;
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sq / static_cast<double>(n) - mean * mean;
    const double sigma_mean = 0.02 / std::sqrt(static_cast<double>(n));
    REQUIRE(std::fabs(mean) < 4.0 * sigma_mean);               // ±4σ of the sample mean
    REQUIRE(std::sqrt(var) == Catch::Approx(0.02).epsilon(0.05));
}

TEST_CASE("configuration validation rejects inconsistent geometry", "[model]") {
    ModelConfig cfg = small_config();
    cfg.d_model = 33;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.n_layers = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.geometry.n_q_heads = 3; // not a multiple of n_kv_heads=2
    REQUIRE_THROWS_AS(init_model(cfg), Error);
}

TEST_CASE("prefill records the full per-layer trace", "[model]") {
    Model m = init_model(small_config());
    auto tokens = toy_tokens(10);
    TraceBatch trace = prefill(m, tokens);
    REQUIRE(trace.tokens == tokens);
    REQUIRE(trace.layers.size() == 2);
    REQUIRE(trace.logits.rows == 10);
    REQUIRE(trace.logits.cols == 256);
    for (size_t li = 0; li < 2; ++li) {
        const LayerTrace& lt = trace.layers[li];
        REQUIRE(lt.kv.layer == li);
        REQUIRE(lt.kv.k_pre_rope.rows == 10);
        REQUIRE(lt.kv.k_pre_rope.cols == 16); // n_kv_heads * d_head
        REQUIRE(lt.kv.v.same_shape(lt.kv.k_pre_rope));
        REQUIRE(lt.q_post_rope.rows == 10);
        REQUIRE(lt.q_post_rope.cols == 32); // n_q_heads * d_head
        REQUIRE(lt.attn_out.same_shape(lt.q_post_rope));
        REQUIRE(all_finite(lt.attn_out));
    }
}

TEST_CASE("prefill of a prefix reproduces the first rows bitwise", "[model]") {
    Model m = init_model(small_config());
    auto tokens = toy_tokens(12);
    TraceBatch whole = prefill(m, tokens);
    std::vector<int> head(tokens.begin(), tokens.begin() + 5);
    TraceBatch part = prefill(m, head);
    for (size_t r = 0; r < 5; ++r)
        for (size_t c = 0; c < whole.logits.cols; ++c)
            REQUIRE(part.logits.at(r, c) == whole.logits.at(r, c));
    for (size_t r = 0; r < 5; ++r)
        for (size_t c = 0; c < 16; ++c)
            REQUIRE(part.layers[1].kv.k_pre_rope.at(r, c) ==
                    whole.layers[1].kv.k_pre_rope.at(r, c));
}

TEST_CASE("cached keys are position-independent before rotation", "[model]") {
    // the same token appears at positions 1 and 6; its first-layer key row is
    // computed from the embedding alone, so the cached (pre-rotary) rows match
    Model m = init_model(small_config());
    std::vector<int> tokens{40, 77, 41, 42, 43, 44, 77, 45};
    TraceBatch trace = prefill(m, tokens);
    const Matrix& k0 = trace.layers[0].kv.k_pre_rope;
    for (size_t c = 0; c < k0.cols; ++c) REQUIRE(k0.at(1, c) == k0.at(6, c));
    // queries are stored after rotation, so the same rows differ there
    const Matrix& q0 = trace.layers[0].q_post_rope;
    bool differs = false;
    for (size_t c = 0; c < q0.cols; ++c)
        if (q0.at(1, c) != q0.at(6, c)) differs = true;
    REQUIRE(differs);
}

TEST_CASE("prefill rejects bad inputs", "[model]") {
    Model m = init_model(small_config());
    REQUIRE_THROWS_AS(prefill(m, {}), InputError);
    REQUIRE_THROWS_AS(prefill(m, {0, 300}), InputError);
    REQUIRE_THROWS_AS(prefill(m, {-1}), InputError);
}

TEST_CASE("decode against a full cache matches prefill bitwise", "[cache]") {
    Model m = init_model(small_config());
    auto tokens = toy_tokens(9);
    TraceBatch whole = prefill(m, tokens);

    std::vector<int> prefix(tokens.begin(), tokens.begin() + 4);
    TraceBatch head = prefill(m, prefix);
    KvCache cache = KvCache::from_prefill(m, head, CacheMode::full, small_echo(m.cfg));
    Matrix logits;
    for (size_t i = 4; i < tokens.size(); ++i) logits = decode_step(m, cache, tokens[i]);

    REQUIRE(cache.tokens == tokens.size());
    for (size_t c = 0; c < logits.cols; ++c)
        REQUIRE(logits.at(0, c) == whole.logits.at(whole.logits.rows - 1, c));
}

TEST_CASE("echo-mode decode with an exact source matches full mode bitwise", "[cache]") {
    Model m = init_model(small_config());
    auto tokens = toy_tokens(14);
    std::vector<int> prefix(tokens.begin(), tokens.begin() + 10);
    TraceBatch head = prefill(m, prefix);
    const EchoConfig ec = small_echo(m.cfg);

    KvCache full_cache = KvCache::from_prefill(m, head, CacheMode::full, ec);
    std::vector<LayerKV> truth;
    for (const auto& lt : head.layers) truth.push_back(lt.kv);
    auto oracle_src = std::make_shared<OracleSource>(std::move(truth));
    KvCache echo_cache = KvCache::from_prefill(m, head, CacheMode::echo, ec, oracle_src);

    REQUIRE(echo_cache.stored_bytes() < full_cache.stored_bytes());

    for (size_t i = 10; i < tokens.size(); ++i) {
        Matrix lf = decode_step(m, full_cache, tokens[i]);
        Matrix le = decode_step(m, echo_cache, tokens[i]);
        REQUIRE(checksum(lf) == checksum(le));
    }
}

TEST_CASE("mode switching preserves decode state through an exact source", "[cache]") {
    Model m = init_model(small_config());
    auto tokens = toy_tokens(12);
    TraceBatch head = prefill(m, {tokens.begin(), tokens.begin() + 8});
    std::vector<LayerKV> truth;
    for (const auto& lt : head.layers) truth.push_back(lt.kv);
    auto src = std::make_shared<OracleSource>(std::move(truth));

    KvCache cache = KvCache::from_prefill(m, head, CacheMode::full, small_echo(m.cfg), src);
    KvCache reference = cache;

    switch_mode(cache, CacheMode::echo);
    REQUIRE(cache.mode == CacheMode::echo);
    switch_mode(cache, CacheMode::full);
    REQUIRE(cache.mode == CacheMode::full);
    for (size_t li = 0; li < m.cfg.n_layers; ++li) {
        REQUIRE(cache.full[li].k_pre_rope == reference.full[li].k_pre_rope);
        REQUIRE(cache.full[li].v == reference.full[li].v);
    }
    // decode still agrees after the round trip
    Matrix a = decode_step(m, cache, tokens[8]);
    Matrix b = decode_step(m, reference, tokens[8]);
    REQUIRE(checksum(a) == checksum(b));
}

TEST_CASE("decode rejects geometry and vocabulary mismatches", "[cache]") {
    Model m = init_model(small_config());
    TraceBatch head = prefill(m, toy_tokens(6));
    KvCache cache = KvCache::from_prefill(m, head, CacheMode::full, small_echo(m.cfg));
    REQUIRE_THROWS_AS(decode_step(m, cache, 999), InputError);
    ModelConfig other_cfg = small_config();
    other_cfg.n_layers = 4;
    Model other = init_model(other_cfg);
    REQUIRE_THROWS_AS(decode_step(other, cache, 5), ConfigError);
}

TEST_CASE("cache mode selection follows the byte cap", "[cache]") {
    // full cache bytes grow linearly in tokens; the cap decides the mode
    const size_t n_layers = 8, d_kv = 64;
    const size_t bytes_1000 = full_cache_bytes(n_layers, 1000, d_kv);
    REQUIRE(choose_mode(1000, 0, n_layers, d_kv) == CacheMode::full); // no cap
    REQUIRE(choose_mode(1000, bytes_1000, n_layers, d_kv) == CacheMode::full);
    REQUIRE(choose_mode(1000, bytes_1000 - 1, n_layers, d_kv) == CacheMode::echo);
    REQUIRE(choose_mode(2000, bytes_1000, n_layers, d_kv) == CacheMode::echo);
}

TEST_CASE("byte-level tokenizer round-trips text", "[corpus]") {
    const std::string text = "The quick brown fox, 123 + 456!";
    auto ids = tokenize(text);
    REQUIRE(ids.size() == text.size());
    REQUIRE(ids[0] == 'T');
    REQUIRE(detokenize(ids) == text);
}

TEST_CASE("corpus loading skips blanks, strips CR and truncates", "[corpus]") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "echokv_corpus_test.txt";
    {
        std::ofstream out(path);
        out << "first line\n\nsecond line with more text\r\nthird\n";
    }
    auto lines = load_corpus(path.string());
    REQUIRE(lines.size() == 3);
    REQUIRE(detokenize(lines[0]) == "first line");
    REQUIRE(detokenize(lines[1]) == "second line with more text"); // CR stripped
    REQUIRE(detokenize(lines[2]) == "third");

    auto clipped = load_corpus(path.string(), 6);
    REQUIRE(clipped[1].size() == 6);
    REQUIRE(detokenize(clipped[1]) == "second");

    std::remove(path.string().c_str());
    REQUIRE_THROWS_AS(load_corpus(path.string()), IoError);

    const fs::path empty_path = fs::temp_directory_path() / "echokv_corpus_empty.txt";
    { std::ofstream out(empty_path); out << "\n\n"; }
    REQUIRE_THROWS_AS(load_corpus(empty_path.string()), InputError);
    std::remove(empty_path.string().c_str());
}
