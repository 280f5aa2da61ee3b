#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "conflictheads/error.hpp"
#include "conflictheads/model.hpp"
#include "conflictheads/rng.hpp"
#include "oracle.hpp"

using namespace conflictheads;

namespace {

// 1-layer / 1-head / d_model 2 model with hand-set weights; the expected
// logits below were computed independently (two-pass layer norm, erf GELU,
// scaled dot-product attention) and frozen.
Weights golden_weights() {
    ModelConfig config;
    config.n_layers = 1;
    config.n_heads = 1;
    config.d_model = 2;
    config.d_head = 2;
    config.vocab_size = 4;
    config.max_seq = 3;
    config.n_visual_tokens = 1;

    Weights w;
    w.config = config;
    const ParamLayout layout(config);
    w.params.assign(layout.total, 0.0);
    auto put = [&](std::size_t offset, std::initializer_list<double> values) {
        std::copy(values.begin(), values.end(), w.params.begin() +
                                                    static_cast<std::ptrdiff_t>(offset));
    };
    put(layout.tok_embed, {0.10, -0.20, 0.03, 0.05, -0.07, 0.11, 0.20, 0.08});
    put(layout.pos_embed, {0.01, 0.02, -0.03, 0.04, 0.05, -0.06});
    const auto& l = layout.layers[0];
    put(l.ln1_gamma, {1.1, 0.9});
    put(l.ln1_beta, {0.01, -0.02});
    put(l.w_q, {0.5, -0.3, 0.2, 0.7});
    put(l.b_q, {0.05, -0.05});
    put(l.w_k, {-0.4, 0.6, 0.3, 0.1});
    put(l.b_k, {0.0, 0.02});
    put(l.w_v, {0.8, -0.1, -0.2, 0.4});
    put(l.b_v, {0.03, 0.01});
    put(l.w_o, {0.6, 0.2, -0.5, 0.9});
    put(l.b_o, {-0.01, 0.02});
    put(l.ln2_gamma, {0.95, 1.05});
    put(l.ln2_beta, {0.0, 0.03});
    put(l.w_fc1, {0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1,
                  0.1, 0.4, -0.3, 0.2, 0.5, -0.2, -0.6, 0.3});
    put(l.b_fc1, {0.01, -0.01, 0.02, -0.02, 0.03, -0.03, 0.0, 0.01});
    put(l.w_fc2, {0.2, -0.1, 0.3, 0.2, -0.4, 0.1, 0.1, -0.3,
                  0.5, 0.2, -0.2, 0.4, 0.3, -0.5, 0.1, 0.2});
    put(l.b_fc2, {0.02, -0.01});
    put(layout.lnf_gamma, {1.0, 1.2});
    put(layout.lnf_beta, {-0.05, 0.05});
    put(layout.w_unembed, {0.7, -0.6, 0.5, -0.4, 0.3, 0.8, -0.2, 0.1});
    put(layout.b_unembed, {0.01, 0.02, -0.03, 0.04});
    return w;
}

TokenSequence seq_of(std::vector<TokenId> tokens, int n_visual) {
    TokenSequence s;
    s.tokens = std::move(tokens);
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        s.is_visual.push_back(i < static_cast<std::size_t>(n_visual) ? 1 : 0);
    }
    return s;
}

void check_close(std::span<const double> got, std::span<const double> want, double tol) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(std::abs(got[i] - want[i]) < tol);
    }
}

ModelConfig small_config() {
    ModelConfig config;
    config.n_layers = 2;
    config.n_heads = 2;
    config.d_model = 8;
    config.d_head = 4;
    config.vocab_size = 12;
    config.max_seq = 9;
    config.n_visual_tokens = 4;
    return config;
}

}  // namespace

TEST_CASE("golden forward matches independently computed logits") {
    const Weights w = golden_weights();
    const std::vector<double> base = {-0.3499930544162794, 1.6499681320276351,
                                      -0.8049848831413141, 0.5849893773425451};
    const auto result = forward(w, seq_of({1, 2}, 1));
    check_close(result.logits, base, 1e-12);

    // Last-token replacement of the only head.
    OverridePlan plan;
    plan.ops.push_back({{0, 0}, PositionScope::kLastToken, OverrideAction::kReplace,
                        {0.3, -0.2}});
    const std::vector<double> replaced = {0.3299709488251678, -1.4698667063742994,
                                          0.6749367709724241, -0.4549555687914332};
    check_close(forward(w, seq_of({1, 2}, 1), plan).logits, replaced, 1e-12);

    // Zeroing at all positions, longer sequence.
    OverridePlan zero;
    zero.ops.push_back({{0, 0}, PositionScope::kAllPositions, OverrideAction::kZero, {}});
    const std::vector<double> zeroed = {0.32998772978734225, -1.4699437013772172,
                                        0.674973294243039, -0.45498123379240585};
    check_close(forward(w, seq_of({1, 2, 0}, 1), zero).logits, zeroed, 1e-12);

    const std::vector<double> base3 = {-0.34802715690333275, 1.6409481316741172,
                                       -0.8007061650249017, 0.581982710558039};
    check_close(forward(w, seq_of({1, 2, 0}, 1)).logits, base3, 1e-12);
}

TEST_CASE("forward agrees with the naive oracle on random models") {
    for (std::uint64_t seed : {3u, 17u}) {
        const Weights w = init_weights(small_config(), seed);
        Rng rng(seed + 100);
        std::vector<TokenId> tokens;
        for (int p = 0; p < 9; ++p) {
            tokens.push_back(static_cast<TokenId>(rng.uniform_index(12)));
        }
        const TokenSequence input = seq_of(tokens, 4);
        const auto result = forward(w, input);
        check_close(result.logits, oracle::logits(w, input), 1e-12);

        // Random replacement at one head, both scopes.
        OverridePlan plan;
        std::vector<double> row(4);
        for (double& v : row) v = rng.symmetric(1.0);
        plan.ops.push_back({{1, 0}, PositionScope::kLastToken, OverrideAction::kReplace, row});
        oracle::Splice splice{{1, 0}, false, false, row};
        check_close(forward(w, input, plan).logits, oracle::logits(w, input, {splice}),
                    1e-12);

        std::vector<double> rows(9 * 4);
        for (double& v : rows) v = rng.symmetric(1.0);
        OverridePlan plan_all;
        plan_all.ops.push_back(
            {{0, 1}, PositionScope::kAllPositions, OverrideAction::kReplace, rows});
        oracle::Splice splice_all{{0, 1}, false, true, rows};
        check_close(forward(w, input, plan_all).logits,
                    oracle::logits(w, input, {splice_all}), 1e-12);
    }
}

TEST_CASE("cache rows equal the oracle head activations") {
    const Weights w = init_weights(small_config(), 5);
    const TokenSequence input = seq_of({0, 1, 2, 3, 4, 5, 6}, 4);
    const auto result = forward(w, input);
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 2; ++h) {
            const auto rows = oracle::head_rows(w, input, {l, h});
            for (int p = 0; p < input.length(); ++p) {
                const auto got = result.cache.at({l, h}, p);
                for (int j = 0; j < 4; ++j) {
                    CHECK(std::abs(got[static_cast<std::size_t>(j)] -
                                   rows[static_cast<std::size_t>(p) * 4 +
                                        static_cast<std::size_t>(j)]) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("self-patching every head reproduces the base logits exactly") {
    const Weights w = init_weights(small_config(), 9);
    const TokenSequence input = seq_of({2, 7, 4, 1, 8, 0}, 4);
    const auto base = forward(w, input);

    OverridePlan plan;
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 2; ++h) {
            std::vector<double> rows;
            for (int p = 0; p < input.length(); ++p) {
                const auto row = base.cache.at({l, h}, p);
                rows.insert(rows.end(), row.begin(), row.end());
            }
            plan.ops.push_back(
                {{l, h}, PositionScope::kAllPositions, OverrideAction::kReplace, rows});
        }
    }
    const auto patched = forward(w, input, plan);
    for (std::size_t i = 0; i < base.logits.size(); ++i) {
        CHECK(patched.logits[i] == base.logits[i]);
    }
}

TEST_CASE("overrides land in the cache") {
    const Weights w = init_weights(small_config(), 4);
    const TokenSequence input = seq_of({1, 2, 3, 4, 5}, 4);

    OverridePlan plan;
    plan.ops.push_back({{0, 0}, PositionScope::kAllPositions, OverrideAction::kZero, {}});
    std::vector<double> row = {1.5, -2.5, 0.25, 4.0};
    plan.ops.push_back({{1, 1}, PositionScope::kLastToken, OverrideAction::kReplace, row});

    const auto result = forward(w, input, plan);
    for (int p = 0; p < input.length(); ++p) {
        for (double v : result.cache.at({0, 0}, p)) CHECK(v == 0.0);
    }
    const auto last = result.cache.last_token({1, 1});
    for (int j = 0; j < 4; ++j) CHECK(last[static_cast<std::size_t>(j)] == row[static_cast<std::size_t>(j)]);
}

TEST_CASE("causal masking: extending the sequence leaves prefix activations bitwise equal") {
    const Weights w = init_weights(small_config(), 12);
    const TokenSequence short_in = seq_of({3, 1, 4, 1, 5}, 4);
    const TokenSequence long_in = seq_of({3, 1, 4, 1, 5, 9, 2}, 4);
    const auto short_run = forward(w, short_in);
    const auto long_run = forward(w, long_in);
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 2; ++h) {
            for (int p = 0; p < short_in.length(); ++p) {
                const auto a = short_run.cache.at({l, h}, p);
                const auto b = long_run.cache.at({l, h}, p);
                for (int j = 0; j < 4; ++j) {
                    CHECK(a[static_cast<std::size_t>(j)] == b[static_cast<std::size_t>(j)]);
                }
            }
        }
    }
}

TEST_CASE("forward is pure and deterministic") {
    const Weights w = init_weights(small_config(), 21);
    const std::vector<double> params_before = w.params;
    const TokenSequence input = seq_of({0, 1, 2, 3, 4, 5, 6, 7}, 4);
    const auto a = forward(w, input);
    const auto b = forward(w, input);
    CHECK(a.logits == b.logits);
    CHECK(w.params == params_before);
}

TEST_CASE("generate_answer takes the argmax and breaks ties toward lower ids") {
    ModelConfig config = small_config();
    Weights w;
    w.config = config;
    w.params.assign(ParamLayout(config).total, 0.0);
    const ParamLayout layout(config);
    // All-zero weights: logits equal the unembedding bias.
    double* bias = w.block(layout.b_unembed);
    bias[2] = 1.0;
    bias[5] = 1.0;
    bias[7] = 0.5;
    CHECK(generate_answer(w, seq_of({0, 1, 2, 3, 4}, 4)) == 2);
}

TEST_CASE("checkpoints round-trip exactly") {
    const Weights w = init_weights(small_config(), 33);
    const std::filesystem::path dir =
        std::filesystem::temp_directory_path() / "conflictheads_model_test";
    std::filesystem::remove_all(dir);
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(path, w, "0123456789abcdef");
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.weights.config == w.config);
    CHECK(back.weights.params == w.params);
    CHECK(back.config_hash == "0123456789abcdef");

    // Corrupt the magic.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXXXXX", 8);
    }
    CHECK_THROWS_AS(load_checkpoint(path), InputError);

    // Truncated file.
    const std::string short_path = (dir / "short.ckpt").string();
    save_checkpoint(short_path, w, "0123456789abcdef");
    std::filesystem::resize_file(short_path, 64);
    CHECK_THROWS_AS(load_checkpoint(short_path), InputError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("override plans are validated") {
    const Weights w = init_weights(small_config(), 2);
    const TokenSequence input = seq_of({1, 2, 3, 4, 5}, 4);

    OverridePlan out_of_range;
    out_of_range.ops.push_back({{5, 0}, PositionScope::kLastToken, OverrideAction::kZero, {}});
    CHECK_THROWS_AS(forward(w, input, out_of_range), ConfigError);

    OverridePlan duplicate;
    duplicate.ops.push_back({{0, 0}, PositionScope::kLastToken, OverrideAction::kZero, {}});
    duplicate.ops.push_back({{0, 0}, PositionScope::kAllPositions, OverrideAction::kZero, {}});
    CHECK_THROWS_AS(forward(w, input, duplicate), ConfigError);

    OverridePlan bad_width;
    bad_width.ops.push_back(
        {{0, 0}, PositionScope::kLastToken, OverrideAction::kReplace, {1.0, 2.0}});
    CHECK_THROWS_AS(forward(w, input, bad_width), ConfigError);

    OverridePlan bad_all_width;
    bad_all_width.ops.push_back({{0, 0}, PositionScope::kAllPositions,
                                 OverrideAction::kReplace, std::vector<double>(7, 0.0)});
    CHECK_THROWS_AS(forward(w, input, bad_all_width), ConfigError);
}

TEST_CASE("inputs are validated") {
    const Weights w = init_weights(small_config(), 2);
    CHECK_THROWS_AS(forward(w, TokenSequence{}), InputError);
    CHECK_THROWS_AS(forward(w, seq_of({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 4)), InputError);
    CHECK_THROWS_AS(forward(w, seq_of({0, 99, 1, 2, 3}, 4)), InputError);

    TokenSequence visual_after_text;
    visual_after_text.tokens = {1, 2, 3};
    visual_after_text.is_visual = {1, 0, 1};
    CHECK_THROWS_AS(forward(w, visual_after_text), InputError);

    TokenSequence bad_mask;
    bad_mask.tokens = {1, 2, 3};
    bad_mask.is_visual = {1, 0};
    CHECK_THROWS_AS(forward(w, bad_mask), InputError);
}

TEST_CASE("embed_multimodal lays out visual prefix then text") {
    ModelConfig config = small_config();
    const std::vector<TokenId> scene = {7, 8, 9, 10};
    const std::vector<TokenId> query = {0, 1, 2};
    const TokenSequence seq = embed_multimodal(config, scene, query);
    REQUIRE(seq.length() == 7);
    for (int p = 0; p < 4; ++p) {
        CHECK(seq.tokens[static_cast<std::size_t>(p)] == scene[static_cast<std::size_t>(p)]);
        CHECK(seq.is_visual[static_cast<std::size_t>(p)] == 1);
    }
    for (int p = 4; p < 7; ++p) {
        CHECK(seq.tokens[static_cast<std::size_t>(p)] == query[static_cast<std::size_t>(p - 4)]);
        CHECK(seq.is_visual[static_cast<std::size_t>(p)] == 0);
    }
    const std::vector<TokenId> wrong_scene = {7, 8, 9};
    CHECK_THROWS_AS(embed_multimodal(config, wrong_scene, query), InputError);
}

TEST_CASE("model config is validated") {
    ModelConfig config = small_config();
    config.d_model = 10;  // not divisible into 2 heads of d_head 4
    CHECK_THROWS_AS(config.validate(), ConfigError);
    config = small_config();
    config.n_layers = 0;
    CHECK_THROWS_AS(config.validate(), ConfigError);
    config = small_config();
    config.vocab_size = 0;
    CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("init_weights is deterministic and seed-sensitive") {
    const Weights a = init_weights(small_config(), 7);
    const Weights b = init_weights(small_config(), 7);
    const Weights c = init_weights(small_config(), 8);
    CHECK(a.params == b.params);
    CHECK(a.params != c.params);
}
