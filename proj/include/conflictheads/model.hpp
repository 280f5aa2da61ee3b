#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conflictheads/error.hpp"

namespace conflictheads {

using TokenId = std::int32_t;

// Decoder-only pre-norm transformer over a multimodal token sequence:
// learned visual-slot embeddings followed by text tokens, causal attention
// across the whole sequence. All math is in 64-bit floats.
struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int d_head = 16;
    int vocab_size = 33;
    int max_seq = 20;
    int n_visual_tokens = 12;

    int d_ff() const { return 4 * d_model; }
    int total_heads() const { return n_layers * n_heads; }

    void validate() const;
    // Canonical key=value line used for hashing and checkpoint headers.
    std::string canonical_string() const;

    bool operator==(const ModelConfig&) const = default;
};

// Address of one attention head. (layer, head) order is canonical.
struct HeadId {
    int layer = 0;
    int head = 0;

    auto operator<=>(const HeadId&) const = default;
};

std::string to_string(HeadId id);

// Tokens with a per-position modality flag. Visual positions always precede
// text positions.
struct TokenSequence {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> is_visual;  // 1 = visual slot, 0 = text

    int length() const { return static_cast<int>(tokens.size()); }
};

// Builds the (scene, query) pairing: visual tokens first, then text.
TokenSequence embed_multimodal(const ModelConfig& config,
                               std::span<const TokenId> scene_tokens,
                               std::span<const TokenId> query_tokens);

enum class PositionScope { kLastToken, kAllPositions };

enum class OverrideAction { kReplace, kZero };

// One per-head activation override. For kReplace the payload holds d_head
// values (kLastToken) or seq_len * d_head values (kAllPositions, row per
// position). kZero needs no payload.
struct OverrideOp {
    HeadId head;
    PositionScope scope = PositionScope::kLastToken;
    OverrideAction action = OverrideAction::kReplace;
    std::vector<double> values;
};

struct OverridePlan {
    std::vector<OverrideOp> ops;

    bool empty() const { return ops.empty(); }
};

// Per-head, per-position head outputs captured during a forward pass. The
// stored value is the attention-weighted value vector of each head before
// the output projection mixes heads; an overridden head stores the injected
// value. Immutable once returned from forward().
class ActivationCache {
public:
    ActivationCache() = default;
    ActivationCache(const ModelConfig& config, int seq_len);

    std::span<const double> at(HeadId id, int position) const;
    std::span<const double> last_token(HeadId id) const { return at(id, seq_len_ - 1); }

    int seq_len() const { return seq_len_; }
    int n_entries() const { return n_layers_ * n_heads_; }
    int d_head() const { return d_head_; }

    // Writable view for the forward pass; treated as read-only everywhere else.
    std::span<double> mutable_row(HeadId id, int position);

private:
    void check_head(HeadId id) const;

    int n_layers_ = 0;
    int n_heads_ = 0;
    int d_head_ = 0;
    int seq_len_ = 0;
    std::vector<double> data_;  // [layer][head][position][d_head]
};

// Flat parameter offsets in declared checkpoint order.
struct ParamLayout {
    explicit ParamLayout(const ModelConfig& config);

    struct LayerOffsets {
        std::size_t ln1_gamma, ln1_beta;
        std::size_t w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
        std::size_t ln2_gamma, ln2_beta;
        std::size_t w_fc1, b_fc1, w_fc2, b_fc2;
    };

    std::size_t tok_embed = 0;
    std::size_t pos_embed = 0;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_gamma = 0;
    std::size_t lnf_beta = 0;
    std::size_t w_unembed = 0;
    std::size_t b_unembed = 0;
    std::size_t total = 0;
};

struct Weights {
    ModelConfig config;
    std::vector<double> params;

    // Offsets are cheap to recompute; callers that loop build one ParamLayout
    // up front and reuse it.
    ParamLayout layout() const { return ParamLayout(config); }

    double* block(std::size_t offset) { return params.data() + offset; }
    const double* block(std::size_t offset) const { return params.data() + offset; }
};

// Deterministic initialization from a 64-bit seed: uniform Glorot for the
// projection matrices, small uniform for embeddings, zeros for biases,
// identity layer norms.
Weights init_weights(const ModelConfig& config, std::uint64_t seed);

struct ForwardResult {
    std::vector<double> logits;  // unnormalized next-token scores, last position
    ActivationCache cache;
};

// Pure function of (weights, input, plan). The cache reflects post-override
// head outputs.
ForwardResult forward(const Weights& weights, const TokenSequence& input,
                      const OverridePlan& plan = {});

// Greedy next-token answer from the last position; lowest token id wins ties.
TokenId generate_answer(const Weights& weights, const TokenSequence& input,
                        const OverridePlan& plan = {});

// --- Checkpoint file (binary, little-endian) ---------------------------------
// magic "CHCKPT01" | u32 format_version | 7 x i32 config fields
// | 16-byte config-hash hex string | u64 param count | raw f64 parameters in
// ParamLayout order.
void save_checkpoint(const std::string& path, const Weights& weights,
                     const std::string& config_hash);

struct Checkpoint {
    Weights weights;
    std::string config_hash;
};

Checkpoint load_checkpoint(const std::string& path);

namespace detail {

// Everything the backward pass needs from one forward evaluation.
struct ForwardTrace {
    int seq_len = 0;
    std::vector<double> h0;                      // [seq][d_model] embeddings
    std::vector<std::vector<double>> xhat1;      // per layer [seq][d_model]
    std::vector<std::vector<double>> rstd1;      // per layer [seq]
    std::vector<std::vector<double>> q, k, v;    // per layer [seq][d_model]
    std::vector<std::vector<double>> att;        // per layer [head][seq][seq] flattened
    std::vector<std::vector<double>> z;          // per layer [seq][d_model] head-concat
    std::vector<std::vector<double>> h_mid;      // per layer [seq][d_model]
    std::vector<std::vector<double>> xhat2;      // per layer [seq][d_model]
    std::vector<std::vector<double>> rstd2;      // per layer [seq]
    std::vector<std::vector<double>> fc1_pre;    // per layer [seq][d_ff]
    std::vector<std::vector<double>> fc1_act;    // per layer [seq][d_ff]
    std::vector<std::vector<double>> h_out;      // per layer [seq][d_model]
    std::vector<double> xhatf;                   // [d_model] last position
    double rstdf = 0.0;
    std::vector<double> logits;                  // [vocab]
};

// Shared implementation: runs the forward pass, optionally filling a cache
// and/or a trace. Used by forward(), the trainer, and generate_answer().
void forward_impl(const Weights& weights, const TokenSequence& input,
                  const OverridePlan& plan, ActivationCache* cache,
                  ForwardTrace* trace, std::vector<double>* logits_out);

void validate_plan(const ModelConfig& config, const OverridePlan& plan, int seq_len);

}  // namespace detail

}  // namespace conflictheads
