#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "conflictheads/model.hpp"
#include "conflictheads/synthdata.hpp"

namespace conflictheads {

// Paired clean/conflict runs for one sample plus its two candidate answers.
struct PatchSample {
    TokenSequence clean;     // donor run
    TokenSequence conflict;  // recipient run
    TokenId y_h = 0;
    TokenId y_f = 0;
};

PatchSample make_patch_sample(const ModelConfig& config, const TaskSpec& task,
                              const ConflictSample& sample);

// Mean per-head importance over a prototype set: positive scores drive the
// hallucinated answer, negative scores resist it.
struct ImportanceMap {
    std::map<HeadId, double> scores;
    int n_samples = 0;
    PositionScope scope = PositionScope::kAllPositions;
    std::string config_hash = "0000000000000000";

    void validate(const ModelConfig& config) const;
};

struct HeadGroups {
    std::vector<HeadId> driving;    // descending score
    std::vector<HeadId> resisting;  // descending |score|
    std::vector<double> driving_scores;
    std::vector<double> resisting_scores;
    int k_plus = 0;
    int k_minus = 0;
    std::string config_hash = "0000000000000000";

    void validate() const;
};

struct AsymmetryStats {
    double aggregate_ratio = 0.0;      // sum of positives / sum of |negatives|
    double top_share_driving = 0.0;    // |score| mass of the top_n positive heads
    double top_share_resisting = 0.0;  // |score| mass of the top_n negative heads
};

// log p(y_h) - log p(y_f); the softmax normalizer cancels so this is the raw
// logit difference, computed exactly.
double hallucination_advantage(std::span<const double> logits, TokenId y_h, TokenId y_f);

// Builds a replacement plan that injects the donor cache's values for the
// given heads, and a zero-ablation plan over all positions.
OverridePlan replace_plan(const ActivationCache& donor, std::span<const HeadId> heads,
                          PositionScope scope);
OverridePlan zero_plan(std::span<const HeadId> heads);

// Advantage of the conflict run with head's activation replaced by its
// clean-run value.
double patched_advantage(const Weights& weights, const PatchSample& sample, HeadId head,
                         PositionScope scope);

// Mean over the prototype samples of [advantage(conflict) - advantage(patched
// conflict)], accumulated in ascending sample-id order. Rejects test-tagged
// samples (head identification never sees test data).
ImportanceMap head_importance(const Weights& weights, const Dataset& data,
                              std::span<const std::uint64_t> proto_ids,
                              PositionScope scope);

// Top-k_plus positive heads by score and top-k_minus negative heads by
// magnitude; ties break toward canonical (layer, head) order.
HeadGroups select_groups(const ImportanceMap& imp, int k_plus, int k_minus);

AsymmetryStats asymmetry_stats(const ImportanceMap& imp, int top_n);

// Importance-map file: `#` header lines (kind, config_hash, scope) then CSV
// rows layer,head,score,n_samples.
void save_importance(const std::string& path, const ImportanceMap& imp);
ImportanceMap load_importance(const std::string& path);

// Head-groups file: `#` header lines (kind, config_hash, k_plus, k_minus)
// then CSV rows polarity,rank,layer,head,score.
void save_groups(const std::string& path, const HeadGroups& groups);
HeadGroups load_groups(const std::string& path);

}  // namespace conflictheads
