#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conflictheads/model.hpp"
#include "conflictheads/patching.hpp"
#include "conflictheads/synthdata.hpp"

namespace conflictheads {

// One of the five evaluation conditions. base carries no heads; random
// carries the seed that drew its head set.
struct AblationCondition {
    enum class Kind { kBase, kDrive, kResist, kJoint, kRandom };

    Kind kind = Kind::kBase;
    std::vector<HeadId> head_set;
    std::optional<std::uint64_t> seed;

    void validate(const ModelConfig& config) const;
};

const char* to_string(AblationCondition::Kind kind);

AblationCondition base_condition();
AblationCondition drive_condition(const HeadGroups& groups);
AblationCondition resist_condition(const HeadGroups& groups);
// Equal-size top-k subsets from both polarities.
AblationCondition joint_condition(const HeadGroups& groups);
// Uniform distinct heads, size-matched to the set it controls for.
AblationCondition random_condition(const ModelConfig& config, std::size_t size,
                                   std::uint64_t seed);

// Lasso logistic probe over the resisting-head feature. Weights act on
// standardized features; the standardization statistics travel with the
// probe so inference is self-contained. tau is set by threshold selection.
struct ProbeModel {
    std::vector<double> weights;
    double bias = 0.0;
    double lambda = 0.0;
    std::optional<double> tau;
    std::vector<double> feature_mean;
    std::vector<double> feature_std;
    HeadGroups groups;  // the groups the probe was trained against
    std::string config_hash = "0000000000000000";

    void validate() const;
};

// Greedy answer with the listed heads zero-ablated at every position.
TokenId ablate_generate(const Weights& weights, const TokenSequence& input,
                        std::span<const HeadId> head_set);

// Mean last-token activation of the resisting heads. The head list is a set:
// duplicates are rejected.
std::vector<double> resisting_feature(const ActivationCache& cache,
                                      std::span<const HeadId> resisting);

double sigmoid(double z);

// Probability the probe assigns to "conflict" for a raw (unstandardized)
// feature vector.
double probe_score(const ProbeModel& probe, std::span<const double> raw_feature);

// L1-regularized logistic objective the trainer minimizes, for a probe in
// standardized space: mean logistic loss + lambda * ||w||_1.
double probe_objective(std::span<const double> w, double bias,
                       const std::vector<std::vector<double>>& standardized_features,
                       std::span<const int> labels, double lambda);

// Cyclic coordinate descent with soft-thresholding on the 1/4-curvature
// quadratic majorization; stops when a full pass improves the objective by
// less than 1e-8, or after 10,000 passes. Labels: conflict = 1, clean = 0.
ProbeModel train_probe(const std::vector<std::vector<double>>& features,
                       std::span<const int> labels, double lambda);

// Rank-based AUROC, ties counted half.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct ThresholdChoice {
    double tau = 0.5;
    double f1 = 0.0;
};

// Maximizes F1 of (score >= tau -> conflict) over candidate thresholds: the
// midpoints of adjacent sorted unique scores plus {0, 1}; ties break toward
// the higher tau.
ThresholdChoice select_threshold(const ProbeModel& probe,
                                 const std::vector<std::vector<double>>& features,
                                 std::span<const int> labels);

struct MaciOutput {
    TokenId answer = 0;
    bool fired = false;
    double score = 0.0;
};

// One prefill pass scores the resisting-head feature; at or above tau the
// answer is regenerated with the driving heads zero-ablated. Resisting heads
// are never ablated.
MaciOutput maci_generate(const Weights& weights, const TokenSequence& input,
                         const ProbeModel& probe, const HeadGroups& groups);

// Probe-training rows for the given sample ids (sorted ascending): for each
// sample, the clean input (label 0) then the conflict input (label 1).
// Rejects test-tagged samples.
struct ProbeData {
    std::vector<std::vector<double>> features;
    std::vector<int> labels;
};

ProbeData collect_probe_data(const Weights& weights, const Dataset& data,
                             std::span<const std::uint64_t> ids,
                             std::span<const HeadId> resisting);

// Trains one probe per lambda and keeps the one with the best validation
// AUROC; ties prefer the larger lambda (sparser probe).
ProbeModel train_probe_on_grid(const ProbeData& train, const ProbeData& validation,
                               std::span<const double> lambda_grid);

// Probe file: one JSON object holding weights, bias, lambda, tau,
// standardization statistics, head groups, and the config hash.
void save_probe(const std::string& path, const ProbeModel& probe);
ProbeModel load_probe(const std::string& path);

}  // namespace conflictheads
