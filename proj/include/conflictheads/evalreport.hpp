#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conflictheads/intervene.hpp"
#include "conflictheads/model.hpp"
#include "conflictheads/patching.hpp"
#include "conflictheads/synthdata.hpp"

namespace conflictheads {

enum class Verdict { kHallucinated, kFactual, kOther };

const char* to_string(Verdict verdict);
int verdict_label(Verdict verdict);  // stable integer encoding for agreement stats

// Exact token-identity judge: hallucinated iff the answer is the
// premise-implied token, factual iff it is the scene answer.
Verdict judge(TokenId answer, TokenId y_h, TokenId y_f);

struct JudgedOutcome {
    std::uint64_t sample_id = 0;
    std::string condition;
    TokenId answer = 0;
    Verdict verdict = Verdict::kOther;
};

// Fraction judged hallucinated among conflict-input outcomes.
double hallucination_rate(std::span<const JudgedOutcome> outcomes);
// Fraction that answered the scene answer among clean-input outcomes.
double clean_accuracy(std::span<const JudgedOutcome> outcomes);

// (p_o - p_e) / (1 - p_e); 1.0 when chance agreement is total and the label
// lists agree everywhere.
double cohen_kappa(std::span<const int> labels_a, std::span<const int> labels_b);

// Hallucination rate over conflict inputs and accuracy over clean inputs for
// the given sample ids, generated under the condition's zero-ablation.
struct ConditionResult {
    std::string condition;
    std::optional<std::uint64_t> seed;
    double hallucination_rate = 0.0;
    double clean_accuracy = 0.0;
    int n_samples = 0;
};

ConditionResult evaluate_condition(const Weights& weights, const Dataset& data,
                                   std::span<const std::uint64_t> ids,
                                   const AblationCondition& condition);

// Per-polarity fraction of shared heads between the two maps' top-k groups.
struct OverlapResult {
    double driving = 0.0;
    double resisting = 0.0;
};

OverlapResult topk_overlap(const ImportanceMap& a, const ImportanceMap& b, int k);

// Shuffles the prototype ids into two halves, runs head_importance on each,
// and reports the top-k overlap per polarity.
OverlapResult split_half_overlap(const Weights& weights, const Dataset& data,
                                 std::span<const std::uint64_t> proto_ids, int k,
                                 std::uint64_t seed);

struct SensitivityCurves {
    struct DrivePoint {
        int k_plus = 0;
        double hallucination_rate = 0.0;
        double clean_accuracy = 0.0;
    };
    struct ProbePoint {
        int k_minus = 0;
        double val_auroc = 0.0;
    };
    std::vector<DrivePoint> drive;
    std::vector<ProbePoint> probe;
};

// Drive-ablation rate/accuracy per k_plus and probe validation AUROC per
// k_minus, all evaluated on the validation split.
SensitivityCurves sensitivity_sweep(const Weights& weights, const Dataset& data,
                                    const ImportanceMap& imp,
                                    std::span<const int> k_plus_grid,
                                    std::span<const int> k_minus_grid,
                                    std::span<const std::uint64_t> probe_ids,
                                    std::span<const std::uint64_t> validation_ids,
                                    double lambda);

struct ProbeSummary {
    double auroc = 0.0;
    double f1 = 0.0;
    double tau = 0.0;
    double lambda = 0.0;
};

struct MaciSummary {
    double hallucination_rate = 0.0;
    double clean_accuracy = 0.0;
    double fired_rate_conflict = 0.0;
    double fired_rate_clean = 0.0;
};

struct OverlapRow {
    std::uint64_t seed = 0;
    int k = 0;
    double driving = 0.0;
    double resisting = 0.0;
};

struct Report {
    std::string config_hash;
    std::uint64_t data_seed = 0;
    std::uint64_t split_seed = 0;
    std::uint64_t train_seed = 0;
    int k_plus = 0;
    int k_minus = 0;
    std::vector<ConditionResult> conditions;
    std::optional<double> random_mean_hallucination_rate;
    std::optional<double> random_mean_clean_accuracy;
    std::optional<ProbeSummary> probe;
    std::optional<MaciSummary> maci;
    std::optional<double> judge_kappa;  // exact vs lenient judging rule
    std::optional<AsymmetryStats> asymmetry;
    int asymmetry_top_n = 5;
    std::vector<OverlapRow> split_half;
    SensitivityCurves sensitivity;

    void validate() const;
};

// Writes <dir>/report_rows.csv (plot rows: section,condition,x,y,seed) and
// <dir>/report.txt (human-readable summary). Byte-deterministic.
void emit_report(const Report& report, const std::string& dir);

struct ReportRow {
    std::string section;
    std::string condition;
    double x = 0.0;
    double y = 0.0;
    std::optional<std::uint64_t> seed;
};

std::vector<ReportRow> load_report_rows(const std::string& path);

}  // namespace conflictheads
