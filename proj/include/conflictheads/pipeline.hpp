#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conflictheads/evalreport.hpp"
#include "conflictheads/intervene.hpp"
#include "conflictheads/patching.hpp"
#include "conflictheads/synthdata.hpp"
#include "conflictheads/trainer.hpp"

namespace conflictheads {

// Environment variable naming the default config file.
inline constexpr const char* kConfigEnvVar = "CONFLICTHEADS_CONFIG";

// Full run description. Every artifact is stamped with hash(), which covers
// the semantic fields only — moving artifact paths never invalidates a run.
struct RunConfig {
    // data generation
    TaskSpec task;
    std::uint64_t data_seed = 11;
    int n_samples = 2400;
    TypeMix mix;

    // splitting
    std::uint64_t split_seed = 12;
    SplitSizes sizes;

    // model + training
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    TrainConfig train{.steps = 2500,
                      .batch_size = 16,
                      .learning_rate = 0.05,
                      .bias_mix = 0.5,
                      .seed = 21,
                      .eval_every = 250};

    // patching + selection
    PositionScope scope = PositionScope::kAllPositions;
    int k_plus = 2;
    int k_minus = 3;
    int asymmetry_top_n = 5;

    // probe
    std::vector<double> lambda_grid{1e-4, 1e-3, 1e-2, 1e-1};

    // random-ablation control
    std::uint64_t random_seed = 900;
    int random_count = 5;

    // stability + sensitivity
    int overlap_k = 10;
    std::vector<std::uint64_t> overlap_seeds{1, 2, 3};
    std::vector<int> k_plus_grid{0, 1, 2, 4, 8};
    std::vector<int> k_minus_grid{1, 2, 3, 8};

    // artifact paths (excluded from the hash)
    std::string dataset_path = "out/dataset.jsonl";
    std::string checkpoint_path = "out/model.ckpt";
    std::string curve_path = "out/train_curve.csv";
    std::string importance_path = "out/importance.csv";
    std::string groups_path = "out/groups.csv";
    std::string probe_path = "out/probe.json";
    std::string ablation_path = "out/ablation.json";
    std::string maci_path = "out/maci.json";
    std::string report_dir = "out/report";

    void validate() const;
    ModelConfig model_config() const;
    std::string canonical_string() const;  // semantic fields, fixed order
    std::string hash() const;              // 16 hex chars over canonical_string()
};

// key = value lines; '#' starts a comment. Unknown keys are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
void set_config_key(RunConfig& config, const std::string& key, const std::string& value);

// Resolution order: explicit path flag, else $CONFLICTHEADS_CONFIG, else
// built-in defaults; then overrides ("key=value") on top — flags win.
RunConfig resolve_run_config(const std::string& config_path,
                             const std::vector<std::string>& overrides);

// Five-condition evaluation over one id set: base, drive, resist, joint and
// random_count random controls (size-matched to the driving set).
struct AblationSuite {
    std::vector<ConditionResult> results;
    double random_mean_hallucination_rate = 0.0;
    double random_mean_clean_accuracy = 0.0;
    std::string config_hash = "0000000000000000";
};

AblationSuite run_ablation_suite(const Weights& weights, const Dataset& data,
                                 std::span<const std::uint64_t> ids,
                                 const HeadGroups& groups, std::uint64_t random_seed,
                                 int random_count);

void save_ablation(const std::string& path, const AblationSuite& suite);
AblationSuite load_ablation(const std::string& path);

struct MaciResult {
    MaciSummary summary;
    int n_samples = 0;
    std::string config_hash = "0000000000000000";
};

MaciResult run_maci_eval(const Weights& weights, const Dataset& data,
                         std::span<const std::uint64_t> ids, const ProbeModel& probe,
                         const HeadGroups& groups);

void save_maci(const std::string& path, const MaciResult& result);
MaciResult load_maci(const std::string& path);

// Pipeline stages; each reads its inputs from the config's paths, verifies
// their config hashes, and writes its artifact. Failures carry the stage
// name.
void stage_gen(const RunConfig& config);
void stage_split(const RunConfig& config);
void stage_train(const RunConfig& config);
void stage_patch(const RunConfig& config);
void stage_select(const RunConfig& config);
void stage_ablate(const RunConfig& config);
void stage_probe_train(const RunConfig& config);
void stage_threshold(const RunConfig& config);
void stage_maci(const RunConfig& config);
void stage_report(const RunConfig& config);

// gen -> split -> train -> patch -> select -> ablate -> probe-train ->
// threshold -> maci -> report.
struct PipelineStage {
    const char* name;
    void (*fn)(const RunConfig&);
};

std::span<const PipelineStage> pipeline_stages();
void run_pipeline(const RunConfig& config);

}  // namespace conflictheads
