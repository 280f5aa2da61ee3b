#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "conflictheads/error.hpp"
#include "conflictheads/pipeline.hpp"

namespace {

using conflictheads::ExitCode;
using conflictheads::RunConfig;

struct FlagSpec {
    const char* flag;
    const char* key;  // RunConfig key the flag overrides
    const char* help;
};

struct SubSpec {
    const char* name;
    const char* help;
    std::vector<FlagSpec> flags;
    void (*stage)(const RunConfig&);
};

const std::vector<SubSpec>& subcommands() {
    static const std::vector<SubSpec> subs = {
        {"gen",
         "generate the synthetic conflict dataset",
         {{"--out", "dataset_path", "dataset file to write"},
          {"--n", "n_samples", "number of samples"},
          {"--seed", "data_seed", "generation seed"}},
         conflictheads::stage_gen},
        {"split",
         "tag the dataset with prototype/probe/validation/test splits",
         {{"--data", "dataset_path", "dataset file to retag"},
          {"--seed", "split_seed", "split shuffle seed"}},
         conflictheads::stage_split},
        {"train",
         "train the model on the premise-bias curriculum",
         {{"--data", "dataset_path", "tagged dataset file"},
          {"--out", "checkpoint_path", "checkpoint file to write"},
          {"--curve", "curve_path", "training-curve CSV to write"}},
         conflictheads::stage_train},
        {"patch",
         "score every head by clean-activation patching on the prototype set",
         {{"--ckpt", "checkpoint_path", "trained checkpoint"},
          {"--data", "dataset_path", "tagged dataset file"},
          {"--scope", "scope", "patch positions: last or all"},
          {"--out", "importance_path", "importance CSV to write"}},
         conflictheads::stage_patch},
        {"select",
         "pick the driving and resisting head groups from the importance map",
         {{"--in", "importance_path", "importance CSV"},
          {"--out", "groups_path", "head-groups CSV to write"},
          {"--k-plus", "k_plus", "number of driving heads"},
          {"--k-minus", "k_minus", "number of resisting heads"}},
         conflictheads::stage_select},
        {"ablate",
         "evaluate base/drive/resist/joint/random conditions on the test split",
         {{"--ckpt", "checkpoint_path", "trained checkpoint"},
          {"--data", "dataset_path", "tagged dataset file"},
          {"--groups", "groups_path", "head-groups CSV"},
          {"--out", "ablation_path", "ablation-results JSON to write"}},
         conflictheads::stage_ablate},
        {"probe-train",
         "train the conflict probe on resisting-head activations",
         {{"--ckpt", "checkpoint_path", "trained checkpoint"},
          {"--data", "dataset_path", "tagged dataset file"},
          {"--groups", "groups_path", "head-groups CSV"},
          {"--out", "probe_path", "probe JSON to write"}},
         conflictheads::stage_probe_train},
        {"threshold",
         "pick the probe firing threshold by validation F1",
         {{"--ckpt", "checkpoint_path", "trained checkpoint"},
          {"--data", "dataset_path", "tagged dataset file"},
          {"--probe", "probe_path", "probe JSON to update"}},
         conflictheads::stage_threshold},
        {"maci",
         "run the conditional intervention on the test split",
         {{"--ckpt", "checkpoint_path", "trained checkpoint"},
          {"--data", "dataset_path", "tagged dataset file"},
          {"--probe", "probe_path", "probe JSON (threshold set)"},
          {"--out", "maci_path", "intervention-results JSON to write"}},
         conflictheads::stage_maci},
        {"report",
         "assemble the final report from all artifacts",
         {{"--out", "report_dir", "report directory to write"}},
         conflictheads::stage_report},
    };
    return subs;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Head-level causal analysis of modality-conflict hallucination"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("--config", config_path,
                   "run-config file (key=value lines); defaults to $" +
                       std::string(conflictheads::kConfigEnvVar));
    app.add_option("--set", sets, "override one config key (key=value); repeatable");

    // Stable storage for per-subcommand flag values.
    std::map<std::string, std::string> flag_values;
    std::map<std::string, CLI::App*> sub_apps;
    for (const SubSpec& spec : subcommands()) {
        CLI::App* sub = app.add_subcommand(spec.name, spec.help);
        sub->fallthrough();
        for (const FlagSpec& flag : spec.flags) {
            std::string& slot = flag_values[std::string(spec.name) + flag.flag];
            sub->add_option(flag.flag, slot, flag.help);
        }
        sub_apps[spec.name] = sub;
    }
    CLI::App* run_sub = app.add_subcommand("run", "run every stage in order");
    run_sub->fallthrough();
    CLI::App* show_sub =
        app.add_subcommand("show-config", "print the resolved config and its hash");
    show_sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::kExitConfig);
    }

    // Resolution order: config file (flag or env var), --set overrides, then
    // subcommand path flags.
    std::vector<std::string> overrides = sets;
    const SubSpec* chosen = nullptr;
    for (const SubSpec& spec : subcommands()) {
        CLI::App* sub = sub_apps.at(spec.name);
        if (!sub->parsed()) continue;
        chosen = &spec;
        for (const FlagSpec& flag : spec.flags) {
            if (sub->count(flag.flag) > 0) {
                overrides.push_back(std::string(flag.key) + "=" +
                                    flag_values.at(std::string(spec.name) + flag.flag));
            }
        }
    }

    const RunConfig config = conflictheads::resolve_run_config(config_path, overrides);

    if (show_sub->parsed()) {
        std::cout << config.canonical_string();
        std::cout << "hash=" << config.hash() << "\n";
        return static_cast<int>(ExitCode::kExitOk);
    }
    if (run_sub->parsed()) {
        for (const conflictheads::PipelineStage& stage : conflictheads::pipeline_stages()) {
            std::cerr << "[" << stage.name << "] ..." << std::flush;
            stage.fn(config);
            std::cerr << " done\n";
        }
        return static_cast<int>(ExitCode::kExitOk);
    }
    if (chosen != nullptr) {
        chosen->stage(config);
        return static_cast<int>(ExitCode::kExitOk);
    }
    std::cerr << "error: no subcommand\n";
    return static_cast<int>(ExitCode::kExitConfig);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const conflictheads::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitConfig);
    } catch (const conflictheads::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitInput);
    } catch (const conflictheads::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitNumeric);
    } catch (const conflictheads::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitIo);
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitInternal);
    }
}
