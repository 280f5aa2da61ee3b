#include "conflictheads/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "conflictheads/error.hpp"
#include "conflictheads/textio.hpp"

namespace conflictheads {

using nlohmann::json;

namespace {

const char* scope_name(PositionScope scope) {
    return scope == PositionScope::kLastToken ? "last" : "all";
}

PositionScope scope_from_string(const std::string& name) {
    if (name == "last") return PositionScope::kLastToken;
    if (name == "all") return PositionScope::kAllPositions;
    throw ConfigError("unknown scope: " + name + " (expected last or all)");
}

int to_int(const std::string& key, const std::string& value) {
    long long v = 0;
    try {
        v = parse_int(value);
    } catch (const InputError& e) {
        throw ConfigError(key + ": " + e.what());
    }
    if (v < -2147483647LL || v > 2147483647LL) throw ConfigError(key + ": out of range");
    return static_cast<int>(v);
}

std::uint64_t to_seed(const std::string& key, const std::string& value) {
    long long v = 0;
    try {
        v = parse_int(value);
    } catch (const InputError& e) {
        throw ConfigError(key + ": " + e.what());
    }
    if (v < 0) throw ConfigError(key + ": seed must be non-negative");
    return static_cast<std::uint64_t>(v);
}

double to_double(const std::string& key, const std::string& value) {
    try {
        return parse_double(value);
    } catch (const InputError& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

std::vector<double> to_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    for (const std::string& part : split_string(value, ',')) {
        const std::string t = trim(part);
        if (t.empty()) throw ConfigError(key + ": empty list entry");
        out.push_back(to_double(key, t));
    }
    return out;
}

std::vector<int> to_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (const std::string& part : split_string(value, ',')) {
        const std::string t = trim(part);
        if (t.empty()) throw ConfigError(key + ": empty list entry");
        out.push_back(to_int(key, t));
    }
    return out;
}

std::vector<std::uint64_t> to_seed_list(const std::string& key, const std::string& value) {
    std::vector<std::uint64_t> out;
    for (const std::string& part : split_string(value, ',')) {
        const std::string t = trim(part);
        if (t.empty()) throw ConfigError(key + ": empty list entry");
        out.push_back(to_seed(key, t));
    }
    return out;
}

template <typename T, typename Fmt>
std::string join_list(const std::vector<T>& values, Fmt fmt) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i > 0) out += ',';
        out += fmt(values[i]);
    }
    return out;
}

// Artifacts record the hash of the config they were built from; a mismatch
// means the artifact is stale for the requested run.
void require_hash(const std::string& artifact_hash, const RunConfig& config,
                  const char* what) {
    if (artifact_hash != config.hash()) {
        throw ConfigError(std::string(what) + " was built for config " + artifact_hash +
                          " but the current config is " + config.hash() +
                          "; regenerate it");
    }
}

double f1_at_tau(std::span<const double> scores, std::span<const int> labels, double tau) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= tau;
        if (predicted && labels[i] == 1) ++tp;
        if (predicted && labels[i] == 0) ++fp;
        if (!predicted && labels[i] == 1) ++fn;
    }
    const int denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * tp / denom;
}

json condition_to_json(const ConditionResult& result) {
    json j;
    j["condition"] = result.condition;
    if (result.seed.has_value()) {
        j["seed"] = *result.seed;
    } else {
        j["seed"] = nullptr;
    }
    j["hallucination_rate"] = result.hallucination_rate;
    j["clean_accuracy"] = result.clean_accuracy;
    j["n_samples"] = result.n_samples;
    return j;
}

ConditionResult condition_from_json(const json& j) {
    ConditionResult result;
    result.condition = j.at("condition").get<std::string>();
    if (!j.at("seed").is_null()) result.seed = j.at("seed").get<std::uint64_t>();
    result.hallucination_rate = j.at("hallucination_rate").get<double>();
    result.clean_accuracy = j.at("clean_accuracy").get<double>();
    result.n_samples = j.at("n_samples").get<int>();
    return result;
}

json parse_json_artifact(const std::string& path, const char* kind) {
    const std::string text = read_text_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    if (!j.is_object() || j.value("kind", "") != kind) {
        throw InputError(path + ": not a " + std::string(kind) + " file");
    }
    if (j.value("format_version", 0) != 1) {
        throw InputError(path + ": unsupported format_version");
    }
    return j;
}

}  // namespace

void RunConfig::validate() const {
    task.validate();
    mix.validate();
    if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
    const int reserved = sizes.proto + sizes.train_probe + sizes.validation + sizes.test;
    if (sizes.proto < 1 || sizes.train_probe < 1 || sizes.validation < 1 || sizes.test < 1) {
        throw ConfigError("split sizes must be >= 1");
    }
    if (n_samples < reserved) {
        throw ConfigError("n_samples must cover the splits (" + std::to_string(reserved) +
                          " needed)");
    }
    model_config().validate();
    train.validate();
    if (k_plus < 1) throw ConfigError("k_plus must be >= 1");
    if (k_minus < 1) throw ConfigError("k_minus must be >= 1");
    const int total = n_layers * n_heads;
    if (k_plus > total || k_minus > total) {
        throw ConfigError("k_plus and k_minus cannot exceed the head count");
    }
    if (asymmetry_top_n < 1) throw ConfigError("asymmetry_top_n must be >= 1");
    if (lambda_grid.empty()) throw ConfigError("lambda_grid must be non-empty");
    for (double lambda : lambda_grid) {
        if (!(lambda >= 0.0)) throw ConfigError("lambda_grid entries must be >= 0");
    }
    if (random_count < 1) throw ConfigError("random_count must be >= 1");
    if (overlap_k < 1) throw ConfigError("overlap_k must be >= 1");
    if (overlap_seeds.empty()) throw ConfigError("overlap_seeds must be non-empty");
    for (int k : k_plus_grid) {
        if (k < 0) throw ConfigError("k_plus_grid entries must be >= 0");
    }
    for (int k : k_minus_grid) {
        if (k < 1) throw ConfigError("k_minus_grid entries must be >= 1");
    }
    const std::vector<const std::string*> paths{
        &dataset_path, &checkpoint_path, &curve_path,   &importance_path, &groups_path,
        &probe_path,   &ablation_path,   &maci_path,    &report_dir};
    for (const std::string* p : paths) {
        if (p->empty()) throw ConfigError("artifact paths must be non-empty");
    }
}

ModelConfig RunConfig::model_config() const {
    return model_config_for(task, n_layers, n_heads, d_model);
}

std::string RunConfig::canonical_string() const {
    std::ostringstream ss;
    ss << "task{" << task.canonical_string() << "}\n";
    ss << "data_seed=" << data_seed << "\n";
    ss << "n_samples=" << n_samples << "\n";
    ss << "mix=" << format_double(mix.object) << "," << format_double(mix.attribute) << ","
       << format_double(mix.relation) << "\n";
    ss << "split_seed=" << split_seed << "\n";
    ss << "sizes=" << sizes.proto << "," << sizes.train_probe << "," << sizes.validation
       << "," << sizes.test << "\n";
    ss << "model=" << n_layers << "," << n_heads << "," << d_model << "\n";
    ss << "train=" << train.steps << "," << train.batch_size << ","
       << format_double(train.learning_rate) << "," << format_double(train.bias_mix) << ","
       << train.seed << "," << train.eval_every << "\n";
    ss << "scope=" << scope_name(scope) << "\n";
    ss << "k_plus=" << k_plus << "\n";
    ss << "k_minus=" << k_minus << "\n";
    ss << "asymmetry_top_n=" << asymmetry_top_n << "\n";
    ss << "lambda_grid="
       << join_list(lambda_grid, [](double v) { return format_double(v); }) << "\n";
    ss << "random_seed=" << random_seed << "\n";
    ss << "random_count=" << random_count << "\n";
    ss << "overlap_k=" << overlap_k << "\n";
    ss << "overlap_seeds="
       << join_list(overlap_seeds, [](std::uint64_t v) { return std::to_string(v); })
       << "\n";
    ss << "k_plus_grid=" << join_list(k_plus_grid, [](int v) { return std::to_string(v); })
       << "\n";
    ss << "k_minus_grid="
       << join_list(k_minus_grid, [](int v) { return std::to_string(v); }) << "\n";
    return ss.str();
}

std::string RunConfig::hash() const { return hash_hex(canonical_string()); }

void set_config_key(RunConfig& config, const std::string& key, const std::string& value) {
    if (key == "task.n_objects") config.task.n_objects = to_int(key, value);
    else if (key == "task.n_attributes") config.task.n_attributes = to_int(key, value);
    else if (key == "task.n_relations") config.task.n_relations = to_int(key, value);
    else if (key == "task.n_slots") config.task.n_slots = to_int(key, value);
    else if (key == "task.n_triples") config.task.n_triples = to_int(key, value);
    else if (key == "data_seed") config.data_seed = to_seed(key, value);
    else if (key == "n_samples") config.n_samples = to_int(key, value);
    else if (key == "mix.object") config.mix.object = to_double(key, value);
    else if (key == "mix.attribute") config.mix.attribute = to_double(key, value);
    else if (key == "mix.relation") config.mix.relation = to_double(key, value);
    else if (key == "split_seed") config.split_seed = to_seed(key, value);
    else if (key == "sizes.proto") config.sizes.proto = to_int(key, value);
    else if (key == "sizes.train_probe") config.sizes.train_probe = to_int(key, value);
    else if (key == "sizes.validation") config.sizes.validation = to_int(key, value);
    else if (key == "sizes.test") config.sizes.test = to_int(key, value);
    else if (key == "n_layers") config.n_layers = to_int(key, value);
    else if (key == "n_heads") config.n_heads = to_int(key, value);
    else if (key == "d_model") config.d_model = to_int(key, value);
    else if (key == "train.steps") config.train.steps = to_int(key, value);
    else if (key == "train.batch_size") config.train.batch_size = to_int(key, value);
    else if (key == "train.learning_rate") config.train.learning_rate = to_double(key, value);
    else if (key == "train.bias_mix") config.train.bias_mix = to_double(key, value);
    else if (key == "train.seed") config.train.seed = to_seed(key, value);
    else if (key == "train.eval_every") config.train.eval_every = to_int(key, value);
    else if (key == "scope") config.scope = scope_from_string(value);
    else if (key == "k_plus") config.k_plus = to_int(key, value);
    else if (key == "k_minus") config.k_minus = to_int(key, value);
    else if (key == "asymmetry_top_n") config.asymmetry_top_n = to_int(key, value);
    else if (key == "lambda_grid") config.lambda_grid = to_double_list(key, value);
    else if (key == "random_seed") config.random_seed = to_seed(key, value);
    else if (key == "random_count") config.random_count = to_int(key, value);
    else if (key == "overlap_k") config.overlap_k = to_int(key, value);
    else if (key == "overlap_seeds") config.overlap_seeds = to_seed_list(key, value);
    else if (key == "k_plus_grid") config.k_plus_grid = to_int_list(key, value);
    else if (key == "k_minus_grid") config.k_minus_grid = to_int_list(key, value);
    else if (key == "dataset_path") config.dataset_path = value;
    else if (key == "checkpoint_path") config.checkpoint_path = value;
    else if (key == "curve_path") config.curve_path = value;
    else if (key == "importance_path") config.importance_path = value;
    else if (key == "groups_path") config.groups_path = value;
    else if (key == "probe_path") config.probe_path = value;
    else if (key == "ablation_path") config.ablation_path = value;
    else if (key == "maci_path") config.maci_path = value;
    else if (key == "report_dir") config.report_dir = value;
    else throw ConfigError("unknown config key: " + key);
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig config;
    int line_no = 0;
    for (const std::string& raw : split_string(text, '\n')) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key=value, got: " + line);
        }
        set_config_key(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return config;
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(read_text_file(path));
}

RunConfig resolve_run_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
    std::string path = config_path;
    if (path.empty()) {
        const char* env = std::getenv(kConfigEnvVar);
        if (env != nullptr && env[0] != '\0') path = env;
    }
    RunConfig config;
    if (!path.empty()) config = load_run_config(path);
    for (const std::string& entry : overrides) {
        const std::size_t eq = entry.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("override must be key=value, got: " + entry);
        }
        set_config_key(config, trim(entry.substr(0, eq)), trim(entry.substr(eq + 1)));
    }
    config.validate();
    return config;
}

AblationSuite run_ablation_suite(const Weights& weights, const Dataset& data,
                                 std::span<const std::uint64_t> ids,
                                 const HeadGroups& groups, std::uint64_t random_seed,
                                 int random_count) {
    if (random_count < 1) throw InputError("run_ablation_suite: random_count must be >= 1");
    groups.validate();

    AblationSuite suite;
    suite.results.push_back(evaluate_condition(weights, data, ids, base_condition()));
    suite.results.push_back(evaluate_condition(weights, data, ids, drive_condition(groups)));
    suite.results.push_back(
        evaluate_condition(weights, data, ids, resist_condition(groups)));
    suite.results.push_back(evaluate_condition(weights, data, ids, joint_condition(groups)));

    double rate_sum = 0.0;
    double acc_sum = 0.0;
    for (int r = 0; r < random_count; ++r) {
        const AblationCondition condition =
            random_condition(weights.config, groups.driving.size(), random_seed + r);
        const ConditionResult result = evaluate_condition(weights, data, ids, condition);
        rate_sum += result.hallucination_rate;
        acc_sum += result.clean_accuracy;
        suite.results.push_back(result);
    }
    suite.random_mean_hallucination_rate = rate_sum / random_count;
    suite.random_mean_clean_accuracy = acc_sum / random_count;
    return suite;
}

void save_ablation(const std::string& path, const AblationSuite& suite) {
    json j;
    j["kind"] = "conflictheads-ablation";
    j["format_version"] = 1;
    j["config_hash"] = suite.config_hash;
    j["random_mean_hallucination_rate"] = suite.random_mean_hallucination_rate;
    j["random_mean_clean_accuracy"] = suite.random_mean_clean_accuracy;
    json conditions = json::array();
    for (const ConditionResult& result : suite.results) {
        conditions.push_back(condition_to_json(result));
    }
    j["conditions"] = std::move(conditions);
    write_text_file(path, j.dump(2) + "\n");
}

AblationSuite load_ablation(const std::string& path) {
    const json j = parse_json_artifact(path, "conflictheads-ablation");
    AblationSuite suite;
    try {
        suite.config_hash = j.at("config_hash").get<std::string>();
        suite.random_mean_hallucination_rate =
            j.at("random_mean_hallucination_rate").get<double>();
        suite.random_mean_clean_accuracy = j.at("random_mean_clean_accuracy").get<double>();
        for (const json& entry : j.at("conditions")) {
            suite.results.push_back(condition_from_json(entry));
        }
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    if (suite.results.empty()) throw InputError(path + ": no conditions");
    return suite;
}

MaciResult run_maci_eval(const Weights& weights, const Dataset& data,
                         std::span<const std::uint64_t> ids, const ProbeModel& probe,
                         const HeadGroups& groups) {
    if (ids.empty()) throw InputError("run_maci_eval: no sample ids");
    std::vector<std::uint64_t> sorted(ids.begin(), ids.end());
    std::sort(sorted.begin(), sorted.end());

    int hallucinated = 0;
    int factual_clean = 0;
    int fired_conflict = 0;
    int fired_clean = 0;
    for (std::uint64_t id : sorted) {
        const ConflictSample& s = data.by_id(id);
        const TokenSequence conflict_in =
            make_input(weights.config, data.task, s.scene, s.conflict_query);
        const TokenSequence clean_in =
            make_input(weights.config, data.task, s.scene, s.clean_query);
        const MaciOutput conflict_out = maci_generate(weights, conflict_in, probe, groups);
        const MaciOutput clean_out = maci_generate(weights, clean_in, probe, groups);
        if (judge(conflict_out.answer, s.y_h, s.y_f) == Verdict::kHallucinated) {
            ++hallucinated;
        }
        if (judge(clean_out.answer, s.y_h, s.y_f) == Verdict::kFactual) ++factual_clean;
        if (conflict_out.fired) ++fired_conflict;
        if (clean_out.fired) ++fired_clean;
    }

    MaciResult result;
    result.n_samples = static_cast<int>(sorted.size());
    const double n = static_cast<double>(sorted.size());
    result.summary.hallucination_rate = hallucinated / n;
    result.summary.clean_accuracy = factual_clean / n;
    result.summary.fired_rate_conflict = fired_conflict / n;
    result.summary.fired_rate_clean = fired_clean / n;
    return result;
}

void save_maci(const std::string& path, const MaciResult& result) {
    json j;
    j["kind"] = "conflictheads-maci";
    j["format_version"] = 1;
    j["config_hash"] = result.config_hash;
    j["n_samples"] = result.n_samples;
    j["hallucination_rate"] = result.summary.hallucination_rate;
    j["clean_accuracy"] = result.summary.clean_accuracy;
    j["fired_rate_conflict"] = result.summary.fired_rate_conflict;
    j["fired_rate_clean"] = result.summary.fired_rate_clean;
    write_text_file(path, j.dump(2) + "\n");
}

MaciResult load_maci(const std::string& path) {
    const json j = parse_json_artifact(path, "conflictheads-maci");
    MaciResult result;
    try {
        result.config_hash = j.at("config_hash").get<std::string>();
        result.n_samples = j.at("n_samples").get<int>();
        result.summary.hallucination_rate = j.at("hallucination_rate").get<double>();
        result.summary.clean_accuracy = j.at("clean_accuracy").get<double>();
        result.summary.fired_rate_conflict = j.at("fired_rate_conflict").get<double>();
        result.summary.fired_rate_clean = j.at("fired_rate_clean").get<double>();
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    return result;
}

namespace {

Dataset load_current_dataset(const RunConfig& config) {
    Dataset data = load_dataset(config.dataset_path);
    require_hash(data.config_hash, config, "dataset");
    return data;
}

Checkpoint load_current_checkpoint(const RunConfig& config) {
    Checkpoint ckpt = load_checkpoint(config.checkpoint_path);
    require_hash(ckpt.config_hash, config, "checkpoint");
    if (!(ckpt.weights.config == config.model_config())) {
        throw ConfigError("checkpoint model shape does not match the config");
    }
    return ckpt;
}

std::vector<std::uint64_t> require_split(const Dataset& data, SplitTag tag,
                                         const char* stage) {
    std::vector<std::uint64_t> ids = data.ids_with_tag(tag);
    if (ids.empty()) {
        throw ConfigError(std::string(stage) + ": dataset has no " +
                          std::string(to_string(tag)) + " split; run the split stage first");
    }
    return ids;
}

}  // namespace

void stage_gen(const RunConfig& config) {
    config.validate();
    Dataset dataset;
    dataset.task = config.task;
    dataset.seed = config.data_seed;
    dataset.mix = config.mix;
    dataset.config_hash = config.hash();
    dataset.samples = generate(config.task, config.data_seed, config.n_samples, config.mix);
    dataset.tags.assign(dataset.samples.size(), SplitTag::kNone);
    save_dataset(config.dataset_path, dataset);
}

void stage_split(const RunConfig& config) {
    config.validate();
    Dataset data = load_current_dataset(config);
    data.apply_splits(split(data.samples, config.sizes, config.split_seed));
    save_dataset(config.dataset_path, data);
}

void stage_train(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    require_split(data, SplitTag::kProto, "train");
    require_split(data, SplitTag::kValidation, "train");
    const Weights initial = init_weights(config.model_config(), config.train.seed);
    TrainResult result = train(initial, data, config.train);
    save_checkpoint(config.checkpoint_path, result.weights, config.hash());
    save_curve(config.curve_path, result.curve);
}

void stage_patch(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    const Checkpoint ckpt = load_current_checkpoint(config);
    const std::vector<std::uint64_t> proto = require_split(data, SplitTag::kProto, "patch");
    ImportanceMap imp = head_importance(ckpt.weights, data, proto, config.scope);
    imp.config_hash = config.hash();
    save_importance(config.importance_path, imp);
}

void stage_select(const RunConfig& config) {
    config.validate();
    ImportanceMap imp = load_importance(config.importance_path);
    require_hash(imp.config_hash, config, "importance map");
    imp.validate(config.model_config());
    const HeadGroups groups = select_groups(imp, config.k_plus, config.k_minus);
    save_groups(config.groups_path, groups);
}

void stage_ablate(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    const Checkpoint ckpt = load_current_checkpoint(config);
    HeadGroups groups = load_groups(config.groups_path);
    require_hash(groups.config_hash, config, "head groups");
    const std::vector<std::uint64_t> test_ids = require_split(data, SplitTag::kTest, "ablate");
    AblationSuite suite = run_ablation_suite(ckpt.weights, data, test_ids, groups,
                                             config.random_seed, config.random_count);
    suite.config_hash = config.hash();
    save_ablation(config.ablation_path, suite);
}

void stage_probe_train(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    const Checkpoint ckpt = load_current_checkpoint(config);
    HeadGroups groups = load_groups(config.groups_path);
    require_hash(groups.config_hash, config, "head groups");
    if (groups.resisting.empty()) {
        throw ConfigError("probe-train: the head groups contain no resisting heads");
    }
    const std::vector<std::uint64_t> probe_ids =
        require_split(data, SplitTag::kProbe, "probe-train");
    const std::vector<std::uint64_t> val_ids =
        require_split(data, SplitTag::kValidation, "probe-train");
    const ProbeData train_data =
        collect_probe_data(ckpt.weights, data, probe_ids, groups.resisting);
    const ProbeData val_data =
        collect_probe_data(ckpt.weights, data, val_ids, groups.resisting);
    ProbeModel probe = train_probe_on_grid(train_data, val_data, config.lambda_grid);
    probe.groups = groups;
    probe.config_hash = config.hash();
    save_probe(config.probe_path, probe);
}

void stage_threshold(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    const Checkpoint ckpt = load_current_checkpoint(config);
    ProbeModel probe = load_probe(config.probe_path);
    require_hash(probe.config_hash, config, "probe");
    const std::vector<std::uint64_t> val_ids =
        require_split(data, SplitTag::kValidation, "threshold");
    const ProbeData val_data =
        collect_probe_data(ckpt.weights, data, val_ids, probe.groups.resisting);
    const ThresholdChoice choice = select_threshold(probe, val_data.features, val_data.labels);
    probe.tau = choice.tau;
    save_probe(config.probe_path, probe);
}

void stage_maci(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    const Checkpoint ckpt = load_current_checkpoint(config);
    const ProbeModel probe = load_probe(config.probe_path);
    require_hash(probe.config_hash, config, "probe");
    if (!probe.tau.has_value()) {
        throw ConfigError("maci: the probe has no threshold; run the threshold stage first");
    }
    const std::vector<std::uint64_t> test_ids = require_split(data, SplitTag::kTest, "maci");
    MaciResult result = run_maci_eval(ckpt.weights, data, test_ids, probe, probe.groups);
    result.config_hash = config.hash();
    save_maci(config.maci_path, result);
}

void stage_report(const RunConfig& config) {
    config.validate();
    const Dataset data = load_current_dataset(config);
    const Checkpoint ckpt = load_current_checkpoint(config);
    const ImportanceMap imp = load_importance(config.importance_path);
    require_hash(imp.config_hash, config, "importance map");
    HeadGroups groups = load_groups(config.groups_path);
    require_hash(groups.config_hash, config, "head groups");
    const AblationSuite suite = load_ablation(config.ablation_path);
    require_hash(suite.config_hash, config, "ablation results");
    const ProbeModel probe = load_probe(config.probe_path);
    require_hash(probe.config_hash, config, "probe");
    if (!probe.tau.has_value()) {
        throw ConfigError("report: the probe has no threshold; run the threshold stage first");
    }
    const MaciResult maci = load_maci(config.maci_path);
    require_hash(maci.config_hash, config, "conditional-intervention results");

    Report report;
    report.config_hash = config.hash();
    report.data_seed = config.data_seed;
    report.split_seed = config.split_seed;
    report.train_seed = config.train.seed;
    report.k_plus = config.k_plus;
    report.k_minus = config.k_minus;
    report.conditions = suite.results;
    report.random_mean_hallucination_rate = suite.random_mean_hallucination_rate;
    report.random_mean_clean_accuracy = suite.random_mean_clean_accuracy;

    const std::vector<std::uint64_t> val_ids =
        require_split(data, SplitTag::kValidation, "report");
    const ProbeData val_data =
        collect_probe_data(ckpt.weights, data, val_ids, probe.groups.resisting);
    std::vector<double> scores;
    scores.reserve(val_data.features.size());
    for (const std::vector<double>& feature : val_data.features) {
        scores.push_back(probe_score(probe, feature));
    }
    ProbeSummary probe_summary;
    probe_summary.auroc = auroc(scores, val_data.labels);
    probe_summary.f1 = f1_at_tau(scores, val_data.labels, *probe.tau);
    probe_summary.tau = *probe.tau;
    probe_summary.lambda = probe.lambda;
    report.probe = probe_summary;
    report.maci = maci.summary;

    // Judge agreement: exact token identity vs the lenient rule that counts
    // any non-factual answer as hallucinated, over unablated test conflicts.
    const std::vector<std::uint64_t> test_ids = require_split(data, SplitTag::kTest, "report");
    std::vector<int> exact_labels, lenient_labels;
    exact_labels.reserve(test_ids.size());
    lenient_labels.reserve(test_ids.size());
    for (std::uint64_t id : test_ids) {
        const ConflictSample& s = data.by_id(id);
        const TokenSequence conflict_in =
            make_input(ckpt.weights.config, data.task, s.scene, s.conflict_query);
        const TokenId answer = generate_answer(ckpt.weights, conflict_in);
        exact_labels.push_back(answer == s.y_h ? 1 : 0);
        lenient_labels.push_back(answer != s.y_f ? 1 : 0);
    }
    report.judge_kappa = cohen_kappa(exact_labels, lenient_labels);

    report.asymmetry_top_n = config.asymmetry_top_n;
    try {
        report.asymmetry = asymmetry_stats(imp, config.asymmetry_top_n);
    } catch (const InputError&) {
        report.asymmetry.reset();  // one polarity absent: omit the section
    }

    const std::vector<std::uint64_t> proto_ids = require_split(data, SplitTag::kProto, "report");
    for (std::uint64_t seed : config.overlap_seeds) {
        const OverlapResult overlap =
            split_half_overlap(ckpt.weights, data, proto_ids, config.overlap_k, seed);
        report.split_half.push_back(
            {seed, config.overlap_k, overlap.driving, overlap.resisting});
    }

    const std::vector<std::uint64_t> probe_ids =
        require_split(data, SplitTag::kProbe, "report");
    report.sensitivity =
        sensitivity_sweep(ckpt.weights, data, imp, config.k_plus_grid, config.k_minus_grid,
                          probe_ids, val_ids, probe.lambda);

    emit_report(report, config.report_dir);
}

std::span<const PipelineStage> pipeline_stages() {
    static const PipelineStage stages[] = {
        {"gen", stage_gen},           {"split", stage_split},
        {"train", stage_train},       {"patch", stage_patch},
        {"select", stage_select},     {"ablate", stage_ablate},
        {"probe-train", stage_probe_train}, {"threshold", stage_threshold},
        {"maci", stage_maci},         {"report", stage_report},
    };
    return stages;
}

void run_pipeline(const RunConfig& config) {
    for (const PipelineStage& stage : pipeline_stages()) {
        try {
            stage.fn(config);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(stage.name) + " stage: " + e.what());
        } catch (const InputError& e) {
            throw InputError(std::string(stage.name) + " stage: " + e.what());
        } catch (const NumericError& e) {
            throw NumericError(std::string(stage.name) + " stage: " + e.what());
        } catch (const IoError& e) {
            throw IoError(std::string(stage.name) + " stage: " + e.what());
        }
    }
}

}  // namespace conflictheads
