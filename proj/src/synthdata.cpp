#include "conflictheads/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "conflictheads/rng.hpp"
#include "conflictheads/textio.hpp"

namespace conflictheads {

using nlohmann::json;

void TaskSpec::validate() const {
    if (n_slots < 2) throw ConfigError("TaskSpec: need at least 2 slots");
    if (n_triples < 1) throw ConfigError("TaskSpec: need at least 1 relation triple");
    if (n_objects <= n_slots) {
        throw ConfigError(
            "TaskSpec: vocabulary too small, object-conflict premises need an object id "
            "absent from the scene (n_objects must exceed n_slots)");
    }
    if (n_attributes < 2) {
        throw ConfigError(
            "TaskSpec: vocabulary too small, attribute-conflict premises need a second "
            "attribute id");
    }
    if (n_relations < 1) throw ConfigError("TaskSpec: need at least 1 relation id");
    if (n_triples > n_slots * n_relations) {
        throw ConfigError("TaskSpec: not enough (subject, relation) pairs for n_triples");
    }
}

std::string TaskSpec::canonical_string() const {
    std::ostringstream ss;
    ss << "n_objects=" << n_objects << " n_attributes=" << n_attributes
       << " n_relations=" << n_relations << " n_slots=" << n_slots
       << " n_triples=" << n_triples;
    return ss.str();
}

const char* to_string(ConflictType type) {
    switch (type) {
        case ConflictType::kObject: return "object";
        case ConflictType::kAttribute: return "attribute";
        case ConflictType::kRelation: return "relation";
    }
    return "object";
}

ConflictType conflict_type_from_string(const std::string& name) {
    if (name == "object") return ConflictType::kObject;
    if (name == "attribute") return ConflictType::kAttribute;
    if (name == "relation") return ConflictType::kRelation;
    throw InputError("unknown conflict type: " + name);
}

std::optional<TokenId> Scene::attribute_of(TokenId object) const {
    for (std::size_t k = 0; k < objects.size(); ++k) {
        if (objects[k] == object) return attributes[k];
    }
    return std::nullopt;
}

std::vector<TokenId> scene_tokens(const TaskSpec& task, const Scene& scene) {
    std::vector<TokenId> out;
    out.reserve(static_cast<std::size_t>(task.n_visual_tokens()));
    for (std::size_t k = 0; k < scene.objects.size(); ++k) {
        out.push_back(scene.objects[k]);
        out.push_back(scene.attributes[k]);
    }
    for (const auto& triple : scene.relations) {
        out.push_back(triple[0]);
        out.push_back(triple[1]);
        out.push_back(triple[2]);
    }
    return out;
}

void TypeMix::validate() const {
    if (object < 0 || attribute < 0 || relation < 0) {
        throw InputError("TypeMix: proportions must be nonnegative");
    }
    const double sum = object + attribute + relation;
    if (std::abs(sum - 1.0) > 1e-9) {
        throw InputError("TypeMix: proportions must sum to 1");
    }
}

namespace {

Scene make_scene(const TaskSpec& task, Rng& rng) {
    Scene scene;
    std::vector<TokenId> pool(static_cast<std::size_t>(task.n_objects));
    for (int i = 0; i < task.n_objects; ++i) pool[static_cast<std::size_t>(i)] = task.object_token(i);
    rng.shuffle(pool);
    scene.objects.assign(pool.begin(), pool.begin() + task.n_slots);
    scene.attributes.resize(static_cast<std::size_t>(task.n_slots));
    for (int k = 0; k < task.n_slots; ++k) {
        scene.attributes[static_cast<std::size_t>(k)] =
            task.attribute_token(static_cast<int>(rng.uniform_index(task.n_attributes)));
    }
    // Choose distinct (subject slot, relation) pairs so each relation query
    // has a unique answer.
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(task.n_slots) * task.n_relations);
    for (int k = 0; k < task.n_slots; ++k) {
        for (int r = 0; r < task.n_relations; ++r) pairs.emplace_back(k, r);
    }
    rng.shuffle(pairs);
    for (int t = 0; t < task.n_triples; ++t) {
        const auto [subject_slot, rel] = pairs[static_cast<std::size_t>(t)];
        int target_slot = static_cast<int>(rng.uniform_index(task.n_slots - 1));
        if (target_slot >= subject_slot) ++target_slot;
        scene.relations.push_back({scene.objects[static_cast<std::size_t>(subject_slot)],
                                   task.relation_token(rel),
                                   scene.objects[static_cast<std::size_t>(target_slot)]});
    }
    return scene;
}

// Uniform pick from a sorted complement list.
TokenId pick_excluding(Rng& rng, int lo, int hi, const std::set<TokenId>& excluded) {
    std::vector<TokenId> candidates;
    for (TokenId t = lo; t < hi; ++t) {
        if (excluded.count(t) == 0) candidates.push_back(t);
    }
    if (candidates.empty()) {
        throw ConfigError("generate: vocabulary too small for a contradicting premise");
    }
    return candidates[rng.uniform_index(candidates.size())];
}

ConflictSample make_sample(const TaskSpec& task, std::uint64_t id, ConflictType type,
                           Rng& rng) {
    ConflictSample sample;
    sample.id = id;
    sample.conflict_type = type;
    sample.scene = make_scene(task, rng);
    const Scene& scene = sample.scene;

    TokenId position1 = 0;  // question kind (or relation id)
    TokenId position2 = 0;  // selector (slot or object)
    switch (type) {
        case ConflictType::kObject: {
            const int k = static_cast<int>(rng.uniform_index(task.n_slots));
            position1 = task.object_marker();
            position2 = task.slot_token(k);
            sample.y_f = scene.objects[static_cast<std::size_t>(k)];
            sample.y_h = pick_excluding(rng, 0, task.n_objects,
                                        {scene.objects.begin(), scene.objects.end()});
            break;
        }
        case ConflictType::kAttribute: {
            const int k = static_cast<int>(rng.uniform_index(task.n_slots));
            position1 = task.attribute_marker();
            position2 = scene.objects[static_cast<std::size_t>(k)];
            sample.y_f = scene.attributes[static_cast<std::size_t>(k)];
            sample.y_h = pick_excluding(rng, task.attribute_token(0),
                                        task.attribute_token(task.n_attributes),
                                        {sample.y_f});
            break;
        }
        case ConflictType::kRelation: {
            const int t = static_cast<int>(rng.uniform_index(task.n_triples));
            const auto& triple = scene.relations[static_cast<std::size_t>(t)];
            position1 = triple[1];
            position2 = triple[0];
            sample.y_f = triple[2];
            sample.y_h = pick_excluding(rng, 0, task.n_objects, {sample.y_f});
            break;
        }
    }

    sample.clean_query = {task.ask_token(),    position1, position2,
                          task.hint_token(),   task.neutral_token(),
                          task.question_token()};
    sample.conflict_query = sample.clean_query;
    sample.conflict_query[4] = sample.y_h;
    return sample;
}

void check_sample(const TaskSpec& task, const ConflictSample& sample) {
    if (sample.y_f == sample.y_h) throw NumericError("generate: y_f == y_h");
    if (sample.clean_query.size() != TaskSpec::query_length() ||
        sample.conflict_query.size() != TaskSpec::query_length()) {
        throw NumericError("generate: query length mismatch");
    }
    const Scene& scene = sample.scene;
    std::set<TokenId> objects(scene.objects.begin(), scene.objects.end());
    if (objects.size() != scene.objects.size()) {
        throw NumericError("generate: duplicate objects in scene");
    }
    switch (sample.conflict_type) {
        case ConflictType::kObject:
            if (objects.count(sample.y_h) != 0) {
                throw NumericError("generate: object premise present in scene");
            }
            break;
        case ConflictType::kAttribute: {
            const auto truth = scene.attribute_of(sample.conflict_query[2]);
            if (!truth || *truth == sample.y_h) {
                throw NumericError("generate: attribute premise does not contradict scene");
            }
            break;
        }
        case ConflictType::kRelation:
            for (const auto& triple : scene.relations) {
                if (triple[0] == sample.conflict_query[2] &&
                    triple[1] == sample.conflict_query[1] && triple[2] == sample.y_h) {
                    throw NumericError("generate: relation premise present in scene");
                }
            }
            break;
    }
    (void)task;
}

}  // namespace

std::vector<ConflictSample> generate(const TaskSpec& task, std::uint64_t seed, int n,
                                     const TypeMix& mix) {
    task.validate();
    mix.validate();
    if (n < 1) throw InputError("generate: n must be >= 1");

    std::vector<ConflictSample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i) + 1));
        const double u = rng.unit_double();
        ConflictType type = ConflictType::kRelation;
        if (u < mix.object) {
            type = ConflictType::kObject;
        } else if (u < mix.object + mix.attribute) {
            type = ConflictType::kAttribute;
        }
        ConflictSample sample = make_sample(task, static_cast<std::uint64_t>(i), type, rng);
        check_sample(task, sample);
        samples.push_back(std::move(sample));
    }
    return samples;
}

const char* to_string(SplitTag tag) {
    switch (tag) {
        case SplitTag::kNone: return "none";
        case SplitTag::kProto: return "proto";
        case SplitTag::kProbe: return "probe";
        case SplitTag::kTrain: return "train";
        case SplitTag::kValidation: return "val";
        case SplitTag::kTest: return "test";
    }
    return "none";
}

SplitTag split_tag_from_string(const std::string& name) {
    if (name == "none") return SplitTag::kNone;
    if (name == "proto") return SplitTag::kProto;
    if (name == "probe") return SplitTag::kProbe;
    if (name == "train") return SplitTag::kTrain;
    if (name == "val") return SplitTag::kValidation;
    if (name == "test") return SplitTag::kTest;
    throw InputError("unknown split tag: " + name);
}

DatasetSplits split(const std::vector<ConflictSample>& samples, const SplitSizes& sizes,
                    std::uint64_t seed) {
    if (sizes.proto != 256) {
        throw InputError("split: the prototype set must hold exactly 256 samples");
    }
    if (sizes.train_probe < 0 || sizes.validation < 0 || sizes.test < 0) {
        throw InputError("split: sizes must be nonnegative");
    }
    const std::size_t want = static_cast<std::size_t>(sizes.proto) + sizes.train_probe +
                             sizes.validation + sizes.test;
    if (want > samples.size()) {
        throw InputError("split: not enough samples for the requested sizes");
    }

    std::vector<std::uint64_t> ids(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) ids[i] = samples[i].id;
    Rng rng(derive_seed(seed, 2));
    rng.shuffle(ids);

    DatasetSplits splits;
    auto take = [&ids](std::size_t& cursor, int count) {
        std::vector<std::uint64_t> out(ids.begin() + static_cast<std::ptrdiff_t>(cursor),
                                       ids.begin() + static_cast<std::ptrdiff_t>(cursor) + count);
        cursor += static_cast<std::size_t>(count);
        std::sort(out.begin(), out.end());
        return out;
    };
    std::size_t cursor = 0;
    splits.proto = take(cursor, sizes.proto);
    splits.train_probe = take(cursor, sizes.train_probe);
    splits.validation = take(cursor, sizes.validation);
    splits.test = take(cursor, sizes.test);
    splits.train_extra = take(cursor, static_cast<int>(ids.size() - cursor));
    return splits;
}

std::vector<std::uint64_t> Dataset::ids_with_tag(SplitTag tag) const {
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (tags[i] == tag) out.push_back(samples[i].id);
    }
    return out;
}

const ConflictSample& Dataset::by_id(std::uint64_t id) const {
    // Ids are dense and in order for generated datasets; fall back to scan.
    if (id < samples.size() && samples[static_cast<std::size_t>(id)].id == id) {
        return samples[static_cast<std::size_t>(id)];
    }
    for (const auto& s : samples) {
        if (s.id == id) return s;
    }
    throw InputError("dataset: unknown sample id " + std::to_string(id));
}

SplitTag Dataset::tag_of(std::uint64_t id) const {
    if (tags.empty()) return SplitTag::kNone;
    const ConflictSample& s = by_id(id);
    return tags[static_cast<std::size_t>(&s - samples.data())];
}

void Dataset::apply_splits(const DatasetSplits& splits) {
    tags.assign(samples.size(), SplitTag::kNone);
    std::map<std::uint64_t, std::size_t> index;
    for (std::size_t i = 0; i < samples.size(); ++i) index[samples[i].id] = i;
    auto mark = [&](const std::vector<std::uint64_t>& ids, SplitTag tag) {
        for (std::uint64_t id : ids) {
            auto it = index.find(id);
            if (it == index.end()) throw InputError("apply_splits: unknown sample id");
            if (tags[it->second] != SplitTag::kNone) {
                throw InputError("apply_splits: splits overlap at sample id " +
                                 std::to_string(id));
            }
            tags[it->second] = tag;
        }
    };
    mark(splits.proto, SplitTag::kProto);
    mark(splits.train_probe, SplitTag::kProbe);
    mark(splits.validation, SplitTag::kValidation);
    mark(splits.test, SplitTag::kTest);
    mark(splits.train_extra, SplitTag::kTrain);
}

void Dataset::validate() const {
    task.validate();
    if (tags.size() != samples.size()) {
        throw InputError("dataset: tag list length mismatch");
    }
    std::set<std::uint64_t> seen;
    for (const auto& s : samples) {
        if (!seen.insert(s.id).second) {
            throw InputError("dataset: duplicate sample id " + std::to_string(s.id));
        }
    }
}

namespace {

json scene_to_json(const Scene& scene) {
    json j;
    j["objects"] = scene.objects;
    j["attributes"] = scene.attributes;
    json rel = json::array();
    for (const auto& t : scene.relations) rel.push_back({t[0], t[1], t[2]});
    j["relations"] = rel;
    return j;
}

Scene scene_from_json(const json& j) {
    Scene scene;
    scene.objects = j.at("objects").get<std::vector<TokenId>>();
    scene.attributes = j.at("attributes").get<std::vector<TokenId>>();
    for (const auto& t : j.at("relations")) {
        scene.relations.push_back({t.at(0).get<TokenId>(), t.at(1).get<TokenId>(),
                                   t.at(2).get<TokenId>()});
    }
    return scene;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& dataset) {
    if (dataset.tags.size() != dataset.samples.size()) {
        throw InputError("save_dataset: tag list length mismatch");
    }
    std::ostringstream out;
    json header;
    header["kind"] = "conflictheads-dataset";
    header["format_version"] = 1;
    header["seed"] = dataset.seed;
    header["n"] = dataset.samples.size();
    header["type_mix"] = {dataset.mix.object, dataset.mix.attribute, dataset.mix.relation};
    header["task"] = {{"n_objects", dataset.task.n_objects},
                      {"n_attributes", dataset.task.n_attributes},
                      {"n_relations", dataset.task.n_relations},
                      {"n_slots", dataset.task.n_slots},
                      {"n_triples", dataset.task.n_triples}};
    header["config_hash"] = dataset.config_hash;
    out << header.dump() << "\n";
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const ConflictSample& s = dataset.samples[i];
        json j;
        j["id"] = s.id;
        j["split"] = to_string(dataset.tags[i]);
        j["conflict_type"] = to_string(s.conflict_type);
        j["scene"] = scene_to_json(s.scene);
        j["clean_query"] = s.clean_query;
        j["conflict_query"] = s.conflict_query;
        j["y_f"] = s.y_f;
        j["y_h"] = s.y_h;
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

Dataset load_dataset(const std::string& path) {
    const std::string content = read_text_file(path);
    std::istringstream in(content);
    std::string line;
    if (!std::getline(in, line)) throw IoError("dataset file is empty: " + path);

    Dataset dataset;
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw IoError("dataset header is not valid JSON: " + std::string(e.what()));
    }
    if (header.value("kind", "") != "conflictheads-dataset") {
        throw IoError("not a dataset file: " + path);
    }
    if (header.value("format_version", 0) != 1) {
        throw IoError("unsupported dataset format version");
    }
    dataset.seed = header.at("seed").get<std::uint64_t>();
    const auto mix = header.at("type_mix");
    dataset.mix = {mix.at(0).get<double>(), mix.at(1).get<double>(), mix.at(2).get<double>()};
    const auto& t = header.at("task");
    dataset.task.n_objects = t.at("n_objects").get<int>();
    dataset.task.n_attributes = t.at("n_attributes").get<int>();
    dataset.task.n_relations = t.at("n_relations").get<int>();
    dataset.task.n_slots = t.at("n_slots").get<int>();
    dataset.task.n_triples = t.at("n_triples").get<int>();
    dataset.config_hash = header.value("config_hash", "0000000000000000");

    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("dataset record is not valid JSON: " + std::string(e.what()));
        }
        ConflictSample s;
        s.id = j.at("id").get<std::uint64_t>();
        s.conflict_type = conflict_type_from_string(j.at("conflict_type").get<std::string>());
        s.scene = scene_from_json(j.at("scene"));
        s.clean_query = j.at("clean_query").get<std::vector<TokenId>>();
        s.conflict_query = j.at("conflict_query").get<std::vector<TokenId>>();
        s.y_f = j.at("y_f").get<TokenId>();
        s.y_h = j.at("y_h").get<TokenId>();
        dataset.tags.push_back(split_tag_from_string(j.at("split").get<std::string>()));
        dataset.samples.push_back(std::move(s));
    }
    dataset.validate();
    return dataset;
}

TokenSequence make_input(const ModelConfig& config, const TaskSpec& task, const Scene& scene,
                         const std::vector<TokenId>& query) {
    const std::vector<TokenId> visual = scene_tokens(task, scene);
    return embed_multimodal(config, visual, query);
}

ModelConfig model_config_for(const TaskSpec& task, int n_layers, int n_heads, int d_model) {
    task.validate();
    ModelConfig config;
    config.n_layers = n_layers;
    config.n_heads = n_heads;
    config.d_model = d_model;
    if (n_heads < 1 || d_model % n_heads != 0) {
        throw ConfigError("model_config_for: d_model must be divisible by n_heads");
    }
    config.d_head = d_model / n_heads;
    config.vocab_size = task.vocab_size();
    config.n_visual_tokens = task.n_visual_tokens();
    config.max_seq = task.n_visual_tokens() + TaskSpec::query_length() + 2;
    config.validate();
    return config;
}

}  // namespace conflictheads
