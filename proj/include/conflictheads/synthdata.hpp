#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "conflictheads/model.hpp"

namespace conflictheads {

// Closed-vocabulary layout for the synthetic conflict task. Disjoint id
// ranges per token kind keep answer judging exact by token identity.
struct TaskSpec {
    int n_objects = 12;
    int n_attributes = 8;
    int n_relations = 4;
    int n_slots = 3;
    int n_triples = 2;

    TokenId object_token(int i) const { return i; }
    TokenId attribute_token(int i) const { return n_objects + i; }
    TokenId relation_token(int i) const { return n_objects + n_attributes + i; }
    TokenId slot_token(int k) const { return n_objects + n_attributes + n_relations + k; }

    TokenId ask_token() const { return special_base(); }
    TokenId object_marker() const { return special_base() + 1; }
    TokenId attribute_marker() const { return special_base() + 2; }
    TokenId hint_token() const { return special_base() + 3; }
    TokenId neutral_token() const { return special_base() + 4; }
    TokenId question_token() const { return special_base() + 5; }

    bool is_object_token(TokenId t) const { return t >= 0 && t < n_objects; }
    bool is_attribute_token(TokenId t) const {
        return t >= n_objects && t < n_objects + n_attributes;
    }

    int vocab_size() const { return special_base() + 6; }
    int n_visual_tokens() const { return 2 * n_slots + 3 * n_triples; }
    static constexpr int query_length() { return 6; }

    void validate() const;
    std::string canonical_string() const;

    bool operator==(const TaskSpec&) const = default;

private:
    int special_base() const {
        return n_objects + n_attributes + n_relations + n_slots;
    }
};

enum class ConflictType { kObject, kAttribute, kRelation };

const char* to_string(ConflictType type);
ConflictType conflict_type_from_string(const std::string& name);

// Ground-truth visual evidence: one object per slot, an attribute per
// object, and (subject, relation, object) triples with unique
// (subject, relation) pairs.
struct Scene {
    std::vector<TokenId> objects;                       // by slot
    std::vector<TokenId> attributes;                    // by slot, attribute of objects[k]
    std::vector<std::array<TokenId, 3>> relations;      // (subject, relation id, object)

    std::optional<TokenId> attribute_of(TokenId object) const;
};

// Renders the scene into the visual token prefix: per slot (object,
// attribute), then each relation triple.
std::vector<TokenId> scene_tokens(const TaskSpec& task, const Scene& scene);

struct ConflictSample {
    std::uint64_t id = 0;
    Scene scene;
    ConflictType conflict_type = ConflictType::kObject;
    std::vector<TokenId> clean_query;     // query_length() tokens
    std::vector<TokenId> conflict_query;  // same length, erroneous premise injected
    TokenId y_f = 0;                      // factual answer
    TokenId y_h = 0;                      // premise-implied (hallucinated) answer
};

struct TypeMix {
    double object = 1.0;
    double attribute = 0.0;
    double relation = 0.0;

    void validate() const;
};

// Deterministic for a fixed seed; every sample satisfies the invariants
// (premise absent from / contradicting the scene, equal query lengths,
// y_f != y_h).
std::vector<ConflictSample> generate(const TaskSpec& task, std::uint64_t seed, int n,
                                     const TypeMix& mix);

enum class SplitTag { kNone, kProto, kProbe, kTrain, kValidation, kTest };

const char* to_string(SplitTag tag);
SplitTag split_tag_from_string(const std::string& name);

// Is the sample part of the model-training portion?
inline bool is_training_tag(SplitTag tag) {
    return tag == SplitTag::kProto || tag == SplitTag::kProbe || tag == SplitTag::kTrain;
}

struct SplitSizes {
    int proto = 256;
    int train_probe = 200;
    int validation = 200;
    int test = 500;
};

struct DatasetSplits {
    std::vector<std::uint64_t> proto;        // exactly 256 ids
    std::vector<std::uint64_t> train_probe;
    std::vector<std::uint64_t> validation;
    std::vector<std::uint64_t> test;
    std::vector<std::uint64_t> train_extra;  // remaining training-portion ids
};

// Pairwise-disjoint splits; the prototype set is drawn from the training
// portion only. Id lists come back sorted ascending.
DatasetSplits split(const std::vector<ConflictSample>& samples, const SplitSizes& sizes,
                    std::uint64_t seed);

struct Dataset {
    TaskSpec task;
    std::uint64_t seed = 0;
    TypeMix mix;
    std::string config_hash = "0000000000000000";
    std::vector<ConflictSample> samples;
    std::vector<SplitTag> tags;  // parallel to samples; kNone until split

    std::vector<std::uint64_t> ids_with_tag(SplitTag tag) const;
    const ConflictSample& by_id(std::uint64_t id) const;
    SplitTag tag_of(std::uint64_t id) const;  // kNone when the dataset is untagged

    void apply_splits(const DatasetSplits& splits);
    void validate() const;
};

// One JSON record per line after a header record; format_version field in
// the header. Serialization is byte-deterministic.
void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

// Model input for one query: visual prefix + text tokens.
TokenSequence make_input(const ModelConfig& config, const TaskSpec& task, const Scene& scene,
                         const std::vector<TokenId>& query);

// ModelConfig matching this task's vocabulary and sequence shape.
ModelConfig model_config_for(const TaskSpec& task, int n_layers, int n_heads, int d_model);

}  // namespace conflictheads
