#include "conflictheads/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "conflictheads/rng.hpp"
#include "conflictheads/textio.hpp"

namespace conflictheads {

using nlohmann::json;

void AblationCondition::validate(const ModelConfig& config) const {
    if (kind == Kind::kBase && !head_set.empty()) {
        throw InputError("AblationCondition: base condition must carry no heads");
    }
    if (kind == Kind::kRandom && !seed.has_value()) {
        throw InputError("AblationCondition: random condition needs a seed");
    }
    std::set<HeadId> seen;
    for (const HeadId& id : head_set) {
        if (id.layer < 0 || id.layer >= config.n_layers || id.head < 0 ||
            id.head >= config.n_heads) {
            throw ConfigError("AblationCondition: head " + to_string(id) + " out of range");
        }
        if (!seen.insert(id).second) {
            throw InputError("AblationCondition: duplicate head " + to_string(id));
        }
    }
}

const char* to_string(AblationCondition::Kind kind) {
    switch (kind) {
        case AblationCondition::Kind::kBase: return "base";
        case AblationCondition::Kind::kDrive: return "drive";
        case AblationCondition::Kind::kResist: return "resist";
        case AblationCondition::Kind::kJoint: return "joint";
        case AblationCondition::Kind::kRandom: return "random";
    }
    return "base";
}

AblationCondition base_condition() { return {}; }

AblationCondition drive_condition(const HeadGroups& groups) {
    AblationCondition c;
    c.kind = AblationCondition::Kind::kDrive;
    c.head_set = groups.driving;
    return c;
}

AblationCondition resist_condition(const HeadGroups& groups) {
    AblationCondition c;
    c.kind = AblationCondition::Kind::kResist;
    c.head_set = groups.resisting;
    return c;
}

AblationCondition joint_condition(const HeadGroups& groups) {
    AblationCondition c;
    c.kind = AblationCondition::Kind::kJoint;
    const std::size_t k = std::min(groups.driving.size(), groups.resisting.size());
    c.head_set.assign(groups.driving.begin(), groups.driving.begin() + static_cast<std::ptrdiff_t>(k));
    c.head_set.insert(c.head_set.end(), groups.resisting.begin(),
                      groups.resisting.begin() + static_cast<std::ptrdiff_t>(k));
    return c;
}

AblationCondition random_condition(const ModelConfig& config, std::size_t size,
                                   std::uint64_t seed) {
    if (size > static_cast<std::size_t>(config.total_heads())) {
        throw InputError("random_condition: more heads requested than the model has");
    }
    std::vector<HeadId> all;
    all.reserve(static_cast<std::size_t>(config.total_heads()));
    for (int l = 0; l < config.n_layers; ++l) {
        for (int h = 0; h < config.n_heads; ++h) all.push_back({l, h});
    }
    Rng rng(derive_seed(seed, 6));
    rng.shuffle(all);
    AblationCondition c;
    c.kind = AblationCondition::Kind::kRandom;
    c.seed = seed;
    c.head_set.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(size));
    std::sort(c.head_set.begin(), c.head_set.end());
    return c;
}

void ProbeModel::validate() const {
    if (weights.size() != feature_mean.size() || weights.size() != feature_std.size()) {
        throw InputError("ProbeModel: weight/statistics width mismatch");
    }
    if (weights.empty()) throw InputError("ProbeModel: empty weight vector");
    if (lambda < 0.0) throw InputError("ProbeModel: lambda must be >= 0");
    auto finite = [](double x) { return std::isfinite(x); };
    if (!finite(bias)) throw NumericError("ProbeModel: non-finite bias");
    for (double w : weights) {
        if (!finite(w)) throw NumericError("ProbeModel: non-finite weight");
    }
    for (double s : feature_std) {
        if (!(s > 0.0)) throw InputError("ProbeModel: feature std must be positive");
    }
    if (tau.has_value() && (*tau < 0.0 || *tau > 1.0 || !finite(*tau))) {
        throw InputError("ProbeModel: tau must lie in [0, 1]");
    }
}

TokenId ablate_generate(const Weights& weights, const TokenSequence& input,
                        std::span<const HeadId> head_set) {
    return generate_answer(weights, input, zero_plan(head_set));
}

std::vector<double> resisting_feature(const ActivationCache& cache,
                                      std::span<const HeadId> resisting) {
    if (resisting.empty()) {
        throw ConfigError("resisting_feature: head list must be nonempty");
    }
    std::set<HeadId> seen;
    for (const HeadId& id : resisting) {
        if (!seen.insert(id).second) {
            throw ConfigError("resisting_feature: duplicate head " + to_string(id));
        }
    }
    std::vector<double> feature(static_cast<std::size_t>(cache.d_head()), 0.0);
    for (const HeadId& id : resisting) {
        const auto row = cache.last_token(id);
        for (std::size_t j = 0; j < feature.size(); ++j) feature[j] += row[j];
    }
    const double inv = 1.0 / static_cast<double>(resisting.size());
    for (double& x : feature) x *= inv;
    return feature;
}

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double probe_score(const ProbeModel& probe, std::span<const double> raw_feature) {
    if (raw_feature.size() != probe.weights.size()) {
        throw InputError("probe_score: feature width mismatch");
    }
    double z = probe.bias;
    for (std::size_t j = 0; j < raw_feature.size(); ++j) {
        z += probe.weights[j] * (raw_feature[j] - probe.feature_mean[j]) /
             probe.feature_std[j];
    }
    return sigmoid(z);
}

namespace {

// log(1 + exp(t)) without overflow.
double log1p_exp(double t) {
    if (t > 0.0) return t + std::log1p(std::exp(-t));
    return std::log1p(std::exp(t));
}

void check_probe_data(const std::vector<std::vector<double>>& features,
                      std::span<const int> labels, const char* who) {
    if (features.empty()) throw InputError(std::string(who) + ": no feature rows");
    if (features.size() != labels.size()) {
        throw InputError(std::string(who) + ": feature/label count mismatch");
    }
    const std::size_t width = features.front().size();
    if (width == 0) throw InputError(std::string(who) + ": empty feature vectors");
    for (const auto& row : features) {
        if (row.size() != width) {
            throw InputError(std::string(who) + ": ragged feature rows");
        }
    }
    bool has_pos = false, has_neg = false;
    for (int y : labels) {
        if (y == 1) {
            has_pos = true;
        } else if (y == 0) {
            has_neg = true;
        } else {
            throw InputError(std::string(who) + ": labels must be 0 or 1");
        }
    }
    if (!has_pos || !has_neg) {
        throw InputError(std::string(who) + ": both classes must be present");
    }
}

}  // namespace

double probe_objective(std::span<const double> w, double bias,
                       const std::vector<std::vector<double>>& standardized_features,
                       std::span<const int> labels, double lambda) {
    const std::size_t n = standardized_features.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& x = standardized_features[i];
        double z = bias;
        for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * x[j];
        const double y = labels[i] == 1 ? 1.0 : -1.0;
        total += log1p_exp(-y * z);
    }
    total /= static_cast<double>(n);
    for (double wj : w) total += lambda * std::abs(wj);
    return total;
}

ProbeModel train_probe(const std::vector<std::vector<double>>& features,
                       std::span<const int> labels, double lambda) {
    check_probe_data(features, labels, "train_probe");
    if (lambda < 0.0) throw InputError("train_probe: lambda must be >= 0");

    const std::size_t n = features.size();
    const std::size_t d = features.front().size();

    ProbeModel probe;
    probe.lambda = lambda;
    probe.feature_mean.assign(d, 0.0);
    probe.feature_std.assign(d, 1.0);
    for (const auto& row : features) {
        for (std::size_t j = 0; j < d; ++j) probe.feature_mean[j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) probe.feature_mean[j] /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (const auto& row : features) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - probe.feature_mean[j];
            var[j] += c * c;
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        const double s = std::sqrt(var[j] / static_cast<double>(n));
        // Constant features carry no signal; unit scale keeps them harmless.
        probe.feature_std[j] = s > 1e-12 ? s : 1.0;
    }

    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            x[i][j] = (features[i][j] - probe.feature_mean[j]) / probe.feature_std[j];
        }
    }
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = labels[i] == 1 ? 1.0 : -1.0;

    probe.weights.assign(d, 0.0);
    probe.bias = 0.0;
    std::vector<double> z(n, 0.0);  // current margins w.x + b

    // Curvature bound of the logistic loss is 1/4; with unit-variance
    // features the majorized per-coordinate curvature is at most 1/4 as well.
    std::vector<double> curvature(d + 1, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i][j] * x[i][j];
        curvature[j] = std::max(0.25 * s / static_cast<double>(n), 1e-12);
    }
    curvature[d] = 0.25;

    double objective = probe_objective(probe.weights, probe.bias, x, labels, lambda);
    const int max_passes = 10000;
    for (int pass = 0; pass < max_passes; ++pass) {
        for (std::size_t j = 0; j <= d; ++j) {
            double g = 0.0;
            if (j < d) {
                for (std::size_t i = 0; i < n; ++i) {
                    g += -y[i] * x[i][j] * sigmoid(-y[i] * z[i]);
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) g += -y[i] * sigmoid(-y[i] * z[i]);
            }
            g /= static_cast<double>(n);
            const double c = curvature[j];
            if (j < d) {
                const double old = probe.weights[j];
                const double u = old - g / c;
                const double thresh = lambda / c;
                double next = 0.0;
                if (u > thresh) {
                    next = u - thresh;
                } else if (u < -thresh) {
                    next = u + thresh;
                }
                if (next != old) {
                    const double delta = next - old;
                    for (std::size_t i = 0; i < n; ++i) z[i] += delta * x[i][j];
                    probe.weights[j] = next;
                }
            } else {
                const double delta = -g / c;
                if (delta != 0.0) {
                    probe.bias += delta;
                    for (std::size_t i = 0; i < n; ++i) z[i] += delta;
                }
            }
        }
        const double next_objective =
            probe_objective(probe.weights, probe.bias, x, labels, lambda);
        if (!std::isfinite(next_objective)) {
            throw NumericError("train_probe: objective diverged");
        }
        const double decrease = objective - next_objective;
        objective = next_objective;
        if (decrease < 1e-8) break;
    }
    return probe;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw InputError("auroc: score/label count mismatch");
    }
    if (scores.empty()) throw InputError("auroc: empty input");
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : labels) {
        if (y == 1) {
            ++n_pos;
        } else if (y == 0) {
            ++n_neg;
        } else {
            throw InputError("auroc: labels must be 0 or 1");
        }
    }
    if (n_pos == 0 || n_neg == 0) {
        throw InputError("auroc: both classes must be present");
    }

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups; rank sum of positives gives the
    // Mann-Whitney statistic.
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) {
            if (labels[order[t]] == 1) pos_rank_sum += avg_rank;
        }
        i = j + 1;
    }
    const double n_pos_d = static_cast<double>(n_pos);
    return (pos_rank_sum - n_pos_d * (n_pos_d + 1.0) / 2.0) /
           (n_pos_d * static_cast<double>(n_neg));
}

ThresholdChoice select_threshold(const ProbeModel& probe,
                                 const std::vector<std::vector<double>>& features,
                                 std::span<const int> labels) {
    check_probe_data(features, labels, "select_threshold");
    std::vector<double> scores;
    scores.reserve(features.size());
    for (const auto& row : features) scores.push_back(probe_score(probe, row));

    std::vector<double> unique_scores = scores;
    std::sort(unique_scores.begin(), unique_scores.end());
    unique_scores.erase(std::unique(unique_scores.begin(), unique_scores.end()),
                        unique_scores.end());
    std::vector<double> candidates = {0.0, 1.0};
    for (std::size_t i = 0; i + 1 < unique_scores.size(); ++i) {
        candidates.push_back(0.5 * (unique_scores[i] + unique_scores[i + 1]));
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    ThresholdChoice best;
    best.tau = -1.0;
    best.f1 = -1.0;
    for (double tau : candidates) {
        int tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const bool predicted = scores[i] >= tau;
            if (predicted && labels[i] == 1) ++tp;
            if (predicted && labels[i] == 0) ++fp;
            if (!predicted && labels[i] == 1) ++fn;
        }
        const int denom = 2 * tp + fp + fn;
        const double f1 = denom == 0 ? 0.0 : 2.0 * tp / static_cast<double>(denom);
        if (f1 > best.f1 || (f1 == best.f1 && tau > best.tau)) {
            best.f1 = f1;
            best.tau = tau;
        }
    }
    return best;
}

MaciOutput maci_generate(const Weights& weights, const TokenSequence& input,
                         const ProbeModel& probe, const HeadGroups& groups) {
    if (!probe.tau.has_value()) {
        throw ConfigError("maci_generate: probe has no decision threshold");
    }
    probe.validate();
    groups.validate();

    const ForwardResult prefill = forward(weights, input);
    const std::vector<double> feature =
        resisting_feature(prefill.cache, groups.resisting);

    MaciOutput out;
    out.score = probe_score(probe, feature);
    out.fired = out.score >= *probe.tau;
    if (out.fired) {
        out.answer = ablate_generate(weights, input, groups.driving);
    } else {
        TokenId best = 0;
        for (TokenId t = 1; t < static_cast<TokenId>(prefill.logits.size()); ++t) {
            if (prefill.logits[static_cast<std::size_t>(t)] >
                prefill.logits[static_cast<std::size_t>(best)]) {
                best = t;
            }
        }
        out.answer = best;
    }
    return out;
}

ProbeData collect_probe_data(const Weights& weights, const Dataset& data,
                             std::span<const std::uint64_t> ids,
                             std::span<const HeadId> resisting) {
    if (ids.empty()) throw InputError("collect_probe_data: no sample ids");
    std::vector<std::uint64_t> sorted(ids.begin(), ids.end());
    std::sort(sorted.begin(), sorted.end());

    ProbeData out;
    out.features.reserve(sorted.size() * 2);
    out.labels.reserve(sorted.size() * 2);
    for (std::uint64_t id : sorted) {
        if (data.tag_of(id) == SplitTag::kTest) {
            throw InputError("collect_probe_data: sample " + std::to_string(id) +
                             " is tagged test; probes never see test data");
        }
        const ConflictSample& s = data.by_id(id);
        const TokenSequence clean_in =
            make_input(weights.config, data.task, s.scene, s.clean_query);
        const TokenSequence conflict_in =
            make_input(weights.config, data.task, s.scene, s.conflict_query);
        out.features.push_back(resisting_feature(forward(weights, clean_in).cache, resisting));
        out.labels.push_back(0);
        out.features.push_back(
            resisting_feature(forward(weights, conflict_in).cache, resisting));
        out.labels.push_back(1);
    }
    return out;
}

ProbeModel train_probe_on_grid(const ProbeData& train, const ProbeData& validation,
                               std::span<const double> lambda_grid) {
    if (lambda_grid.empty()) throw InputError("train_probe_on_grid: empty lambda grid");
    std::vector<double> grid(lambda_grid.begin(), lambda_grid.end());
    std::sort(grid.begin(), grid.end());

    ProbeModel best;
    double best_auroc = -1.0;
    for (double lambda : grid) {
        ProbeModel probe = train_probe(train.features, train.labels, lambda);
        std::vector<double> scores;
        scores.reserve(validation.features.size());
        for (const auto& row : validation.features) {
            scores.push_back(probe_score(probe, row));
        }
        const double val_auroc = auroc(scores, validation.labels);
        // >= prefers the larger lambda (sparser probe) on ties.
        if (val_auroc >= best_auroc) {
            best_auroc = val_auroc;
            best = std::move(probe);
        }
    }
    return best;
}

void save_probe(const std::string& path, const ProbeModel& probe) {
    probe.validate();
    json j;
    j["kind"] = "conflictheads-probe";
    j["format_version"] = 1;
    j["weights"] = probe.weights;
    j["bias"] = probe.bias;
    j["lambda"] = probe.lambda;
    if (probe.tau.has_value()) {
        j["tau"] = *probe.tau;
    } else {
        j["tau"] = nullptr;
    }
    j["feature_mean"] = probe.feature_mean;
    j["feature_std"] = probe.feature_std;
    j["config_hash"] = probe.config_hash;
    json groups;
    groups["k_plus"] = probe.groups.k_plus;
    groups["k_minus"] = probe.groups.k_minus;
    groups["config_hash"] = probe.groups.config_hash;
    auto head_list = [](const std::vector<HeadId>& heads) {
        json out = json::array();
        for (const HeadId& id : heads) out.push_back({id.layer, id.head});
        return out;
    };
    groups["driving"] = head_list(probe.groups.driving);
    groups["driving_scores"] = probe.groups.driving_scores;
    groups["resisting"] = head_list(probe.groups.resisting);
    groups["resisting_scores"] = probe.groups.resisting_scores;
    j["groups"] = groups;
    write_text_file(path, j.dump(2) + "\n");
}

ProbeModel load_probe(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw IoError("probe file is not valid JSON: " + std::string(e.what()));
    }
    if (j.value("kind", "") != "conflictheads-probe") {
        throw IoError("not a probe file: " + path);
    }
    if (j.value("format_version", 0) != 1) {
        throw IoError("unsupported probe format version");
    }
    ProbeModel probe;
    probe.weights = j.at("weights").get<std::vector<double>>();
    probe.bias = j.at("bias").get<double>();
    probe.lambda = j.at("lambda").get<double>();
    if (!j.at("tau").is_null()) probe.tau = j.at("tau").get<double>();
    probe.feature_mean = j.at("feature_mean").get<std::vector<double>>();
    probe.feature_std = j.at("feature_std").get<std::vector<double>>();
    probe.config_hash = j.value("config_hash", "0000000000000000");
    const json& groups = j.at("groups");
    probe.groups.k_plus = groups.at("k_plus").get<int>();
    probe.groups.k_minus = groups.at("k_minus").get<int>();
    probe.groups.config_hash = groups.value("config_hash", "0000000000000000");
    auto head_list = [](const json& arr) {
        std::vector<HeadId> out;
        for (const auto& pair : arr) {
            out.push_back({pair.at(0).get<int>(), pair.at(1).get<int>()});
        }
        return out;
    };
    probe.groups.driving = head_list(groups.at("driving"));
    probe.groups.driving_scores = groups.at("driving_scores").get<std::vector<double>>();
    probe.groups.resisting = head_list(groups.at("resisting"));
    probe.groups.resisting_scores = groups.at("resisting_scores").get<std::vector<double>>();
    probe.validate();
    probe.groups.validate();
    return probe;
}

}  // namespace conflictheads
