#include "conflictheads/patching.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "conflictheads/textio.hpp"

namespace conflictheads {

PatchSample make_patch_sample(const ModelConfig& config, const TaskSpec& task,
                              const ConflictSample& sample) {
    PatchSample ps;
    ps.clean = make_input(config, task, sample.scene, sample.clean_query);
    ps.conflict = make_input(config, task, sample.scene, sample.conflict_query);
    ps.y_h = sample.y_h;
    ps.y_f = sample.y_f;
    return ps;
}

void ImportanceMap::validate(const ModelConfig& config) const {
    if (n_samples < 1) throw InputError("ImportanceMap: n_samples must be >= 1");
    if (scores.size() != static_cast<std::size_t>(config.total_heads())) {
        throw InputError("ImportanceMap: expected one score per model head");
    }
    for (const auto& [id, score] : scores) {
        if (id.layer < 0 || id.layer >= config.n_layers || id.head < 0 ||
            id.head >= config.n_heads) {
            throw InputError("ImportanceMap: head " + to_string(id) + " out of range");
        }
        if (!std::isfinite(score)) {
            throw NumericError("ImportanceMap: non-finite score at head " + to_string(id));
        }
    }
}

void HeadGroups::validate() const {
    if (k_plus < 0 || k_minus < 0) throw InputError("HeadGroups: k values must be >= 0");
    if (driving.size() != driving_scores.size() ||
        resisting.size() != resisting_scores.size()) {
        throw InputError("HeadGroups: score list length mismatch");
    }
    if (driving.size() > static_cast<std::size_t>(k_plus) ||
        resisting.size() > static_cast<std::size_t>(k_minus)) {
        throw InputError("HeadGroups: more heads than the k limit");
    }
    for (double s : driving_scores) {
        if (!(s > 0.0)) throw InputError("HeadGroups: driving scores must be positive");
    }
    for (double s : resisting_scores) {
        if (!(s < 0.0)) throw InputError("HeadGroups: resisting scores must be negative");
    }
    std::set<HeadId> seen(driving.begin(), driving.end());
    if (seen.size() != driving.size()) throw InputError("HeadGroups: duplicate driving head");
    for (const HeadId& id : resisting) {
        if (!seen.insert(id).second) {
            throw InputError("HeadGroups: head " + to_string(id) + " in both groups");
        }
    }
}

double hallucination_advantage(std::span<const double> logits, TokenId y_h, TokenId y_f) {
    if (y_h == y_f) throw InputError("hallucination_advantage: y_h equals y_f");
    if (y_h < 0 || static_cast<std::size_t>(y_h) >= logits.size() || y_f < 0 ||
        static_cast<std::size_t>(y_f) >= logits.size()) {
        throw InputError("hallucination_advantage: answer token out of vocab");
    }
    return logits[static_cast<std::size_t>(y_h)] - logits[static_cast<std::size_t>(y_f)];
}

OverridePlan replace_plan(const ActivationCache& donor, std::span<const HeadId> heads,
                          PositionScope scope) {
    OverridePlan plan;
    plan.ops.reserve(heads.size());
    for (const HeadId& id : heads) {
        OverrideOp op;
        op.head = id;
        op.scope = scope;
        op.action = OverrideAction::kReplace;
        if (scope == PositionScope::kLastToken) {
            const auto row = donor.last_token(id);
            op.values.assign(row.begin(), row.end());
        } else {
            op.values.reserve(static_cast<std::size_t>(donor.seq_len()) * donor.d_head());
            for (int p = 0; p < donor.seq_len(); ++p) {
                const auto row = donor.at(id, p);
                op.values.insert(op.values.end(), row.begin(), row.end());
            }
        }
        plan.ops.push_back(std::move(op));
    }
    return plan;
}

OverridePlan zero_plan(std::span<const HeadId> heads) {
    OverridePlan plan;
    plan.ops.reserve(heads.size());
    for (const HeadId& id : heads) {
        OverrideOp op;
        op.head = id;
        op.scope = PositionScope::kAllPositions;
        op.action = OverrideAction::kZero;
        plan.ops.push_back(std::move(op));
    }
    return plan;
}

double patched_advantage(const Weights& weights, const PatchSample& sample, HeadId head,
                         PositionScope scope) {
    if (scope == PositionScope::kAllPositions &&
        sample.clean.length() != sample.conflict.length()) {
        throw InputError(
            "patched_advantage: clean and conflict runs must align for all-positions "
            "patching");
    }
    const ForwardResult clean = forward(weights, sample.clean);
    const HeadId heads[1] = {head};
    const OverridePlan plan = replace_plan(clean.cache, heads, scope);
    std::vector<double> logits;
    detail::forward_impl(weights, sample.conflict, plan, nullptr, nullptr, &logits);
    return hallucination_advantage(logits, sample.y_h, sample.y_f);
}

ImportanceMap head_importance(const Weights& weights, const Dataset& data,
                              std::span<const std::uint64_t> proto_ids,
                              PositionScope scope) {
    if (proto_ids.empty()) throw InputError("head_importance: prototype set is empty");
    std::vector<std::uint64_t> ids(proto_ids.begin(), proto_ids.end());
    std::sort(ids.begin(), ids.end());

    const ModelConfig& cfg = weights.config;
    ImportanceMap imp;
    imp.scope = scope;
    imp.n_samples = static_cast<int>(ids.size());
    std::map<HeadId, double> acc;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) acc[{l, h}] = 0.0;
    }

    for (std::uint64_t id : ids) {
        if (data.tag_of(id) == SplitTag::kTest) {
            throw InputError("head_importance: sample " + std::to_string(id) +
                             " is tagged test; head identification never sees test data");
        }
        const ConflictSample& s = data.by_id(id);
        const PatchSample ps = make_patch_sample(cfg, data.task, s);
        if (scope == PositionScope::kAllPositions &&
            ps.clean.length() != ps.conflict.length()) {
            throw InputError("head_importance: clean and conflict runs must align");
        }

        const ForwardResult clean = forward(weights, ps.clean);
        std::vector<double> logits;
        detail::forward_impl(weights, ps.conflict, {}, nullptr, nullptr, &logits);
        const double base = hallucination_advantage(logits, ps.y_h, ps.y_f);

        for (auto& [head, sum] : acc) {
            const HeadId heads[1] = {head};
            const OverridePlan plan = replace_plan(clean.cache, heads, scope);
            detail::forward_impl(weights, ps.conflict, plan, nullptr, nullptr, &logits);
            sum += base - hallucination_advantage(logits, ps.y_h, ps.y_f);
        }
    }

    for (auto& [head, sum] : acc) {
        imp.scores[head] = sum / static_cast<double>(ids.size());
    }
    return imp;
}

HeadGroups select_groups(const ImportanceMap& imp, int k_plus, int k_minus) {
    if (k_plus < 0 || k_minus < 0) throw InputError("select_groups: k values must be >= 0");
    HeadGroups groups;
    groups.k_plus = k_plus;
    groups.k_minus = k_minus;
    groups.config_hash = imp.config_hash;

    std::vector<std::pair<HeadId, double>> pos, neg;
    for (const auto& [id, score] : imp.scores) {
        if (!std::isfinite(score)) {
            throw NumericError("select_groups: non-finite score at head " + to_string(id));
        }
        if (score > 0.0) pos.emplace_back(id, score);
        if (score < 0.0) neg.emplace_back(id, score);
    }
    // stable_sort on map-ordered input keeps canonical order among ties.
    std::stable_sort(pos.begin(), pos.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::stable_sort(neg.begin(), neg.end(), [](const auto& a, const auto& b) {
        return std::abs(a.second) > std::abs(b.second);
    });
    if (pos.size() > static_cast<std::size_t>(k_plus)) pos.resize(static_cast<std::size_t>(k_plus));
    if (neg.size() > static_cast<std::size_t>(k_minus)) neg.resize(static_cast<std::size_t>(k_minus));
    for (const auto& [id, score] : pos) {
        groups.driving.push_back(id);
        groups.driving_scores.push_back(score);
    }
    for (const auto& [id, score] : neg) {
        groups.resisting.push_back(id);
        groups.resisting_scores.push_back(score);
    }
    groups.validate();
    return groups;
}

AsymmetryStats asymmetry_stats(const ImportanceMap& imp, int top_n) {
    if (top_n < 1) throw InputError("asymmetry_stats: top_n must be >= 1");
    std::vector<double> pos, neg;
    for (const auto& [id, score] : imp.scores) {
        (void)id;
        if (score > 0.0) pos.push_back(score);
        if (score < 0.0) neg.push_back(-score);
    }
    if (pos.empty() || neg.empty()) {
        throw InputError("asymmetry_stats: both polarities must be present");
    }
    std::sort(pos.begin(), pos.end(), std::greater<>());
    std::sort(neg.begin(), neg.end(), std::greater<>());
    auto total = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    };
    auto top = [top_n](const std::vector<double>& v) {
        double s = 0.0;
        const std::size_t n = std::min(v.size(), static_cast<std::size_t>(top_n));
        for (std::size_t i = 0; i < n; ++i) s += v[i];
        return s;
    };
    AsymmetryStats stats;
    stats.aggregate_ratio = total(pos) / total(neg);
    stats.top_share_driving = top(pos) / total(pos);
    stats.top_share_resisting = top(neg) / total(neg);
    return stats;
}

void save_importance(const std::string& path, const ImportanceMap& imp) {
    std::ostringstream out;
    out << "# importance-map v1\n";
    out << "# config_hash " << imp.config_hash << "\n";
    out << "# scope " << (imp.scope == PositionScope::kLastToken ? "last" : "all") << "\n";
    out << "layer,head,score,n_samples\n";
    for (const auto& [id, score] : imp.scores) {
        out << id.layer << ',' << id.head << ',' << format_double(score) << ','
            << imp.n_samples << '\n';
    }
    write_text_file(path, out.str());
}

ImportanceMap load_importance(const std::string& path) {
    const std::string content = read_text_file(path);
    std::istringstream in(content);
    std::string line;
    if (!std::getline(in, line) || trim(line) != "# importance-map v1") {
        throw IoError("not an importance-map file: " + path);
    }
    ImportanceMap imp;
    bool saw_header = false;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        if (line.rfind("# config_hash ", 0) == 0) {
            imp.config_hash = trim(line.substr(14));
            continue;
        }
        if (line.rfind("# scope ", 0) == 0) {
            const std::string scope = trim(line.substr(8));
            if (scope == "last") {
                imp.scope = PositionScope::kLastToken;
            } else if (scope == "all") {
                imp.scope = PositionScope::kAllPositions;
            } else {
                throw IoError("importance map: unknown scope " + scope);
            }
            continue;
        }
        if (line == "layer,head,score,n_samples") {
            saw_header = true;
            continue;
        }
        if (!saw_header) throw IoError("importance map: rows before column header");
        const auto fields = split_string(line, ',');
        if (fields.size() != 4) throw IoError("importance map: malformed row: " + line);
        const HeadId id{static_cast<int>(parse_int(fields[0])),
                        static_cast<int>(parse_int(fields[1]))};
        if (!imp.scores.emplace(id, parse_double(fields[2])).second) {
            throw IoError("importance map: duplicate head " + to_string(id));
        }
        imp.n_samples = static_cast<int>(parse_int(fields[3]));
    }
    if (imp.scores.empty()) throw IoError("importance map has no rows: " + path);
    return imp;
}

void save_groups(const std::string& path, const HeadGroups& groups) {
    groups.validate();
    std::ostringstream out;
    out << "# head-groups v1\n";
    out << "# config_hash " << groups.config_hash << "\n";
    out << "# k_plus " << groups.k_plus << "\n";
    out << "# k_minus " << groups.k_minus << "\n";
    out << "polarity,rank,layer,head,score\n";
    for (std::size_t i = 0; i < groups.driving.size(); ++i) {
        out << "driving," << i << ',' << groups.driving[i].layer << ','
            << groups.driving[i].head << ',' << format_double(groups.driving_scores[i])
            << '\n';
    }
    for (std::size_t i = 0; i < groups.resisting.size(); ++i) {
        out << "resisting," << i << ',' << groups.resisting[i].layer << ','
            << groups.resisting[i].head << ',' << format_double(groups.resisting_scores[i])
            << '\n';
    }
    write_text_file(path, out.str());
}

HeadGroups load_groups(const std::string& path) {
    const std::string content = read_text_file(path);
    std::istringstream in(content);
    std::string line;
    if (!std::getline(in, line) || trim(line) != "# head-groups v1") {
        throw IoError("not a head-groups file: " + path);
    }
    HeadGroups groups;
    bool saw_header = false;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        if (line.rfind("# config_hash ", 0) == 0) {
            groups.config_hash = trim(line.substr(14));
            continue;
        }
        if (line.rfind("# k_plus ", 0) == 0) {
            groups.k_plus = static_cast<int>(parse_int(trim(line.substr(9))));
            continue;
        }
        if (line.rfind("# k_minus ", 0) == 0) {
            groups.k_minus = static_cast<int>(parse_int(trim(line.substr(10))));
            continue;
        }
        if (line == "polarity,rank,layer,head,score") {
            saw_header = true;
            continue;
        }
        if (!saw_header) throw IoError("head groups: rows before column header");
        const auto fields = split_string(line, ',');
        if (fields.size() != 5) throw IoError("head groups: malformed row: " + line);
        const HeadId id{static_cast<int>(parse_int(fields[2])),
                        static_cast<int>(parse_int(fields[3]))};
        const double score = parse_double(fields[4]);
        if (fields[0] == "driving") {
            if (parse_int(fields[1]) != static_cast<long long>(groups.driving.size())) {
                throw IoError("head groups: driving ranks out of order");
            }
            groups.driving.push_back(id);
            groups.driving_scores.push_back(score);
        } else if (fields[0] == "resisting") {
            if (parse_int(fields[1]) != static_cast<long long>(groups.resisting.size())) {
                throw IoError("head groups: resisting ranks out of order");
            }
            groups.resisting.push_back(id);
            groups.resisting_scores.push_back(score);
        } else {
            throw IoError("head groups: unknown polarity " + fields[0]);
        }
    }
    groups.validate();
    return groups;
}

}  // namespace conflictheads
