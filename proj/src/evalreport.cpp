#include "conflictheads/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "conflictheads/rng.hpp"
#include "conflictheads/textio.hpp"

namespace conflictheads {

const char* to_string(Verdict verdict) {
    switch (verdict) {
        case Verdict::kHallucinated: return "hallucinated";
        case Verdict::kFactual: return "factual";
        case Verdict::kOther: return "other";
    }
    return "other";
}

int verdict_label(Verdict verdict) { return static_cast<int>(verdict); }

Verdict judge(TokenId answer, TokenId y_h, TokenId y_f) {
    if (answer == y_h) return Verdict::kHallucinated;
    if (answer == y_f) return Verdict::kFactual;
    return Verdict::kOther;
}

double hallucination_rate(std::span<const JudgedOutcome> outcomes) {
    if (outcomes.empty()) throw InputError("hallucination_rate: no outcomes");
    std::size_t hits = 0;
    for (const auto& o : outcomes) {
        if (o.verdict == Verdict::kHallucinated) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double clean_accuracy(std::span<const JudgedOutcome> outcomes) {
    if (outcomes.empty()) throw InputError("clean_accuracy: no outcomes");
    std::size_t hits = 0;
    for (const auto& o : outcomes) {
        if (o.verdict == Verdict::kFactual) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double cohen_kappa(std::span<const int> labels_a, std::span<const int> labels_b) {
    if (labels_a.size() != labels_b.size()) {
        throw InputError("cohen_kappa: label lists differ in length");
    }
    if (labels_a.empty()) throw InputError("cohen_kappa: empty label lists");

    const double n = static_cast<double>(labels_a.size());
    std::map<int, double> count_a, count_b;
    double agree = 0.0;
    for (std::size_t i = 0; i < labels_a.size(); ++i) {
        count_a[labels_a[i]] += 1.0;
        count_b[labels_b[i]] += 1.0;
        if (labels_a[i] == labels_b[i]) agree += 1.0;
    }
    const double p_o = agree / n;
    double p_e = 0.0;
    for (const auto& [label, ca] : count_a) {
        const auto it = count_b.find(label);
        if (it != count_b.end()) p_e += (ca / n) * (it->second / n);
    }
    if (p_e >= 1.0) return 1.0;  // total chance agreement implies identical constants
    return (p_o - p_e) / (1.0 - p_e);
}

ConditionResult evaluate_condition(const Weights& weights, const Dataset& data,
                                   std::span<const std::uint64_t> ids,
                                   const AblationCondition& condition) {
    if (ids.empty()) throw InputError("evaluate_condition: no sample ids");
    condition.validate(weights.config);
    std::vector<std::uint64_t> sorted(ids.begin(), ids.end());
    std::sort(sorted.begin(), sorted.end());

    ConditionResult result;
    result.condition = to_string(condition.kind);
    result.seed = condition.seed;
    result.n_samples = static_cast<int>(sorted.size());

    std::vector<JudgedOutcome> conflict_outcomes, clean_outcomes;
    conflict_outcomes.reserve(sorted.size());
    clean_outcomes.reserve(sorted.size());
    for (std::uint64_t id : sorted) {
        const ConflictSample& s = data.by_id(id);
        const TokenSequence conflict_in =
            make_input(weights.config, data.task, s.scene, s.conflict_query);
        const TokenSequence clean_in =
            make_input(weights.config, data.task, s.scene, s.clean_query);
        const TokenId conflict_answer =
            ablate_generate(weights, conflict_in, condition.head_set);
        const TokenId clean_answer = ablate_generate(weights, clean_in, condition.head_set);
        conflict_outcomes.push_back(
            {id, result.condition, conflict_answer, judge(conflict_answer, s.y_h, s.y_f)});
        clean_outcomes.push_back(
            {id, result.condition, clean_answer, judge(clean_answer, s.y_h, s.y_f)});
    }
    result.hallucination_rate = hallucination_rate(conflict_outcomes);
    result.clean_accuracy = clean_accuracy(clean_outcomes);
    return result;
}

OverlapResult topk_overlap(const ImportanceMap& a, const ImportanceMap& b, int k) {
    if (k < 1) throw InputError("topk_overlap: k must be >= 1");
    const HeadGroups ga = select_groups(a, k, k);
    const HeadGroups gb = select_groups(b, k, k);
    auto overlap = [k](const std::vector<HeadId>& xs, const std::vector<HeadId>& ys) {
        const std::set<HeadId> set_y(ys.begin(), ys.end());
        int shared = 0;
        for (const HeadId& id : xs) {
            if (set_y.count(id) != 0) ++shared;
        }
        return static_cast<double>(shared) / static_cast<double>(k);
    };
    return {overlap(ga.driving, gb.driving), overlap(ga.resisting, gb.resisting)};
}

OverlapResult split_half_overlap(const Weights& weights, const Dataset& data,
                                 std::span<const std::uint64_t> proto_ids, int k,
                                 std::uint64_t seed) {
    if (proto_ids.size() < 2) {
        throw InputError("split_half_overlap: need at least 2 prototype samples");
    }
    std::vector<std::uint64_t> ids(proto_ids.begin(), proto_ids.end());
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, 7));
    rng.shuffle(ids);
    const std::size_t half = ids.size() / 2;
    const std::vector<std::uint64_t> first(ids.begin(),
                                           ids.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<std::uint64_t> second(ids.begin() + static_cast<std::ptrdiff_t>(half),
                                            ids.end());
    const ImportanceMap imp_a = head_importance(weights, data, first, PositionScope::kAllPositions);
    const ImportanceMap imp_b =
        head_importance(weights, data, second, PositionScope::kAllPositions);
    return topk_overlap(imp_a, imp_b, k);
}

SensitivityCurves sensitivity_sweep(const Weights& weights, const Dataset& data,
                                    const ImportanceMap& imp,
                                    std::span<const int> k_plus_grid,
                                    std::span<const int> k_minus_grid,
                                    std::span<const std::uint64_t> probe_ids,
                                    std::span<const std::uint64_t> validation_ids,
                                    double lambda) {
    if (k_plus_grid.empty() && k_minus_grid.empty()) {
        throw InputError("sensitivity_sweep: both grids are empty");
    }
    SensitivityCurves curves;
    for (int k_plus : k_plus_grid) {
        const HeadGroups groups = select_groups(imp, k_plus, 0);
        AblationCondition condition;
        condition.kind = AblationCondition::Kind::kDrive;
        condition.head_set = groups.driving;
        const ConditionResult r =
            evaluate_condition(weights, data, validation_ids, condition);
        curves.drive.push_back({k_plus, r.hallucination_rate, r.clean_accuracy});
    }
    for (int k_minus : k_minus_grid) {
        const HeadGroups groups = select_groups(imp, 0, k_minus);
        if (groups.resisting.empty()) {
            throw InputError("sensitivity_sweep: no resisting heads at k_minus=" +
                             std::to_string(k_minus));
        }
        const ProbeData train = collect_probe_data(weights, data, probe_ids, groups.resisting);
        const ProbeData val =
            collect_probe_data(weights, data, validation_ids, groups.resisting);
        const ProbeModel probe = train_probe(train.features, train.labels, lambda);
        std::vector<double> scores;
        scores.reserve(val.features.size());
        for (const auto& row : val.features) scores.push_back(probe_score(probe, row));
        curves.probe.push_back({k_minus, auroc(scores, val.labels)});
    }
    return curves;
}

namespace {

void check_fraction(double x, const char* what) {
    if (!std::isfinite(x) || x < 0.0 || x > 1.0) {
        throw InputError(std::string("emit_report: ") + what + " outside [0,1]");
    }
}

}  // namespace

void Report::validate() const {
    if (config_hash.size() != 16) {
        throw InputError("emit_report: report must carry a 16-hex config hash");
    }
    if (conditions.empty()) throw InputError("emit_report: no condition results");
    for (const auto& c : conditions) {
        if (c.condition.empty()) throw InputError("emit_report: unnamed condition");
        check_fraction(c.hallucination_rate, "hallucination rate");
        check_fraction(c.clean_accuracy, "clean accuracy");
        if (c.n_samples < 1) throw InputError("emit_report: condition without samples");
    }
    if (random_mean_hallucination_rate) {
        check_fraction(*random_mean_hallucination_rate, "random mean rate");
    }
    if (random_mean_clean_accuracy) {
        check_fraction(*random_mean_clean_accuracy, "random mean accuracy");
    }
    if (probe) {
        check_fraction(probe->auroc, "probe auroc");
        check_fraction(probe->f1, "probe f1");
        check_fraction(probe->tau, "probe tau");
        if (!(probe->lambda >= 0.0)) throw InputError("emit_report: negative probe lambda");
    }
    if (maci) {
        check_fraction(maci->hallucination_rate, "maci rate");
        check_fraction(maci->clean_accuracy, "maci accuracy");
        check_fraction(maci->fired_rate_conflict, "maci fired rate (conflict)");
        check_fraction(maci->fired_rate_clean, "maci fired rate (clean)");
    }
    if (judge_kappa && !std::isfinite(*judge_kappa)) {
        throw InputError("emit_report: non-finite judge kappa");
    }
    if (asymmetry) {
        if (!std::isfinite(asymmetry->aggregate_ratio)) {
            throw InputError("emit_report: non-finite asymmetry ratio");
        }
        check_fraction(asymmetry->top_share_driving, "asymmetry driving share");
        check_fraction(asymmetry->top_share_resisting, "asymmetry resisting share");
    }
    for (const auto& row : split_half) {
        check_fraction(row.driving, "split-half driving overlap");
        check_fraction(row.resisting, "split-half resisting overlap");
        if (row.k < 1) throw InputError("emit_report: split-half k must be >= 1");
    }
    for (const auto& p : sensitivity.drive) {
        check_fraction(p.hallucination_rate, "sensitivity rate");
        check_fraction(p.clean_accuracy, "sensitivity accuracy");
    }
    for (const auto& p : sensitivity.probe) check_fraction(p.val_auroc, "sensitivity auroc");
}

namespace {

std::string seed_field(const std::optional<std::uint64_t>& seed) {
    return seed.has_value() ? std::to_string(*seed) : std::string();
}

void append_row(std::ostringstream& out, const std::string& section,
                const std::string& condition, double x, double y,
                const std::optional<std::uint64_t>& seed = std::nullopt) {
    out << section << ',' << condition << ',' << format_double(x) << ','
        << format_double(y) << ',' << seed_field(seed) << '\n';
}

std::string render_rows(const Report& r) {
    std::ostringstream out;
    out << "# report-rows v1\n";
    out << "# config_hash " << r.config_hash << "\n";
    out << "# data_seed " << r.data_seed << "\n";
    out << "# split_seed " << r.split_seed << "\n";
    out << "# train_seed " << r.train_seed << "\n";
    out << "section,condition,x,y,seed\n";
    append_row(out, "selection", "k_plus", 0.0, r.k_plus);
    append_row(out, "selection", "k_minus", 0.0, r.k_minus);
    for (const auto& c : r.conditions) {
        append_row(out, "hallucination_rate", c.condition, 0.0, c.hallucination_rate, c.seed);
        append_row(out, "clean_accuracy", c.condition, 0.0, c.clean_accuracy, c.seed);
    }
    if (r.random_mean_hallucination_rate) {
        append_row(out, "hallucination_rate", "random_mean", 0.0,
                   *r.random_mean_hallucination_rate);
    }
    if (r.random_mean_clean_accuracy) {
        append_row(out, "clean_accuracy", "random_mean", 0.0, *r.random_mean_clean_accuracy);
    }
    if (r.probe) {
        append_row(out, "probe", "auroc", 0.0, r.probe->auroc);
        append_row(out, "probe", "f1", 0.0, r.probe->f1);
        append_row(out, "probe", "tau", 0.0, r.probe->tau);
        append_row(out, "probe", "lambda", 0.0, r.probe->lambda);
    }
    if (r.maci) {
        append_row(out, "maci", "hallucination_rate", 0.0, r.maci->hallucination_rate);
        append_row(out, "maci", "clean_accuracy", 0.0, r.maci->clean_accuracy);
        append_row(out, "maci", "fired_rate_conflict", 0.0, r.maci->fired_rate_conflict);
        append_row(out, "maci", "fired_rate_clean", 0.0, r.maci->fired_rate_clean);
    }
    if (r.judge_kappa) {
        append_row(out, "judging", "kappa_exact_vs_lenient", 0.0, *r.judge_kappa);
    }
    if (r.asymmetry) {
        const double top_n = r.asymmetry_top_n;
        append_row(out, "asymmetry", "aggregate_ratio", top_n, r.asymmetry->aggregate_ratio);
        append_row(out, "asymmetry", "top_share_driving", top_n,
                   r.asymmetry->top_share_driving);
        append_row(out, "asymmetry", "top_share_resisting", top_n,
                   r.asymmetry->top_share_resisting);
    }
    for (const auto& row : r.split_half) {
        append_row(out, "split_half", "driving", row.k, row.driving, row.seed);
        append_row(out, "split_half", "resisting", row.k, row.resisting, row.seed);
    }
    for (const auto& p : r.sensitivity.drive) {
        append_row(out, "sensitivity_drive", "hallucination_rate", p.k_plus,
                   p.hallucination_rate);
        append_row(out, "sensitivity_drive", "clean_accuracy", p.k_plus, p.clean_accuracy);
    }
    for (const auto& p : r.sensitivity.probe) {
        append_row(out, "sensitivity_probe", "auroc", p.k_minus, p.val_auroc);
    }
    return out.str();
}

std::string render_document(const Report& r) {
    std::ostringstream out;
    auto fd = [](double x) { return format_double(x); };
    out << "conflict-head analysis report\n";
    out << "=============================\n\n";
    out << "config_hash: " << r.config_hash << "\n";
    out << "seeds: data=" << r.data_seed << " split=" << r.split_seed
        << " train=" << r.train_seed << "\n";
    out << "selected groups: k_plus=" << r.k_plus << " k_minus=" << r.k_minus << "\n\n";

    out << "ablation conditions (test split)\n";
    for (const auto& c : r.conditions) {
        out << "  " << c.condition;
        if (c.seed) out << " (seed " << *c.seed << ")";
        out << ": hallucination_rate=" << fd(c.hallucination_rate)
            << " clean_accuracy=" << fd(c.clean_accuracy) << " n=" << c.n_samples << "\n";
    }
    if (r.random_mean_hallucination_rate && r.random_mean_clean_accuracy) {
        out << "  random (seed mean): hallucination_rate="
            << fd(*r.random_mean_hallucination_rate)
            << " clean_accuracy=" << fd(*r.random_mean_clean_accuracy) << "\n";
    }
    out << "\n";

    if (r.probe) {
        out << "conflict probe\n";
        out << "  validation auroc=" << fd(r.probe->auroc) << " f1=" << fd(r.probe->f1)
            << " tau=" << fd(r.probe->tau) << " lambda=" << fd(r.probe->lambda) << "\n\n";
    }
    if (r.maci) {
        out << "conditional intervention\n";
        out << "  hallucination_rate=" << fd(r.maci->hallucination_rate)
            << " clean_accuracy=" << fd(r.maci->clean_accuracy) << "\n";
        out << "  fired: conflict=" << fd(r.maci->fired_rate_conflict)
            << " clean=" << fd(r.maci->fired_rate_clean) << "\n\n";
    }
    if (r.judge_kappa) {
        out << "judging\n";
        out << "  kappa (exact vs lenient rule): " << fd(*r.judge_kappa) << "\n\n";
    }
    if (r.asymmetry) {
        out << "importance asymmetry (top_n=" << r.asymmetry_top_n << ")\n";
        out << "  aggregate_ratio=" << fd(r.asymmetry->aggregate_ratio)
            << " top_share_driving=" << fd(r.asymmetry->top_share_driving)
            << " top_share_resisting=" << fd(r.asymmetry->top_share_resisting) << "\n\n";
    }
    if (!r.split_half.empty()) {
        out << "split-half stability\n";
        for (const auto& row : r.split_half) {
            out << "  seed " << row.seed << " k=" << row.k
                << ": driving=" << fd(row.driving) << " resisting=" << fd(row.resisting)
                << "\n";
        }
        out << "\n";
    }
    if (!r.sensitivity.drive.empty() || !r.sensitivity.probe.empty()) {
        out << "sensitivity\n";
        for (const auto& p : r.sensitivity.drive) {
            out << "  k_plus=" << p.k_plus
                << ": hallucination_rate=" << fd(p.hallucination_rate)
                << " clean_accuracy=" << fd(p.clean_accuracy) << "\n";
        }
        for (const auto& p : r.sensitivity.probe) {
            out << "  k_minus=" << p.k_minus << ": val_auroc=" << fd(p.val_auroc) << "\n";
        }
    }
    return out.str();
}

}  // namespace

void emit_report(const Report& report, const std::string& dir) {
    report.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("emit_report: cannot create directory " + dir);
    write_text_file(dir + "/report_rows.csv", render_rows(report));
    write_text_file(dir + "/report.txt", render_document(report));
}

std::vector<ReportRow> load_report_rows(const std::string& path) {
    const std::string content = read_text_file(path);
    std::istringstream in(content);
    std::string line;
    if (!std::getline(in, line) || trim(line) != "# report-rows v1") {
        throw IoError("not a report-rows file: " + path);
    }
    std::vector<ReportRow> rows;
    bool saw_header = false;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line == "section,condition,x,y,seed") {
            saw_header = true;
            continue;
        }
        if (!saw_header) throw IoError("report rows: data before column header");
        const auto fields = split_string(line, ',');
        if (fields.size() != 5) throw IoError("report rows: malformed row: " + line);
        ReportRow row;
        row.section = fields[0];
        row.condition = fields[1];
        row.x = parse_double(fields[2]);
        row.y = parse_double(fields[3]);
        if (!fields[4].empty()) {
            row.seed = static_cast<std::uint64_t>(parse_int(fields[4]));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace conflictheads
