#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <utility>
#include <vector>

#include "conflictheads/error.hpp"
#include "conflictheads/evalreport.hpp"
#include "conflictheads/intervene.hpp"
#include "conflictheads/patching.hpp"
#include "conflictheads/pipeline.hpp"
#include "conflictheads/synthdata.hpp"
#include "conflictheads/trainer.hpp"

namespace py = pybind11;
using namespace conflictheads;

namespace {

std::string scope_text(PositionScope scope) {
    return scope == PositionScope::kLastToken ? "last" : "all";
}

PositionScope scope_value(const std::string& name) {
    if (name == "last") return PositionScope::kLastToken;
    if (name == "all") return PositionScope::kAllPositions;
    throw ConfigError("unknown scope: " + name + " (expected last or all)");
}

py::list head_list(const std::vector<HeadId>& heads) {
    py::list out;
    for (const HeadId& id : heads) out.append(py::make_tuple(id.layer, id.head));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Head-level causal analysis of modality-conflict hallucination";
    m.attr("__version__") = "0.1.0";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<InputError>(m, "InputError");
    py::register_exception<NumericError>(m, "NumericError");
    py::register_exception<IoError>(m, "IoError");

    py::class_<TaskSpec>(m, "TaskSpec")
        .def(py::init<>())
        .def_readwrite("n_objects", &TaskSpec::n_objects)
        .def_readwrite("n_attributes", &TaskSpec::n_attributes)
        .def_readwrite("n_relations", &TaskSpec::n_relations)
        .def_readwrite("n_slots", &TaskSpec::n_slots)
        .def_readwrite("n_triples", &TaskSpec::n_triples)
        .def("vocab_size", &TaskSpec::vocab_size)
        .def("n_visual_tokens", &TaskSpec::n_visual_tokens);

    py::class_<TypeMix>(m, "TypeMix")
        .def(py::init<>())
        .def_readwrite("object", &TypeMix::object)
        .def_readwrite("attribute", &TypeMix::attribute)
        .def_readwrite("relation", &TypeMix::relation);

    py::class_<SplitSizes>(m, "SplitSizes")
        .def(py::init<>())
        .def_readwrite("proto", &SplitSizes::proto)
        .def_readwrite("train_probe", &SplitSizes::train_probe)
        .def_readwrite("validation", &SplitSizes::validation)
        .def_readwrite("test", &SplitSizes::test);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("bias_mix", &TrainConfig::bias_mix)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("eval_every", &TrainConfig::eval_every);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_readwrite("task", &RunConfig::task)
        .def_readwrite("data_seed", &RunConfig::data_seed)
        .def_readwrite("n_samples", &RunConfig::n_samples)
        .def_readwrite("mix", &RunConfig::mix)
        .def_readwrite("split_seed", &RunConfig::split_seed)
        .def_readwrite("sizes", &RunConfig::sizes)
        .def_readwrite("n_layers", &RunConfig::n_layers)
        .def_readwrite("n_heads", &RunConfig::n_heads)
        .def_readwrite("d_model", &RunConfig::d_model)
        .def_readwrite("train", &RunConfig::train)
        .def_property(
            "scope", [](const RunConfig& c) { return scope_text(c.scope); },
            [](RunConfig& c, const std::string& name) { c.scope = scope_value(name); })
        .def_readwrite("k_plus", &RunConfig::k_plus)
        .def_readwrite("k_minus", &RunConfig::k_minus)
        .def_readwrite("asymmetry_top_n", &RunConfig::asymmetry_top_n)
        .def_readwrite("lambda_grid", &RunConfig::lambda_grid)
        .def_readwrite("random_seed", &RunConfig::random_seed)
        .def_readwrite("random_count", &RunConfig::random_count)
        .def_readwrite("overlap_k", &RunConfig::overlap_k)
        .def_readwrite("overlap_seeds", &RunConfig::overlap_seeds)
        .def_readwrite("k_plus_grid", &RunConfig::k_plus_grid)
        .def_readwrite("k_minus_grid", &RunConfig::k_minus_grid)
        .def_readwrite("dataset_path", &RunConfig::dataset_path)
        .def_readwrite("checkpoint_path", &RunConfig::checkpoint_path)
        .def_readwrite("curve_path", &RunConfig::curve_path)
        .def_readwrite("importance_path", &RunConfig::importance_path)
        .def_readwrite("groups_path", &RunConfig::groups_path)
        .def_readwrite("probe_path", &RunConfig::probe_path)
        .def_readwrite("ablation_path", &RunConfig::ablation_path)
        .def_readwrite("maci_path", &RunConfig::maci_path)
        .def_readwrite("report_dir", &RunConfig::report_dir)
        .def("validate", &RunConfig::validate)
        .def("canonical_string", &RunConfig::canonical_string)
        .def("hash", &RunConfig::hash);

    m.def("parse_run_config", &parse_run_config, py::arg("text"));
    m.def("load_run_config", &load_run_config, py::arg("path"));
    m.def("set_config_key", &set_config_key, py::arg("config"), py::arg("key"),
          py::arg("value"));
    m.def("resolve_run_config", &resolve_run_config, py::arg("config_path") = std::string(),
          py::arg("overrides") = std::vector<std::string>());

    m.def("stage_gen", &stage_gen, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_split", &stage_split, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_train", &stage_train, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_patch", &stage_patch, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_select", &stage_select, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_ablate", &stage_ablate, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_probe_train", &stage_probe_train, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_threshold", &stage_threshold, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_maci", &stage_maci, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("stage_report", &stage_report, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());
    m.def("run_pipeline", &run_pipeline, py::arg("config"),
          py::call_guard<py::gil_scoped_release>());

    py::class_<ImportanceMap>(m, "ImportanceMap")
        .def_property_readonly("scores",
                               [](const ImportanceMap& imp) {
                                   py::dict out;
                                   for (const auto& [id, score] : imp.scores) {
                                       out[py::make_tuple(id.layer, id.head)] = score;
                                   }
                                   return out;
                               })
        .def_readonly("n_samples", &ImportanceMap::n_samples)
        .def_property_readonly(
            "scope", [](const ImportanceMap& imp) { return scope_text(imp.scope); })
        .def_readonly("config_hash", &ImportanceMap::config_hash);

    py::class_<HeadGroups>(m, "HeadGroups")
        .def_property_readonly(
            "driving", [](const HeadGroups& g) { return head_list(g.driving); })
        .def_property_readonly(
            "resisting", [](const HeadGroups& g) { return head_list(g.resisting); })
        .def_readonly("driving_scores", &HeadGroups::driving_scores)
        .def_readonly("resisting_scores", &HeadGroups::resisting_scores)
        .def_readonly("k_plus", &HeadGroups::k_plus)
        .def_readonly("k_minus", &HeadGroups::k_minus)
        .def_readonly("config_hash", &HeadGroups::config_hash);

    py::class_<ProbeModel>(m, "ProbeModel")
        .def_readonly("weights", &ProbeModel::weights)
        .def_readonly("bias", &ProbeModel::bias)
        .def_readonly("lambda_", &ProbeModel::lambda)
        .def_readonly("tau", &ProbeModel::tau)
        .def_readonly("feature_mean", &ProbeModel::feature_mean)
        .def_readonly("feature_std", &ProbeModel::feature_std)
        .def_readonly("groups", &ProbeModel::groups)
        .def_readonly("config_hash", &ProbeModel::config_hash);

    py::class_<CurvePoint>(m, "CurvePoint")
        .def_readonly("step", &CurvePoint::step)
        .def_readonly("loss", &CurvePoint::loss)
        .def_readonly("clean_accuracy", &CurvePoint::clean_accuracy)
        .def_readonly("hallucination_rate", &CurvePoint::hallucination_rate);

    py::class_<ReportRow>(m, "ReportRow")
        .def_readonly("section", &ReportRow::section)
        .def_readonly("condition", &ReportRow::condition)
        .def_readonly("x", &ReportRow::x)
        .def_readonly("y", &ReportRow::y)
        .def_readonly("seed", &ReportRow::seed);

    m.def("load_importance", &load_importance, py::arg("path"));
    m.def("load_groups", &load_groups, py::arg("path"));
    m.def("load_probe", &load_probe, py::arg("path"));
    m.def("load_curve", &load_curve, py::arg("path"));
    m.def("load_report_rows", &load_report_rows, py::arg("path"));

    m.def(
        "auroc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            return auroc(scores, labels);
        },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "cohen_kappa",
        [](const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
            return cohen_kappa(labels_a, labels_b);
        },
        py::arg("labels_a"), py::arg("labels_b"));
}
