#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "lesionseg/boosting.hpp"
#include "lesionseg/cli.hpp"
#include "lesionseg/errors.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/network.hpp"
#include "lesionseg/preprocess.hpp"
#include "lesionseg/synth.hpp"

namespace py = pybind11;
using namespace lesionseg;

namespace {

using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Index3 shape_of(const py::array& a) {
    if (a.ndim() != 3) throw py::value_error("expected a 3-D array (z, y, x)");
    return {a.shape(0), a.shape(1), a.shape(2)};
}

LabelMask to_mask(const MaskArray& a, const Vec3& spacing) {
    const Grid3D g(shape_of(a), spacing);
    std::vector<std::uint8_t> v(a.data(), a.data() + a.size());
    for (auto& x : v) x = x ? 1 : 0;
    return LabelMask(g, std::move(v));
}

template <typename T>
py::array_t<T> to_array(std::span<const T> values, const Index3& s) {
    py::array_t<T> out({s[0], s[1], s[2]});
    std::copy(values.begin(), values.end(), out.mutable_data());
    return out;
}

metrics::Connectivity conn(int c) { return metrics::parse_connectivity(c); }

nn::NetworkConfig preset(const std::string& name) {
    if (name == "toy") return nn::NetworkConfig::toy();
    if (name == "paper") return nn::NetworkConfig::paper();
    throw ConfigError("preset must be 'toy' or 'paper'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "PET/CT lesion segmentation: metrics, normalization, boosting selection, phantoms.";
    m.attr("__version__") = LESIONSEG_VERSION;

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<SelectionError>(m, "SelectionError", PyExc_ValueError);

    const Vec3 unit{1.0, 1.0, 1.0};

    m.def("dice", [](const MaskArray& pred, const MaskArray& gt) {
        return metrics::dice(to_mask(pred, {1, 1, 1}), to_mask(gt, {1, 1, 1}));
    }, py::arg("pred"), py::arg("gt"));

    m.def("false_positive_volume", [](const MaskArray& pred, const MaskArray& gt, Vec3 spacing, int connectivity) {
        return metrics::false_positive_volume(to_mask(pred, spacing), to_mask(gt, spacing), conn(connectivity));
    }, py::arg("pred"), py::arg("gt"), py::arg("spacing") = unit, py::arg("connectivity") = 18,
       "Volume (mL) of predicted components that miss the reference.");

    m.def("false_negative_volume", [](const MaskArray& pred, const MaskArray& gt, Vec3 spacing, int connectivity) {
        return metrics::false_negative_volume(to_mask(pred, spacing), to_mask(gt, spacing), conn(connectivity));
    }, py::arg("pred"), py::arg("gt"), py::arg("spacing") = unit, py::arg("connectivity") = 18,
       "Volume (mL) of reference components the prediction misses.");

    m.def("connected_components", [](const MaskArray& mask, int connectivity) {
        const auto s = shape_of(mask);
        const auto c = metrics::connected_components(std::span<const std::uint8_t>(mask.data(), mask.size()), s,
                                                     conn(connectivity));
        return py::make_tuple(to_array<std::uint32_t>(c.labels, s), c.sizes);
    }, py::arg("mask"), py::arg("connectivity") = 18, "(labels, sizes); labels follow first-voxel scan order.");

    m.def("channel_stats", [](const std::vector<double>& values) {
        const auto s = preprocess::channel_stats_from_values(values);
        return py::dict(py::arg("mean") = s.mean, py::arg("std") = s.std, py::arg("p_low") = s.p_low,
                        py::arg("p_high") = s.p_high);
    }, py::arg("values"));

    m.def("normalize", [](const FloatArray& image, double mean, double std, double p_low, double p_high) {
        const auto s = shape_of(image);
        const Volume v(Grid3D(s, {1, 1, 1}), std::vector<float>(image.data(), image.data() + image.size()));
        const auto out = preprocess::normalize_volume(v, {mean, std, p_low, p_high});
        return to_array<float>(out.values(), s);
    }, py::arg("image"), py::arg("mean"), py::arg("std"), py::arg("p_low"), py::arg("p_high"));

    m.def("select_hard_samples", [](const std::map<std::string, double>& dice, const std::string& kind, int k,
                                    double threshold, bool exclude_zero) {
        boosting::SelectionRule r;
        r.kind = boosting::parse_selection_kind(kind);
        r.k = k;
        r.threshold = threshold;
        r.exclude_zero = exclude_zero;
        r.validate();
        PerSampleDice d(dice.begin(), dice.end());
        return boosting::select_hard_samples(d, r);
    }, py::arg("dice"), py::arg("kind") = "bottom_k", py::arg("k") = 1, py::arg("threshold") = 0.5,
       py::arg("exclude_zero") = false);

    m.def("describe_network", [](const std::string& name) { return nn::format_stage_report(preset(name)); },
          py::arg("preset") = "toy");
    m.def("count_parameters", [](const std::string& name) { return nn::count_parameters(preset(name)); },
          py::arg("preset") = "toy");

    m.def("generate_study", [](std::uint64_t seed, int n_lesions, double difficulty, const std::string& tracer) {
        synth::StudyParams p;
        p.seed = seed;
        p.n_lesions = n_lesions;
        p.difficulty = difficulty;
        p.tracer = parse_tracer(tracer);
        const auto s = synth::generate_study(p);
        const auto shape = s.study.pet.grid().shape();
        py::dict out;
        out["id"] = s.study.id;
        out["ct"] = to_array<float>(s.study.ct.values(), shape);
        out["pet"] = to_array<float>(s.study.pet.values(), shape);
        out["label"] = to_array<std::uint8_t>(s.study.label->values(), shape);
        out["spacing"] = s.study.pet.grid().spacing();
        return out;
    }, py::arg("seed") = 0, py::arg("n_lesions") = 1, py::arg("difficulty") = 0.0, py::arg("tracer") = "FDG");

    m.def("run_cli", [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
    }, py::arg("args"), "Runs a lesionseg subcommand; returns (exit_code, stdout, stderr).");
}
