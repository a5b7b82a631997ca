#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <string>
#include <vector>

#include "vismal/clahe.hpp"
#include "vismal/classifier.hpp"
#include "vismal/converter.hpp"
#include "vismal/error.hpp"
#include "vismal/evaluation.hpp"
#include "vismal/pipeline.hpp"

namespace py = pybind11;
using namespace vismal;

namespace {

using ImageArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

GrayImage to_image(const ImageArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D uint8 array");
  const auto h = static_cast<std::size_t>(a.shape(0));
  const auto w = static_cast<std::size_t>(a.shape(1));
  return GrayImage(w, h, std::vector<std::uint8_t>(a.data(), a.data() + w * h));
}

py::array_t<std::uint8_t> to_array(const GrayImage& img) {
  py::array_t<std::uint8_t> out({img.height(), img.width()});
  std::copy(img.pixels().begin(), img.pixels().end(), out.mutable_data());
  return out;
}

std::span<const std::uint8_t> bytes_view(const py::bytes& b, std::string& hold) {
  hold = b;
  return {reinterpret_cast<const std::uint8_t*>(hold.data()), hold.size()};
}

ConfusionMatrix to_confusion(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& a,
                             std::vector<std::string> names) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) throw py::value_error("expected a square 2-D count matrix");
  const auto n = static_cast<std::size_t>(a.shape(0));
  ConfusionMatrix cm(n, std::move(names));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto v = a.at(i, j);
      if (v < 0) throw py::value_error("counts must be non-negative");
      cm.at(i, j) = static_cast<std::uint64_t>(v);
    }
  }
  return cm;
}

py::dict metrics_dict(const FamilyMetrics& m) {
  py::dict d;
  d["precision"] = m.precision;
  d["recall"] = m.recall;
  d["f1"] = m.f1;
  d["accuracy"] = m.accuracy;
  d["support"] = m.support;
  d["degenerate"] = m.degenerate;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Malware image classification core";

  auto base = py::register_exception<Error>(m, "VismalError");
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<EmptyInput>(m, "EmptyInput", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<ImageTooSmall>(m, "ImageTooSmall", base);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<NumericsError>(m, "NumericsError", base);
  py::register_exception<LabelError>(m, "LabelError", base);
  py::register_exception<EmptyDataset>(m, "EmptyDataset", base);

  m.def("select_width", [](std::uint64_t size) { return select_width(size); }, py::arg("file_size"));
  m.def(
      "convert_bytes",
      [](const py::bytes& data) {
        std::string hold;
        return to_array(convert_bytes(bytes_view(data, hold)));
      },
      py::arg("data"), "Byte stream to a 2-D grayscale image (rows x width).");
  m.def(
      "encode_png", [](const ImageArray& img) {
        const auto png = encode_png(to_image(img));
        return py::bytes(reinterpret_cast<const char*>(png.data()), png.size());
      },
      py::arg("image"));
  m.def(
      "decode_png",
      [](const py::bytes& data) {
        std::string hold;
        return to_array(decode_png(bytes_view(data, hold)));
      },
      py::arg("data"));

  py::enum_<ClipMode>(m, "ClipMode")
      .value("UNIFORM", ClipMode::kUniform)
      .value("PAPER_RANDOM", ClipMode::kPaperRandom);
  py::enum_<ClipLimitMode>(m, "ClipLimitMode")
      .value("NORMALIZED", ClipLimitMode::kNormalized)
      .value("RAW", ClipLimitMode::kRaw);

  py::class_<ClaheParams>(m, "ClaheParams")
      .def(py::init<>())
      .def_readwrite("region_width", &ClaheParams::region_width)
      .def_readwrite("grid_b", &ClaheParams::grid_b)
      .def_readwrite("clip_limit", &ClaheParams::clip_limit)
      .def_readwrite("clip_limit_mode", &ClaheParams::clip_limit_mode)
      .def_readwrite("gray_levels", &ClaheParams::gray_levels)
      .def_readwrite("target_size", &ClaheParams::target_size)
      .def_readwrite("clip_mode", &ClaheParams::clip_mode)
      .def_readwrite("seed", &ClaheParams::seed)
      .def("validate", &ClaheParams::validate);

  m.def(
      "equalize", [](const ImageArray& img, const ClaheParams& p) { return to_array(equalize(to_image(img), p)); },
      py::arg("image"), py::arg("params") = ClaheParams{});
  m.def(
      "enhance", [](const ImageArray& img, const ClaheParams& p) { return to_array(enhance(to_image(img), p)); },
      py::arg("image"), py::arg("params") = ClaheParams{}, "Equalize, then resize to target_size.");
  m.def(
      "resize",
      [](const ImageArray& img, std::size_t width, std::size_t height) {
        return to_array(resize(to_image(img), width, height));
      },
      py::arg("image"), py::arg("width"), py::arg("height"));
  m.def(
      "region_mappings",
      [](const ImageArray& img, const ClaheParams& p) {
        RegionGrid grid;
        equalize(to_image(img), p, &grid);
        py::array_t<std::uint8_t> out({grid.mappings.size(), std::size_t{256}});
        auto* dst = out.mutable_data();
        for (const auto& map : grid.mappings) dst = std::copy(map.begin(), map.end(), dst);
        return out;
      },
      py::arg("image"), py::arg("params") = ClaheParams{}, "Per-region mapping tables, one row per region.");

  m.def(
      "stratified_folds",
      [](const std::vector<std::size_t>& labels, std::size_t k, std::uint64_t seed) {
        return stratified_folds(labels, k, seed);
      },
      py::arg("labels"), py::arg("k"), py::arg("seed"));
  m.def(
      "family_metrics",
      [](const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& cm, std::size_t family) {
        return metrics_dict(family_metrics(to_confusion(cm, {}), family));
      },
      py::arg("confusion"), py::arg("family"));
  m.def(
      "weighted_report",
      [](const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& cm,
         std::vector<std::string> names) {
        const auto r = weighted_report(to_confusion(cm, std::move(names)));
        py::list families;
        for (const auto& f : r.families) families.append(metrics_dict(f));
        py::dict d;
        d["families"] = families;
        d["family_names"] = r.family_names;
        d["weighted"] = metrics_dict(r.weighted);
        d["overall_accuracy"] = r.overall_accuracy;
        d["total"] = r.total;
        return d;
      },
      py::arg("confusion"), py::arg("names") = std::vector<std::string>{});
  m.def("measure_mpe", [](double extraction_ms, double classification_ms, std::size_t num_files) {
    const auto r = measure_mpe(extraction_ms, classification_ms, num_files);
    return py::make_tuple(r.extraction_ms, r.classification_ms, r.total_ms);
  });

  py::class_<Model>(m, "Model")
      .def_property_readonly("class_names", [](const Model& model) { return model.class_names; })
      .def_property_readonly("input_size",
                             [](const Model& model) {
                               return py::make_tuple(model.config.input_height, model.config.input_width);
                             })
      .def_property_readonly("num_classes", [](const Model& model) { return model.config.num_classes; })
      .def("parameter_count", &Model::parameter_count)
      .def(
          "predict",
          [](const Model& model, const ImageArray& img) {
            const auto p = predict(model, to_image(img));
            return py::make_tuple(p.label, p.probabilities);
          },
          py::arg("image"), "Returns (label, probabilities).")
      .def(
          "save", [](const Model& model, const std::filesystem::path& path) { save_model(model, path); },
          py::arg("path"));
  m.def(
      "load_model", [](const std::filesystem::path& path) { return load_model(path); }, py::arg("path"));

  m.def(
      "classify_file",
      [](const std::filesystem::path& model_path, const std::filesystem::path& binary_path,
         std::size_t target_size) {
        PipelineConfig cfg;
        cfg.clahe.target_size = target_size;
        cfg.resolve();
        const auto c = classify_file(model_path, binary_path, cfg);
        py::dict d;
        d["family"] = c.family;
        d["label"] = c.label;
        d["probabilities"] = c.probabilities;
        d["extraction_ms"] = c.extraction_ms;
        d["classification_ms"] = c.classification_ms;
        return d;
      },
      py::arg("model_path"), py::arg("binary_path"), py::arg("target_size") = 64);
  m.def(
      "write_toy_corpus",
      [](const std::filesystem::path& root, std::size_t families, std::size_t per_family, std::uint64_t seed) {
        write_toy_corpus(root, families, per_family, seed);
      },
      py::arg("root"), py::arg("families"), py::arg("per_family"), py::arg("seed") = 0);
  m.def(
      "train_directory",
      [](const std::filesystem::path& root, const std::vector<std::pair<std::string, std::string>>& settings) {
        PipelineConfig cfg;
        for (const auto& [key, value] : settings) cfg.set(key, value);
        cfg.resolve();
        auto outcome = train_on_manifest(ingest(root), cfg);
        std::vector<double> losses;
        for (const auto& e : outcome.log) losses.push_back(e.loss);
        return py::make_tuple(std::move(outcome.model), losses);
      },
      py::arg("root"), py::arg("settings") = std::vector<std::pair<std::string, std::string>>{},
      "Train on a family-per-directory tree. settings holds (key, value) config pairs.");
}
