#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "microface/gradcheck_suite.hpp"
#include "microface/train.hpp"

namespace py = pybind11;
using namespace microface;
using nlohmann::json;

namespace {

py::array_t<double> to_numpy(const Eigen::MatrixXd& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  auto r = out.mutable_unchecked<2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r(i, j) = m(i, j);
  return out;
}

json manifest_json(const DatasetManifest& m) {
  return {{"num", m.num},       {"seed", m.seed},     {"height", m.height}, {"width", m.width},
          {"amplitude", m.amplitude}, {"frames", m.frames}, {"train", m.train}, {"test", m.test}};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Coarse-to-fine 3D facial micro-expression reconstruction on synthetic data";

  py::register_exception<Error>(m, "MicrofaceError", PyExc_RuntimeError);

  m.def(
      "gen_data",
      [](const std::string& out, std::size_t num, std::uint64_t seed, int height, int width, double amplitude,
         std::size_t frames) {
        DatasetOptions o;
        o.num = num;
        o.seed = seed;
        o.height = height;
        o.width = width;
        o.amplitude = amplitude;
        o.frames = frames;
        py::gil_scoped_release release;
        return manifest_json(generate_dataset(out, o)).dump();
      },
      py::arg("out"), py::arg("num") = 80, py::arg("seed") = 0, py::arg("height") = 96, py::arg("width") = 96,
      py::arg("amplitude") = 0.15, py::arg("frames") = 8);

  m.def(
      "train",
      [](const std::string& config_json) {
        const auto cfg = train_config_from_json(json::parse(config_json));
        py::gil_scoped_release release;
        const auto res = train(cfg);
        json out{{"epochs", res.checkpoint.epochs}, {"steps", res.checkpoint.steps}, {"log", res.log}};
        return out.dump();
      },
      py::arg("config_json"));

  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& data, const std::string& split) {
        py::gil_scoped_release release;
        return evaluate(load_checkpoint(checkpoint), data, split).to_json().dump();
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("split") = "test");

  m.def(
      "infer",
      [](const std::string& checkpoint, const std::string& seq, const std::string& out, const std::string& model,
         bool disable_dgmd) {
        InferOptions o;
        o.model_dir = model;
        o.disable_dgmd = disable_dgmd;
        py::gil_scoped_release release;
        return infer(load_checkpoint(checkpoint), seq, out, o);
      },
      py::arg("checkpoint"), py::arg("seq"), py::arg("out"), py::arg("model") = "", py::arg("disable_dgmd") = false);

  m.def(
      "gradcheck",
      [](const std::string& module) {
        json out = json::array();
        for (const auto& r : run_gradcheck_suite(module))
          out.push_back({{"module", r.module},
                         {"name", r.name},
                         {"max_rel_error", r.max_rel_error},
                         {"probes", r.probes},
                         {"worst", r.worst},
                         {"passed", r.passed}});
        return out.dump();
      },
      py::arg("module") = "");

  m.def("gradcheck_modules", &gradcheck_modules);

  m.def(
      "template_model",
      [](std::size_t rows, std::size_t cols) {
        TemplateOptions o;
        o.rows = rows;
        o.cols = cols;
        const FaceModel fm = build_template_model(o);
        Eigen::MatrixXd faces(static_cast<Eigen::Index>(fm.faces.size()), 3);
        for (std::size_t f = 0; f < fm.faces.size(); ++f)
          for (int k = 0; k < 3; ++k) faces(static_cast<Eigen::Index>(f), k) = fm.faces[f][static_cast<std::size_t>(k)];
        std::vector<int> regions;
        for (auto r : fm.vertex_region) regions.push_back(static_cast<int>(r));
        py::dict d;
        d["vertices"] = to_numpy(fm.template_mesh().vertices);
        d["faces"] = to_numpy(faces).attr("astype")("int64");
        d["regions"] = regions;
        d["fan_landmarks"] = fm.fan_landmarks;
        d["mp_landmarks"] = fm.mp_landmarks;
        d["expression_basis"] = to_numpy(fm.expression_basis);
        return d;
      },
      py::arg("rows") = 27, py::arg("cols") = 24);

  m.def(
      "attention_weights",
      [](const std::vector<double>& intensities, const std::vector<int>& vertex_region) {
        if (intensities.size() != static_cast<std::size_t>(kRegionCount))
          throw ShapeError("attention_weights: expected " + std::to_string(kRegionCount) + " intensities");
        RegionIntensities I{};
        std::copy(intensities.begin(), intensities.end(), I.begin());
        std::vector<Region> regions;
        for (int r : vertex_region) {
          if (r < 0 || r >= kRegionCount) throw Error("attention_weights: region index out of range");
          regions.push_back(static_cast<Region>(r));
        }
        return attention_to_json(attention_weights(I, regions)).dump();
      },
      py::arg("intensities"), py::arg("vertex_region"));
}
