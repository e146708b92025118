#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mmfusion/config.hpp"
#include "mmfusion/datapipe.hpp"
#include "mmfusion/fusion.hpp"
#include "mmfusion/metrics.hpp"
#include "mmfusion/training.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace mmf;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

NDArray<float> to_ndarray(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return NDArray<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_numpy(const NDArray<T>& a) {
  py::array_t<T> out(std::vector<py::ssize_t>(a.shape().begin(), a.shape().end()));
  std::copy(a.data(), a.data() + a.size(), out.mutable_data());
  return out;
}

class Model {
 public:
  Model(const std::string& config_text, uint64_t seed)
      : config_(parse_run_config(config_text)), model_(build_model<float>(config_.model, seed)) {}

  static Model from_checkpoint(const fs::path& path) {
    const Checkpoint ck = load_checkpoint(path);
    Model m(ck.config_text, 0);
    if (m.config_.digest() != ck.config_digest) throw InputError(path.string() + ": config digest mismatch");
    restore_model(ck, *m.model_);
    return m;
  }

  // Each element maps modality name -> unbatched array ([C,X,Y] or [C,Z,X,Y]).
  py::array_t<double> predict(const std::vector<std::map<std::string, FloatArray>>& samples) {
    std::vector<Sample> conformed;
    for (const auto& s : samples) {
      Sample raw;
      for (const auto& [name, arr] : s) raw.modalities.push_back({name, to_ndarray(arr)});
      conformed.push_back(conform_sample(raw, config_.model, config_.crop));
    }
    NDArray<double> probs;
    {
      py::gil_scoped_release release;
      probs = predict_samples(*model_, conformed);
    }
    return to_numpy(probs);
  }

  int64_t num_parameters() { return model_->num_parameters(); }
  std::vector<std::string> modalities() const {
    std::vector<std::string> names;
    for (const auto& m : config_.model.modalities) names.push_back(m.name);
    return names;
  }
  std::string config_text() const { return config_.render(); }

 private:
  RunConfig config_;
  std::unique_ptr<FusionModel<float>> model_;
};

}  // namespace

PYBIND11_MODULE(_mmfusion, m) {
  m.doc() = "Bindings for the mmfusion C++ library";

  auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);
  (void)base;

  py::class_<ConversionParams>(m, "ConversionParams")
      .def_readonly("kernel", &ConversionParams::kernel)
      .def_readonly("stride", &ConversionParams::stride)
      .def_readonly("padding", &ConversionParams::padding)
      .def_readonly("in_channels", &ConversionParams::in_channels)
      .def_readonly("out_channels", &ConversionParams::out_channels)
      .def("output_shape",
           [](const ConversionParams& p, const std::string& in) { return p.output_shape(parse_feature_shape(in)).str(); })
      .def("__str__", &ConversionParams::str);

  m.def(
      "conversion_params",
      [](const std::string& shape2d, const std::string& shape3d) {
        return conversion_params(parse_feature_shape(shape2d), parse_feature_shape(shape3d));
      },
      py::arg("shape2d"), py::arg("shape3d"),
      "Conversion layers for a 2D feature 'CxXxY' and a 3D feature 'CxZxXxY'. Returns (params_3d, params_2d).");

  m.def(
      "shape_check", [](const std::string& text) { return render_trace(trace_fusion(parse_run_config(text).model)); },
      py::arg("config_text"));
  m.def(
      "config_digest", [](const std::string& text) { return digest_hex(parse_run_config(text).digest()); },
      py::arg("config_text"));
  m.def(
      "render_config", [](const std::string& text) { return parse_run_config(text).render(); },
      py::arg("config_text"));

  m.def(
      "cohen_kappa",
      [](const std::vector<int64_t>& a, const std::vector<int64_t>& b, int64_t k, bool quadratic) {
        return cohen_kappa(a, b, k, quadratic);
      },
      py::arg("y_true"), py::arg("y_pred"), py::arg("num_classes"), py::arg("quadratic") = false);
  m.def(
      "auc", [](const std::vector<int64_t>& y, const std::vector<double>& s) { return auc(y, s); }, py::arg("y_true"),
      py::arg("scores"));
  m.def(
      "sens_spec",
      [](const std::vector<int64_t>& y, const std::vector<double>& s, double t) { return sens_spec(y, s, t); },
      py::arg("y_true"), py::arg("scores"), py::arg("threshold"));
  m.def(
      "youden_threshold",
      [](const std::vector<int64_t>& y, const std::vector<double>& s) { return youden_threshold(y, s); },
      py::arg("y_true"), py::arg("scores"));

  m.def(
      "synth",
      [](int64_t n, std::vector<int64_t> image_size, std::vector<int64_t> volume_size, uint64_t seed, bool registered,
         double noise) {
        SynthSpec spec;
        spec.n_samples = n;
        spec.image_size = std::move(image_size);
        spec.volume_size = std::move(volume_size);
        spec.seed = seed;
        spec.registered = registered;
        spec.noise = noise;
        py::list out;
        for (const auto& s : synth_samples(spec)) {
          py::dict d;
          d["id"] = s.id;
          d["label"] = s.label;
          for (const auto& a : s.modalities) d[py::str(a.name)] = to_numpy(a.data);
          out.append(d);
        }
        return out;
      },
      py::arg("n"), py::arg("image_size") = std::vector<int64_t>{32, 32},
      py::arg("volume_size") = std::vector<int64_t>{16, 16, 16}, py::arg("seed") = 0, py::arg("registered") = true,
      py::arg("noise") = 0.1, "Planted-XOR samples as dicts with 'id', 'label', 'image' and 'volume'.");

  m.def(
      "train",
      [](const fs::path& config, const fs::path& manifest, const fs::path& out, std::optional<uint64_t> seed,
         std::optional<int64_t> epochs) {
        RunConfig rc = load_run_config(config);
        if (seed) rc.seed = *seed;
        if (epochs) rc.train.epochs = *epochs;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(rc.model, rc.render(), rc.digest(), DatasetManifest::load(manifest), rc.seed, rc.train, out, {},
                    rc.crop);
        }
        py::dict d;
        d["best_epoch"] = r.best_epoch;
        d["best_metric"] = r.best_metric;
        d["best_checkpoint"] = r.best_checkpoint;
        d["last_checkpoint"] = r.last_checkpoint;
        return d;
      },
      py::arg("config"), py::arg("manifest"), py::arg("out"), py::arg("seed") = py::none(),
      py::arg("epochs") = py::none());

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&, uint64_t>(), py::arg("config_text"), py::arg("seed") = 0)
      .def_static("from_checkpoint", &Model::from_checkpoint, py::arg("path"))
      .def("predict", &Model::predict, py::arg("samples"),
           "Class probabilities [n, K] for a list of {modality: array} dicts.")
      .def_property_readonly("num_parameters", &Model::num_parameters)
      .def_property_readonly("modalities", &Model::modalities)
      .def_property_readonly("config_text", &Model::config_text);
}
