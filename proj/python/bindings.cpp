#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <variant>

#include "saigformer/checkpoint.hpp"
#include "saigformer/config.hpp"
#include "saigformer/error.hpp"
#include "saigformer/gradcheck.hpp"
#include "saigformer/imageio.hpp"
#include "saigformer/network.hpp"
#include "saigformer/sat.hpp"
#include "saigformer/train.hpp"

namespace py = pybind11;
using namespace saig;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Shape nchw_shape(const Array& a) {
  if (a.ndim() != 4) throw ShapeError("array", "ndim", 4, static_cast<long>(a.ndim()));
  return {static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)),
          static_cast<int>(a.shape(3))};
}

template <typename T>
Tensor<T> to_tensor(const Array& a) {
  const Shape s = nchw_shape(a);
  return Tensor<T>::from(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array to_array(const Tensor<T>& t) {
  const Shape s = t.shape();
  Array out({s.n, s.c, s.h, s.w});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

class Model {
 public:
  Model(ModelWeights<float> w) : w_(std::move(w)) {}
  Model(ModelWeights<double> w) : w_(std::move(w)) {}

  static Model init(const std::string& config_json, bool zero_init_residual) {
    const auto cfg = model_config_from_json_text(config_json);
    if (cfg.precision == Precision::f64) return Model(init_model<double>(cfg, zero_init_residual));
    return Model(init_model<float>(cfg, zero_init_residual));
  }

  static Model load(const std::string& path) {
    const auto cfg = ckpt::decode_info(ckpt::read_file(path)).config;
    if (cfg.precision == Precision::f64) return Model(load_checkpoint<double>(path));
    return Model(load_checkpoint<float>(path));
  }

  void save(const std::string& path) const {
    std::visit([&](const auto& w) { save_checkpoint(w, path); }, w_);
  }

  std::string config() const {
    return std::visit([](const auto& w) { return to_json_text(w.config); }, w_);
  }

  std::uint64_t parameter_count() const {
    return std::visit([](const auto& w) { return w.allocated_count(); }, w_);
  }

  Array forward(const Array& x) const {
    return std::visit(
        [&](const auto& w) {
          using T = typename std::decay_t<decltype(w.final.w)>::value_type;
          return to_array(saig::forward(w, to_tensor<T>(x)));
        },
        w_);
  }

  // N x 3 x H x W of any size: reflect-padded to a multiple of 8 and cropped back.
  Array enhance(const Array& x) const {
    return std::visit(
        [&](const auto& w) {
          using T = typename std::decay_t<decltype(w.final.w)>::value_type;
          const auto padded = image::pad_reflect(to_tensor<T>(x), 8);
          return to_array(image::crop_back(saig::forward(w, padded.tensor), padded.height, padded.width));
        },
        w_);
  }

 private:
  std::variant<ModelWeights<float>, ModelWeights<double>> w_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Low-light image enhancement with spatially-adaptive integral illumination";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("toy_config", [] { return to_json_text(ModelConfig::toy()); }, "Toy model config as JSON text.");
  m.def("default_config", [] { return to_json_text(ModelConfig{}); }, "Default model config as JSON text.");
  m.def("param_count", [](const std::string& config_json) { return param_count(model_config_from_json_text(config_json)); },
        py::arg("config_json"));

  py::class_<Model>(m, "Model")
      .def_static("init", &Model::init, py::arg("config_json"), py::arg("zero_init_residual") = true)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("forward", &Model::forward, py::arg("x"), "N x 3 x H x W, H and W multiples of 8.")
      .def("enhance", &Model::enhance, py::arg("x"), "N x 3 x H x W of any size.");

  m.def(
      "box_sum",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& img, double x0, double y0, double x1,
         double y1, bool fractional) {
        if (img.ndim() != 2) throw ShapeError("box_sum", "ndim", 2, static_cast<long>(img.ndim()));
        const int H = static_cast<int>(img.shape(0)), W = static_cast<int>(img.shape(1));
        const auto t = sat::SummedAreaTable::build<double>({img.data(), static_cast<size_t>(img.size())}, H, W);
        const sat::BoxQuery q{x0, y0, x1, y1};
        return fractional ? sat::box_sum_fractional(t, q) : sat::box_sum(t, q);
      },
      py::arg("image"), py::arg("x0"), py::arg("y0"), py::arg("x1"), py::arg("y1"), py::arg("fractional") = false,
      "Sum over [x0, x1) x [y0, y1) through a summed-area table.");

  m.def("ssim", [](const Array& x, const Array& y) { return train::ssim(to_tensor<double>(x), to_tensor<double>(y)).item(); });
  m.def("psnr", [](const Array& x, const Array& y) { return train::psnr(to_tensor<double>(x), to_tensor<double>(y)); });
  m.def(
      "cosine_lr",
      [](int iter, int iterations, double lr_start, double lr_end) {
        TrainConfig cfg;
        cfg.iterations = iterations;
        cfg.lr_start = lr_start;
        cfg.lr_end = lr_end;
        return train::cosine_lr(iter, cfg);
      },
      py::arg("iter"), py::arg("iterations") = 300000, py::arg("lr_start") = 2e-4, py::arg("lr_end") = 1e-6);

  m.def(
      "gradcheck",
      [](const std::string& module, std::uint64_t seed) {
        gradcheck::Options opt;
        opt.seed = seed;
        std::vector<py::tuple> rows;
        for (const auto& r : gradcheck::run(module, opt)) rows.push_back(py::make_tuple(r.name, r.max_rel_err, r.passed));
        return rows;
      },
      py::arg("module"), py::arg("seed") = 0, "(name, max relative error, passed) per check.");
}
