// Python bindings: configuration, data, training, evaluation and single-view rendering.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cnvs/attention.hpp"
#include "cnvs/config.hpp"
#include "cnvs/errors.hpp"
#include "cnvs/metrics.hpp"
#include "cnvs/schedule.hpp"
#include "cnvs/train.hpp"

namespace py = pybind11;
using namespace cnvs;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a, DType dtype = DType::f64) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::span<const double>(a.data(), static_cast<std::size_t>(a.size())), dtype);
}

Array to_array(const Tensor& t) {
  const auto v = t.to_vector();
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict report_dict(const MetricReport& r) {
  py::list views;
  for (const auto& v : r.views) {
    py::dict d;
    d["identity"] = v.identity;
    d["view"] = v.view;
    d["psnr"] = v.psnr_db;
    d["ssim"] = v.ssim;
    views.append(d);
  }
  py::dict out;
  out["views"] = views;
  out["mean_psnr"] = r.mean_psnr;
  out["mean_ssim"] = r.mean_ssim;
  return out;
}

}  // namespace

PYBIND11_MODULE(_cnvs, m) {
  m.doc() = "Feed-forward human novel view synthesis";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ScheduleError>(m, "ScheduleError", PyExc_RuntimeError);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("load", &RunConfig::load, py::arg("path"))
      .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
      .def("apply_text", &RunConfig::apply_text)
      .def("validate", &RunConfig::validate)
      .def("dump", &RunConfig::dump)
      .def("train_views", &RunConfig::train_view_indices)
      .def("heldout_views", &RunConfig::heldout_view_indices)
      .def_readwrite("steps", &RunConfig::steps)
      .def_readwrite("batch", &RunConfig::batch)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("distill_steps", &RunConfig::distill_steps)
      .def_readwrite("stitch_period", &RunConfig::stitch_period);

  py::class_<ModelState>(m, "Model")
      .def_static("init", [](const RunConfig& c, std::uint64_t seed) { return ModelState::init(c.model, seed); },
                  py::arg("config"), py::arg("seed") = 1)
      .def_static("load", &load_model, py::arg("path"))
      .def("save", [](const ModelState& s, const std::filesystem::path& p) { save_model(p, s); })
      .def_property_readonly("layout", [](const ModelState& s) { return s.layout.to_string(); })
      .def("parameter_hash", &parameter_hash);

  py::class_<Dataset>(m, "Dataset")
      .def_static("load", [](const std::filesystem::path& p) { return load_dataset(p); }, py::arg("manifest"))
      .def_property_readonly("identities", [](const Dataset& d) { return d.identities.size(); })
      .def("image", [](const Dataset& d, int identity, int view) {
        for (const auto& v : d.identities.at(static_cast<std::size_t>(identity)).views) {
          if (v.view == view) {
            return to_array(v.image);
          }
        }
        throw ConfigError("no view " + std::to_string(view));
      });

  m.def("make_dataset",
        [](const RunConfig& c, const std::filesystem::path& out) { return make_dataset(c.data, out).sample_count(); },
        py::arg("config"), py::arg("out"), "Renders the synthetic dataset; returns the sample count.");
  m.def("train_teacher",
        [](const RunConfig& c, const Dataset& d, const std::filesystem::path& out) {
          return train_teacher(c, d, {out});
        },
        py::arg("config"), py::arg("data"), py::arg("out"));
  m.def("distill",
        [](const ModelState& teacher, const RunConfig& c, const Dataset& d, const std::filesystem::path& out) {
          return run_distill(teacher, c, d, {out});
        },
        py::arg("teacher"), py::arg("config"), py::arg("data"), py::arg("out"));
  m.def("evaluate",
        [](const ModelState& model, const Dataset& d, const std::vector<int>& views) {
          return report_dict(evaluate(model, d, views));
        },
        py::arg("model"), py::arg("data"), py::arg("views"));
  m.def("render",
        [](const ModelState& model, const Array& image, const std::string& source_pose,
           const std::string& target_pose) {
          return to_array(render_view(model, to_tensor(image), parse_pose(source_pose), parse_pose(target_pose)).image);
        },
        py::arg("model"), py::arg("image"), py::arg("source_pose"), py::arg("target_pose"),
        "Renders the target view; poses are pose-record text.");
  m.def("orbit_pose", [](double yaw, double pitch, int size) { return format_pose(orbit_camera(yaw, pitch, size, size)); },
        py::arg("yaw_deg"), py::arg("pitch_deg"), py::arg("size") = 64);

  m.def("psnr", [](const Array& a, const Array& b) { return psnr(to_tensor(a), to_tensor(b)); });
  m.def("ssim", [](const Array& a, const Array& b) { return ssim(to_tensor(a), to_tensor(b)); });
  m.def("full_attention",
        [](const Array& q, const Array& k, const Array& v, int heads) {
          return to_array(full_attention(to_tensor(q), to_tensor(k), to_tensor(v), heads));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("heads") = 1);
  m.def("linear_attention",
        [](const Array& q, const Array& k, const Array& v, int heads, double eps) {
          return to_array(linear_attention(to_tensor(q), to_tensor(k), to_tensor(v), heads, LinearNorm::normalized, eps));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("heads") = 1, py::arg("eps") = 1e-6);
  m.def("layout_at",
        [](std::int64_t step, std::int64_t period) {
          StitchSchedule s;
          s.period = period;
          return layout_at(step, s).to_string();
        },
        py::arg("step"), py::arg("period") = 5000, "Attention layout of the 36-layer model at a distillation step.");
}
