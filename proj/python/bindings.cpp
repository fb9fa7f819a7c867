// Python bindings for the main operations: forward-process math, feature
// extraction from a trained checkpoint, corruption generators, the
// synthetic dataset and the detection metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "diffdet/data.hpp"
#include "diffdet/ddpm.hpp"
#include "diffdet/detector_ops.hpp"
#include "diffdet/metrics.hpp"
#include "diffdet/model_io.hpp"
#include "diffdet/noise.hpp"

namespace py = pybind11;
using namespace diffdet;

namespace {

using ArrayF = py::array_t<float, py::array::c_style | py::array::forcecast>;

TensorF tensor_from_array(const ArrayF& arr) {
  std::vector<int> shape;
  for (py::ssize_t i = 0; i < arr.ndim(); ++i)
    shape.push_back(static_cast<int>(arr.shape(i)));
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return TensorF(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const TensorF& t) {
  std::vector<py::ssize_t> shape;
  for (int d : t.shape()) shape.push_back(d);
  py::array_t<float> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

Image image_from_array(const ArrayF& arr) {
  TensorF t = tensor_from_array(arr);
  if (t.rank() == 2) t = TensorF({1, t.dim(0), t.dim(1)}, t.vec());
  if (t.rank() != 3) throw std::invalid_argument("expected a (H,W) or (C,H,W) image");
  return Image{std::move(t), ValueRange::Unit};
}

Box box_from_seq(const std::vector<double>& v) {
  if (v.size() != 4) throw std::invalid_argument("box must be (x1,y1,x2,y2)");
  return Box{v[0], v[1], v[2], v[3]};
}

CorruptionSpec spec_from_kwargs(const std::string& kind, double sigma, double amount,
                                double salt_fraction, double peak, std::uint64_t seed) {
  CorruptionSpec spec;
  spec.kind = corruption_kind_from_name(kind);
  spec.sigma = sigma;
  spec.amount = amount;
  spec.salt_fraction = salt_fraction;
  spec.peak = peak;
  spec.seed = seed;
  spec.validate();
  return spec;
}

}  // namespace

PYBIND11_MODULE(_diffdet, m) {
  m.doc() = "diffusion-feature detection: core operations";

  py::class_<ddpm::NoiseSchedule>(m, "NoiseSchedule")
      .def_readonly("steps", &ddpm::NoiseSchedule::steps)
      .def_property_readonly("betas",
                             [](const ddpm::NoiseSchedule& s) { return s.betas; })
      .def_property_readonly("alphas",
                             [](const ddpm::NoiseSchedule& s) { return s.alphas; })
      .def_property_readonly("alpha_bars",
                             [](const ddpm::NoiseSchedule& s) { return s.alpha_bars; })
      .def("beta", &ddpm::NoiseSchedule::beta)
      .def("alpha_bar", &ddpm::NoiseSchedule::alpha_bar);

  m.def("make_schedule", &ddpm::make_schedule, py::arg("steps"), py::arg("beta_start"),
        py::arg("beta_end"));

  m.def(
      "q_step",
      [](const ArrayF& x_prev, int t, const ArrayF& eps, const ddpm::NoiseSchedule& s) {
        return array_from_tensor(
            ddpm::q_step(tensor_from_array(x_prev), t, tensor_from_array(eps), s));
      },
      py::arg("x_prev"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

  m.def(
      "q_sample",
      [](const ArrayF& x0, int t, const ArrayF& eps, const ddpm::NoiseSchedule& s) {
        return array_from_tensor(
            ddpm::q_sample(tensor_from_array(x0), t, tensor_from_array(eps), s));
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

  m.def(
      "corrupt",
      [](const ArrayF& image, const std::string& kind, double sigma, double amount,
         double salt_fraction, double peak, std::uint64_t seed) {
        const auto spec = spec_from_kwargs(kind, sigma, amount, salt_fraction, peak, seed);
        return array_from_tensor(corrupt(image_from_array(image), spec).data);
      },
      py::arg("image"), py::arg("kind"), py::arg("sigma") = 0.1, py::arg("amount") = 0.05,
      py::arg("salt_fraction") = 0.5, py::arg("peak") = 255.0, py::arg("seed") = 0);

  m.def(
      "iou",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        return iou(box_from_seq(a), box_from_seq(b));
      },
      py::arg("box_a"), py::arg("box_b"));

  m.def(
      "greedy_nms",
      [](const py::array_t<double>& boxes, const py::array_t<double>& scores,
         const py::array_t<int>& classes, double iou_threshold) {
        auto bx = boxes.unchecked<2>();
        auto sc = scores.unchecked<1>();
        auto cl = classes.unchecked<1>();
        std::vector<Detection> dets;
        for (py::ssize_t i = 0; i < bx.shape(0); ++i)
          dets.push_back({Box{bx(i, 0), bx(i, 1), bx(i, 2), bx(i, 3)},
                          cl(i), sc(i)});
        const auto kept = det::greedy_nms(dets, iou_threshold);
        py::list out;
        for (const auto& d : kept)
          out.append(py::make_tuple(d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id,
                                    d.confidence));
        return out;
      },
      py::arg("boxes"), py::arg("scores"), py::arg("classes"), py::arg("iou_threshold") = 0.45);

  m.def(
      "average_precision",
      [](const std::vector<bool>& tp, const std::vector<double>& confidence, int gt_count) {
        if (tp.size() != confidence.size())
          throw std::invalid_argument("tp and confidence must have equal length");
        std::vector<eval::MatchLabel> labels(tp.size());
        for (std::size_t i = 0; i < tp.size(); ++i)
          labels[i] = {confidence[i], tp[i], 0};
        return eval::average_precision(eval::pr_curve(labels, gt_count));
      },
      py::arg("tp"), py::arg("confidence"), py::arg("gt_count"));

  m.def(
      "generate_synthetic",
      [](int n, int image_size, std::uint64_t seed) {
        data::SyntheticConfig cfg;
        cfg.image_size = image_size;
        const auto items = data::generate_synthetic(n, cfg, seed);
        py::list out;
        for (const auto& item : items) {
          py::array_t<double> boxes({static_cast<py::ssize_t>(item.boxes.size()),
                                     static_cast<py::ssize_t>(5)});
          auto bx = boxes.mutable_unchecked<2>();
          for (py::ssize_t i = 0; i < static_cast<py::ssize_t>(item.boxes.size()); ++i) {
            const auto& g = item.boxes[static_cast<std::size_t>(i)];
            bx(i, 0) = g.box.x1;
            bx(i, 1) = g.box.y1;
            bx(i, 2) = g.box.x2;
            bx(i, 3) = g.box.y2;
            bx(i, 4) = g.class_id;
          }
          out.append(py::make_tuple(item.id, array_from_tensor(item.image.data), boxes));
        }
        return out;
      },
      py::arg("n"), py::arg("image_size") = 64, py::arg("seed") = 0);

  m.def("class_names", [] {
    std::vector<std::string> names;
    for (int i = 0; i < data::kClassCount; ++i) names.emplace_back(data::class_name(i));
    return names;
  });

  // feature extraction against a trained ddpm checkpoint
  py::class_<LoadedDdpm>(m, "DdpmModel")
      .def(py::init([](const std::string& path) {
             return new LoadedDdpm(load_ddpm_checkpoint(path));
           }),
           py::arg("checkpoint_path"))
      .def_property_readonly("file_hash",
                             [](const LoadedDdpm& d) { return d.file_hash; })
      .def(
          "eps_and_taps",
          [](LoadedDdpm& d, const ArrayF& x_t, int t) {
            auto out = d.net.forward(tensor_from_array(x_t), t);
            py::dict taps;
            for (const auto& [level, tap] : out.taps)
              taps[py::int_(level)] = array_from_tensor(tap);
            return py::make_tuple(array_from_tensor(out.eps_pred), taps);
          },
          py::arg("x_t"), py::arg("t"));

  m.def(
      "bilinear_resize",
      [](const ArrayF& x, int out_h, int out_w) {
        return array_from_tensor(nn::bilinear_resize(tensor_from_array(x), out_h, out_w));
      },
      py::arg("x"), py::arg("out_h"), py::arg("out_w"));
}
