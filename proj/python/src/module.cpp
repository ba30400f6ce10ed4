#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>

#include "lidarflow/eval.hpp"
#include "lidarflow/io.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/trainer.hpp"
#include "lidarflow/world.hpp"

namespace py = pybind11;
using namespace lidarflow;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

py::array_t<std::uint8_t> to_numpy(const BinaryGrid& g) {
  py::array_t<std::uint8_t> a({g.rows, g.cols});
  std::memcpy(a.mutable_data(), g.cells.data(), g.cells.size());
  return a;
}

py::array_t<double> to_numpy(const RealGrid& g) {
  py::array_t<double> a({g.rows, g.cols});
  std::memcpy(a.mutable_data(), g.cells.data(), g.cells.size() * sizeof(double));
  return a;
}

// (2, H, W) array of dx, dy; NaN where undefined.
py::array_t<float> to_numpy(const FlowField& f) {
  py::array_t<float> a({2, f.rows, f.cols});
  float* p = a.mutable_data();
  for (std::size_t i = 0; i < f.size(); ++i) {
    p[i] = f.defined[i] ? f.dx[i] : std::numeric_limits<float>::quiet_NaN();
    p[f.size() + i] = f.defined[i] ? f.dy[i] : std::numeric_limits<float>::quiet_NaN();
  }
  return a;
}

BinaryGrid binary_from(const U8Array& a) {
  if (a.ndim() != 2) throw DimensionError("occupancy", "rank", 2, static_cast<std::size_t>(a.ndim()));
  BinaryGrid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  for (std::size_t i = 0; i < g.size(); ++i) g.cells[i] = a.data()[i] ? 1 : 0;
  return g;
}

Tensor<double> tensor_from(const F64Array& a) {
  if (a.ndim() != 4) throw DimensionError("tensor", "rank", 4, static_cast<std::size_t>(a.ndim()));
  Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
          static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
  return Tensor<double>(s, std::vector<double>(a.data(), a.data() + s.numel()));
}

py::array_t<double> to_numpy(const Tensor<double>& t) {
  const Shape& s = t.shape();
  py::array_t<double> a({s.n, s.c, s.h, s.w});
  std::memcpy(a.mutable_data(), t.data(), t.size() * sizeof(double));
  return a;
}

ScenarioConfig scenario_config(const std::string& scenario, int rows, int cols, int seq_len) {
  ScenarioConfig sc;
  sc.scenario = parse_scenario(scenario);
  sc.grid.rows = rows;
  sc.grid.cols = cols;
  sc.seq_len = seq_len;
  sc.validate();
  return sc;
}

TrainConfig preset(const std::string& name) {
  if (name == "desk") return TrainConfig::desk();
  if (name == "paper") return TrainConfig::paper();
  throw ParameterError("unknown preset '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LiDAR occupancy flow: simulator, flow network, training and evaluation";

  // Translators run newest first, so the base class goes first.
  // Subclasses derive from Error and from the matching builtin, so either catches them.
  const py::object base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto bases = [&](PyObject* builtin) { return py::make_tuple(base, py::handle(builtin)); };
  py::register_exception<ParameterError>(m, "ParameterError", bases(PyExc_ValueError));
  py::register_exception<DimensionError>(m, "DimensionError", bases(PyExc_ValueError));
  py::register_exception<CompatibilityError>(m, "CompatibilityError", bases(PyExc_ValueError));
  py::register_exception<NumericError>(m, "NumericError", bases(PyExc_ArithmeticError));
  py::register_exception<IoError>(m, "IoError", bases(PyExc_OSError));

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("rows", [](const Dataset& d) { return d.header.rows; })
      .def_property_readonly("cols", [](const Dataset& d) { return d.header.cols; })
      .def_property_readonly("seq_len", [](const Dataset& d) { return d.header.seq_len; })
      .def_property_readonly("scenario", [](const Dataset& d) { return to_string(d.header.scenario); })
      .def("__len__", [](const Dataset& d) { return d.sequences.size(); })
      .def(
          "occupancy",
          [](const Dataset& d, std::size_t seq, std::size_t t) {
            const auto& s = d.sequences.at(seq);
            return to_numpy(t == s.frames.size() ? s.gt_next.occupancy : s.frames.at(t).occupancy);
          },
          py::arg("sequence"), py::arg("t"))
      .def(
          "visibility",
          [](const Dataset& d, std::size_t seq, std::size_t t) {
            const auto& s = d.sequences.at(seq);
            return to_numpy(t == s.frames.size() ? s.gt_next.visibility : s.frames.at(t).visibility);
          },
          py::arg("sequence"), py::arg("t"))
      .def(
          "backward_flow",
          [](const Dataset& d, std::size_t seq, std::size_t t) {
            return to_numpy(d.sequences.at(seq).gt_flow_backward.at(t));
          },
          py::arg("sequence"), py::arg("t"))
      .def("save", [](const Dataset& d, const std::string& path) { save_dataset(path, d); })
      .def("to_bytes", [](const Dataset& d) {
        const auto b = encode_dataset(d);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      });

  m.def(
      "simulate",
      [](const std::string& scenario, std::size_t count, std::uint64_t seed, int rows, int cols, int seq_len) {
        const ScenarioConfig sc = scenario_config(scenario, rows, cols, seq_len);
        Dataset d;
        {
          py::gil_scoped_release release;
          d.sequences = generate_dataset(sc, count, seed);
        }
        d.header = make_header(d.sequences, sc.scenario);
        return d;
      },
      py::arg("scenario"), py::arg("count"), py::arg("seed") = 0, py::arg("rows") = 32, py::arg("cols") = 32,
      py::arg("seq_len") = 20);
  m.def("load_dataset", [](const std::string& path) { return load_dataset(path); });

  py::class_<Checkpoint>(m, "Model")
      .def_property_readonly("parameter_count", [](const Checkpoint& c) { return c.params.parameter_count(); })
      .def_property_readonly("head", [](const Checkpoint& c) { return to_string(c.params.arch.head); })
      .def_property_readonly("epoch", [](const Checkpoint& c) { return c.meta.epoch; })
      .def("save", [](const Checkpoint& c, const std::string& path) { save_checkpoint(path, c.params, c.meta); })
      .def(
          "parameter",
          [](const Checkpoint& c, const std::string& name) {
            for (const auto& [n, t] : c.params.named())
              if (n == name) {
                const Shape& s = t->shape();
                py::array_t<float> a({s.n, s.c, s.h, s.w});
                std::memcpy(a.mutable_data(), t->data(), t->size() * sizeof(float));
                return a;
              }
            throw ParameterError("no parameter named '" + name + "'");
          },
          py::arg("name"))
      .def("parameter_names", [](const Checkpoint& c) {
        std::vector<std::string> names;
        for (const auto& [n, t] : c.params.named()) names.push_back(n);
        return names;
      });

  m.def(
      "init_model",
      [](std::uint64_t seed) {
        return Checkpoint{init_params<float>(seed, Architecture{}), CheckpointMeta{}};
      },
      py::arg("seed") = 0);
  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path); });

  m.def(
      "train",
      [](const Dataset& d, const std::string& preset_name, int epochs, std::uint64_t seed, int warmup_frames) {
        TrainConfig tc = preset(preset_name);
        if (epochs > 0) tc.epochs = epochs;
        if (warmup_frames >= 0) tc.warmup_frames = warmup_frames;
        tc.seed = seed;
        tc.validate();
        std::vector<double> losses;
        Checkpoint out;
        {
          py::gil_scoped_release release;
          auto r = train<float>(d.sequences, tc);
          for (const auto& e : r.log.epochs) losses.push_back(e.loss);
          out.params = std::move(r.params);
        }
        out.meta.optimizer = to_string(tc.optimizer);
        out.meta.epoch = static_cast<std::uint32_t>(tc.epochs);
        out.meta.grid_rows = d.header.rows;
        out.meta.grid_cols = d.header.cols;
        return py::make_tuple(out, losses);
      },
      py::arg("dataset"), py::arg("preset") = "desk", py::arg("epochs") = 0, py::arg("seed") = 0,
      py::arg("warmup_frames") = -1, "Returns (model, per-epoch losses).");

  m.def(
      "evaluate",
      [](const Dataset& d, const Checkpoint& model, int warmup_frames, double threshold) {
        check_compatible(model.meta, d.header);
        EvalOptions eo;
        eo.warmup_frames = warmup_frames;
        eo.threshold = threshold;
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = evaluate(d.sequences, model.params, eo);
        }
        py::dict out;
        out["f1"] = r.model.f1();
        out["precision"] = r.model.precision();
        out["recall"] = r.model.recall();
        out["persistence_f1"] = r.persistence.f1();
        out["steps"] = r.steps;
        if (r.epe.cells > 0) out["epe"] = r.epe.mean();
        return out;
      },
      py::arg("dataset"), py::arg("model"), py::arg("warmup_frames") = 10, py::arg("threshold") = kDefaultThreshold);

  m.def(
      "predict",
      [](const Dataset& d, const Checkpoint& model, std::size_t seq, double threshold) {
        check_compatible(model.meta, d.header);
        const auto& s = d.sequences.at(seq);
        const auto outputs = run_sequence(model.params, s.frames);
        const PredictionResult p = predict_next(s.frames.back().occupancy, backward_flow(outputs.back()), threshold);
        return py::make_tuple(to_numpy(p.soft_map), to_numpy(p.binary_map));
      },
      py::arg("dataset"), py::arg("model"), py::arg("sequence") = 0, py::arg("threshold") = kDefaultThreshold,
      "Soft and binary prediction of the frame after the last one of a sequence.");

  m.def(
      "bilinear_warp",
      [](const F64Array& source, const F64Array& flow) { return to_numpy(bilinear_warp(tensor_from(source), tensor_from(flow))); },
      py::arg("source"), py::arg("flow"));
  m.def(
      "gaussian_filter",
      [](const F64Array& map, int f) { return to_numpy(gaussian_filter(tensor_from(map), f)); }, py::arg("map"),
      py::arg("filter_size"));
  m.def(
      "f1_score", [](const U8Array& pred, const U8Array& gt) { return f1_score(binary_from(pred), binary_from(gt)); },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "learning_rate", [](int epoch) { return TrainConfig::paper().schedule.learning_rate(epoch); }, py::arg("epoch"));
  m.def(
      "filter_size", [](int epoch) { return TrainConfig::paper().schedule.filter_size(epoch); }, py::arg("epoch"));
}
