// Python bindings: configs, training runs, checkpoints and held-out evaluation.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tsfed/config.hpp"
#include "tsfed/errors.hpp"
#include "tsfed/evaluation.hpp"
#include "tsfed/orchestrator.hpp"

namespace py = pybind11;
using namespace tsfed;

namespace {

py::dict report_dict(const RoundReport& r) {
  py::dict d;
  d["round"] = r.round;
  d["participants"] = r.participants;
  d["drift_pre"] = r.drift_pre;
  d["drift_post"] = r.drift_post;
  d["pooled_coreset_loss"] = r.pooled_coreset_loss;
  d["state_norm"] = r.state_norm;
  d["mean_train_loss"] = r.mean_train_loss;
  d["mean_bias_distance"] = r.mean_bias_distance;
  d["mean_pairwise_bias_distance"] = r.mean_pairwise_bias_distance;
  return d;
}

py::dict eval_dict(const eval::EvalReport& r) {
  py::dict d;
  d["mask_ratio"] = r.mask_ratio;
  d["mse"] = r.mse;
  d["mae"] = r.mae;
  d["n_sequences"] = r.n_sequences;
  d["n_masked_values"] = r.n_masked_values;
  d["no_masked_positions"] = r.no_masked_positions;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tsfed, m) {
  m.doc() = "Federated pretraining simulator for time series models";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_RuntimeError);

  py::class_<RunConfig>(m, "Config")
      .def(py::init<>())
      .def_static("load", &load_config, py::arg("path"))
      .def_static("parse", &parse_config, py::arg("text"))
      .def("to_text", &to_config_text)
      .def("set", &set_config_value, py::arg("key"), py::arg("value"))
      .def("validate", &RunConfig::validate)
      .def_readwrite("rounds", &RunConfig::rounds)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("workers", &RunConfig::workers)
      .def_readwrite("join_ratio", &RunConfig::join_ratio)
      .def("__repr__", [](const RunConfig& c) { return "<tsfed.Config rounds=" + std::to_string(c.rounds) + ">"; });

  py::class_<TrainingResult>(m, "TrainingResult")
      .def_property_readonly("checkpoint", [](const TrainingResult& r) { return py::bytes(serialize(r.theta)); })
      .def_property_readonly("rounds",
                             [](const TrainingResult& r) {
                               py::list out;
                               for (const auto& rep : r.reports) out.append(report_dict(rep));
                               return out;
                             })
      .def_readonly("bias_trajectory", &TrainingResult::bias_trajectory);

  m.def(
      "train",
      [](const RunConfig& c, std::optional<std::filesystem::path> out_dir) {
        c.validate();
        py::gil_scoped_release release;
        return run_training(c, out_dir);
      },
      py::arg("config"), py::arg("out_dir") = py::none(),
      "Run federated training; writes artifacts when out_dir is given.");

  m.def(
      "evaluate",
      [](const py::bytes& checkpoint, const RunConfig& c, std::vector<double> ratios) {
        const ParamSet theta = deserialize(std::string(checkpoint));
        const auto holdout = make_holdout(c);
        py::list out;
        for (const auto& r : eval::mask_sweep(theta, c.model, holdout, ratios, c.seed)) out.append(eval_dict(r));
        return out;
      },
      py::arg("checkpoint"), py::arg("config"), py::arg("ratios") = eval::standard_ratios(),
      "Masked-reconstruction MSE and MAE of a checkpoint on the config's held-out set.");

  m.def(
      "scaling_sweep",
      [](const RunConfig& c, const std::string& axis, std::vector<double> grid) {
        const auto a = eval::sweep_axis_from_string(axis);
        std::vector<eval::SweepRow> rows;
        {
          py::gil_scoped_release release;
          rows = eval::scaling_sweep(a, grid, c);
        }
        std::vector<std::pair<double, double>> out;
        for (const auto& r : rows) out.emplace_back(r.value, r.mse_75);
        return out;
      },
      py::arg("config"), py::arg("axis"), py::arg("grid"), "(value, mse at 75% mask) per grid value.");
}
