// SPDX-License-Identifier: Apache-2.0

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <variant>

#include "absvit/checkpoint.hpp"
#include "absvit/config.hpp"
#include "absvit/datagen.hpp"
#include "absvit/experiments.hpp"
#include "absvit/kernel_attention.hpp"
#include "absvit/selftest.hpp"
#include "absvit/sparse_coding.hpp"
#include "absvit/train.hpp"

namespace py = pybind11;
using namespace absvit;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const num::Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<float> image_array(const std::vector<float>& px, int h, int w) {
  py::array_t<float> out({h, w});
  std::copy(px.begin(), px.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> mask_array(const std::vector<std::uint8_t>& m, int h, int w) {
  py::array_t<std::uint8_t> out({h, w});
  std::copy(m.begin(), m.end(), out.mutable_data());
  return out;
}

// Accepts [H, W] or [n, H, W].
num::Tensor<float> to_images(const FloatArray& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument("images must have shape [H, W] or [n, H, W]");
  num::Shape shape;
  if (a.ndim() == 2) shape.push_back(1);
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::size_t>(a.shape(i)));
  num::Tensor<float> t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data().begin());
  return t;
}

sparse::SRProblem problem(const MatrixXd& dictionary, const VectorXd& input, double lambda) {
  return {dictionary, input, lambda};
}

py::dict solution(const sparse::SolveResult& r) {
  py::dict d;
  d["code"] = r.code;
  d["iterations"] = r.iterations;
  d["converged"] = r.converged;
  d["objective"] = r.objective;
  return d;
}

data::DataConfig data_config(int image_size) {
  data::DataConfig c;
  c.height = c.width = image_size;
  return c;
}

py::dict record(const train::EpochRecord& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["loss"] = r.loss;
  d["ce"] = r.ce;
  d["recon"] = r.recon;
  d["prior_loss"] = r.prior_loss;
  d["train_acc"] = r.train_accuracy;
  d["test_acc"] = r.test_accuracy;
  d["lr"] = r.lr;
  return d;
}

using PriorArg = std::variant<std::monostate, std::string, std::vector<double>>;

class Model {
 public:
  explicit Model(ckpt::Checkpoint<float> c)
      : ck_(std::move(c)),
        pred_(std::make_unique<train::Predictor>(ck_.config.model, ck_.params, 64, model::TraceLevel::full)) {}

  static Model load(const std::string& path) { return Model(ckpt::load<float>(path)); }

  std::map<std::string, py::array_t<float>> run(const FloatArray& images, double alpha, const PriorArg& prior) {
    const auto [spec, a] = resolve(prior, alpha);
    std::map<std::string, py::array_t<float>> out;
    for (const auto& [k, v] : pred_->run(to_images(images), a, spec)) out.emplace(k, to_numpy(v));
    return out;
  }

  std::vector<int> predict(const FloatArray& images, double alpha, const PriorArg& prior) {
    const auto [spec, a] = resolve(prior, alpha);
    return pred_->predict(to_images(images), a, spec);
  }

  std::vector<double> prototype(int class_id) const { return exp::prototype(ck_.params, class_id); }
  std::string config_json() const { return ck_.config.to_json(); }
  int image_size() const { return ck_.config.model.image_size; }
  int classes() const { return ck_.config.model.classes; }

 private:
  std::pair<model::PriorSpec, double> resolve(const PriorArg& prior, double alpha) const {
    if (const auto* s = std::get_if<std::string>(&prior)) {
      const auto choice = exp::PriorChoice::parse(*s);
      return {choice.resolve(ck_.params), choice.effective_alpha(alpha)};
    }
    if (const auto* v = std::get_if<std::vector<double>>(&prior)) return {model::PriorSpec::external(*v), alpha};
    return {model::PriorSpec::learned(), alpha};
  }

  ckpt::Checkpoint<float> ck_;
  std::unique_ptr<train::Predictor> pred_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Top-down attention transformer: sparse coding, kernel attention, synthetic data and models";

  py::register_exception<cfg::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ckpt::CheckpointError>(m, "CheckpointError", PyExc_OSError);
  py::register_exception<num::NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<sparse::ConvergenceError>(m, "ConvergenceError", PyExc_RuntimeError);

  // Sparse coding.
  m.def("soft_threshold", py::overload_cast<const VectorXd&, double>(&sparse::soft_threshold), py::arg("u"),
        py::arg("lam"));
  m.def(
      "sparse_objective",
      [](const MatrixXd& P, const VectorXd& x, double lam, const VectorXd& code) {
        return sparse::objective(problem(P, x, lam), code);
      },
      py::arg("dictionary"), py::arg("input"), py::arg("lam"), py::arg("code"));
  m.def(
      "solve_sparse_code",
      [](const MatrixXd& P, const VectorXd& x, double lam, double eta, std::size_t max_iters, double tol) {
        sparse::SolveOptions o;
        o.eta = eta;
        o.max_iters = max_iters;
        o.tol = tol;
        return solution(sparse::solve_sparse_code(problem(P, x, lam), o));
      },
      py::arg("dictionary"), py::arg("input"), py::arg("lam"), py::arg("eta") = 0.0,
      py::arg("max_iters") = 1'000'000, py::arg("tol") = 1e-7,
      "LCA dynamics to a fixed point; eta <= 0 picks the default step.");
  m.def(
      "lasso_oracle",
      [](const MatrixXd& P, const VectorXd& x, double lam, std::size_t max_iters, double tol) {
        return solution(sparse::lasso_oracle(problem(P, x, lam), max_iters, tol));
      },
      py::arg("dictionary"), py::arg("input"), py::arg("lam"), py::arg("max_iters") = 1'000'000,
      py::arg("tol") = 1e-15);
  m.def(
      "kkt_residual",
      [](const MatrixXd& P, const VectorXd& x, double lam, const VectorXd& code) {
        return sparse::kkt_residual(problem(P, x, lam), code);
      },
      py::arg("dictionary"), py::arg("input"), py::arg("lam"), py::arg("code"));
  m.def("max_step_size", &sparse::max_step_size, py::arg("dictionary"));

  // Kernel attention.
  m.def("positive_random_features", &attn::positive_random_features, py::arg("x"), py::arg("features"),
        py::arg("seed"));

  // Synthetic data.
  m.def("class_name", &data::class_name, py::arg("class_id"));
  m.def(
      "gen_single_object",
      [](int class_id, std::uint64_t seed, int image_size) {
        const auto s = data::gen_single_object(class_id, seed, data_config(image_size));
        return py::make_tuple(image_array(s.image.pixels, s.image.height, s.image.width),
                              mask_array(s.image.mask, s.image.height, s.image.width));
      },
      py::arg("class_id"), py::arg("seed"), py::arg("image_size") = 32, "Returns (image, mask).");
  m.def(
      "gen_two_object",
      [](int class_a, int class_b, std::uint64_t seed, int image_size) {
        const auto s = data::gen_two_object(class_a, class_b, seed, data_config(image_size));
        const int h = s.image.height, w = s.image.width;
        py::dict d;
        d["image"] = image_array(s.image.pixels, h, w);
        d["left_mask"] = mask_array(s.left_mask, h, w);
        d["right_mask"] = mask_array(s.right_mask, h, w);
        d["left_class"] = s.left_class;
        d["right_class"] = s.right_class;
        return d;
      },
      py::arg("class_a"), py::arg("class_b"), py::arg("seed"), py::arg("image_size") = 32);

  // Configuration and training.
  m.def("default_config", [] { return cfg::RunConfig{}.to_json(); }, "Default run configuration as JSON.");
  m.def(
      "normalize_config", [](const std::string& text) { return cfg::RunConfig::from_json(text).to_json(); },
      py::arg("config_json"), "Validates a JSON config and returns it with every default filled in.");
  m.def(
      "train",
      [](const std::string& config_json, const std::string& checkpoint, const train::LogFn& log) {
        const auto config = cfg::RunConfig::from_json(config_json);
        const auto r = train::train(config, log);
        if (!checkpoint.empty()) ckpt::save(checkpoint, config, r.params);
        py::dict d;
        d["final_loss"] = r.final_loss;
        d["test_accuracy"] = r.test_accuracy;
        py::list history;
        for (const auto& e : r.history) history.append(record(e));
        d["history"] = history;
        return d;
      },
      py::arg("config_json"), py::arg("checkpoint") = "", py::arg("log") = train::LogFn{},
      "Trains from a JSON config; writes a checkpoint when a manifest path is given.");

  py::class_<Model>(m, "Model")
      .def_static("load", &Model::load, py::arg("path"))
      .def("run", &Model::run, py::arg("images"), py::arg("alpha") = 1.0, py::arg("prior") = PriorArg{},
           "Runs the four-step cycle and returns every traced output. prior is None (learned), "
           "'none', 'class:<k>' or a vector.")
      .def("predict", &Model::predict, py::arg("images"), py::arg("alpha") = 1.0, py::arg("prior") = PriorArg{})
      .def("prototype", &Model::prototype, py::arg("class_id"))
      .def_property_readonly("config_json", &Model::config_json)
      .def_property_readonly("image_size", &Model::image_size)
      .def_property_readonly("classes", &Model::classes);

  m.def(
      "selftest",
      [] {
        const auto rep = selftest::run_all({}, {});
        return py::make_tuple(rep.lines, rep.failures);
      },
      "Runs every invariant check; returns (lines, failures).");
}
