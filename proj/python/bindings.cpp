#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "approxcp/conformal.hpp"
#include "approxcp/errors.hpp"
#include "approxcp/influence.hpp"
#include "approxcp/io.hpp"
#include "approxcp/metrics.hpp"

namespace py = pybind11;
using namespace approxcp;

namespace {

Dataset make_dataset(const FeatureMatrix& x, const std::vector<int>& y, std::optional<int> n_labels) {
  int labels = n_labels.value_or(0);
  if (!n_labels) {
    for (const int v : y) labels = std::max(labels, v + 1);
  }
  return Dataset(x, y, labels);
}

ModelSpec make_spec(const Dataset& ds, double regularization, double tolerance, int max_iterations) {
  ModelSpec spec;
  spec.n_features = ds.dims();
  spec.n_labels = ds.label_count();
  spec.regularization = regularization;
  spec.convergence_tolerance = tolerance;
  spec.max_iterations = max_iterations;
  spec.validate();
  return spec;
}

Scheme parse_scheme(const std::string& s) {
  if (s == "deleted") return Scheme::deleted;
  if (s == "ordinary") return Scheme::ordinary;
  throw ConfigError("scheme must be 'deleted' or 'ordinary'");
}

ScoreMethod parse_rule(const std::string& s) {
  if (s == "direct") return ScoreMethod::direct;
  if (s == "indirect") return ScoreMethod::indirect;
  throw ConfigError("method must be 'direct' or 'indirect'");
}

// p-values, one row per test point.
template <class F>
Matrix pvalue_rows(const FeatureMatrix& x, int labels, F&& table_for) {
  Matrix out(x.rows(), labels);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const PValueTable t = table_for(Vector(x.row(i).transpose()));
    for (int y = 0; y < labels; ++y) out(i, y) = t.pvalues[static_cast<std::size_t>(y)];
  }
  return out;
}

class PyACP {
 public:
  PyACP(const FeatureMatrix& x, const std::vector<int>& y, double regularization, double damping,
        std::optional<int> n_labels, double tolerance, int max_iterations)
      : ws_(build(x, y, regularization, damping, n_labels, tolerance, max_iterations)) {}
  explicit PyACP(InfluenceWorkspace ws) : ws_(std::move(ws)) {}

  Matrix pvalues(const FeatureMatrix& x, const std::string& scheme, const std::string& method) const {
    const Scheme s = parse_scheme(scheme);
    const ScoreMethod m = parse_rule(method);
    check_dims(x);
    return pvalue_rows(x, ws_.model().spec.n_labels, [&](const Vector& v) { return acp(ws_, v, s, m); });
  }

  Vector scores(const Vector& x, int label, const std::string& scheme, const std::string& method) const {
    return approxcp::scores(ws_, CandidateInfluence::compute(ws_, Example{x, label}), parse_scheme(scheme),
                            parse_rule(method))
        .scores;
  }

  const InfluenceWorkspace& workspace() const { return ws_; }

 private:
  static InfluenceWorkspace build(const FeatureMatrix& x, const std::vector<int>& y, double regularization,
                                  double damping, std::optional<int> n_labels, double tolerance, int max_iterations) {
    const Dataset ds = make_dataset(x, y, n_labels);
    const FittedModel model = fit(ds, make_spec(ds, regularization, tolerance, max_iterations));
    if (!model.converged) throw NumericError("fit did not converge");
    return InfluenceWorkspace::build(model, ds, damping);
  }

  void check_dims(const FeatureMatrix& x) const {
    if (x.cols() != ws_.model().spec.n_features) throw ConfigError("test points have the wrong number of features");
  }

  InfluenceWorkspace ws_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Approximate full conformal prediction for regularized logistic regression";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IngestionError>(m, "IngestionError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def(
      "synthesize",
      [](int n_points, int n_features, double class_separation, std::uint64_t seed) {
        SyntheticConfig cfg;
        cfg.n_points = n_points;
        cfg.n_features = n_features;
        cfg.class_separation = class_separation;
        cfg.seed = seed;
        const Dataset ds = synthesize(cfg);
        return py::make_tuple(ds.features(), ds.labels());
      },
      py::arg("n_points"), py::arg("n_features"), py::arg("class_separation") = 1.0, py::arg("seed") = 0,
      "Gaussian-cluster binary sample; returns (X, y).");

  m.def(
      "fit",
      [](const FeatureMatrix& x, const std::vector<int>& y, double regularization, std::optional<int> n_labels,
         double tolerance, int max_iterations) {
        const Dataset ds = make_dataset(x, y, n_labels);
        const FittedModel model = fit(ds, make_spec(ds, regularization, tolerance, max_iterations));
        py::dict out;
        out["theta"] = model.theta;
        out["converged"] = model.converged;
        out["gradient_norm"] = model.final_gradient_norm;
        out["iterations"] = model.iterations_used;
        return out;
      },
      py::arg("X"), py::arg("y"), py::arg("regularization") = 0.01, py::arg("n_labels") = py::none(),
      py::arg("tolerance") = 1e-10, py::arg("max_iterations") = 100);

  py::class_<PyACP>(m, "ACP", "Trains once, then scores candidates with influence functions.")
      .def(py::init<const FeatureMatrix&, const std::vector<int>&, double, double, std::optional<int>, double, int>(),
           py::arg("X"), py::arg("y"), py::arg("regularization") = 0.01, py::arg("damping") = 0.0,
           py::arg("n_labels") = py::none(), py::arg("tolerance") = 1e-10, py::arg("max_iterations") = 100)
      .def("pvalues", &PyACP::pvalues, py::arg("X"), py::arg("scheme") = "deleted", py::arg("method") = "direct",
           "p-value matrix, one row per test point and one column per label.")
      .def("scores", &PyACP::scores, py::arg("x"), py::arg("label"), py::arg("scheme") = "deleted",
           py::arg("method") = "direct", "Approximate scores of the augmented set; the candidate is last.")
      .def("save", [](const PyACP& self, const std::filesystem::path& path) { save_workspace(self.workspace(), path); })
      .def_static("load", [](const std::filesystem::path& path) { return PyACP(load_workspace(path)); })
      .def_property_readonly("theta", [](const PyACP& self) { return self.workspace().model().theta; })
      .def_property_readonly("n_train", [](const PyACP& self) { return self.workspace().n_train(); })
      .def_property_readonly("n_labels", [](const PyACP& self) { return self.workspace().model().spec.n_labels; });

  m.def(
      "full_cp_pvalues",
      [](const FeatureMatrix& x, const std::vector<int>& y, const FeatureMatrix& test, double regularization,
         const std::string& scheme, std::optional<int> n_labels, double tolerance, int threads) {
        const Dataset ds = make_dataset(x, y, n_labels);
        const FullConformal full(ds, make_spec(ds, regularization, tolerance, 200), threads);
        const Scheme s = parse_scheme(scheme);
        py::gil_scoped_release release;
        return pvalue_rows(test, ds.label_count(), [&](const Vector& v) { return full.predict(v, s); });
      },
      py::arg("X"), py::arg("y"), py::arg("X_test"), py::arg("regularization") = 0.01, py::arg("scheme") = "deleted",
      py::arg("n_labels") = py::none(), py::arg("tolerance") = 1e-10, py::arg("threads") = 1,
      "Exact full CP by retraining (cost grows as N * L per test point).");

  m.def(
      "scp_pvalues",
      [](const FeatureMatrix& x, const std::vector<int>& y, const FeatureMatrix& test, double regularization,
         double calib_fraction, std::uint64_t seed, std::optional<int> n_labels) {
        const Dataset ds = make_dataset(x, y, n_labels);
        const SplitConformal scp(ds, calib_fraction, make_spec(ds, regularization, 1e-10, 100), seed);
        return pvalue_rows(test, ds.label_count(), [&](const Vector& v) { return scp.predict(v); });
      },
      py::arg("X"), py::arg("y"), py::arg("X_test"), py::arg("regularization") = 0.01, py::arg("calib_fraction") = 0.2,
      py::arg("seed") = 0, py::arg("n_labels") = py::none());

  m.def(
      "cv_plus_pvalues",
      [](const FeatureMatrix& x, const std::vector<int>& y, const FeatureMatrix& test, double regularization, int folds,
         std::uint64_t seed, std::optional<int> n_labels) {
        const Dataset ds = make_dataset(x, y, n_labels);
        const CrossConformal cv(ds, folds, make_spec(ds, regularization, 1e-10, 100), seed);
        return pvalue_rows(test, ds.label_count(), [&](const Vector& v) { return cv.predict(v); });
      },
      py::arg("X"), py::arg("y"), py::arg("X_test"), py::arg("regularization") = 0.01, py::arg("folds") = 5,
      py::arg("seed") = 0, py::arg("n_labels") = py::none());

  m.def(
      "prediction_sets",
      [](const Matrix& pvalues, double epsilon) {
        std::vector<std::vector<int>> out;
        for (Eigen::Index i = 0; i < pvalues.rows(); ++i) {
          PValueTable t;
          for (Eigen::Index y = 0; y < pvalues.cols(); ++y) t.pvalues.push_back(pvalues(i, y));
          out.push_back(prediction_set(t, epsilon).labels);
        }
        return out;
      },
      py::arg("pvalues"), py::arg("epsilon"), "Labels with p-value strictly above epsilon, per row.");

  m.def(
      "fuzziness",
      [](const Matrix& pvalues) {
        Vector out(pvalues.rows());
        for (Eigen::Index i = 0; i < pvalues.rows(); ++i) {
          PValueTable t;
          for (Eigen::Index y = 0; y < pvalues.cols(); ++y) t.pvalues.push_back(pvalues(i, y));
          out(i) = fuzziness(t);
        }
        return out;
      },
      py::arg("pvalues"));
}
