#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "approxcp/errors.hpp"
#include "helpers.hpp"

using namespace approxcp;
using testing::oracle_loss;
using testing::random_vector;

namespace {

// Plain gradient descent on mean loss + (lambda/2)||theta||^2 with its own
// softmax gradient; no Hessian information.
Vector gradient_descent_oracle(const Dataset& ds, int labels, double lambda) {
  const int d = ds.dims();
  const int w = d * labels + labels;
  double lipschitz = lambda;
  for (std::size_t i = 0; i < ds.size(); ++i) lipschitz += 0.5 * (ds.row(i).squaredNorm() + 1.0) / ds.size();
  const double step = 1.0 / lipschitz;
  Vector theta = Vector::Zero(w);
  for (int it = 0; it < 2000000; ++it) {
    Vector grad = lambda * theta;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      std::vector<double> z(labels);
      for (int k = 0; k < labels; ++k) {
        z[k] = theta(d * labels + k);
        for (int j = 0; j < d; ++j) z[k] += theta(k * d + j) * ds.row(i)(j);
      }
      const double m = *std::max_element(z.begin(), z.end());
      double s = 0;
      for (auto& v : z) s += (v = std::exp(v - m));
      for (int k = 0; k < labels; ++k) {
        const double r = (z[k] / s - (k == ds.label(i) ? 1.0 : 0.0)) / ds.size();
        for (int j = 0; j < d; ++j) grad(k * d + j) += r * ds.row(i)(j);
        grad(d * labels + k) += r;
      }
    }
    theta -= step * grad;
    if (grad.norm() < 1e-14) break;
  }
  return theta;
}

}  // namespace

TEST_CASE("fit matches a gradient-descent oracle") {
  const Dataset ds = testing::blobs(20, 2, 17);
  const FittedModel model = fit(ds, testing::spec_for(ds, 1e-2));
  REQUIRE(model.converged);
  const Vector oracle = gradient_descent_oracle(ds, 2, 1e-2);
  CHECK((model.theta - oracle).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("fit: single point at the origin") {
  FeatureMatrix x = FeatureMatrix::Zero(1, 3);
  const Dataset ds(x, {0}, 2);
  ModelSpec spec = testing::spec_for(ds, 1.0, 1e-12);
  const FittedModel model = fit(ds, spec);
  REQUIRE(model.converged);
  CHECK(model.final_gradient_norm <= spec.convergence_tolerance);
  CHECK(model.theta.head(6).cwiseAbs().maxCoeff() == 0.0);
  // Stationarity: b = e_0 - softmax(b), so b_0 = -b_1 = t with t = 1 - sigmoid(2t).
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (mid - (1.0 - 1.0 / (1.0 + std::exp(-2.0 * mid))) > 0 ? hi : lo) = mid;
  }
  CHECK(model.theta(6) == doctest::Approx(lo).epsilon(1e-10));
  CHECK(model.theta(7) == doctest::Approx(-lo).epsilon(1e-10));
}

TEST_CASE("fit: duplicated rows and permuted rows leave theta unchanged") {
  const Dataset ds = testing::blobs(24, 3, 2);
  const ModelSpec spec = testing::spec_for(ds, 0.05);
  const FittedModel base = fit(ds, spec);
  REQUIRE(base.converged);

  std::vector<std::size_t> twice;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    twice.push_back(i);
    twice.push_back(i);
  }
  const FittedModel doubled = fit(ds.subset(twice), spec);
  CHECK((doubled.theta - base.theta).cwiseAbs().maxCoeff() <= 1e-9);

  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(3);
  rng.shuffle(std::span<std::size_t>(perm));
  const FittedModel permuted = fit(ds.subset(perm), spec);
  CHECK((permuted.theta - base.theta).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("fit: objective trace is non-increasing and converged implies certificate") {
  for (const double lambda : {0.0, 1e-3, 1e-1}) {
    const Dataset ds = testing::blobs(60, 4, 9, 0.7);
    const ModelSpec spec = testing::spec_for(ds, lambda, 1e-9);
    const FittedModel model = fit(ds, spec);
    for (std::size_t k = 1; k < model.objective_trace.size(); ++k) {
      CHECK(model.objective_trace[k] <= model.objective_trace[k - 1] * (1.0 + 1e-15));
    }
    if (model.converged) CHECK(model.final_gradient_norm <= spec.convergence_tolerance);
    CHECK(model.theta.allFinite());
  }
}

TEST_CASE("fit: dimension mismatch and bad specs") {
  const Dataset ds = testing::blobs(10, 2, 1);
  ModelSpec spec = testing::spec_for(ds, 0.1);
  spec.n_features = 3;
  CHECK_THROWS_AS(fit(ds, spec), ConfigError);
  spec = testing::spec_for(ds, -1.0);
  CHECK_THROWS_AS(fit(ds, spec), ConfigError);
  spec = testing::spec_for(ds, 0.1, 0.0);
  CHECK_THROWS_AS(fit(ds, spec), ConfigError);
  spec = testing::spec_for(ds, 0.1);
  spec.n_labels = 3;
  CHECK_THROWS_AS(fit(ds, spec), ConfigError);
}

TEST_CASE("fit: non-convergence is reported, not thrown") {
  const Dataset ds = testing::blobs(40, 2, 4, 0.5);
  ModelSpec spec = testing::spec_for(ds, 1e-3, 1e-14);
  spec.max_iterations = 1;
  const FittedModel model = fit(ds, spec);
  CHECK_FALSE(model.converged);
  CHECK(model.iterations_used == 1);
}

TEST_CASE("point_loss") {
  ModelSpec spec;
  spec.n_features = 3;
  spec.n_labels = 4;
  FittedModel model;
  model.spec = spec;
  model.theta = Vector::Zero(spec.n_params());
  Vector x(3);
  x << 0.3, -2.0, 5.0;
  for (int y = 0; y < 4; ++y) CHECK(point_loss(model, x, y) == doctest::Approx(std::log(4.0)).epsilon(1e-15));

  ModelSpec binary;
  binary.n_features = 1;
  FittedModel sharp;
  sharp.spec = binary;
  sharp.theta = Vector::Zero(4);
  sharp.theta(2) = 1000.0;
  const Vector zero = Vector::Zero(1);
  const double l0 = point_loss(sharp, zero, 0);
  CHECK(std::isfinite(l0));
  CHECK(l0 >= 0.0);
  CHECK(l0 < 1e-300);
  CHECK(point_loss(sharp, zero, 1) == doctest::Approx(1000.0));
  CHECK_THROWS_AS(point_loss(sharp, zero, 2), ConfigError);

  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector theta = random_vector(rng, spec.n_params(), 3.0);
    const Vector xr = random_vector(rng, 3, 2.0);
    const int y = static_cast<int>(rng.below(4));
    model.theta = theta;
    const double expected = oracle_loss(theta, xr, y, 4);
    CHECK(point_loss(model, xr, y) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("point_gradient") {
  ModelSpec spec;
  spec.n_features = 2;
  FittedModel model;
  model.spec = spec;
  model.theta = Vector::Zero(6);
  const Vector zero = Vector::Zero(2);
  const Vector g = point_gradient(model, zero, 0);
  CHECK(g.head(4).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g(4) == -0.5);
  CHECK(g(5) == 0.5);

  model.theta(4) = 50.0;
  CHECK(point_gradient(model, zero, 0).norm() < 1e-20);

  SUBCASE("central finite differences, 100 draws") {
    ModelSpec multi;
    multi.n_features = 3;
    multi.n_labels = 3;
    FittedModel m;
    m.spec = multi;
    const auto& lm = loss_model(multi);
    Rng rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      m.theta = random_vector(rng, multi.n_params());
      const Vector x = random_vector(rng, 3);
      const int y = static_cast<int>(rng.below(3));
      const Vector analytic = point_gradient(m, x, y);
      Vector numeric(analytic.size());
      for (Eigen::Index k = 0; k < analytic.size(); ++k) {
        Vector plus = m.theta, minus = m.theta;
        plus(k) += 1e-6;
        minus(k) -= 1e-6;
        numeric(k) = (lm.loss(plus, x, y) - lm.loss(minus, x, y)) / 2e-6;
      }
      worst = std::max(worst, (numeric - analytic).norm() / std::max(analytic.norm(), 1e-3));
    }
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("risk_hessian") {
  SUBCASE("closed form at the origin for one binary point") {
    FeatureMatrix x(1, 2);
    x << 2.0, -1.0;
    const Dataset ds(x, {1}, 2);
    FittedModel model;
    model.spec = testing::spec_for(ds, 0.3);
    model.theta = Vector::Zero(6);
    const Matrix h = risk_hessian(model, ds);
    Vector u(3);
    u << 2.0, -1.0, 1.0;  // features then the bias coordinate
    const Matrix outer = 0.25 * u * u.transpose();
    // Parameter order: w0 (2), w1 (2), b0, b1.
    const std::array<Eigen::Index, 3> a0{0, 1, 4}, a1{2, 3, 5};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        const double ridge = r == c ? 0.3 : 0.0;
        CHECK(h(a0[r], a0[c]) == doctest::Approx(outer(r, c) + ridge));
        CHECK(h(a1[r], a1[c]) == doctest::Approx(outer(r, c) + ridge));
        CHECK(h(a0[r], a1[c]) == doctest::Approx(-outer(r, c)));
      }
    }
  }
  SUBCASE("exact symmetry and smallest eigenvalue >= lambda") {
    const Dataset ds = testing::blobs(40, 3, 8);
    const FittedModel model = fit(ds, testing::spec_for(ds, 0.02));
    const Matrix h = risk_hessian(model, ds);
    CHECK((h - h.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
    CHECK(eig.eigenvalues().minCoeff() >= 0.02 - 1e-10);
  }
  SUBCASE("finite differences of the gradient") {
    ModelSpec spec;
    spec.n_features = 3;
    spec.n_labels = 3;
    const auto& lm = loss_model(spec);
    Rng rng(13);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const Vector theta = random_vector(rng, spec.n_params());
      const Vector x = random_vector(rng, 3);
      const int y = static_cast<int>(rng.below(3));
      const Matrix h = lm.point_hessian(theta, x, y);
      Matrix numeric(h.rows(), h.cols());
      for (Eigen::Index k = 0; k < h.cols(); ++k) {
        Vector plus = theta, minus = theta;
        plus(k) += 1e-6;
        minus(k) -= 1e-6;
        numeric.col(k) = (lm.gradient(plus, x, y) - lm.gradient(minus, x, y)) / 2e-6;
      }
      worst = std::max(worst, (numeric - h).norm() / std::max(h.norm(), 1e-3));
    }
    CHECK(worst <= 1e-4);
  }
  SUBCASE("risk Hessian equals mean point Hessian plus ridge") {
    const Dataset ds = testing::blobs(12, 2, 4);
    FittedModel model;
    model.spec = testing::spec_for(ds, 0.7);
    Rng rng(1);
    model.theta = random_vector(rng, 6);
    const auto& lm = loss_model(model.spec);
    Matrix expected = 0.7 * Matrix::Identity(6, 6);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      expected += lm.point_hessian(model.theta, ds.row(i).transpose(), ds.label(i)) / 12.0;
    }
    CHECK((risk_hessian(model, ds) - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("updated_hessian matches a rebuild") {
  const Dataset ds = testing::blobs(15, 2, 6);
  const ModelSpec spec = testing::spec_for(ds, 0.1);
  const FittedModel model = fit(ds, spec);
  const auto& lm = loss_model(spec);
  const Matrix base = risk_hessian(model, ds);
  const Example extra{Vector::Constant(2, 0.4), 1};
  const Matrix removed = lm.point_hessian(model.theta, ds.row(3).transpose(), ds.label(3));
  const Matrix added = lm.point_hessian(model.theta, extra.x, extra.y);
  const Matrix updated = updated_hessian(base, ds.size(), 0.1, &removed, &added);
  const Dataset rebuilt = testing::modified(ds, 3, &extra);
  CHECK((updated - risk_hessian(model, rebuilt)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("TrainingView objective equals the explicit dataset objective") {
  const Dataset ds = testing::blobs(10, 2, 3);
  const ModelSpec spec = testing::spec_for(ds, 0.2);
  const auto& lm = loss_model(spec);
  Rng rng(2);
  const Vector theta = random_vector(rng, 6);
  const Example extra{Vector::Constant(2, -1.0), 0};
  Vector g_view, g_explicit;
  const double a = lm.objective(TrainingView(ds, 4, &extra), theta, 0.2, &g_view);
  const Dataset explicit_set = testing::modified(ds, 4, &extra);
  const double b = lm.objective(TrainingView(explicit_set), theta, 0.2, &g_explicit);
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
  CHECK((g_view - g_explicit).cwiseAbs().maxCoeff() < 1e-14);
}
