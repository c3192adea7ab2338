#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "approxcp/conformal.hpp"
#include "approxcp/errors.hpp"
#include "approxcp/influence.hpp"
#include "helpers.hpp"

using namespace approxcp;

namespace {

struct Instance {
  Dataset train;
  Dataset test;
  ModelSpec spec;
  FittedModel model;
};

Instance make_instance(int n, int d, double lambda, std::uint64_t seed, int n_test = 10, double sep = 1.0) {
  auto [train, test] = testing::blobs_split(n, n_test, d, seed, sep);
  const ModelSpec spec = testing::spec_for(train, lambda);
  FittedModel model = fit(train, spec);
  REQUIRE(model.converged);
  return {train, test, spec, model};
}

// Model whose softmax saturates on label 0 for every x (bias 1000), so that
// points labelled 0 have an exactly zero gradient.
FittedModel saturated_model(int d) {
  FittedModel m;
  m.spec.n_features = d;
  m.spec.n_labels = 2;
  m.spec.regularization = 0.1;
  m.theta = Vector::Zero(m.spec.n_params());
  m.theta(2 * d) = 1000.0;
  m.converged = true;
  return m;
}

}  // namespace

TEST_CASE("build_workspace: inverse of injected Hessians") {
  FeatureMatrix x(8, 1);
  x << -2, -1.5, -1, -0.5, 0.5, 1, 1.5, 2;
  const Dataset ds(x, {0, 0, 1, 0, 1, 0, 1, 1}, 2);
  FittedModel model;
  model.spec = testing::spec_for(ds, 0.0);
  model.theta = Vector::Zero(4);

  const auto identity = InfluenceWorkspace::from_hessian(model, ds, Matrix::Identity(4, 4), 0.0);
  CHECK((identity.hessian_inverse() - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-15);

  Matrix h = Matrix::Identity(4, 4);
  h.topLeftCorner(2, 2) << 2.0, 1.0, 1.0, 2.0;  // eigenvalues 1 and 3
  const double damping = 0.5;
  const auto ws = InfluenceWorkspace::from_hessian(model, ds, h, damping);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(ws.hessian_inverse());
  // 1/(3+d), then 1/(1+d) three times.
  CHECK(eig.eigenvalues()(0) == doctest::Approx(1.0 / 3.5));
  for (int k = 1; k < 4; ++k) CHECK(eig.eigenvalues()(k) == doctest::Approx(1.0 / 1.5));

  Matrix bad = Matrix::Zero(4, 4);
  bad(0, 0) = -1.0;
  CHECK_THROWS_AS(InfluenceWorkspace::from_hessian(model, ds, bad, 0.0), NumericError);
  CHECK_NOTHROW(InfluenceWorkspace::from_hessian(model, ds, bad, 2.0));
}

TEST_CASE("build_workspace: residual, symmetry and caches on a fitted model") {
  const Instance inst = make_instance(50, 3, 1e-2, 5);
  for (const double damping : {0.0, 0.01}) {
    const auto ws = InfluenceWorkspace::build(inst.model, inst.train, damping);
    const Matrix h = risk_hessian(inst.model, inst.train) + damping * Matrix::Identity(8, 8);
    CHECK((h * ws.hessian_inverse() - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK((ws.hessian_inverse() - ws.hessian_inverse().transpose()).cwiseAbs().maxCoeff() <= 1e-8);
    for (std::size_t i = 0; i < inst.train.size(); ++i) {
      const Example z = inst.train.example(i);
      CHECK((ws.gradients().row(static_cast<Eigen::Index>(i)).transpose() - point_gradient(inst.model, z)).norm() == 0.0);
      CHECK(ws.provisional_losses()(static_cast<Eigen::Index>(i)) == point_loss(inst.model, z));
    }
    CHECK(ws.n_train() == 50);
  }
}

TEST_CASE("largest_eigenvalue agrees with a dense eigensolver") {
  const Instance inst = make_instance(40, 4, 1e-3, 2);
  const Matrix h = risk_hessian(inst.model, inst.train) - 1e-3 * Matrix::Identity(10, 10);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
  CHECK(largest_eigenvalue(h) == doctest::Approx(eig.eigenvalues().maxCoeff()).epsilon(1e-6));
  const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
  CHECK(ws.sigma_max() == doctest::Approx(eig.eigenvalues().maxCoeff()).epsilon(1e-6));
}

TEST_CASE("influence_params") {
  const Instance inst = make_instance(30, 2, 0.05, 7);
  const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);

  SUBCASE("formula") {
    const Example z = inst.test.example(0);
    const Vector expected = -(risk_hessian(inst.model, inst.train).inverse() * point_gradient(inst.model, z)) / 30.0;
    CHECK((influence_params(ws, z) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("zero-gradient point") {
    const FittedModel m = saturated_model(2);
    const auto sat = InfluenceWorkspace::from_hessian(m, inst.train, Matrix::Identity(6, 6), 0.0);
    const Example z{Vector::Constant(2, 0.3), 0};
    CHECK(influence_params(sat, z).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("norm is non-increasing in the damping") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      const Example z{testing::random_vector(rng, 2), static_cast<int>(rng.below(2))};
      double previous = std::numeric_limits<double>::infinity();
      for (const double damping : {0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e3}) {
        const double norm = influence_params(InfluenceWorkspace::build(inst.model, inst.train, damping), z).norm();
        CHECK(norm <= previous);
        previous = norm;
      }
      CHECK(previous < 1e-3);
    }
  }
}

TEST_CASE("influence_params approximates leave-one-out retraining") {
  const Instance inst = make_instance(8, 2, 0.1, 3);
  const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
  const auto& lm = loss_model(inst.spec);
  for (std::size_t i = 0; i < inst.train.size(); ++i) {
    const Dataset without = testing::modified(inst.train, i, nullptr);
    const FittedModel exact = fit(without, inst.spec);
    REQUIRE(exact.converged);
    const Vector approx = inst.model.theta - influence_params(ws, inst.train.example(i));
    // Newton step of the leave-one-out problem from the approximation: the
    // distance it predicts to the true minimizer.
    Vector grad;
    lm.objective(TrainingView(without), approx, inst.spec.regularization, &grad);
    const Matrix h = lm.objective_hessian(TrainingView(without), approx, inst.spec.regularization);
    const double predicted = h.llt().solve(grad).norm();
    const double actual = (exact.theta - approx).norm();
    CHECK(actual <= 10.0 * predicted);
    CHECK(actual < (exact.theta - inst.model.theta).norm());
  }
}

TEST_CASE("influence_loss") {
  const Instance inst = make_instance(20, 2, 0.05, 9);
  const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
  const Example a = inst.test.example(0), b = inst.test.example(1);
  CHECK(influence_loss(ws, a, b) == doctest::Approx(point_gradient(inst.model, a).dot(influence_params(ws, b))));
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(influence_loss(ws, i, b) == doctest::Approx(influence_loss(ws, inst.train.example(i), b)).epsilon(1e-12));
  }

  SUBCASE("zero evaluation gradient") {
    const FittedModel m = saturated_model(2);
    const auto sat = InfluenceWorkspace::from_hessian(m, inst.train, Matrix::Identity(6, 6), 0.0);
    CHECK(influence_loss(sat, Example{Vector::Constant(2, 1.0), 0}, b) == 0.0);
  }
  SUBCASE("bilinearity under a scaled gradient cache") {
    const Matrix g = ws.gradients();
    const auto base = InfluenceWorkspace::assemble(inst.model, inst.train, ws.hessian_inverse(), 0.0, g,
                                                   ws.provisional_losses(), ws.sigma_max());
    const auto scaled = InfluenceWorkspace::assemble(inst.model, inst.train, ws.hessian_inverse(), 0.0, 2.5 * g,
                                                     ws.provisional_losses(), ws.sigma_max());
    for (std::size_t i = 0; i < inst.train.size(); ++i) {
      CHECK(influence_loss(scaled, i, b) == doctest::Approx(2.5 * influence_loss(base, i, b)).epsilon(1e-12));
    }
  }
}

TEST_CASE("influence_loss tracks retraining, improving with N") {
  std::vector<double> errors;
  for (const int n : {8, 16, 32, 64}) {
    const Instance inst = make_instance(n, 2, 0.1, 21, 4);
    const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
    double total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < inst.train.size(); ++i) {
      const FittedModel without = fit(testing::modified(inst.train, i, nullptr), inst.spec);
      for (std::size_t t = 0; t < inst.test.size(); ++t) {
        const Example z = inst.test.example(t);
        const double exact = point_loss(without, z) - point_loss(inst.model, z);
        total += std::abs(exact - (-influence_loss(ws, z, inst.train.example(i))));
        ++count;
      }
    }
    errors.push_back(total / count);
  }
  MESSAGE("mean |retrained loss change + I_loss|: " << errors[0] << " " << errors[1] << " " << errors[2] << " "
                                                    << errors[3]);
  CHECK(errors.back() < errors.front() / 4.0);
  for (std::size_t k = 1; k < errors.size(); ++k) CHECK(errors[k] < errors[k - 1]);
}

TEST_CASE("approximate scores: cancellation and algebraic identities") {
  const Instance inst = make_instance(25, 3, 0.02, 31);
  const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.01);

  SUBCASE("candidate equal to a training point") {
    const Example zk = inst.train.example(4);
    const double loss = point_loss(inst.model, zk);
    CHECK(scores_deleted_direct(ws, zk).candidate_score() == loss);
    CHECK(scores_deleted_indirect(ws, zk).candidate_score() == loss);
  }
  SUBCASE("candidate entries for a test point") {
    for (std::size_t t = 0; t < inst.test.size(); ++t) {
      for (int y = 0; y < 2; ++y) {
        const Example c{inst.test.row(t).transpose(), y};
        const double loss = point_loss(inst.model, c);
        CHECK(scores_deleted_direct(ws, c).candidate_score() == loss);
        CHECK(scores_deleted_indirect(ws, c).candidate_score() == loss);
        CHECK(scores_ordinary_direct(ws, c).candidate_score() ==
              doctest::Approx(loss + influence_loss(ws, c, c)).epsilon(1e-14));
      }
    }
  }
  SUBCASE("deleted-direct minus ordinary-direct is -I_loss(z_i, z_i)") {
    const Example c{inst.test.row(0).transpose(), 1};
    const ScoreVector dd = scores_deleted_direct(ws, c);
    const ScoreVector od = scores_ordinary_direct(ws, c);
    for (std::size_t i = 0; i < inst.train.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      const double self = influence_loss(ws, i, inst.train.example(i));
      CHECK(std::abs((dd.scores(k) - od.scores(k)) - (-self)) <= 1e-12);
    }
  }
  SUBCASE("indirect scores follow the perturbed-parameter definition") {
    const Example c{inst.test.row(1).transpose(), 0};
    const ScoreVector di = scores_deleted_indirect(ws, c);
    const ScoreVector oi = scores_ordinary_indirect(ws, c);
    const Vector shift = influence_params(ws, c);
    const auto& lm = loss_model(inst.spec);
    for (std::size_t i = 0; i < inst.train.size(); ++i) {
      const Example zi = inst.train.example(i);
      const Vector theta_i = inst.model.theta + shift - influence_params(ws, zi);
      CHECK(di.scores(static_cast<Eigen::Index>(i)) == doctest::Approx(lm.loss(theta_i, zi.x, zi.y)).epsilon(1e-10));
      CHECK(oi.scores(static_cast<Eigen::Index>(i)) ==
            doctest::Approx(lm.loss(inst.model.theta + shift, zi.x, zi.y)).epsilon(1e-12));
    }
    CHECK(oi.candidate_score() == doctest::Approx(lm.loss(inst.model.theta + shift, c.x, c.y)).epsilon(1e-12));
  }
  SUBCASE("tags and shape") {
    const ScoreVector s = scores_ordinary_indirect(ws, inst.test.example(0));
    CHECK(s.scheme == Scheme::ordinary);
    CHECK(s.method == ScoreMethod::indirect);
    CHECK(s.n_train() == 25);
    CHECK(s.scores.allFinite());
  }
}

TEST_CASE("approximate scores: degenerate injected workspaces") {
  const Dataset train = testing::blobs(12, 2, 2);
  SUBCASE("zero gradient cache gives the provisional losses") {
    const Instance inst = make_instance(12, 2, 0.1, 2);
    Vector losses(12);
    for (Eigen::Index i = 0; i < 12; ++i) losses(i) = 0.1 * static_cast<double>(i);
    const auto ws = InfluenceWorkspace::assemble(inst.model, inst.train, Matrix::Identity(6, 6), 0.0,
                                                 Matrix::Zero(12, 6), losses, 1.0);
    const Example c = inst.test.example(0);
    const ScoreVector dd = scores_deleted_direct(ws, c);
    CHECK((dd.scores.head(12) - losses).cwiseAbs().maxCoeff() == 0.0);
    CHECK(dd.candidate_score() == point_loss(inst.model, c));
  }
  SUBCASE("zero candidate gradient leaves ordinary scores at theta_Z") {
    const FittedModel m = saturated_model(2);
    const auto ws = InfluenceWorkspace::from_hessian(m, train, Matrix::Identity(6, 6), 0.0);
    const Example c{Vector::Constant(2, -0.7), 0};
    const ScoreVector od = scores_ordinary_direct(ws, c);
    const ScoreVector oi = scores_ordinary_indirect(ws, c);
    CHECK((od.scores.head(12) - ws.provisional_losses()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(od.candidate_score() == point_loss(m, c));
    for (std::size_t i = 0; i < train.size(); ++i) {
      CHECK(oi.scores(static_cast<Eigen::Index>(i)) ==
            doctest::Approx(ws.provisional_losses()(static_cast<Eigen::Index>(i))).epsilon(1e-15));
    }
  }
  SUBCASE("zero influences give indirect scores at theta_Z") {
    const Instance inst = make_instance(12, 2, 0.1, 2);
    const auto full_ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
    const auto ws = InfluenceWorkspace::assemble(inst.model, inst.train, Matrix::Zero(6, 6), 0.0,
                                                 full_ws.gradients(), full_ws.provisional_losses(), 1.0);
    const ScoreVector di = scores_deleted_indirect(ws, inst.test.example(0));
    CHECK((di.scores.head(12) - full_ws.provisional_losses()).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("approximate scores against the retraining oracle at tiny N") {
  // Aggregate comparison: the mean direct error must not
  // exceed the mean indirect error. Per-point violations are reported.
  std::vector<double> indirect_errors;
  for (const int n : {8, 16, 32, 64}) {
    const Instance inst = make_instance(n, 10, 0.01, 41, 5);
    const FullConformal full(inst.train, inst.spec);
    const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
    double direct = 0, indirect = 0, ordinary_direct = 0;
    int violations = 0, count = 0;
    for (std::size_t t = 0; t < inst.test.size(); ++t) {
      for (int y = 0; y < 2; ++y) {
        const Example c{inst.test.row(t).transpose(), y};
        const ScoreVector exact = full.scores(c, Scheme::deleted);
        const Vector ed = (scores_deleted_direct(ws, c).scores - exact.scores).cwiseAbs();
        const Vector ei = (scores_deleted_indirect(ws, c).scores - exact.scores).cwiseAbs();
        direct += ed.mean();
        indirect += ei.mean();
        for (Eigen::Index i = 0; i < ed.size(); ++i) violations += ed(i) > ei(i) ? 1 : 0;
        count += static_cast<int>(ed.size());
        const ScoreVector exact_o = full.scores(c, Scheme::ordinary);
        ordinary_direct += (scores_ordinary_direct(ws, c).scores - exact_o.scores).cwiseAbs().mean();
      }
    }
    const double pairs = 2.0 * static_cast<double>(inst.test.size());
    MESSAGE("N=" << n << " direct " << direct / pairs << " indirect " << indirect / pairs << " ordinary-direct "
                 << ordinary_direct / pairs << " per-point violations " << violations << "/" << count);
    CHECK(direct <= indirect);
    CHECK(std::isfinite(ordinary_direct));
    indirect_errors.push_back(indirect / pairs);
  }
  CHECK(indirect_errors.back() < indirect_errors.front());
}

TEST_CASE("cone_bounds") {
  CHECK(cone_factor(2.0, 1.0) == doctest::Approx(1.0 + 3.0 + 2.0));
  CHECK(cone_factor(1.0, 1e6) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK_THROWS_AS(cone_factor(1.0, 0.0), ConfigError);

  const Instance inst = make_instance(20, 2, 0.05, 12);
  SUBCASE("zero self influence collapses the interval") {
    Matrix g = InfluenceWorkspace::build(inst.model, inst.train, 0.0).gradients();
    g.row(3).setZero();
    const auto ws = InfluenceWorkspace::assemble(inst.model, inst.train,
                                                 risk_hessian(inst.model, inst.train).inverse(), 0.0, g,
                                                 Vector::Zero(20), 1.0);
    const ConeBound b = cone_bounds(ws, 3, inst.test.example(0));
    CHECK(b.lower == b.upper);
  }
  SUBCASE("interval orientation and large lambda limit") {
    const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
    const Example c = inst.test.example(1);
    const ScoreVector dd = scores_deleted_direct(ws, c);
    for (std::size_t i = 0; i < inst.train.size(); ++i) {
      const ConeBound b = cone_bounds(ws, i, c);
      CHECK(b.lower <= b.upper);
      CHECK(b.direct == doctest::Approx(dd.scores(static_cast<Eigen::Index>(i))).epsilon(1e-13));
      CHECK(b.lambda == 0.05);
      CHECK(b.g == doctest::Approx(cone_factor(ws.sigma_max(), 0.05)));
    }
    const auto heavy = InfluenceWorkspace::build(inst.model, inst.train, 1e8);
    const ConeBound b = cone_bounds(heavy, 0, c);
    CHECK(b.g == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(b.upper - b.lower) < 1e-9);
  }
  SUBCASE("lambda = 0 is a configuration error") {
    const Dataset ds = testing::blobs(20, 2, 12);
    FittedModel unregularized;
    unregularized.spec = testing::spec_for(ds, 0.0);
    unregularized.theta = Vector::Zero(6);
    const auto ws = InfluenceWorkspace::from_hessian(unregularized, ds, Matrix::Identity(6, 6), 0.0);
    CHECK_THROWS_AS(cone_bounds(ws, 0, ds.example(1)), ConfigError);
  }
}

TEST_CASE("cone coverage grows with lambda") {
  std::vector<double> coverage;
  for (const double lambda : {0.01, 0.1, 1.0}) {
    const Instance inst = make_instance(50, 3, lambda, 8, 10);
    const FullConformal full(inst.train, inst.spec);
    const auto ws = InfluenceWorkspace::build(inst.model, inst.train, 0.0);
    std::size_t inside = 0, total = 0;
    for (std::size_t t = 0; t < inst.test.size(); ++t) {
      for (int y = 0; y < 2; ++y) {
        const Example c{inst.test.row(t).transpose(), y};
        const ScoreVector exact = full.scores(c, Scheme::deleted);
        const auto bounds = cone_bounds(ws, CandidateInfluence::compute(ws, c));
        for (std::size_t i = 0; i < bounds.size(); ++i) {
          inside += bounds[i].contains(exact.scores(static_cast<Eigen::Index>(i))) ? 1 : 0;
          ++total;
        }
      }
    }
    coverage.push_back(static_cast<double>(inside) / static_cast<double>(total));
  }
  MESSAGE("cone coverage at lambda 0.01, 0.1, 1: " << coverage[0] << " " << coverage[1] << " " << coverage[2]);
  CHECK(coverage[1] >= coverage[0]);
  CHECK(coverage[2] >= coverage[1]);
}
