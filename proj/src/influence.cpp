#include "approxcp/influence.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <string>

#include "approxcp/errors.hpp"

namespace approxcp {

namespace {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Logits of every training row under parameter vector theta (N x L).
Matrix logits_all(const Dataset& ds, const Vector& theta, int labels) {
  const RowMajorMap weights(theta.data(), labels, ds.dims());
  Matrix z = ds.features() * weights.transpose();
  z.rowwise() += theta.tail(labels).transpose();
  return z;
}

double cross_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int y) {
  const double m = logits.maxCoeff();
  return std::max(0.0, m + std::log((logits.array() - m).exp().sum()) - logits(y));
}

}  // namespace

const char* to_string(Scheme scheme) {
  return scheme == Scheme::deleted ? "deleted" : "ordinary";
}

const char* to_string(ScoreMethod method) {
  switch (method) {
    case ScoreMethod::exact: return "exact";
    case ScoreMethod::direct: return "direct";
    case ScoreMethod::indirect: return "indirect";
  }
  return "unknown";
}

InfluenceWorkspace::InfluenceWorkspace(FittedModel model, Dataset train, Matrix hessian_inverse,
                                       double damping, Matrix gradients, Vector provisional_losses,
                                       double sigma_max)
    : model_(std::move(model)),
      train_(std::move(train)),
      hessian_inverse_(std::move(hessian_inverse)),
      damping_(damping),
      gradients_(std::move(gradients)),
      provisional_losses_(std::move(provisional_losses)),
      sigma_max_(sigma_max) {
  const auto w = static_cast<Eigen::Index>(model_.spec.n_params());
  const auto n = static_cast<Eigen::Index>(train_.size());
  if (hessian_inverse_.rows() != w || hessian_inverse_.cols() != w) {
    throw ConfigError("workspace inverse Hessian must be W x W");
  }
  if (gradients_.rows() != n || gradients_.cols() != w) {
    throw ConfigError("workspace gradient cache must be N x W");
  }
  if (provisional_losses_.size() != n) throw ConfigError("workspace loss cache must have N entries");
  if (!(damping_ >= 0.0)) throw ConfigError("damping must be >= 0");
  if (train_.dims() != model_.spec.n_features || train_.label_count() != model_.spec.n_labels) {
    throw ConfigError("workspace training set does not match the model spec");
  }

  // H^-1 is symmetric, so (H^-1 G^T)^T = G H^-1.
  param_influences_ = -(gradients_ * hessian_inverse_) / static_cast<double>(n);
  self_influences_ = gradients_.cwiseProduct(param_influences_).rowwise().sum();
  const int labels = model_.spec.n_labels;
  const int d = model_.spec.n_features;
  self_shift_logits_.resize(n, labels);
  // Rows of a column-major matrix are strided; copy before mapping.
  Vector shift(w);
  for (Eigen::Index i = 0; i < n; ++i) {
    shift = param_influences_.row(i).transpose();
    const RowMajorMap weights(shift.data(), labels, d);
    self_shift_logits_.row(i) =
        (weights * train_.row(static_cast<std::size_t>(i)).transpose() + shift.tail(labels)).transpose();
  }
}

InfluenceWorkspace InfluenceWorkspace::assemble(FittedModel model, Dataset train,
                                                Matrix hessian_inverse, double damping,
                                                Matrix gradients, Vector provisional_losses,
                                                double sigma_max) {
  return InfluenceWorkspace(std::move(model), std::move(train), std::move(hessian_inverse), damping,
                            std::move(gradients), std::move(provisional_losses), sigma_max);
}

InfluenceWorkspace InfluenceWorkspace::from_hessian(const FittedModel& model, const Dataset& train,
                                                    const Matrix& hessian, double damping) {
  if (!(damping >= 0.0) || !std::isfinite(damping)) throw ConfigError("damping must be finite and >= 0");
  const auto w = static_cast<Eigen::Index>(model.spec.n_params());
  if (hessian.rows() != w || hessian.cols() != w) throw ConfigError("Hessian must be W x W");

  Matrix damped = hessian;
  damped.diagonal().array() += damping;
  Eigen::LLT<Matrix> llt(damped);
  if (llt.info() != Eigen::Success) {
    throw NumericError("H + damping*I is not positive definite (damping = " +
                       std::to_string(damping) + "); use a larger damping");
  }
  Matrix inverse = llt.solve(Matrix::Identity(w, w));
  inverse = (0.5 * (inverse + inverse.transpose())).eval();
  if (!inverse.allFinite()) throw NumericError("inverse Hessian is not finite; use a larger damping");

  Matrix unregularized = hessian;
  unregularized.diagonal().array() -= model.spec.regularization;
  const double sigma = largest_eigenvalue(unregularized);

  const LossModel& loss = loss_model(model.spec);
  return InfluenceWorkspace(model, train, std::move(inverse), damping, loss.gradients(train, model.theta),
                            loss.losses(train, model.theta), sigma);
}

InfluenceWorkspace InfluenceWorkspace::build(const FittedModel& model, const Dataset& train,
                                             double damping) {
  return from_hessian(model, train, risk_hessian(model, train), damping);
}

CandidateInfluence CandidateInfluence::compute(const InfluenceWorkspace& ws, const Example& candidate) {
  const LossModel& loss = loss_model(ws.model().spec);
  CandidateInfluence out;
  out.candidate = candidate;
  out.gradient = loss.gradient(ws.model().theta, candidate.x, candidate.y);
  out.loss = loss.loss(ws.model().theta, candidate.x, candidate.y);
  out.param_influence = -(ws.hessian_inverse() * out.gradient) / static_cast<double>(ws.n_train());
  out.loss_influence = ws.gradients() * out.param_influence;
  out.self_influence = out.gradient.dot(out.param_influence);
  return out;
}

Vector influence_params(const InfluenceWorkspace& ws, const Example& z) {
  const Vector g = point_gradient(ws.model(), z);
  return -(ws.hessian_inverse() * g) / static_cast<double>(ws.n_train());
}

double influence_loss(const InfluenceWorkspace& ws, const Example& z_eval, const Example& z_pert) {
  return point_gradient(ws.model(), z_eval).dot(influence_params(ws, z_pert));
}

double influence_loss(const InfluenceWorkspace& ws, std::size_t train_index, const Example& z_pert) {
  if (train_index >= ws.n_train()) throw ConfigError("training index out of range");
  return ws.gradients().row(static_cast<Eigen::Index>(train_index)).dot(influence_params(ws, z_pert));
}

ScoreVector scores(const InfluenceWorkspace& ws, const CandidateInfluence& prepared, Scheme scheme,
                   ScoreMethod method) {
  const auto n = static_cast<Eigen::Index>(ws.n_train());
  ScoreVector out;
  out.scheme = scheme;
  out.method = method;
  out.candidate = prepared.candidate;
  out.scores.resize(n + 1);
  const Vector& losses = ws.provisional_losses();
  const int labels = ws.model().spec.n_labels;

  switch (method) {
    case ScoreMethod::direct:
      out.scores.head(n) = losses + prepared.loss_influence;
      if (scheme == Scheme::deleted) {
        out.scores.head(n) -= ws.self_influences();
        // The add/remove terms of the candidate cancel exactly.
        out.scores(n) = prepared.loss;
      } else {
        out.scores(n) = prepared.loss + prepared.self_influence;
      }
      break;
    case ScoreMethod::indirect: {
      const Vector shifted = ws.model().theta + prepared.param_influence;
      const Matrix logits = logits_all(ws.train(), shifted, labels);
      if (scheme == Scheme::deleted) {
        const Matrix own = logits - ws.self_shift_logits();
        for (Eigen::Index i = 0; i < n; ++i) {
          out.scores(i) = cross_entropy(own.row(i), ws.train().label(static_cast<std::size_t>(i)));
        }
        // theta_Z + I(z_hat) - I(z_hat) = theta_Z.
        out.scores(n) = prepared.loss;
      } else {
        for (Eigen::Index i = 0; i < n; ++i) {
          out.scores(i) = cross_entropy(logits.row(i), ws.train().label(static_cast<std::size_t>(i)));
        }
        out.scores(n) = loss_model(ws.model().spec).loss(shifted, prepared.candidate.x, prepared.candidate.y);
      }
      break;
    }
    case ScoreMethod::exact:
      throw ConfigError("exact scores require retraining; use the conformal module");
  }
  if (!out.scores.allFinite()) throw NumericError("approximate scores are not finite");
  return out;
}

ScoreVector scores_deleted_direct(const InfluenceWorkspace& ws, const Example& candidate) {
  return scores(ws, CandidateInfluence::compute(ws, candidate), Scheme::deleted, ScoreMethod::direct);
}

ScoreVector scores_deleted_indirect(const InfluenceWorkspace& ws, const Example& candidate) {
  return scores(ws, CandidateInfluence::compute(ws, candidate), Scheme::deleted, ScoreMethod::indirect);
}

ScoreVector scores_ordinary_direct(const InfluenceWorkspace& ws, const Example& candidate) {
  return scores(ws, CandidateInfluence::compute(ws, candidate), Scheme::ordinary, ScoreMethod::direct);
}

ScoreVector scores_ordinary_indirect(const InfluenceWorkspace& ws, const Example& candidate) {
  return scores(ws, CandidateInfluence::compute(ws, candidate), Scheme::ordinary, ScoreMethod::indirect);
}

double cone_factor(double sigma_max, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("cone bounds need a positive effective regularization");
  return 1.0 + 1.5 * sigma_max / lambda + 0.5 * sigma_max * sigma_max / (lambda * lambda);
}

std::vector<ConeBound> cone_bounds(const InfluenceWorkspace& ws, const CandidateInfluence& prepared) {
  const double lambda = ws.effective_lambda();
  const double g = cone_factor(ws.sigma_max(), lambda);
  std::vector<ConeBound> out(ws.n_train());
  for (std::size_t i = 0; i < ws.n_train(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const double base = ws.provisional_losses()(row) + prepared.loss_influence(row);
    const double self = ws.self_influences()(row);
    ConeBound& b = out[i];
    b.direct = base - self;
    b.scaled = base - g * self;
    b.lower = std::min(b.direct, b.scaled);
    b.upper = std::max(b.direct, b.scaled);
    b.g = g;
    b.sigma_max = ws.sigma_max();
    b.lambda = lambda;
  }
  return out;
}

ConeBound cone_bounds(const InfluenceWorkspace& ws, std::size_t train_index, const Example& candidate) {
  if (train_index >= ws.n_train()) throw ConfigError("training index out of range");
  return cone_bounds(ws, CandidateInfluence::compute(ws, candidate))[train_index];
}

double largest_eigenvalue(const Matrix& symmetric, double tolerance, int max_iterations) {
  const auto w = symmetric.rows();
  if (w == 0 || symmetric.cols() != w) throw ConfigError("power iteration needs a square matrix");
  Vector v(w);
  for (Eigen::Index i = 0; i < w; ++i) v(i) = 1.0 + static_cast<double>(i + 1) / static_cast<double>(w + 1);
  v.normalize();
  double estimate = v.dot(symmetric * v);
  for (int it = 0; it < max_iterations; ++it) {
    Vector next = symmetric * v;
    const double norm = next.norm();
    if (norm == 0.0) return 0.0;
    v = next / norm;
    const double updated = v.dot(symmetric * v);
    if (std::abs(updated - estimate) <= tolerance * std::max(1.0, std::abs(updated))) return updated;
    estimate = updated;
  }
  return estimate;
}

}  // namespace approxcp
