#include "approxcp/erm.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "approxcp/errors.hpp"

namespace approxcp {

namespace {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Log-sum-exp of a logit vector, shifted by its maximum.
double log_sum_exp(const Eigen::Ref<const Vector>& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

// Writes the (k, l) label block of a logistic Hessian given the weighted sums
// S_ww = sum c x x^T, s_w = sum c x, s_b = sum c.
void scatter_block(Matrix& h, int d, int labels, int k, int l, const Matrix& s_ww,
                   const Vector& s_w, double s_b) {
  const int bias = d * labels;
  h.block(k * d, l * d, d, d) = s_ww;
  h.block(k * d, bias + l, d, 1) = s_w;
  h.block(bias + k, l * d, 1, d) = s_w.transpose();
  h(bias + k, bias + l) = s_b;
  if (k != l) {
    h.block(l * d, k * d, d, d) = s_ww.transpose();
    h.block(l * d, bias + k, d, 1) = s_w;
    h.block(bias + l, k * d, 1, d) = s_w.transpose();
    h(bias + l, bias + k) = s_b;
  }
}

}  // namespace

void ModelSpec::validate() const {
  if (n_features < 1) throw ConfigError("model n_features must be >= 1");
  if (n_labels < 2) throw ConfigError("model n_labels must be >= 2");
  if (!(regularization >= 0.0) || !std::isfinite(regularization)) {
    throw ConfigError("model regularization must be finite and >= 0");
  }
  if (!(convergence_tolerance > 0.0)) throw ConfigError("model convergence tolerance must be > 0");
  if (max_iterations < 1) throw ConfigError("model max_iterations must be >= 1");
}

TrainingView::TrainingView(const Dataset& base, std::optional<std::size_t> excluded,
                           const Example* added)
    : base_(&base), excluded_(excluded), added_(added) {
  if (excluded_ && *excluded_ >= base.size()) throw ConfigError("excluded row out of range");
  if (count() == 0) throw ConfigError("training view is empty");
}

std::size_t TrainingView::count() const {
  return base_->size() - (excluded_ ? 1 : 0) + (added_ ? 1 : 0);
}

MultinomialLogistic::MultinomialLogistic(int n_features, int n_labels)
    : d_(n_features), labels_(n_labels) {
  if (d_ < 1 || labels_ < 2) throw ConfigError("logistic model needs d >= 1 and L >= 2");
}

void MultinomialLogistic::check(const Vector& theta) const {
  if (theta.size() != n_params()) {
    throw ConfigError("parameter vector has length " + std::to_string(theta.size()) +
                      ", expected " + std::to_string(n_params()));
  }
}

void MultinomialLogistic::check(const Eigen::Ref<const Vector>& x, int y) const {
  if (x.size() != d_) {
    throw ConfigError("point has " + std::to_string(x.size()) + " features, model expects " +
                      std::to_string(d_));
  }
  if (y < 0 || y >= labels_) throw ConfigError("label " + std::to_string(y) + " is invalid");
}

Vector MultinomialLogistic::logits(const Vector& theta, const Eigen::Ref<const Vector>& x) const {
  check(theta);
  const RowMajorMap weights(theta.data(), labels_, d_);
  return weights * x + theta.tail(labels_);
}

Vector MultinomialLogistic::probabilities(const Vector& theta,
                                          const Eigen::Ref<const Vector>& x) const {
  const Vector z = logits(theta, x);
  const double lse = log_sum_exp(z);
  return z.unaryExpr([lse](double v) { return std::exp(v - lse); });
}

double MultinomialLogistic::loss(const Vector& theta, const Eigen::Ref<const Vector>& x,
                                 int y) const {
  check(x, y);
  const Vector z = logits(theta, x);
  return std::max(0.0, log_sum_exp(z) - z(y));
}

Vector MultinomialLogistic::gradient(const Vector& theta, const Eigen::Ref<const Vector>& x,
                                     int y) const {
  check(x, y);
  Vector residual = probabilities(theta, x);
  residual(y) -= 1.0;
  Vector g(n_params());
  for (int k = 0; k < labels_; ++k) g.segment(k * d_, d_) = residual(k) * x;
  g.tail(labels_) = residual;
  return g;
}

Matrix MultinomialLogistic::point_hessian(const Vector& theta, const Eigen::Ref<const Vector>& x,
                                          int y) const {
  check(x, y);
  const Vector p = probabilities(theta, x);
  const Matrix xx = x * x.transpose();
  Matrix h = Matrix::Zero(n_params(), n_params());
  for (int k = 0; k < labels_; ++k) {
    for (int l = k; l < labels_; ++l) {
      const double c = p(k) * ((k == l ? 1.0 : 0.0) - p(l));
      scatter_block(h, d_, labels_, k, l, c * xx, c * x, c);
    }
  }
  return h;
}

double MultinomialLogistic::objective(const TrainingView& view, const Vector& theta,
                                      double lambda, Vector* gradient) const {
  check(theta);
  const Dataset& ds = view.base();
  if (ds.dims() != d_ || ds.label_count() != labels_) {
    throw ConfigError("dataset shape does not match the model");
  }
  const RowMajorMap weights(theta.data(), labels_, d_);
  Matrix z = ds.features() * weights.transpose();
  z.rowwise() += theta.tail(labels_).transpose();

  double total = 0.0;
  const auto n_rows = z.rows();
  for (Eigen::Index i = 0; i < n_rows; ++i) {
    const double m = z.row(i).maxCoeff();
    const int y = ds.label(static_cast<std::size_t>(i));
    const double shifted_y = z(i, y) - m;
    double sum = 0.0;
    for (int k = 0; k < labels_; ++k) {
      z(i, k) = std::exp(z(i, k) - m);
      sum += z(i, k);
    }
    if (!view.excluded() || *view.excluded() != static_cast<std::size_t>(i)) {
      total += std::log(sum) - shifted_y;
    }
    z.row(i) /= sum;
    z(i, y) -= 1.0;
  }
  if (view.excluded()) z.row(static_cast<Eigen::Index>(*view.excluded())).setZero();

  const Example* added = view.added();
  Vector added_residual;
  if (added) {
    check(added->x, added->y);
    total += loss(theta, added->x, added->y);
    added_residual = probabilities(theta, added->x);
    added_residual(added->y) -= 1.0;
  }

  const double n = static_cast<double>(view.count());
  const double value = total / n + 0.5 * lambda * theta.squaredNorm();
  if (gradient) {
    gradient->resize(n_params());
    Matrix grad_w = z.transpose() * ds.features();  // L x d
    Vector grad_b = z.colwise().sum().transpose();
    if (added) {
      grad_w += added_residual * added->x.transpose();
      grad_b += added_residual;
    }
    for (int k = 0; k < labels_; ++k) gradient->segment(k * d_, d_) = grad_w.row(k).transpose();
    gradient->tail(labels_) = grad_b;
    *gradient /= n;
    *gradient += lambda * theta;
  }
  return value;
}

Matrix MultinomialLogistic::objective_hessian(const TrainingView& view, const Vector& theta,
                                              double lambda) const {
  check(theta);
  const Dataset& ds = view.base();
  if (ds.dims() != d_ || ds.label_count() != labels_) {
    throw ConfigError("dataset shape does not match the model");
  }
  const RowMajorMap weights(theta.data(), labels_, d_);
  Matrix p = ds.features() * weights.transpose();
  p.rowwise() += theta.tail(labels_).transpose();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  if (view.excluded()) p.row(static_cast<Eigen::Index>(*view.excluded())).setZero();

  Matrix h = Matrix::Zero(n_params(), n_params());
  FeatureMatrix scaled(ds.features().rows(), d_);
  for (int k = 0; k < labels_; ++k) {
    for (int l = k; l < labels_; ++l) {
      Vector c = p.col(k).cwiseProduct((k == l ? Vector::Ones(p.rows()) : Vector::Zero(p.rows())) -
                                       p.col(l));
      scaled = c.asDiagonal() * ds.features();
      const Matrix s_ww = scaled.transpose() * ds.features();
      const Vector s_w = scaled.colwise().sum().transpose();
      scatter_block(h, d_, labels_, k, l, s_ww, s_w, c.sum());
    }
  }
  if (const Example* added = view.added()) h += point_hessian(theta, added->x, added->y);
  h /= static_cast<double>(view.count());
  h.diagonal().array() += lambda;
  // Exact symmetry: (a + b) / 2 == (b + a) / 2 in IEEE arithmetic.
  const Matrix sym = 0.5 * (h + h.transpose());
  return sym;
}

Vector MultinomialLogistic::losses(const Dataset& ds, const Vector& theta) const {
  check(theta);
  const RowMajorMap weights(theta.data(), labels_, d_);
  Matrix z = ds.features() * weights.transpose();
  z.rowwise() += theta.tail(labels_).transpose();
  Vector out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Vector row = z.row(i).transpose();
    out(i) = std::max(0.0, log_sum_exp(row) - row(ds.label(static_cast<std::size_t>(i))));
  }
  return out;
}

Matrix MultinomialLogistic::gradients(const Dataset& ds, const Vector& theta) const {
  Matrix out(static_cast<Eigen::Index>(ds.size()), n_params());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = gradient(theta, ds.row(i).transpose(), ds.label(i)).transpose();
  }
  return out;
}

const LossModel& loss_model(const ModelSpec& spec) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::unique_ptr<MultinomialLogistic>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{spec.n_features, spec.n_labels}];
  if (!slot) slot = std::make_unique<MultinomialLogistic>(spec.n_features, spec.n_labels);
  return *slot;
}

namespace {

// Cholesky of h, adding a growing ridge if h is not numerically PD (only
// reachable with lambda = 0).
Eigen::LLT<Matrix> factor_pd(const Matrix& h) {
  Eigen::LLT<Matrix> llt(h);
  if (llt.info() == Eigen::Success) return llt;
  const double scale = 1.0 + h.diagonal().cwiseAbs().maxCoeff();
  for (double ridge = 1e-12 * scale; ridge < 1e6 * scale; ridge *= 10.0) {
    Matrix shifted = h;
    shifted.diagonal().array() += ridge;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericError("Hessian could not be factored even with a ridge shift");
}

}  // namespace

FittedModel fit(const TrainingView& view, const ModelSpec& spec,
                const std::optional<Vector>& warm_start, const Matrix* initial_hessian) {
  spec.validate();
  const Dataset& ds = view.base();
  if (ds.dims() != spec.n_features) {
    throw ConfigError("dataset has " + std::to_string(ds.dims()) + " features, spec expects " +
                      std::to_string(spec.n_features));
  }
  if (ds.label_count() != spec.n_labels) {
    throw ConfigError("dataset has " + std::to_string(ds.label_count()) + " labels, spec expects " +
                      std::to_string(spec.n_labels));
  }
  const LossModel& model = loss_model(spec);
  const double lambda = spec.regularization;

  FittedModel out;
  out.spec = spec;
  out.theta = warm_start ? *warm_start : Vector::Zero(model.n_params());
  if (out.theta.size() != model.n_params()) throw ConfigError("warm start has the wrong length");

  Eigen::LLT<Matrix> factor;
  bool have_factor = false;
  if (initial_hessian) {
    factor = factor_pd(*initial_hessian);
    have_factor = true;
  }
  bool refresh = !have_factor;
  bool factor_is_fresh = have_factor;

  Vector grad;
  double value = model.objective(view, out.theta, lambda, &grad);
  out.objective_trace.push_back(value);

  for (;;) {
    out.final_gradient_norm = grad.norm();
    if (!std::isfinite(value) || !std::isfinite(out.final_gradient_norm)) {
      throw NumericError("objective became non-finite during fit");
    }
    if (out.final_gradient_norm <= spec.convergence_tolerance) {
      out.converged = true;
      break;
    }
    if (out.iterations_used >= spec.max_iterations) break;

    if (refresh) {
      factor = factor_pd(model.objective_hessian(view, out.theta, lambda));
      ++out.hessian_evaluations;
      have_factor = true;
      factor_is_fresh = true;
      refresh = false;
    }
    const Vector step = -factor.solve(grad);
    const double slope = grad.dot(step);

    double t = 1.0;
    Vector trial_theta;
    Vector trial_grad;
    double trial_value = 0.0;
    bool accepted = false;
    while (t > 1e-12) {
      trial_theta = out.theta + t * step;
      trial_value = model.objective(view, trial_theta, lambda, &trial_grad);
      if (trial_value <= value + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      // Predicted decrease below rounding of the objective: judge by the
      // gradient instead.
      if (std::abs(t * slope) <= 1e-13 * (1.0 + std::abs(value)) &&
          trial_grad.norm() < out.final_gradient_norm) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (!factor_is_fresh) {
        refresh = true;
        continue;
      }
      break;
    }

    const double contraction = trial_grad.norm() / out.final_gradient_norm;
    out.theta = std::move(trial_theta);
    grad = std::move(trial_grad);
    value = trial_value;
    out.objective_trace.push_back(value);
    ++out.iterations_used;
    factor_is_fresh = false;
    refresh = t < 1.0 || contraction > 0.25;
  }
  return out;
}

FittedModel fit(const Dataset& ds, const ModelSpec& spec, const std::optional<Vector>& warm_start) {
  return fit(TrainingView(ds), spec, warm_start);
}

double point_loss(const FittedModel& model, const Eigen::Ref<const Vector>& x, int y) {
  return loss_model(model.spec).loss(model.theta, x, y);
}

double point_loss(const FittedModel& model, const Example& z) { return point_loss(model, z.x, z.y); }

Vector point_gradient(const FittedModel& model, const Eigen::Ref<const Vector>& x, int y) {
  return loss_model(model.spec).gradient(model.theta, x, y);
}

Vector point_gradient(const FittedModel& model, const Example& z) {
  return point_gradient(model, z.x, z.y);
}

Matrix risk_hessian(const FittedModel& model, const Dataset& ds) {
  return loss_model(model.spec).objective_hessian(TrainingView(ds), model.theta,
                                                  model.spec.regularization);
}

double risk(const FittedModel& model, const Dataset& ds) {
  return loss_model(model.spec).objective(TrainingView(ds), model.theta, model.spec.regularization,
                                          nullptr);
}

Matrix updated_hessian(const Matrix& base_hessian, std::size_t base_count, double lambda,
                       const Matrix* removed_point_hessian, const Matrix* added_point_hessian) {
  const std::size_t count =
      base_count - (removed_point_hessian ? 1 : 0) + (added_point_hessian ? 1 : 0);
  if (count == 0) throw ConfigError("updated Hessian would describe an empty set");
  Matrix sum = base_hessian;
  sum.diagonal().array() -= lambda;
  sum *= static_cast<double>(base_count);
  if (removed_point_hessian) sum -= *removed_point_hessian;
  if (added_point_hessian) sum += *added_point_hessian;
  sum /= static_cast<double>(count);
  sum.diagonal().array() += lambda;
  return sum;
}

}  // namespace approxcp
