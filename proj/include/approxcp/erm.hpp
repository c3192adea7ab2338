#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

#include "approxcp/data.hpp"

namespace approxcp {

// Parameter layout shared by gradients, Hessians and influence vectors:
// theta = [w_0 (d), w_1 (d), ..., w_{L-1} (d), b_0, ..., b_{L-1}].
inline constexpr std::string_view kFlatteningOrder = "label-major-weights-then-biases/v1";

struct ModelSpec {
  int n_features = 1;
  int n_labels = 2;
  // lambda: the risk is (1/N) sum_i loss_i + (lambda / 2) ||theta||^2.
  double regularization = 0.0;
  int max_iterations = 100;
  // Gradient-norm threshold of the full objective.
  double convergence_tolerance = 1e-10;
  std::uint64_t seed = 0;

  int n_params() const { return n_features * n_labels + n_labels; }
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

struct FittedModel {
  ModelSpec spec;
  Vector theta;
  bool converged = false;
  double final_gradient_norm = std::numeric_limits<double>::infinity();
  int iterations_used = 0;
  int hessian_evaluations = 0;
  // Objective value at each accepted iterate, starting point included.
  std::vector<double> objective_trace;
};

// Training multiset seen by the optimizer: the rows of `base`, optionally
// without one row and optionally with one extra example. Full CP refits use
// this to avoid copying the data for every augmented/deleted set.
class TrainingView {
 public:
  explicit TrainingView(const Dataset& base, std::optional<std::size_t> excluded = std::nullopt,
                        const Example* added = nullptr);

  const Dataset& base() const { return *base_; }
  std::optional<std::size_t> excluded() const { return excluded_; }
  const Example* added() const { return added_; }
  std::size_t count() const;

 private:
  const Dataset* base_;
  std::optional<std::size_t> excluded_;
  const Example* added_;
};

// Loss/gradient/Hessian triple of an underlying model. fit() and the
// influence machinery only talk to this interface.
class LossModel {
 public:
  virtual ~LossModel() = default;

  virtual int n_params() const = 0;
  virtual int n_features() const = 0;
  virtual int n_labels() const = 0;

  virtual double loss(const Vector& theta, const Eigen::Ref<const Vector>& x, int y) const = 0;
  virtual Vector gradient(const Vector& theta, const Eigen::Ref<const Vector>& x, int y) const = 0;
  virtual Matrix point_hessian(const Vector& theta, const Eigen::Ref<const Vector>& x, int y) const = 0;

  // Objective (mean loss plus ridge) over the view; fills `gradient` if given.
  virtual double objective(const TrainingView& view, const Vector& theta, double lambda,
                           Vector* gradient) const = 0;
  // Hessian of objective(); exactly symmetric.
  virtual Matrix objective_hessian(const TrainingView& view, const Vector& theta,
                                   double lambda) const = 0;

  // Per-row losses and gradients (rows of the result) over a dataset.
  virtual Vector losses(const Dataset& ds, const Vector& theta) const = 0;
  virtual Matrix gradients(const Dataset& ds, const Vector& theta) const = 0;
};

// Softmax cross-entropy on an affine score, L labels, d features.
class MultinomialLogistic final : public LossModel {
 public:
  MultinomialLogistic(int n_features, int n_labels);

  int n_params() const override { return d_ * labels_ + labels_; }
  int n_features() const override { return d_; }
  int n_labels() const override { return labels_; }

  double loss(const Vector& theta, const Eigen::Ref<const Vector>& x, int y) const override;
  Vector gradient(const Vector& theta, const Eigen::Ref<const Vector>& x, int y) const override;
  Matrix point_hessian(const Vector& theta, const Eigen::Ref<const Vector>& x, int y) const override;
  double objective(const TrainingView& view, const Vector& theta, double lambda,
                   Vector* gradient) const override;
  Matrix objective_hessian(const TrainingView& view, const Vector& theta,
                           double lambda) const override;
  Vector losses(const Dataset& ds, const Vector& theta) const override;
  Matrix gradients(const Dataset& ds, const Vector& theta) const override;

  Vector logits(const Vector& theta, const Eigen::Ref<const Vector>& x) const;
  Vector probabilities(const Vector& theta, const Eigen::Ref<const Vector>& x) const;

 private:
  void check(const Vector& theta) const;
  void check(const Eigen::Ref<const Vector>& x, int y) const;

  int d_;
  int labels_;
};

// The underlying model for a spec (currently always multinomial logistic).
const LossModel& loss_model(const ModelSpec& spec);

// Damped Newton with Armijo backtracking from `warm_start` (zeros if absent).
// `initial_hessian`, when given, must be the objective Hessian at the warm
// start; it is factored once and reused while steps contract the gradient by
// at least 4x, otherwise the Hessian is recomputed. Non-convergence is
// reported through FittedModel::converged.
FittedModel fit(const TrainingView& view, const ModelSpec& spec,
                const std::optional<Vector>& warm_start = std::nullopt,
                const Matrix* initial_hessian = nullptr);
FittedModel fit(const Dataset& ds, const ModelSpec& spec,
                const std::optional<Vector>& warm_start = std::nullopt);

// Cross-entropy at z without the ridge term; always >= 0.
double point_loss(const FittedModel& model, const Eigen::Ref<const Vector>& x, int y);
double point_loss(const FittedModel& model, const Example& z);
Vector point_gradient(const FittedModel& model, const Eigen::Ref<const Vector>& x, int y);
Vector point_gradient(const FittedModel& model, const Example& z);

// Hessian of (1/N) sum loss + (lambda/2)||theta||^2 at the fitted theta.
Matrix risk_hessian(const FittedModel& model, const Dataset& ds);
double risk(const FittedModel& model, const Dataset& ds);

// Objective Hessian for a view that differs from a base set of `base_count`
// points (Hessian `base_hessian`, same theta) by removing and/or adding one
// point: an O(W^2) update instead of an O(N W^2) rebuild.
Matrix updated_hessian(const Matrix& base_hessian, std::size_t base_count, double lambda,
                       const Matrix* removed_point_hessian, const Matrix* added_point_hessian);

}  // namespace approxcp
