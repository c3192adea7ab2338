#pragma once

#include <Eigen/Core>
#include <vector>

#include "approxcp/data.hpp"
#include "approxcp/erm.hpp"

namespace approxcp {

// Deleted: score z_i with a model trained without z_i. Ordinary: with it.
enum class Scheme { deleted, ordinary };
// exact = retraining oracle; direct = perturb the loss; indirect = perturb
// the parameters, then evaluate the loss.
enum class ScoreMethod { exact, direct, indirect };

const char* to_string(Scheme scheme);
const char* to_string(ScoreMethod method);

// Nonconformity scores of the augmented set; the last entry belongs to the
// candidate (x, y_hat).
struct ScoreVector {
  Vector scores;
  Scheme scheme = Scheme::deleted;
  ScoreMethod method = ScoreMethod::exact;
  Example candidate;

  Eigen::Index n_train() const { return scores.size() - 1; }
  double candidate_score() const { return scores(scores.size() - 1); }
};

// Train-phase product of approximate full CP: the damped inverse Hessian,
// cached per-point gradients and losses at theta_Z, plus the training points
// (needed to evaluate losses at perturbed parameters).
class InfluenceWorkspace {
 public:
  // Computes H at the fitted model, inverts H + damping I by Cholesky.
  static InfluenceWorkspace build(const FittedModel& model, const Dataset& train, double damping);

  // Same, from a caller-supplied risk Hessian.
  static InfluenceWorkspace from_hessian(const FittedModel& model, const Dataset& train,
                                         const Matrix& hessian, double damping);

  // Every cached quantity supplied directly (deserialization, injected tests).
  // sigma_max is the largest eigenvalue of the unregularized risk Hessian.
  static InfluenceWorkspace assemble(FittedModel model, Dataset train, Matrix hessian_inverse,
                                     double damping, Matrix gradients, Vector provisional_losses,
                                     double sigma_max);

  const FittedModel& model() const { return model_; }
  const Dataset& train() const { return train_; }
  const Matrix& hessian_inverse() const { return hessian_inverse_; }
  double damping() const { return damping_; }
  const Matrix& gradients() const { return gradients_; }
  const Vector& provisional_losses() const { return provisional_losses_; }
  std::size_t n_train() const { return train_.size(); }
  double sigma_max() const { return sigma_max_; }
  // Regularization of the damped system: model lambda + damping.
  double effective_lambda() const { return model_.spec.regularization + damping_; }

  // Row i: I_theta(z_i) = -(1/N) H^-1 grad loss(z_i).
  const Matrix& param_influences() const { return param_influences_; }
  // I_loss(z_i, z_i) for every training point (always <= 0).
  const Vector& self_influences() const { return self_influences_; }
  // Row i: logits of x_i under the parameter vector I_theta(z_i). Logits are
  // linear in theta, so indirect scores can subtract this from the logits at
  // theta_Z + I_theta(z_hat) instead of a per-point matrix-vector product.
  const Matrix& self_shift_logits() const { return self_shift_logits_; }

 private:
  InfluenceWorkspace(FittedModel model, Dataset train, Matrix hessian_inverse, double damping,
                     Matrix gradients, Vector provisional_losses, double sigma_max);

  FittedModel model_;
  Dataset train_;
  Matrix hessian_inverse_;
  double damping_;
  Matrix gradients_;
  Vector provisional_losses_;
  double sigma_max_;

  Matrix param_influences_;
  Vector self_influences_;
  Matrix self_shift_logits_;
};

// Per-candidate quantities shared by every approximate score rule.
struct CandidateInfluence {
  Example candidate;
  Vector gradient;          // grad loss(z_hat, theta_Z)
  Vector param_influence;   // I_theta(z_hat)
  Vector loss_influence;    // I_loss(z_i, z_hat), i < N
  double loss = 0.0;        // loss(z_hat, theta_Z)
  double self_influence = 0.0;  // I_loss(z_hat, z_hat)

  static CandidateInfluence compute(const InfluenceWorkspace& ws, const Example& candidate);
};

// I_theta(z) = -(1/N) (H + damping I)^-1 grad loss(z, theta_Z).
Vector influence_params(const InfluenceWorkspace& ws, const Example& z);
// I_loss(z_eval, z_pert) = grad loss(z_eval)^T I_theta(z_pert).
double influence_loss(const InfluenceWorkspace& ws, const Example& z_eval, const Example& z_pert);
// Same with z_eval the i-th training point, using the cached gradient row.
double influence_loss(const InfluenceWorkspace& ws, std::size_t train_index, const Example& z_pert);

ScoreVector scores(const InfluenceWorkspace& ws, const CandidateInfluence& prepared, Scheme scheme,
                   ScoreMethod method);
ScoreVector scores_deleted_direct(const InfluenceWorkspace& ws, const Example& candidate);
ScoreVector scores_deleted_indirect(const InfluenceWorkspace& ws, const Example& candidate);
ScoreVector scores_ordinary_direct(const InfluenceWorkspace& ws, const Example& candidate);
ScoreVector scores_ordinary_indirect(const InfluenceWorkspace& ws, const Example& candidate);

// g(lambda) = 1 + 3 sigma / (2 lambda) + sigma^2 / (2 lambda^2).
double cone_factor(double sigma_max, double lambda);

// Regularization cone around the deleted score of training point i. With
// I_loss(z_i, z_i) <= 0 the direct value is the lower end and the
// g-scaled value the upper end.
struct ConeBound {
  double direct = 0.0;  // loss + I(z_i, z_hat) - I(z_i, z_i)
  double scaled = 0.0;  // loss + I(z_i, z_hat) - g * I(z_i, z_i)
  double lower = 0.0;
  double upper = 0.0;
  double g = 1.0;
  double sigma_max = 0.0;
  double lambda = 0.0;

  bool contains(double value) const { return value >= lower && value <= upper; }
};

ConeBound cone_bounds(const InfluenceWorkspace& ws, std::size_t train_index, const Example& candidate);
std::vector<ConeBound> cone_bounds(const InfluenceWorkspace& ws, const CandidateInfluence& prepared);

// Largest eigenvalue of a symmetric PSD matrix by power iteration; stops when
// the Rayleigh quotient changes by at most tolerance (relative).
double largest_eigenvalue(const Matrix& symmetric, double tolerance = 1e-8, int max_iterations = 10000);

}  // namespace approxcp
