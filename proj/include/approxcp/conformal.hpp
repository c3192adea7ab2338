#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "approxcp/data.hpp"
#include "approxcp/erm.hpp"
#include "approxcp/influence.hpp"

namespace approxcp {

enum class Method {
  full_deleted,
  full_ordinary,
  acp_deleted_direct,
  acp_deleted_indirect,
  acp_ordinary_direct,
  acp_ordinary_indirect,
  scp,
  cv_plus,
};

std::string_view to_string(Method method);
// Accepts the names produced by to_string ("acp-deleted-direct", "cv+", ...)
// plus the short aliases "acp-d" and "acp-o" for the direct rules.
Method method_from_string(std::string_view name);
const std::vector<Method>& all_methods();

// Refit bookkeeping for exact full CP (zero for the other methods).
struct RefitDiagnostics {
  std::size_t refits = 0;
  std::size_t not_converged = 0;
  double max_gradient_norm = 0.0;

  void merge(const RefitDiagnostics& other);
};

struct PValueTable {
  Vector x;
  std::optional<int> true_label;  // never used for prediction
  std::vector<double> pvalues;    // indexed by label
  Method method = Method::full_deleted;
  std::size_t n_effective = 0;    // p-value denominator
  bool reliable = true;           // false if any refit failed to converge
  RefitDiagnostics diagnostics;

  int label_count() const { return static_cast<int>(pvalues.size()); }
};

struct PredictionSet {
  std::vector<int> labels;  // ascending
  double epsilon = 0.0;

  bool contains(int label) const;
  std::size_t size() const { return labels.size(); }
};

// |{i : scores_i >= scores_last}| / size; the last entry is the candidate.
double pvalue(std::span<const double> scores);
double pvalue(const ScoreVector& scores);

// Labels whose p-value is strictly greater than epsilon.
PredictionSet prediction_set(const PValueTable& table, double epsilon);

// Exact full CP by retraining. Fits theta_Z once; every refit starts from it
// with the exact Hessian of the modified set and converges to the spec's
// tolerance.
class FullConformal {
 public:
  FullConformal(const Dataset& train, const ModelSpec& spec, int threads = 1);

  const FittedModel& base() const { return base_; }
  const Dataset& train() const { return train_; }
  const Matrix& base_hessian() const { return hessian_; }

  ScoreVector scores(const Example& candidate, Scheme scheme, RefitDiagnostics* diagnostics = nullptr) const;
  PValueTable predict(const Vector& x, Scheme scheme, std::optional<int> true_label = std::nullopt) const;

 private:
  Dataset train_;
  ModelSpec spec_;
  int threads_;
  FittedModel base_;
  Matrix hessian_;
};

PValueTable full_cp(const Dataset& train, const ModelSpec& spec, const Vector& test_x, Scheme scheme);

// Approximate full CP (no refitting). method must be direct or indirect.
PValueTable acp(const InfluenceWorkspace& ws, const Vector& test_x, Scheme scheme, ScoreMethod method,
                std::optional<int> true_label = std::nullopt);
Method acp_method(Scheme scheme, ScoreMethod method);

// Split CP: fit on the proper part, calibrate with losses on the
// ceil(calib_fraction * N) calibration rows.
class SplitConformal {
 public:
  SplitConformal(const Dataset& train, double calib_fraction, const ModelSpec& spec, std::uint64_t seed);

  const FittedModel& model() const { return model_; }
  const std::vector<double>& calibration_scores() const { return calibration_; }  // ascending
  // (1 + |{calibration scores >= s}|) / (n_calib + 1) for candidate score s.
  double pvalue_for_score(double score) const;
  PValueTable predict(const Vector& x, std::optional<int> true_label = std::nullopt) const;

 private:
  FittedModel model_;
  std::vector<double> calibration_;
  int label_count_;
};

PValueTable scp(const Dataset& train, double calib_fraction, const ModelSpec& spec, const Vector& test_x,
                std::uint64_t seed = 0);

// CV+: K fold-out models, out-of-fold loss scores, and candidate scores from
// the same fold-out model as each comparison point.
class CrossConformal {
 public:
  CrossConformal(const Dataset& train, int folds, const ModelSpec& spec, std::uint64_t seed);

  const std::vector<FittedModel>& fold_models() const { return models_; }
  const std::vector<int>& fold_of() const { return fold_of_; }
  const Vector& out_of_fold_scores() const { return scores_; }
  PValueTable predict(const Vector& x, std::optional<int> true_label = std::nullopt) const;

 private:
  std::vector<FittedModel> models_;
  std::vector<int> fold_of_;
  Vector scores_;
  int label_count_;
};

PValueTable cv_plus(const Dataset& train, int folds, const ModelSpec& spec, const Vector& test_x,
                    std::uint64_t seed = 0);

}  // namespace approxcp
