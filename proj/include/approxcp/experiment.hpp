#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "approxcp/conformal.hpp"
#include "approxcp/data.hpp"
#include "approxcp/erm.hpp"
#include "approxcp/metrics.hpp"

namespace approxcp {

inline constexpr int kReportSchemaVersion = 1;

struct ExperimentConfig {
  // Data: a CSV file when csv_path is set, otherwise the synthetic family.
  std::string csv_path;
  bool csv_has_header = true;
  int csv_label_column = -1;  // -1 = last column
  SyntheticConfig synthetic;  // n_points and seed are set per run
  int n_train = 200;
  int n_test = 100;

  double regularization = 0.01;
  int max_iterations = 100;
  double convergence_tolerance = 1e-10;
  double damping = 0.01;

  std::string method = "acp-deleted-direct";  // predict
  std::vector<Method> methods = {Method::acp_deleted_direct, Method::acp_ordinary_direct, Method::scp,
                                 Method::cv_plus};
  double epsilon = 0.1;
  std::vector<double> epsilons = {0.1, 0.2};
  double grid_step = 0.01;
  double auc_low = 0.0;
  double auc_high = 0.2;
  double calib_fraction = 0.2;
  int folds = 5;

  std::vector<int> n_sweep;
  std::vector<int> feature_sweep;
  std::vector<double> lambda_sweep;

  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_dir = "out";
  // Largest number of exact refits a command may run without override.
  std::uint64_t full_cp_refit_cap = 250000;
  bool override_cost_cap = false;

  // predict inputs: workspace (default <out_dir>/workspace.bin) and test
  // points from a CSV file or inline rows.
  std::string workspace_path;
  std::string test_csv;
  bool test_has_header = true;
  std::optional<int> test_label_column;
  std::vector<std::vector<double>> test_points;

  void validate() const;
  ModelSpec model_spec(int n_features, int n_labels) const;
  std::filesystem::path workspace_file() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Unknown keys are rejected so that typos do not silently fall back to defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Hex FNV-1a of the canonical config JSON.
std::string config_hash(const ExperimentConfig& cfg);
// Seeds, stream tree, generator id, thread count and config hash.
nlohmann::json provenance(const ExperimentConfig& cfg);

// Named sub-seed of the root seed.
std::uint64_t stream_seed(const ExperimentConfig& cfg, std::string_view purpose);

// Training set of fit: the whole CSV file, or n_train synthetic points.
Dataset training_data(const ExperimentConfig& cfg);
// Disjoint train/test sets with n_train and n_test rows and d features
// (d is ignored for CSV data).
std::pair<Dataset, Dataset> train_test_data(const ExperimentConfig& cfg, int n_train, int n_features);

// Everything the approximation study measures on one (train, test) instance.
struct ApproxEvaluation {
  int n_train = 0;
  int n_features = 0;
  double regularization = 0.0;
  double damping = 0.0;
  // One entry per (test point, label): mean |approx - exact| over N+1 scores.
  std::vector<double> deleted_direct_distance;
  std::vector<double> deleted_indirect_distance;
  std::vector<double> ordinary_direct_distance;
  std::vector<double> ordinary_indirect_distance;
  // Fraction of exact deleted scores inside the regularization cone (empty
  // when the effective lambda is zero).
  std::vector<double> cone_coverage;
  double cone_g = 0.0;
  double sigma_max = 0.0;
  // One table per test point and method.
  std::vector<PValueTable> full_deleted, full_ordinary;
  std::vector<PValueTable> acp_deleted_direct, acp_deleted_indirect, acp_ordinary_direct, acp_ordinary_indirect;
  RefitDiagnostics refits;
  // Wall-clock seconds: exact deleted full CP including the base fit, and
  // ACP deleted-direct including fit and workspace build.
  double full_deleted_seconds = 0.0;
  double acp_seconds = 0.0;
};

std::uint64_t full_cp_refits(std::size_t n_train, int n_labels, std::size_t n_test, bool deleted_and_ordinary);

ApproxEvaluation evaluate_approximation(const Dataset& train, const Dataset& test, const ModelSpec& spec,
                                        double damping, int threads);

// Summary record of an evaluation for the bench report.
nlohmann::json summarize(const ApproxEvaluation& e, const std::vector<double>& epsilons);

struct FitOutcome {
  FittedModel model;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> workspace;
};

FitOutcome cmd_fit(const ExperimentConfig& cfg, std::ostream& out, std::ostream& log);
// Writes one JSON record per test point to `out`.
void cmd_predict(const ExperimentConfig& cfg, std::ostream& out, std::ostream& log);
// Both return the report that was also written under out_dir.
nlohmann::json cmd_bench_approx(const ExperimentConfig& cfg, std::ostream& log);
nlohmann::json cmd_bench_methods(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace approxcp
