#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "approxcp/errors.hpp"
#include "approxcp/experiment.hpp"

using namespace approxcp;

namespace {

std::vector<double> parse_point(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(cell, &used);
    } catch (const std::exception&) {
      throw ConfigError("--point: '" + cell + "' is not a number");
    }
    if (used != cell.size()) throw ConfigError("--point: '" + cell + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--point needs comma-separated features");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact and approximate full conformal prediction for classification"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out_dir;
  std::optional<std::string> method;
  std::optional<double> epsilon;
  bool override_cap = false;
  std::optional<std::string> workspace;
  std::optional<std::string> test_csv;
  std::optional<int> test_label_column;
  std::vector<std::string> points;

  app.add_option("--config", config_path, "JSON config file (flags override its values)");
  app.add_option("--seed", seed, "Root seed");
  app.add_option("--threads", threads, "Worker threads");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--method", method, "Conformal method for predict");
  app.add_option("--epsilon", epsilon, "Significance level for prediction sets");
  app.add_flag("--override-cost-cap", override_cap, "Allow exact full CP above the refit budget");
  app.add_option("--workspace", workspace, "Workspace blob for predict (default <out>/workspace.bin)");
  app.add_option("--test-csv", test_csv, "CSV of test points for predict");
  app.add_option("--test-label-column", test_label_column, "Label column of --test-csv, if any");
  app.add_option("--point", points, "Inline test point as comma-separated features (repeatable)");

  auto* fit_cmd = app.add_subcommand("fit", "Fit the model and persist checkpoint + influence workspace");
  auto* predict_cmd = app.add_subcommand("predict", "Print p-values and prediction sets as JSON lines");
  auto* approx_cmd = app.add_subcommand("bench-approx", "Approximation study against exact full CP");
  auto* methods_cmd = app.add_subcommand("bench-methods", "Compare ACP, SCP and CV+");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code::kConfig;
  }

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (out_dir) cfg.out_dir = *out_dir;
    if (method) cfg.method = *method;
    if (epsilon) cfg.epsilon = *epsilon;
    if (override_cap) cfg.override_cost_cap = true;
    if (workspace) cfg.workspace_path = *workspace;
    if (test_csv) cfg.test_csv = *test_csv;
    if (test_label_column) cfg.test_label_column = *test_label_column;
    for (const auto& p : points) cfg.test_points.push_back(parse_point(p));

    if (fit_cmd->parsed()) {
      const FitOutcome outcome = cmd_fit(cfg, std::cout, std::cerr);
      return outcome.model.converged ? exit_code::kSuccess : exit_code::kNotConverged;
    }
    if (predict_cmd->parsed()) {
      cmd_predict(cfg, std::cout, std::cerr);
    } else if (approx_cmd->parsed()) {
      cmd_bench_approx(cfg, std::cerr);
    } else if (methods_cmd->parsed()) {
      cmd_bench_methods(cfg, std::cerr);
    }
    return exit_code::kSuccess;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return exit_code::kConfig;
  } catch (const IngestionError& e) {
    std::cerr << "ingestion error: " << e.what() << "\n";
    return exit_code::kIngestion;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return exit_code::kNumeric;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return exit_code::kFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::kOther;
  }
}
