#include "approxcp/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

#include "approxcp/errors.hpp"
#include "approxcp/influence.hpp"
#include "approxcp/io.hpp"
#include "approxcp/parallel.hpp"
#include "approxcp/rng.hpp"

namespace approxcp {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_token(Method m) {
  std::string name(to_string(m));
  if (const auto pos = name.find('+'); pos != std::string::npos) name.replace(pos, 1, "-plus");
  return name;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IngestionError("cannot create output directory " + dir.string() + ": " + ec.message());
}

template <class T>
T get_as(const json& j, const char* key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

PValueTable table_from(const Vector& x, std::optional<int> truth, Method method,
                       const std::vector<double>& pvalues, std::size_t n_effective) {
  PValueTable t;
  t.x = x;
  t.true_label = truth;
  t.method = method;
  t.pvalues = pvalues;
  t.n_effective = n_effective;
  return t;
}

double mean_of(const std::vector<double>& v) { return mean_sd(v).mean; }

std::vector<double> pvalue_gaps(const std::vector<PValueTable>& exact, const std::vector<PValueTable>& approx) {
  std::vector<double> out;
  out.reserve(exact.size());
  for (std::size_t t = 0; t < exact.size(); ++t) out.push_back(approximation_distance(exact[t], approx[t]).mean);
  return out;
}

std::vector<double> per_point_auc(const std::vector<PValueTable>& tables, const ExperimentConfig& cfg) {
  std::vector<double> out;
  out.reserve(tables.size());
  for (const auto& t : tables) {
    const auto curve = efficiency_curve(std::span<const PValueTable>(&t, 1), cfg.grid_step);
    out.push_back(efficiency_auc(curve, cfg.auc_low, cfg.auc_high));
  }
  return out;
}

void check_cost(const ExperimentConfig& cfg, std::uint64_t refits, const std::string& what) {
  if (refits > cfg.full_cp_refit_cap && !cfg.override_cost_cap) {
    throw ConfigError(what + " needs " + std::to_string(refits) + " exact refits, above the cost cap of " +
                      std::to_string(cfg.full_cp_refit_cap) + "; rerun with --override-cost-cap to proceed");
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (csv_path.empty()) synthetic.validate();
  if (n_train < 1 || n_test < 1) throw ConfigError("n_train and n_test must be positive");
  if (!(regularization >= 0.0)) throw ConfigError("regularization must be >= 0");
  if (!(damping >= 0.0)) throw ConfigError("damping must be >= 0");
  if (!(convergence_tolerance > 0.0)) throw ConfigError("convergence_tolerance must be > 0");
  if (max_iterations < 1) throw ConfigError("max_iterations must be positive");
  if (methods.empty()) throw ConfigError("at least one method is required");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  for (const double e : epsilons) {
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("epsilons must lie in [0, 1]");
  }
  if (!(grid_step > 0.0 && grid_step <= 1.0)) throw ConfigError("grid_step must lie in (0, 1]");
  if (!(auc_low >= 0.0 && auc_low < auc_high && auc_high <= 1.0)) throw ConfigError("AUC interval must satisfy 0 <= low < high <= 1");
  if (!(calib_fraction > 0.0 && calib_fraction < 1.0)) throw ConfigError("calib_fraction must lie in (0, 1)");
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  for (const int n : n_sweep) {
    if (n < 1) throw ConfigError("n_sweep entries must be positive");
  }
  for (const int d : feature_sweep) {
    if (d < 1) throw ConfigError("feature_sweep entries must be positive");
  }
  for (const double l : lambda_sweep) {
    if (!(l >= 0.0)) throw ConfigError("lambda_sweep entries must be >= 0");
  }
  method_from_string(method);
}

ModelSpec ExperimentConfig::model_spec(int n_features, int n_labels) const {
  ModelSpec spec;
  spec.n_features = n_features;
  spec.n_labels = n_labels;
  spec.regularization = regularization;
  spec.max_iterations = max_iterations;
  spec.convergence_tolerance = convergence_tolerance;
  spec.seed = seed;
  spec.validate();
  return spec;
}

std::filesystem::path ExperimentConfig::workspace_file() const {
  return workspace_path.empty() ? std::filesystem::path(out_dir) / "workspace.bin"
                                : std::filesystem::path(workspace_path);
}

json to_json(const ExperimentConfig& cfg) {
  json methods = json::array();
  for (const Method m : cfg.methods) methods.push_back(std::string(to_string(m)));
  json test_label = cfg.test_label_column ? json(*cfg.test_label_column) : json(nullptr);
  return {{"csv_path", cfg.csv_path},
          {"csv_has_header", cfg.csv_has_header},
          {"csv_label_column", cfg.csv_label_column},
          {"synthetic",
           {{"n_features", cfg.synthetic.n_features},
            {"class_separation", cfg.synthetic.class_separation},
            {"clusters_per_class", cfg.synthetic.clusters_per_class},
            {"n_classes", cfg.synthetic.n_classes}}},
          {"n_train", cfg.n_train},
          {"n_test", cfg.n_test},
          {"regularization", cfg.regularization},
          {"max_iterations", cfg.max_iterations},
          {"convergence_tolerance", cfg.convergence_tolerance},
          {"damping", cfg.damping},
          {"method", cfg.method},
          {"methods", methods},
          {"epsilon", cfg.epsilon},
          {"epsilons", cfg.epsilons},
          {"grid_step", cfg.grid_step},
          {"auc_low", cfg.auc_low},
          {"auc_high", cfg.auc_high},
          {"calib_fraction", cfg.calib_fraction},
          {"folds", cfg.folds},
          {"n_sweep", cfg.n_sweep},
          {"feature_sweep", cfg.feature_sweep},
          {"lambda_sweep", cfg.lambda_sweep},
          {"seed", cfg.seed},
          {"threads", cfg.threads},
          {"out_dir", cfg.out_dir},
          {"full_cp_refit_cap", cfg.full_cp_refit_cap},
          {"override_cost_cap", cfg.override_cost_cap},
          {"workspace_path", cfg.workspace_path},
          {"test_csv", cfg.test_csv},
          {"test_has_header", cfg.test_has_header},
          {"test_label_column", test_label},
          {"test_points", cfg.test_points}};
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  for (const auto& [key, value] : j.items()) {
    const char* k = key.c_str();
    if (key == "csv_path") cfg.csv_path = get_as<std::string>(value, k);
    else if (key == "csv_has_header") cfg.csv_has_header = get_as<bool>(value, k);
    else if (key == "csv_label_column") cfg.csv_label_column = get_as<int>(value, k);
    else if (key == "synthetic") {
      if (!value.is_object()) throw ConfigError("config key 'synthetic' must be an object");
      for (const auto& [skey, sval] : value.items()) {
        const char* sk = skey.c_str();
        if (skey == "n_features") cfg.synthetic.n_features = get_as<int>(sval, sk);
        else if (skey == "class_separation") cfg.synthetic.class_separation = get_as<double>(sval, sk);
        else if (skey == "clusters_per_class") cfg.synthetic.clusters_per_class = get_as<int>(sval, sk);
        else if (skey == "n_classes") cfg.synthetic.n_classes = get_as<int>(sval, sk);
        else throw ConfigError("unknown synthetic config key '" + skey + "'");
      }
    } else if (key == "n_train") cfg.n_train = get_as<int>(value, k);
    else if (key == "n_test") cfg.n_test = get_as<int>(value, k);
    else if (key == "regularization") cfg.regularization = get_as<double>(value, k);
    else if (key == "max_iterations") cfg.max_iterations = get_as<int>(value, k);
    else if (key == "convergence_tolerance") cfg.convergence_tolerance = get_as<double>(value, k);
    else if (key == "damping") cfg.damping = get_as<double>(value, k);
    else if (key == "method") cfg.method = get_as<std::string>(value, k);
    else if (key == "methods") {
      cfg.methods.clear();
      for (const auto& name : get_as<std::vector<std::string>>(value, k)) cfg.methods.push_back(method_from_string(name));
    } else if (key == "epsilon") cfg.epsilon = get_as<double>(value, k);
    else if (key == "epsilons") cfg.epsilons = get_as<std::vector<double>>(value, k);
    else if (key == "grid_step") cfg.grid_step = get_as<double>(value, k);
    else if (key == "auc_low") cfg.auc_low = get_as<double>(value, k);
    else if (key == "auc_high") cfg.auc_high = get_as<double>(value, k);
    else if (key == "calib_fraction") cfg.calib_fraction = get_as<double>(value, k);
    else if (key == "folds") cfg.folds = get_as<int>(value, k);
    else if (key == "n_sweep") cfg.n_sweep = get_as<std::vector<int>>(value, k);
    else if (key == "feature_sweep") cfg.feature_sweep = get_as<std::vector<int>>(value, k);
    else if (key == "lambda_sweep") cfg.lambda_sweep = get_as<std::vector<double>>(value, k);
    else if (key == "seed") cfg.seed = get_as<std::uint64_t>(value, k);
    else if (key == "threads") cfg.threads = get_as<int>(value, k);
    else if (key == "out_dir") cfg.out_dir = get_as<std::string>(value, k);
    else if (key == "full_cp_refit_cap") cfg.full_cp_refit_cap = get_as<std::uint64_t>(value, k);
    else if (key == "override_cost_cap") cfg.override_cost_cap = get_as<bool>(value, k);
    else if (key == "workspace_path") cfg.workspace_path = get_as<std::string>(value, k);
    else if (key == "test_csv") cfg.test_csv = get_as<std::string>(value, k);
    else if (key == "test_has_header") cfg.test_has_header = get_as<bool>(value, k);
    else if (key == "test_label_column") {
      if (value.is_null()) cfg.test_label_column.reset();
      else cfg.test_label_column = get_as<int>(value, k);
    } else if (key == "test_points") cfg.test_points = get_as<std::vector<std::vector<double>>>(value, k);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) { return hex64(fnv1a64(to_json(cfg).dump())); }

std::uint64_t stream_seed(const ExperimentConfig& cfg, std::string_view purpose) {
  return derive_seed(cfg.seed, purpose);
}

json provenance(const ExperimentConfig& cfg) {
  json streams = json::object();
  for (const char* purpose : {"data", "split", "scp", "cv+"}) streams[purpose] = stream_seed(cfg, purpose);
  return {{"config_hash", config_hash(cfg)},
          {"config", to_json(cfg)},
          {"root_seed", cfg.seed},
          {"streams", streams},
          {"prng", std::string(kPrngAlgorithm)},
          {"flattening", std::string(kFlatteningOrder)},
          {"threads", cfg.threads}};
}

Dataset training_data(const ExperimentConfig& cfg) {
  if (!cfg.csv_path.empty()) {
    const int column = cfg.csv_label_column;
    if (column >= 0) return load_csv(cfg.csv_path, cfg.csv_has_header, column);
    const PointTable probe = read_points_csv(cfg.csv_path, cfg.csv_has_header, std::nullopt);
    return load_csv(cfg.csv_path, cfg.csv_has_header, static_cast<int>(probe.features.cols()) - 1);
  }
  SyntheticConfig syn = cfg.synthetic;
  syn.n_points = cfg.n_train;
  syn.seed = stream_seed(cfg, "data");
  return synthesize(syn);
}

std::pair<Dataset, Dataset> train_test_data(const ExperimentConfig& cfg, int n_train, int n_features) {
  const auto total = static_cast<std::size_t>(n_train) + static_cast<std::size_t>(cfg.n_test);
  if (!cfg.csv_path.empty()) {
    const Dataset all = training_data(cfg);
    if (all.size() < total) {
      throw ConfigError("CSV has " + std::to_string(all.size()) + " rows; " + std::to_string(total) +
                        " are needed for n_train + n_test");
    }
    const Dataset pool = total == all.size() ? all : split_count(all, total, stream_seed(cfg, "data")).first;
    return split_count(pool, static_cast<std::size_t>(n_train), stream_seed(cfg, "split"));
  }
  SyntheticConfig syn = cfg.synthetic;
  syn.n_points = static_cast<int>(total);
  syn.n_features = n_features;
  syn.seed = stream_seed(cfg, "data");
  return split_count(synthesize(syn), static_cast<std::size_t>(n_train), stream_seed(cfg, "split"));
}

std::uint64_t full_cp_refits(std::size_t n_train, int n_labels, std::size_t n_test, bool deleted_and_ordinary) {
  const auto labels = static_cast<std::uint64_t>(n_labels);
  std::uint64_t per_point = labels * n_train;
  if (deleted_and_ordinary) per_point += labels;
  return per_point * n_test;
}

ApproxEvaluation evaluate_approximation(const Dataset& train, const Dataset& test, const ModelSpec& spec,
                                        double damping, int threads) {
  ApproxEvaluation e;
  e.n_train = static_cast<int>(train.size());
  e.n_features = train.dims();
  e.regularization = spec.regularization;
  e.damping = damping;

  auto start = Clock::now();
  const FullConformal full(train, spec, threads);
  const double setup_seconds = seconds_since(start);
  e.full_deleted_seconds = setup_seconds;

  start = Clock::now();
  const InfluenceWorkspace ws = InfluenceWorkspace::build(full.base(), train, damping);
  e.acp_seconds = setup_seconds + seconds_since(start);
  e.sigma_max = ws.sigma_max();
  const bool cone = ws.effective_lambda() > 0.0;
  if (cone) e.cone_g = cone_factor(ws.sigma_max(), ws.effective_lambda());

  const int labels = train.label_count();
  const std::size_t n_eff = train.size() + 1;
  for (std::size_t t = 0; t < test.size(); ++t) {
    const Vector x = test.row(t).transpose();
    const int truth = test.label(t);
    std::vector<double> p_fd(labels), p_fo(labels), p_dd(labels), p_di(labels), p_od(labels), p_oi(labels);
    RefitDiagnostics point_diag;
    for (int y = 0; y < labels; ++y) {
      const Example c{x, y};
      start = Clock::now();
      const ScoreVector exact_d = full.scores(c, Scheme::deleted, &point_diag);
      e.full_deleted_seconds += seconds_since(start);
      const ScoreVector exact_o = full.scores(c, Scheme::ordinary, &point_diag);

      start = Clock::now();
      const CandidateInfluence prepared = CandidateInfluence::compute(ws, c);
      const ScoreVector dd = scores(ws, prepared, Scheme::deleted, ScoreMethod::direct);
      p_dd[y] = pvalue(dd);
      e.acp_seconds += seconds_since(start);
      const ScoreVector di = scores(ws, prepared, Scheme::deleted, ScoreMethod::indirect);
      const ScoreVector od = scores(ws, prepared, Scheme::ordinary, ScoreMethod::direct);
      const ScoreVector oi = scores(ws, prepared, Scheme::ordinary, ScoreMethod::indirect);

      p_fd[y] = pvalue(exact_d);
      p_fo[y] = pvalue(exact_o);
      p_di[y] = pvalue(di);
      p_od[y] = pvalue(od);
      p_oi[y] = pvalue(oi);
      e.deleted_direct_distance.push_back(approximation_distance(exact_d, dd).mean);
      e.deleted_indirect_distance.push_back(approximation_distance(exact_d, di).mean);
      e.ordinary_direct_distance.push_back(approximation_distance(exact_o, od).mean);
      e.ordinary_indirect_distance.push_back(approximation_distance(exact_o, oi).mean);
      if (cone) {
        const auto bounds = cone_bounds(ws, prepared);
        std::size_t inside = 0;
        for (std::size_t i = 0; i < bounds.size(); ++i) {
          if (bounds[i].contains(exact_d.scores(static_cast<Eigen::Index>(i)))) ++inside;
        }
        e.cone_coverage.push_back(static_cast<double>(inside) / static_cast<double>(bounds.size()));
      }
    }
    e.refits.merge(point_diag);
    auto full_d = table_from(x, truth, Method::full_deleted, p_fd, n_eff);
    auto full_o = table_from(x, truth, Method::full_ordinary, p_fo, n_eff);
    full_d.diagnostics = point_diag;
    full_d.reliable = point_diag.not_converged == 0;
    full_o.reliable = full_d.reliable;
    e.full_deleted.push_back(std::move(full_d));
    e.full_ordinary.push_back(std::move(full_o));
    e.acp_deleted_direct.push_back(table_from(x, truth, Method::acp_deleted_direct, p_dd, n_eff));
    e.acp_deleted_indirect.push_back(table_from(x, truth, Method::acp_deleted_indirect, p_di, n_eff));
    e.acp_ordinary_direct.push_back(table_from(x, truth, Method::acp_ordinary_direct, p_od, n_eff));
    e.acp_ordinary_indirect.push_back(table_from(x, truth, Method::acp_ordinary_indirect, p_oi, n_eff));
  }
  return e;
}

json summarize(const ApproxEvaluation& e, const std::vector<double>& epsilons) {
  json distances = {{"deleted_direct", to_json(mean_sd(e.deleted_direct_distance))},
                    {"deleted_indirect", to_json(mean_sd(e.deleted_indirect_distance))},
                    {"ordinary_direct", to_json(mean_sd(e.ordinary_direct_distance))},
                    {"ordinary_indirect", to_json(mean_sd(e.ordinary_indirect_distance))}};
  json gaps = {{"acp-deleted-direct", to_json(mean_sd(pvalue_gaps(e.full_deleted, e.acp_deleted_direct)))},
               {"acp-deleted-indirect", to_json(mean_sd(pvalue_gaps(e.full_deleted, e.acp_deleted_indirect)))},
               {"acp-ordinary-direct", to_json(mean_sd(pvalue_gaps(e.full_ordinary, e.acp_ordinary_direct)))},
               {"acp-ordinary-indirect", to_json(mean_sd(pvalue_gaps(e.full_ordinary, e.acp_ordinary_indirect)))}};
  json errors = json::object();
  for (const double eps : epsilons) {
    json row = json::object();
    for (const auto* tables : {&e.full_deleted, &e.full_ordinary, &e.acp_deleted_direct, &e.acp_deleted_indirect,
                               &e.acp_ordinary_direct, &e.acp_ordinary_indirect}) {
      const ErrorRate r = error_rate(std::span<const PValueTable>(*tables), eps);
      row[std::string(to_string(tables->front().method))] = {{"rate", r.rate}, {"gap", r.gap}};
    }
    char key[32];
    std::snprintf(key, sizeof key, "%g", eps);
    errors[key] = row;
  }
  std::vector<double> tau;
  for (std::size_t t = 0; t < e.full_deleted.size(); ++t) tau.push_back(kendall_tau(e.full_deleted[t], e.acp_deleted_direct[t]));
  json out = {{"n_train", e.n_train},
              {"n_features", e.n_features},
              {"regularization", e.regularization},
              {"damping", e.damping},
              {"n_test", e.full_deleted.size()},
              {"score_distance", distances},
              {"pvalue_gap", gaps},
              {"error_rate", errors},
              {"kendall_tau_deleted_direct", to_json(mean_sd(tau))},
              {"refits", e.refits.refits},
              {"refits_not_converged", e.refits.not_converged},
              {"max_refit_gradient_norm", e.refits.max_gradient_norm}};
  if (!e.cone_coverage.empty()) {
    out["cone"] = {{"coverage", to_json(mean_sd(e.cone_coverage))}, {"g", e.cone_g}, {"sigma_max", e.sigma_max}};
  }
  return out;
}

FitOutcome cmd_fit(const ExperimentConfig& cfg, std::ostream& out, std::ostream& log) {
  cfg.validate();
  const Dataset train = training_data(cfg);
  const ModelSpec spec = cfg.model_spec(train.dims(), train.label_count());
  const std::filesystem::path dir(cfg.out_dir);
  ensure_dir(dir);

  FitOutcome outcome;
  outcome.model = fit(train, spec);
  outcome.checkpoint = dir / "checkpoint.json";
  save_checkpoint(outcome.model, outcome.checkpoint);

  json diag = {{"converged", outcome.model.converged},
               {"iterations_used", outcome.model.iterations_used},
               {"hessian_evaluations", outcome.model.hessian_evaluations},
               {"final_gradient_norm", outcome.model.final_gradient_norm},
               {"risk", risk(outcome.model, train)},
               {"n_train", train.size()},
               {"n_features", train.dims()},
               {"n_labels", train.label_count()},
               {"checkpoint", outcome.checkpoint.string()}};
  if (!outcome.model.converged) {
    log << "fit did not converge: " << diag.dump() << "\n";
    return outcome;
  }
  const InfluenceWorkspace ws = InfluenceWorkspace::build(outcome.model, train, cfg.damping);
  outcome.workspace = dir / "workspace.bin";
  save_workspace(ws, *outcome.workspace);
  diag["workspace"] = outcome.workspace->string();
  diag["damping"] = cfg.damping;
  diag["sigma_max"] = ws.sigma_max();
  out << diag.dump() << "\n";
  return outcome;
}

void cmd_predict(const ExperimentConfig& cfg, std::ostream& out, std::ostream& log) {
  cfg.validate();
  const Method method = method_from_string(cfg.method);
  const InfluenceWorkspace ws = load_workspace(cfg.workspace_file());
  const Dataset& train = ws.train();
  const FittedModel& model = ws.model();

  FeatureMatrix points;
  std::vector<std::optional<int>> truths;
  if (!cfg.test_csv.empty()) {
    std::optional<int> column = cfg.test_label_column;
    const PointTable table = read_points_csv(cfg.test_csv, cfg.test_has_header, column);
    points = table.features;
    const auto& originals = train.original_labels();
    for (const auto raw : table.raw_labels) {
      const auto it = std::find(originals.begin(), originals.end(), raw);
      if (it == originals.end()) throw IngestionError("test label " + std::to_string(raw) + " was not seen in training");
      truths.emplace_back(static_cast<int>(it - originals.begin()));
    }
  } else if (!cfg.test_points.empty()) {
    points.resize(static_cast<Eigen::Index>(cfg.test_points.size()), train.dims());
    for (std::size_t r = 0; r < cfg.test_points.size(); ++r) {
      if (cfg.test_points[r].size() != static_cast<std::size_t>(train.dims())) {
        throw IngestionError("inline test point " + std::to_string(r) + " has " +
                             std::to_string(cfg.test_points[r].size()) + " features; the model expects " +
                             std::to_string(train.dims()));
      }
      for (int c = 0; c < train.dims(); ++c) points(static_cast<Eigen::Index>(r), c) = cfg.test_points[r][static_cast<std::size_t>(c)];
    }
  } else {
    throw ConfigError("predict needs test points (test_csv or test_points)");
  }
  if (points.cols() != train.dims()) {
    throw IngestionError("test points have " + std::to_string(points.cols()) + " features; the model expects " +
                         std::to_string(train.dims()));
  }
  if (!points.allFinite()) throw IngestionError("test points contain non-finite values");
  truths.resize(static_cast<std::size_t>(points.rows()));

  const auto n_points = static_cast<std::size_t>(points.rows());
  std::vector<PValueTable> tables(n_points);
  if (method == Method::full_deleted || method == Method::full_ordinary) {
    const bool deleted = method == Method::full_deleted;
    const std::uint64_t refits = deleted ? full_cp_refits(train.size(), train.label_count(), n_points, false)
                                         : static_cast<std::uint64_t>(train.label_count()) * n_points;
    check_cost(cfg, refits, std::string(to_string(method)) + " on N=" + std::to_string(train.size()));
    const FullConformal full(train, model.spec, cfg.threads);
    for (std::size_t t = 0; t < n_points; ++t) {
      tables[t] = full.predict(points.row(static_cast<Eigen::Index>(t)).transpose(),
                               deleted ? Scheme::deleted : Scheme::ordinary, truths[t]);
    }
  } else if (method == Method::scp) {
    const SplitConformal sc(train, cfg.calib_fraction, model.spec, stream_seed(cfg, "scp"));
    parallel_for(n_points, cfg.threads, [&](std::size_t t) {
      tables[t] = sc.predict(points.row(static_cast<Eigen::Index>(t)).transpose(), truths[t]);
    });
  } else if (method == Method::cv_plus) {
    const CrossConformal cv(train, cfg.folds, model.spec, stream_seed(cfg, "cv+"));
    parallel_for(n_points, cfg.threads, [&](std::size_t t) {
      tables[t] = cv.predict(points.row(static_cast<Eigen::Index>(t)).transpose(), truths[t]);
    });
  } else {
    const Scheme scheme = (method == Method::acp_deleted_direct || method == Method::acp_deleted_indirect)
                              ? Scheme::deleted
                              : Scheme::ordinary;
    const ScoreMethod rule = (method == Method::acp_deleted_direct || method == Method::acp_ordinary_direct)
                                 ? ScoreMethod::direct
                                 : ScoreMethod::indirect;
    parallel_for(n_points, cfg.threads, [&](std::size_t t) {
      tables[t] = acp(ws, points.row(static_cast<Eigen::Index>(t)).transpose(), scheme, rule, truths[t]);
    });
  }
  std::size_t unreliable = 0;
  for (std::size_t t = 0; t < n_points; ++t) {
    json record = to_json(tables[t], t, cfg.epsilon);
    record["label_names"] = train.original_labels();
    if (!tables[t].reliable) ++unreliable;
    out << record.dump() << "\n";
  }
  if (unreliable > 0) log << "warning: " << unreliable << " p-value tables had non-converged refits\n";
}

json cmd_bench_approx(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.n_sweep.empty() && cfg.feature_sweep.empty() && cfg.lambda_sweep.empty()) {
    throw ConfigError("bench-approx needs at least one non-empty sweep (n_sweep, feature_sweep, lambda_sweep)");
  }
  struct Point {
    std::string axis;
    int n;
    int d;
    double lambda;
  };
  std::vector<Point> points;
  const int base_d = cfg.synthetic.n_features;
  for (const int n : cfg.n_sweep) points.push_back({"n_train", n, base_d, cfg.regularization});
  for (const int d : cfg.feature_sweep) points.push_back({"n_features", cfg.n_train, d, cfg.regularization});
  for (const double l : cfg.lambda_sweep) points.push_back({"regularization", cfg.n_train, base_d, l});

  const std::filesystem::path dir(cfg.out_dir);
  ensure_dir(dir);
  json rows = json::array();
  std::string csv =
      "axis,n_train,n_features,regularization,damping,direct_mean,direct_sd,indirect_mean,indirect_sd,"
      "pvalue_gap_mean,pvalue_gap_sd,cone_coverage,error_full_deleted,error_acp_deleted_direct,skipped\n";
  for (const Point& p : points) {
    ExperimentConfig point_cfg = cfg;
    point_cfg.regularization = p.lambda;
    const auto [train, test] = train_test_data(point_cfg, p.n, p.d);
    const std::uint64_t refits = full_cp_refits(train.size(), train.label_count(), test.size(), true);
    json row = {{"axis", p.axis}, {"n_train", train.size()}, {"n_features", train.dims()}, {"regularization", p.lambda}};
    char line[512];
    if (refits > cfg.full_cp_refit_cap && !cfg.override_cost_cap) {
      log << "warning: skipping " << p.axis << " point N=" << train.size() << " d=" << train.dims()
          << " lambda=" << p.lambda << " (" << refits << " refits above cap " << cfg.full_cp_refit_cap << ")\n";
      row["skipped"] = true;
      row["reason"] = "full-CP refit count " + std::to_string(refits) + " exceeds cap";
      rows.push_back(row);
      std::snprintf(line, sizeof line, "%s,%zu,%d,%.17g,%.17g,,,,,,,,,,1\n", p.axis.c_str(), train.size(), train.dims(),
                    p.lambda, cfg.damping);
      csv += line;
      continue;
    }
    const ModelSpec spec = point_cfg.model_spec(train.dims(), train.label_count());
    const ApproxEvaluation e = evaluate_approximation(train, test, spec, cfg.damping, cfg.threads);
    log << p.axis << " N=" << train.size() << " d=" << train.dims() << " lambda=" << p.lambda
        << ": full " << e.full_deleted_seconds << " s, acp " << e.acp_seconds << " s\n";
    json summary = summarize(e, cfg.epsilons);
    summary["axis"] = p.axis;
    summary["skipped"] = false;
    rows.push_back(summary);

    const MeanSd dd = mean_sd(e.deleted_direct_distance);
    const MeanSd di = mean_sd(e.deleted_indirect_distance);
    const MeanSd gap = mean_sd(pvalue_gaps(e.full_deleted, e.acp_deleted_direct));
    const double cover = e.cone_coverage.empty() ? std::nan("") : mean_of(e.cone_coverage);
    const double eps = cfg.epsilons.empty() ? cfg.epsilon : cfg.epsilons.front();
    std::snprintf(line, sizeof line, "%s,%zu,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,0\n",
                  p.axis.c_str(), train.size(), train.dims(), p.lambda, cfg.damping, dd.mean, dd.sd, di.mean, di.sd,
                  gap.mean, gap.sd, cover, error_rate(std::span<const PValueTable>(e.full_deleted), eps).rate,
                  error_rate(std::span<const PValueTable>(e.acp_deleted_direct), eps).rate);
    csv += line;
  }
  json report = {{"schema_version", kReportSchemaVersion},
                 {"kind", "bench-approx"},
                 {"provenance", provenance(cfg)},
                 {"points", rows}};
  write_text(dir / "bench_approx.json", report.dump(2) + "\n");
  write_text(dir / "bench_approx.csv", csv);
  return report;
}

json cmd_bench_methods(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  {
    std::set<Method> seen;
    for (const Method m : cfg.methods) {
      if (!seen.insert(m).second) throw ConfigError("method listed twice: " + std::string(to_string(m)));
    }
  }
  const auto [train, test] = train_test_data(cfg, cfg.n_train, cfg.synthetic.n_features);
  const ModelSpec spec = cfg.model_spec(train.dims(), train.label_count());
  const std::size_t n_test = test.size();
  const std::filesystem::path dir(cfg.out_dir);
  ensure_dir(dir);

  std::optional<InfluenceWorkspace> ws;
  std::optional<FullConformal> full;
  std::vector<std::vector<PValueTable>> tables;
  for (const Method m : cfg.methods) {
    std::vector<PValueTable> out(n_test);
    const auto start = Clock::now();
    const auto x_of = [&](std::size_t t) -> Vector { return test.row(t).transpose(); };
    switch (m) {
      case Method::full_deleted:
      case Method::full_ordinary: {
        const bool deleted = m == Method::full_deleted;
        const std::uint64_t refits = deleted ? full_cp_refits(train.size(), train.label_count(), n_test, false)
                                             : static_cast<std::uint64_t>(train.label_count()) * n_test;
        check_cost(cfg, refits, std::string(to_string(m)) + " on N=" + std::to_string(train.size()));
        if (!full) full.emplace(train, spec, cfg.threads);
        for (std::size_t t = 0; t < n_test; ++t) {
          out[t] = full->predict(x_of(t), deleted ? Scheme::deleted : Scheme::ordinary, test.label(t));
        }
        break;
      }
      case Method::scp: {
        const SplitConformal sc(train, cfg.calib_fraction, spec, stream_seed(cfg, "scp"));
        parallel_for(n_test, cfg.threads, [&](std::size_t t) { out[t] = sc.predict(x_of(t), test.label(t)); });
        break;
      }
      case Method::cv_plus: {
        const CrossConformal cv(train, cfg.folds, spec, stream_seed(cfg, "cv+"));
        parallel_for(n_test, cfg.threads, [&](std::size_t t) { out[t] = cv.predict(x_of(t), test.label(t)); });
        break;
      }
      default: {
        if (!ws) {
          const FittedModel model = fit(train, spec);
          if (!model.converged) throw NumericError("base fit did not converge; ACP needs the ERM minimizer");
          ws.emplace(InfluenceWorkspace::build(model, train, cfg.damping));
        }
        const Scheme scheme =
            (m == Method::acp_deleted_direct || m == Method::acp_deleted_indirect) ? Scheme::deleted : Scheme::ordinary;
        const ScoreMethod rule =
            (m == Method::acp_deleted_direct || m == Method::acp_ordinary_direct) ? ScoreMethod::direct : ScoreMethod::indirect;
        parallel_for(n_test, cfg.threads, [&](std::size_t t) { out[t] = acp(*ws, x_of(t), scheme, rule, test.label(t)); });
        break;
      }
    }
    log << to_string(m) << ": " << seconds_since(start) << " s\n";
    tables.push_back(std::move(out));
  }

  json methods = json::object();
  std::vector<std::vector<double>> point_auc, point_fuzz;
  std::string records;
  for (std::size_t k = 0; k < cfg.methods.size(); ++k) {
    const Method m = cfg.methods[k];
    const auto& ts = tables[k];
    const EfficiencyCurve curve = efficiency_curve(ts, cfg.grid_step);
    std::vector<double> fuzz;
    for (const auto& t : ts) fuzz.push_back(fuzziness(t));
    point_auc.push_back(per_point_auc(ts, cfg));
    point_fuzz.push_back(fuzz);
    json errors = json::object();
    for (const double eps : cfg.epsilons) {
      const ErrorRate r = error_rate(std::span<const PValueTable>(ts), eps);
      char key[32];
      std::snprintf(key, sizeof key, "%g", eps);
      errors[key] = {{"rate", r.rate}, {"gap", r.gap}};
    }
    const std::string name(to_string(m));
    const std::string curve_file = "curve_" + file_token(m) + ".csv";
    write_curve_csv(curve, dir / curve_file);
    methods[name] = {{"auc", efficiency_auc(curve, cfg.auc_low, cfg.auc_high)},
                     {"fuzziness", to_json(mean_sd(fuzz))},
                     {"error_rate", errors},
                     {"n_effective", ts.front().n_effective},
                     {"curve", to_json(curve)},
                     {"curve_csv", curve_file}};
  }
  for (std::size_t t = 0; t < n_test; ++t) {
    for (std::size_t k = 0; k < cfg.methods.size(); ++k) records += to_json(tables[k][t], t, cfg.epsilon).dump() + "\n";
  }

  json welch = json::array();
  if (n_test >= 2) {
    for (std::size_t a = 0; a < cfg.methods.size(); ++a) {
      for (std::size_t b = 0; b < cfg.methods.size(); ++b) {
        if (a == b) continue;
        welch.push_back({{"a", std::string(to_string(cfg.methods[a]))},
                         {"b", std::string(to_string(cfg.methods[b]))},
                         {"hypothesis", "mean(a) < mean(b)"},
                         {"auc", to_json(welch_less(point_auc[a], point_auc[b]))},
                         {"fuzziness", to_json(welch_less(point_fuzz[a], point_fuzz[b]))}});
      }
    }
  }
  json report = {{"schema_version", kReportSchemaVersion},
                 {"kind", "bench-methods"},
                 {"provenance", provenance(cfg)},
                 {"n_train", train.size()},
                 {"n_test", n_test},
                 {"n_features", train.dims()},
                 {"regularization", cfg.regularization},
                 {"damping", cfg.damping},
                 {"auc_interval", {cfg.auc_low, cfg.auc_high}},
                 {"methods", methods},
                 {"welch_alpha", kWelchAlpha},
                 {"welch", welch}};
  write_text(dir / "bench_methods.json", report.dump(2) + "\n");
  write_text(dir / "records.jsonl", records);
  return report;
}

}  // namespace approxcp
