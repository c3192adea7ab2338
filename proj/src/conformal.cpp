#include "approxcp/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "approxcp/errors.hpp"
#include "approxcp/parallel.hpp"
#include "approxcp/rng.hpp"

namespace approxcp {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::full_deleted: return "full-deleted";
    case Method::full_ordinary: return "full-ordinary";
    case Method::acp_deleted_direct: return "acp-deleted-direct";
    case Method::acp_deleted_indirect: return "acp-deleted-indirect";
    case Method::acp_ordinary_direct: return "acp-ordinary-direct";
    case Method::acp_ordinary_indirect: return "acp-ordinary-indirect";
    case Method::scp: return "scp";
    case Method::cv_plus: return "cv+";
  }
  return "unknown";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = {
      Method::full_deleted,         Method::full_ordinary,         Method::acp_deleted_direct,
      Method::acp_deleted_indirect, Method::acp_ordinary_direct,   Method::acp_ordinary_indirect,
      Method::scp,                  Method::cv_plus};
  return methods;
}

Method method_from_string(std::string_view name) {
  if (name == "acp-d") return Method::acp_deleted_direct;
  if (name == "acp-o") return Method::acp_ordinary_direct;
  if (name == "cv-plus") return Method::cv_plus;
  for (const Method m : all_methods()) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

void RefitDiagnostics::merge(const RefitDiagnostics& other) {
  refits += other.refits;
  not_converged += other.not_converged;
  max_gradient_norm = std::max(max_gradient_norm, other.max_gradient_norm);
}

bool PredictionSet::contains(int label) const {
  return std::binary_search(labels.begin(), labels.end(), label);
}

double pvalue(std::span<const double> scores) {
  if (scores.empty()) throw ConfigError("p-value needs at least the candidate score");
  const double candidate = scores.back();
  const auto count = std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= candidate; });
  return static_cast<double>(count) / static_cast<double>(scores.size());
}

double pvalue(const ScoreVector& scores) {
  return pvalue(std::span<const double>(scores.scores.data(), static_cast<std::size_t>(scores.scores.size())));
}

PredictionSet prediction_set(const PValueTable& table, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  PredictionSet set;
  set.epsilon = epsilon;
  for (int y = 0; y < table.label_count(); ++y) {
    if (table.pvalues[static_cast<std::size_t>(y)] > epsilon) set.labels.push_back(y);
  }
  return set;
}

FullConformal::FullConformal(const Dataset& train, const ModelSpec& spec, int threads)
    : train_(train), spec_(spec), threads_(threads), base_(fit(train, spec)) {
  if (!base_.converged) {
    throw NumericError("base fit for full CP did not converge (gradient norm " +
                       std::to_string(base_.final_gradient_norm) + ")");
  }
  hessian_ = risk_hessian(base_, train_);
}

ScoreVector FullConformal::scores(const Example& candidate, Scheme scheme,
                                  RefitDiagnostics* diagnostics) const {
  const LossModel& model = loss_model(spec_);
  const std::size_t n = train_.size();
  const double lambda = spec_.regularization;
  const Matrix candidate_hessian = model.point_hessian(base_.theta, candidate.x, candidate.y);

  ScoreVector out;
  out.scheme = scheme;
  out.method = ScoreMethod::exact;
  out.candidate = candidate;
  out.scores.resize(static_cast<Eigen::Index>(n + 1));
  RefitDiagnostics local;

  auto record = [](RefitDiagnostics& diag, const FittedModel& refit) {
    ++diag.refits;
    if (!refit.converged) ++diag.not_converged;
    diag.max_gradient_norm = std::max(diag.max_gradient_norm, refit.final_gradient_norm);
  };

  if (scheme == Scheme::ordinary) {
    const Matrix h = updated_hessian(hessian_, n, lambda, nullptr, &candidate_hessian);
    const FittedModel refit = fit(TrainingView(train_, std::nullopt, &candidate), spec_, base_.theta, &h);
    record(local, refit);
    out.scores.head(static_cast<Eigen::Index>(n)) = model.losses(train_, refit.theta);
    out.scores(static_cast<Eigen::Index>(n)) = model.loss(refit.theta, candidate.x, candidate.y);
  } else {
    std::vector<RefitDiagnostics> per_point(n);
    parallel_for(n, threads_, [&](std::size_t i) {
      const auto xi = train_.row(i).transpose();
      const int yi = train_.label(i);
      const Matrix removed = model.point_hessian(base_.theta, xi, yi);
      const Matrix h = updated_hessian(hessian_, n, lambda, &removed, &candidate_hessian);
      const FittedModel refit = fit(TrainingView(train_, i, &candidate), spec_, base_.theta, &h);
      record(per_point[i], refit);
      out.scores(static_cast<Eigen::Index>(i)) = model.loss(refit.theta, xi, yi);
    });
    for (const auto& d : per_point) local.merge(d);
    // Z + {z_hat} - {z_hat} = Z, so the candidate's deleted model is theta_Z.
    out.scores(static_cast<Eigen::Index>(n)) = model.loss(base_.theta, candidate.x, candidate.y);
  }
  if (diagnostics) diagnostics->merge(local);
  return out;
}

PValueTable FullConformal::predict(const Vector& x, Scheme scheme, std::optional<int> true_label) const {
  PValueTable table;
  table.x = x;
  table.true_label = true_label;
  table.method = scheme == Scheme::deleted ? Method::full_deleted : Method::full_ordinary;
  table.n_effective = train_.size() + 1;
  for (int y = 0; y < spec_.n_labels; ++y) {
    const ScoreVector s = scores(Example{x, y}, scheme, &table.diagnostics);
    table.pvalues.push_back(pvalue(s));
  }
  table.reliable = table.diagnostics.not_converged == 0;
  return table;
}

PValueTable full_cp(const Dataset& train, const ModelSpec& spec, const Vector& test_x, Scheme scheme) {
  return FullConformal(train, spec).predict(test_x, scheme);
}

Method acp_method(Scheme scheme, ScoreMethod method) {
  if (method == ScoreMethod::exact) throw ConfigError("ACP needs the direct or indirect rule");
  if (scheme == Scheme::deleted) {
    return method == ScoreMethod::direct ? Method::acp_deleted_direct : Method::acp_deleted_indirect;
  }
  return method == ScoreMethod::direct ? Method::acp_ordinary_direct : Method::acp_ordinary_indirect;
}

PValueTable acp(const InfluenceWorkspace& ws, const Vector& test_x, Scheme scheme, ScoreMethod method,
                std::optional<int> true_label) {
  PValueTable table;
  table.x = test_x;
  table.true_label = true_label;
  table.method = acp_method(scheme, method);
  table.n_effective = ws.n_train() + 1;
  for (int y = 0; y < ws.model().spec.n_labels; ++y) {
    const auto prepared = CandidateInfluence::compute(ws, Example{test_x, y});
    table.pvalues.push_back(pvalue(scores(ws, prepared, scheme, method)));
  }
  return table;
}

SplitConformal::SplitConformal(const Dataset& train, double calib_fraction, const ModelSpec& spec,
                               std::uint64_t seed)
    : label_count_(spec.n_labels) {
  auto [calibration, proper] = split(train, calib_fraction, seed);
  model_ = fit(proper, spec);
  const Vector losses = loss_model(spec).losses(calibration, model_.theta);
  calibration_.assign(losses.data(), losses.data() + losses.size());
  std::sort(calibration_.begin(), calibration_.end());
}

double SplitConformal::pvalue_for_score(double score) const {
  const auto at_least = calibration_.end() - std::lower_bound(calibration_.begin(), calibration_.end(), score);
  return static_cast<double>(at_least + 1) / static_cast<double>(calibration_.size() + 1);
}

PValueTable SplitConformal::predict(const Vector& x, std::optional<int> true_label) const {
  PValueTable table;
  table.x = x;
  table.true_label = true_label;
  table.method = Method::scp;
  table.n_effective = calibration_.size() + 1;
  for (int y = 0; y < label_count_; ++y) table.pvalues.push_back(pvalue_for_score(point_loss(model_, x, y)));
  return table;
}

PValueTable scp(const Dataset& train, double calib_fraction, const ModelSpec& spec, const Vector& test_x,
                std::uint64_t seed) {
  return SplitConformal(train, calib_fraction, spec, seed).predict(test_x);
}

CrossConformal::CrossConformal(const Dataset& train, int folds, const ModelSpec& spec, std::uint64_t seed)
    : label_count_(spec.n_labels) {
  const std::size_t n = train.size();
  if (folds < 2) throw ConfigError("CV+ needs at least 2 folds");
  if (static_cast<std::size_t>(folds) > n) throw ConfigError("CV+ has more folds than training points");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "cv+/folds");
  rng.shuffle(std::span<std::size_t>(order));
  fold_of_.assign(n, 0);
  // Contiguous chunks of the shuffled order; sizes differ by at most one.
  for (std::size_t pos = 0; pos < n; ++pos) {
    fold_of_[order[pos]] = static_cast<int>(pos * static_cast<std::size_t>(folds) / n);
  }

  scores_.resize(static_cast<Eigen::Index>(n));
  const LossModel& model = loss_model(spec);
  for (int k = 0; k < folds; ++k) {
    std::vector<std::size_t> keep;
    std::vector<std::size_t> held;
    for (std::size_t i = 0; i < n; ++i) (fold_of_[i] == k ? held : keep).push_back(i);
    if (held.empty() || keep.empty()) throw ConfigError("CV+ fold " + std::to_string(k) + " is degenerate");
    models_.push_back(fit(train.subset(keep), spec));
    for (const std::size_t i : held) {
      scores_(static_cast<Eigen::Index>(i)) = model.loss(models_.back().theta, train.row(i).transpose(), train.label(i));
    }
  }
}

PValueTable CrossConformal::predict(const Vector& x, std::optional<int> true_label) const {
  PValueTable table;
  table.x = x;
  table.true_label = true_label;
  table.method = Method::cv_plus;
  const auto n = static_cast<std::size_t>(scores_.size());
  table.n_effective = n + 1;
  std::vector<double> candidate(models_.size());
  for (int y = 0; y < label_count_; ++y) {
    for (std::size_t k = 0; k < models_.size(); ++k) candidate[k] = point_loss(models_[k], x, y);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (scores_(static_cast<Eigen::Index>(i)) >= candidate[static_cast<std::size_t>(fold_of_[i])]) ++count;
    }
    table.pvalues.push_back(static_cast<double>(count + 1) / static_cast<double>(n + 1));
  }
  return table;
}

PValueTable cv_plus(const Dataset& train, int folds, const ModelSpec& spec, const Vector& test_x,
                    std::uint64_t seed) {
  return CrossConformal(train, folds, spec, seed).predict(test_x);
}

}  // namespace approxcp
