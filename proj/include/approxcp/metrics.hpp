#pragma once

#include <span>
#include <vector>

#include "approxcp/conformal.hpp"
#include "approxcp/influence.hpp"

namespace approxcp {

// Mean prediction-set size over test points on the grid k * step, k = 0..1/step.
struct EfficiencyCurve {
  std::vector<double> epsilons;
  std::vector<double> mean_set_size;
  std::size_t n_test = 0;
  int label_count = 0;
};

EfficiencyCurve efficiency_curve(std::span<const PValueTable> tables, double step = 0.01);

// Trapezoidal area under the curve over [lo, hi]; both ends must be grid points.
double efficiency_auc(const EfficiencyCurve& curve, double lo = 0.0, double hi = 0.2);

// Sum of the p-values minus the largest one.
double fuzziness(const PValueTable& table);

struct LabelledSet {
  PredictionSet set;
  int true_label = 0;
};

struct ErrorRate {
  double rate = 0.0;
  double gap = 0.0;  // epsilon - rate; positive means conservative
};

ErrorRate error_rate(std::span<const LabelledSet> sets, double epsilon);
// Uses each table's true label; throws if any is missing.
ErrorRate error_rate(std::span<const PValueTable> tables, double epsilon);

struct DistanceSummary {
  double mean = 0.0;
  double max = 0.0;
  double sd = 0.0;  // sample standard deviation
  std::size_t count = 0;
};

DistanceSummary approximation_distance(std::span<const double> exact, std::span<const double> approx);
DistanceSummary approximation_distance(const ScoreVector& exact, const ScoreVector& approx);
DistanceSummary approximation_distance(const PValueTable& exact, const PValueTable& approx);

// Normalized Kendall tau distance between the label rankings by p-value
// (descending, ties broken by ascending label id).
double kendall_tau(const PValueTable& a, const PValueTable& b);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t count = 0;
};
MeanSd mean_sd(std::span<const double> values);

// One-sided Welch test of H1: mean(a) < mean(b).
struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  bool reject = false;  // p_value < alpha
};

inline constexpr double kWelchAlpha = 0.1;
WelchResult welch_less(std::span<const double> a, std::span<const double> b, double alpha = kWelchAlpha);

}  // namespace approxcp
