#include "approxcp/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numeric>
#include <string>

#include "approxcp/errors.hpp"

namespace approxcp {

EfficiencyCurve efficiency_curve(std::span<const PValueTable> tables, double step) {
  if (tables.empty()) throw ConfigError("efficiency curve needs at least one table");
  if (!(step > 0.0 && step <= 1.0)) throw ConfigError("efficiency grid step must lie in (0, 1]");
  const int labels = tables.front().label_count();
  for (const auto& t : tables) {
    if (t.label_count() != labels) throw ConfigError("tables do not share a label space");
  }
  const auto points = static_cast<std::size_t>(std::llround(1.0 / step)) + 1;
  EfficiencyCurve curve;
  curve.n_test = tables.size();
  curve.label_count = labels;
  curve.epsilons.resize(points);
  curve.mean_set_size.assign(points, 0.0);
  for (std::size_t k = 0; k < points; ++k) {
    curve.epsilons[k] = std::min(1.0, static_cast<double>(k) * step);
    double total = 0.0;
    for (const auto& t : tables) total += static_cast<double>(prediction_set(t, curve.epsilons[k]).size());
    curve.mean_set_size[k] = total / static_cast<double>(tables.size());
  }
  return curve;
}

double efficiency_auc(const EfficiencyCurve& curve, double lo, double hi) {
  if (curve.epsilons.size() < 2) throw ConfigError("efficiency curve has fewer than two grid points");
  if (!(lo < hi)) throw ConfigError("AUC interval must have lo < hi");
  const auto locate = [&](double value) {
    const auto it = std::min_element(curve.epsilons.begin(), curve.epsilons.end(),
                                     [&](double a, double b) { return std::abs(a - value) < std::abs(b - value); });
    if (std::abs(*it - value) > 1e-9) {
      throw ConfigError("AUC bound " + std::to_string(value) + " is not on the curve grid");
    }
    return static_cast<std::size_t>(it - curve.epsilons.begin());
  };
  const std::size_t first = locate(lo);
  const std::size_t last = locate(hi);
  double area = 0.0;
  for (std::size_t k = first; k < last; ++k) {
    area += 0.5 * (curve.mean_set_size[k] + curve.mean_set_size[k + 1]) *
            (curve.epsilons[k + 1] - curve.epsilons[k]);
  }
  return area;
}

double fuzziness(const PValueTable& table) {
  if (table.pvalues.empty()) throw ConfigError("fuzziness needs a non-empty p-value table");
  const double total = std::accumulate(table.pvalues.begin(), table.pvalues.end(), 0.0);
  return total - *std::max_element(table.pvalues.begin(), table.pvalues.end());
}

ErrorRate error_rate(std::span<const LabelledSet> sets, double epsilon) {
  if (sets.empty()) throw ConfigError("error rate needs at least one prediction set");
  std::size_t misses = 0;
  for (const auto& s : sets) {
    if (std::abs(s.set.epsilon - epsilon) > 1e-12) throw ConfigError("prediction sets built at a different epsilon");
    if (!s.set.contains(s.true_label)) ++misses;
  }
  ErrorRate out;
  out.rate = static_cast<double>(misses) / static_cast<double>(sets.size());
  out.gap = epsilon - out.rate;
  return out;
}

ErrorRate error_rate(std::span<const PValueTable> tables, double epsilon) {
  std::vector<LabelledSet> sets;
  sets.reserve(tables.size());
  for (const auto& t : tables) {
    if (!t.true_label) throw ConfigError("error rate needs the true label of every test point");
    sets.push_back({prediction_set(t, epsilon), *t.true_label});
  }
  return error_rate(sets, epsilon);
}

MeanSd mean_sd(std::span<const double> values) {
  MeanSd out;
  out.count = values.size();
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (const double v : values) ss += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

DistanceSummary approximation_distance(std::span<const double> exact, std::span<const double> approx) {
  if (exact.size() != approx.size()) {
    throw ConfigError("approximation distance: shape mismatch (" + std::to_string(exact.size()) + " vs " +
                      std::to_string(approx.size()) + ")");
  }
  if (exact.empty()) throw ConfigError("approximation distance needs non-empty inputs");
  std::vector<double> diff(exact.size());
  for (std::size_t i = 0; i < exact.size(); ++i) diff[i] = std::abs(exact[i] - approx[i]);
  const MeanSd moments = mean_sd(diff);
  DistanceSummary out;
  out.mean = moments.mean;
  out.sd = moments.sd;
  out.count = diff.size();
  out.max = *std::max_element(diff.begin(), diff.end());
  return out;
}

DistanceSummary approximation_distance(const ScoreVector& exact, const ScoreVector& approx) {
  if (exact.candidate.y != approx.candidate.y || exact.candidate.x != approx.candidate.x) {
    throw ConfigError("approximation distance: score vectors belong to different candidates");
  }
  return approximation_distance(std::span<const double>(exact.scores.data(), static_cast<std::size_t>(exact.scores.size())),
                                std::span<const double>(approx.scores.data(), static_cast<std::size_t>(approx.scores.size())));
}

DistanceSummary approximation_distance(const PValueTable& exact, const PValueTable& approx) {
  return approximation_distance(std::span<const double>(exact.pvalues), std::span<const double>(approx.pvalues));
}

namespace {

// Position of each label when sorted by p-value descending, label ascending.
std::vector<std::size_t> rank_positions(const std::vector<double>& p) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p[a] != p[b] ? p[a] > p[b] : a < b;
  });
  std::vector<std::size_t> pos(p.size());
  for (std::size_t r = 0; r < order.size(); ++r) pos[order[r]] = r;
  return pos;
}

// Inversions of a permutation by merge sort.
std::size_t count_inversions(std::vector<std::size_t>& v, std::vector<std::size_t>& scratch, std::size_t lo,
                             std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::size_t inversions = count_inversions(v, scratch, lo, mid) + count_inversions(v, scratch, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[i] <= v[j]) {
      scratch[k++] = v[i++];
    } else {
      inversions += mid - i;
      scratch[k++] = v[j++];
    }
  }
  while (i < mid) scratch[k++] = v[i++];
  while (j < hi) scratch[k++] = v[j++];
  std::copy(scratch.begin() + static_cast<std::ptrdiff_t>(lo), scratch.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return inversions;
}

}  // namespace

double kendall_tau(const PValueTable& a, const PValueTable& b) {
  if (a.pvalues.size() != b.pvalues.size()) throw ConfigError("Kendall tau: tables have different label spaces");
  const std::size_t labels = a.pvalues.size();
  if (labels < 2) return 0.0;
  const auto pos_a = rank_positions(a.pvalues);
  const auto pos_b = rank_positions(b.pvalues);
  // Read b's positions in the order of a's ranking; inversions = discordant pairs.
  std::vector<std::size_t> sequence(labels);
  for (std::size_t label = 0; label < labels; ++label) sequence[pos_a[label]] = pos_b[label];
  std::vector<std::size_t> scratch(labels);
  const auto discordant = count_inversions(sequence, scratch, 0, labels);
  return static_cast<double>(discordant) / (0.5 * static_cast<double>(labels * (labels - 1)));
}

WelchResult welch_less(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.size() < 2 || b.size() < 2) throw ConfigError("Welch test needs at least two samples per group");
  const MeanSd ma = mean_sd(a);
  const MeanSd mb = mean_sd(b);
  const double va = ma.sd * ma.sd / static_cast<double>(a.size());
  const double vb = mb.sd * mb.sd / static_cast<double>(b.size());
  WelchResult out;
  if (va + vb == 0.0) {
    out.t = ma.mean < mb.mean ? -std::numeric_limits<double>::infinity()
                              : (ma.mean > mb.mean ? std::numeric_limits<double>::infinity() : 0.0);
    out.df = static_cast<double>(a.size() + b.size() - 2);
    out.p_value = ma.mean < mb.mean ? 0.0 : 1.0;
  } else {
    out.t = (ma.mean - mb.mean) / std::sqrt(va + vb);
    out.df = (va + vb) * (va + vb) /
             (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    const boost::math::students_t_distribution<double> dist(out.df);
    out.p_value = boost::math::cdf(dist, out.t);
  }
  out.reject = out.p_value < alpha;
  return out;
}

}  // namespace approxcp
