#pragma once

#include <cmath>
#include <vector>

#include "approxcp/data.hpp"
#include "approxcp/erm.hpp"
#include "approxcp/rng.hpp"

namespace testing {

using namespace approxcp;

inline Dataset blobs(int n, int d, std::uint64_t seed, double sep = 1.0) {
  SyntheticConfig cfg;
  cfg.n_points = n;
  cfg.n_features = d;
  cfg.class_separation = sep;
  cfg.seed = seed;
  return synthesize(cfg);
}

inline std::pair<Dataset, Dataset> blobs_split(int n_train, int n_test, int d, std::uint64_t seed,
                                               double sep = 1.0) {
  return split_count(blobs(n_train + n_test, d, seed, sep), static_cast<std::size_t>(n_train), seed + 1);
}

inline ModelSpec spec_for(const Dataset& ds, double lambda, double tol = 1e-12) {
  ModelSpec spec;
  spec.n_features = ds.dims();
  spec.n_labels = ds.label_count();
  spec.regularization = lambda;
  spec.convergence_tolerance = tol;
  spec.max_iterations = 200;
  return spec;
}

// Dataset with row `skip` removed and `extra` appended (either optional).
inline Dataset modified(const Dataset& ds, std::optional<std::size_t> skip, const Example* extra) {
  const std::size_t n = ds.size() - (skip ? 1 : 0) + (extra ? 1 : 0);
  FeatureMatrix x(static_cast<Eigen::Index>(n), ds.dims());
  std::vector<int> y;
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (skip && *skip == i) continue;
    x.row(r++) = ds.row(i);
    y.push_back(ds.label(i));
  }
  if (extra) {
    x.row(r) = extra->x.transpose();
    y.push_back(extra->y);
  }
  return Dataset(std::move(x), std::move(y), ds.label_count());
}

// Softmax cross-entropy written out independently of the library.
inline double oracle_loss(const Vector& theta, const Vector& x, int y, int labels) {
  const auto d = x.size();
  std::vector<long double> z(static_cast<std::size_t>(labels));
  for (int k = 0; k < labels; ++k) {
    long double s = theta(d * labels + k);
    for (Eigen::Index j = 0; j < d; ++j) s += static_cast<long double>(theta(k * d + j)) * x(j);
    z[static_cast<std::size_t>(k)] = s;
  }
  long double m = z[0];
  for (const auto v : z) m = std::max(m, v);
  long double sum = 0;
  for (const auto v : z) sum += std::exp(v - m);
  return static_cast<double>(m + std::log(sum) - z[static_cast<std::size_t>(y)]);
}

inline Vector random_vector(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng.normal();
  return v;
}

}  // namespace testing
