#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

namespace approxcp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// Row-major so that each example's features are contiguous.
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A single labelled example z = (x, y).
struct Example {
  Vector x;
  int y = 0;
};

// Immutable labelled sample: N x d features and labels in [0, label_count).
class Dataset {
 public:
  // Validates every invariant; throws ConfigError on violation.
  Dataset(FeatureMatrix features, std::vector<int> labels, int label_count,
          std::vector<std::int64_t> original_labels = {});

  std::size_t size() const { return labels_.size(); }
  int dims() const { return static_cast<int>(features_.cols()); }
  int label_count() const { return label_count_; }

  const FeatureMatrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  int label(std::size_t i) const { return labels_[i]; }
  auto row(std::size_t i) const { return features_.row(static_cast<Eigen::Index>(i)); }
  Example example(std::size_t i) const { return {row(i).transpose(), labels_[i]}; }

  // Original id for each contiguous label (identity when built in memory).
  const std::vector<std::int64_t>& original_labels() const { return original_labels_; }

  // Rows selected by index, same label space.
  Dataset subset(const std::vector<std::size_t>& rows) const;

  bool operator==(const Dataset& other) const;

 private:
  FeatureMatrix features_;
  std::vector<int> labels_;
  int label_count_;
  std::vector<std::int64_t> original_labels_;
};

struct SyntheticConfig {
  int n_points = 100;
  int n_features = 2;
  double class_separation = 1.0;
  std::uint64_t seed = 0;
  int clusters_per_class = 2;
  int n_classes = 2;

  void validate() const;
};

// Binary (by default) Gaussian-cluster sample. Centroids are distinct vertices
// of {-1,+1}^d scaled by class_separation; cluster c belongs to class
// c % n_classes; point j is drawn from cluster j % n_clusters with unit
// isotropic noise. Centroids and points use separate streams of `seed`.
Dataset synthesize(const SyntheticConfig& cfg);

// Raw numeric table; raw_labels is empty when there is no label column.
struct PointTable {
  FeatureMatrix features;
  std::vector<std::int64_t> raw_labels;
};

PointTable read_points_csv(const std::filesystem::path& path, bool has_header,
                           std::optional<int> label_column);

// Reads a comma-separated file; the label column is integer coded and is
// remapped to contiguous ids (ascending original order).
Dataset load_csv(const std::filesystem::path& path, bool has_header, int label_column);

// Writes features then the original label as the last column, with header.
void save_csv(const Dataset& ds, const std::filesystem::path& path);

// Seeded shuffle, then the first ceil(fraction * N) rows form the first part.
std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed);
std::pair<Dataset, Dataset> split_count(const Dataset& ds, std::size_t first_count,
                                        std::uint64_t seed);

// Per-feature affine transform recorded by standardize().
struct Standardizer {
  Vector mean;
  Vector scale;

  Dataset apply(const Dataset& ds) const;
  Vector apply(const Eigen::Ref<const Vector>& x) const;
};

// Zero mean and unit sample standard deviation per column; zero-variance
// columns are only centered (scale 1). Requires N >= 2.
std::pair<Dataset, Standardizer> standardize(const Dataset& ds);

}  // namespace approxcp
