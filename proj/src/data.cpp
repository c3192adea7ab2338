#include "approxcp/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "approxcp/errors.hpp"
#include "approxcp/rng.hpp"

namespace approxcp {

Dataset::Dataset(FeatureMatrix features, std::vector<int> labels, int label_count,
                 std::vector<std::int64_t> original_labels)
    : features_(std::move(features)),
      labels_(std::move(labels)),
      label_count_(label_count),
      original_labels_(std::move(original_labels)) {
  if (label_count_ < 2) throw ConfigError("dataset needs label_count >= 2");
  if (labels_.empty()) throw ConfigError("dataset needs at least one row");
  if (features_.cols() < 1) throw ConfigError("dataset needs at least one feature");
  if (static_cast<std::size_t>(features_.rows()) != labels_.size()) {
    throw ConfigError("dataset has " + std::to_string(features_.rows()) + " feature rows but " +
                      std::to_string(labels_.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] < 0 || labels_[i] >= label_count_) {
      throw ConfigError("label " + std::to_string(labels_[i]) + " at row " + std::to_string(i) +
                        " outside [0, " + std::to_string(label_count_) + ")");
    }
  }
  if (!features_.allFinite()) throw ConfigError("dataset contains non-finite feature values");
  if (original_labels_.empty()) {
    original_labels_.resize(static_cast<std::size_t>(label_count_));
    std::iota(original_labels_.begin(), original_labels_.end(), std::int64_t{0});
  } else if (original_labels_.size() != static_cast<std::size_t>(label_count_)) {
    throw ConfigError("original label map must have label_count entries");
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  FeatureMatrix sub(static_cast<Eigen::Index>(rows.size()), features_.cols());
  std::vector<int> sub_labels(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= size()) throw ConfigError("subset row index out of range");
    sub.row(static_cast<Eigen::Index>(k)) = row(rows[k]);
    sub_labels[k] = labels_[rows[k]];
  }
  return Dataset(std::move(sub), std::move(sub_labels), label_count_, original_labels_);
}

bool Dataset::operator==(const Dataset& other) const {
  return label_count_ == other.label_count_ && labels_ == other.labels_ &&
         original_labels_ == other.original_labels_ &&
         features_.rows() == other.features_.rows() &&
         features_.cols() == other.features_.cols() && features_ == other.features_;
}

void SyntheticConfig::validate() const {
  if (n_features < 1) throw ConfigError("synthetic n_features must be >= 1");
  if (n_classes < 2) throw ConfigError("synthetic n_classes must be >= 2");
  if (clusters_per_class < 1) throw ConfigError("synthetic clusters_per_class must be >= 1");
  if (!(class_separation > 0.0) || !std::isfinite(class_separation)) {
    throw ConfigError("synthetic class_separation must be positive");
  }
  const long long clusters = static_cast<long long>(clusters_per_class) * n_classes;
  if (n_points < clusters) {
    throw ConfigError("synthetic n_points must be at least one per cluster (" +
                      std::to_string(clusters) + ")");
  }
  // Distinct hypercube vertices must exist.
  if (n_features < 63 && (1LL << n_features) < clusters) {
    throw ConfigError("synthetic n_features too small for distinct cluster centroids");
  }
}

Dataset synthesize(const SyntheticConfig& cfg) {
  cfg.validate();
  const int d = cfg.n_features;
  const int clusters = cfg.clusters_per_class * cfg.n_classes;

  Rng centroid_rng = Rng::stream(cfg.seed, "synthetic/centroids");
  std::vector<std::vector<signed char>> vertices;
  std::set<std::vector<signed char>> seen;
  while (static_cast<int>(vertices.size()) < clusters) {
    std::vector<signed char> v(static_cast<std::size_t>(d));
    for (auto& s : v) s = (centroid_rng.next_u64() >> 63) ? 1 : -1;
    if (seen.insert(v).second) vertices.push_back(std::move(v));
  }

  Rng point_rng = Rng::stream(cfg.seed, "synthetic/points");
  FeatureMatrix features(cfg.n_points, d);
  std::vector<int> labels(static_cast<std::size_t>(cfg.n_points));
  for (int j = 0; j < cfg.n_points; ++j) {
    const int c = j % clusters;
    labels[static_cast<std::size_t>(j)] = c % cfg.n_classes;
    for (int f = 0; f < d; ++f) {
      features(j, f) = cfg.class_separation * vertices[static_cast<std::size_t>(c)][static_cast<std::size_t>(f)] +
                       point_rng.normal();
    }
  }
  return Dataset(std::move(features), std::move(labels), cfg.n_classes);
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                      : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string cell_location(std::size_t line_no, std::size_t column) {
  return "line " + std::to_string(line_no) + ", column " + std::to_string(column);
}

}  // namespace

PointTable read_points_csv(const std::filesystem::path& path, bool has_header,
                           std::optional<int> label_column) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open CSV file: " + path.string());
  if (label_column && *label_column < 0) throw ConfigError("label column index must be non-negative");

  std::vector<std::vector<double>> rows;
  PointTable table;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  const std::size_t label_cells = label_column ? 1 : 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (has_header && line_no == 1) continue;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (width == 0) {
      width = fields.size();
      if (width < 1 + label_cells) throw IngestionError("CSV needs at least one feature column");
      if (label_column && static_cast<std::size_t>(*label_column) >= width) {
        throw ConfigError("label column " + std::to_string(*label_column) + " beyond " +
                          std::to_string(width) + " columns");
      }
    } else if (fields.size() != width) {
      throw IngestionError("expected " + std::to_string(width) + " cells at line " +
                           std::to_string(line_no) + ", found " + std::to_string(fields.size()));
    }
    std::vector<double> features;
    features.reserve(width - label_cells);
    for (std::size_t c = 0; c < width; ++c) {
      const auto cell = trim(fields[c]);
      if (label_column && static_cast<int>(c) == *label_column) {
        std::int64_t label = 0;
        const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), label);
        if (ec != std::errc() || ptr != cell.data() + cell.size()) {
          throw IngestionError("non-integer label '" + std::string(cell) + "' at " +
                               cell_location(line_no, c + 1));
        }
        table.raw_labels.push_back(label);
      } else {
        double value = 0.0;
        const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
        if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
          throw IngestionError("non-numeric cell '" + std::string(cell) + "' at " +
                               cell_location(line_no, c + 1));
        }
        if (!std::isfinite(value)) {
          throw IngestionError("non-finite cell '" + std::string(cell) + "' at " +
                               cell_location(line_no, c + 1));
        }
        features.push_back(value);
      }
    }
    rows.push_back(std::move(features));
  }
  if (rows.empty()) throw IngestionError("CSV file has no data rows: " + path.string());

  table.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width - label_cells));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      table.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return table;
}

Dataset load_csv(const std::filesystem::path& path, bool has_header, int label_column) {
  PointTable table = read_points_csv(path, has_header, label_column);
  const auto& raw_labels = table.raw_labels;
  std::map<std::int64_t, int> remap;
  for (const auto label : raw_labels) remap.emplace(label, 0);
  if (remap.size() < 2) throw IngestionError("CSV file contains a single class: " + path.string());
  std::vector<std::int64_t> originals;
  for (auto& [original, id] : remap) {
    id = static_cast<int>(originals.size());
    originals.push_back(original);
  }

  std::vector<int> labels(raw_labels.size());
  for (std::size_t r = 0; r < raw_labels.size(); ++r) labels[r] = remap.at(raw_labels[r]);
  const auto label_count = static_cast<int>(originals.size());
  return Dataset(std::move(table.features), std::move(labels), label_count, std::move(originals));
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write CSV file: " + path.string());
  for (int f = 0; f < ds.dims(); ++f) out << 'x' << f << ',';
  out << "label\n";
  char buffer[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (int f = 0; f < ds.dims(); ++f) {
      const auto [end, ec] =
          std::to_chars(buffer, buffer + sizeof(buffer), ds.features()(static_cast<Eigen::Index>(i), f));
      out.write(buffer, end - buffer);
      out << ',';
    }
    out << ds.original_labels()[static_cast<std::size_t>(ds.label(i))] << '\n';
  }
  if (!out) throw IngestionError("failed writing CSV file: " + path.string());
}

std::pair<Dataset, Dataset> split_count(const Dataset& ds, std::size_t first_count,
                                        std::uint64_t seed) {
  if (first_count == 0 || first_count >= ds.size()) {
    throw ConfigError("split leaves an empty part (" + std::to_string(first_count) + " of " +
                      std::to_string(ds.size()) + " rows)");
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "split/shuffle");
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::size_t> first(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(first_count));
  std::vector<std::size_t> second(order.begin() + static_cast<std::ptrdiff_t>(first_count), order.end());
  return {ds.subset(first), ds.subset(second)};
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  const double raw = fraction * static_cast<double>(ds.size());
  // Absorb representation error so that 0.2 * 10 counts as exactly 2.
  const auto first = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return split_count(ds, first, seed);
}

Dataset Standardizer::apply(const Dataset& ds) const {
  if (ds.dims() != mean.size()) throw ConfigError("standardizer dimension mismatch");
  FeatureMatrix out = ds.features();
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    out.col(c) = ((out.col(c).array() - mean(c)) / scale(c)).matrix();
  }
  return Dataset(std::move(out), ds.labels(), ds.label_count(), ds.original_labels());
}

Vector Standardizer::apply(const Eigen::Ref<const Vector>& x) const {
  if (x.size() != mean.size()) throw ConfigError("standardizer dimension mismatch");
  return ((x - mean).array() / scale.array()).matrix();
}

std::pair<Dataset, Standardizer> standardize(const Dataset& ds) {
  if (ds.size() < 2) throw ConfigError("standardize needs at least two rows");
  const auto n = static_cast<double>(ds.size());
  Standardizer record;
  record.mean = ds.features().colwise().sum().transpose() / n;
  record.scale.resize(ds.dims());
  for (int c = 0; c < ds.dims(); ++c) {
    const auto column = ds.features().col(c);
    if (column.maxCoeff() == column.minCoeff()) {
      record.mean(c) = column(0);  // exact, so the centered column is exactly zero
      record.scale(c) = 1.0;
      continue;
    }
    const double ss = (ds.features().col(c).array() - record.mean(c)).square().sum();
    const double sd = std::sqrt(ss / (n - 1.0));
    record.scale(c) = sd > 0.0 ? sd : 1.0;
  }
  return {record.apply(ds), record};
}

}  // namespace approxcp
