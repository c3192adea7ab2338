#include "approxcp/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "approxcp/errors.hpp"
#include "approxcp/rng.hpp"

namespace approxcp {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "workspace blobs assume a little-endian host");

json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Vector vector_from_json(const json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

class Writer {
 public:
  template <class T>
  void put(const T& value) {
    out_.append(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void put_doubles(const double* data, std::size_t n) {
    out_.append(reinterpret_cast<const char*>(data), n * sizeof(double));
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    out_.append(s);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <class T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }
  void get_doubles(double* data, std::size_t n) {
    const auto bytes = take(n * sizeof(double));
    std::memcpy(data, bytes.data(), bytes.size());
  }
  std::string get_string() { return std::string(take(get<std::uint64_t>())); }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view take(std::size_t n) {
    if (n > in_.size() - pos_) throw FormatError("workspace blob is truncated");
    const auto out = in_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

json to_json(const ModelSpec& spec) {
  return {{"n_features", spec.n_features},
          {"n_labels", spec.n_labels},
          {"regularization", spec.regularization},
          {"max_iterations", spec.max_iterations},
          {"convergence_tolerance", spec.convergence_tolerance},
          {"seed", spec.seed}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.n_features = j.at("n_features").get<int>();
  spec.n_labels = j.at("n_labels").get<int>();
  spec.regularization = j.at("regularization").get<double>();
  spec.max_iterations = j.at("max_iterations").get<int>();
  spec.convergence_tolerance = j.at("convergence_tolerance").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

json checkpoint_json(const FittedModel& model) {
  return {{"format", "approxcp-checkpoint"},
          {"version", kCheckpointVersion},
          {"flattening", std::string(kFlatteningOrder)},
          {"spec", to_json(model.spec)},
          {"theta", vector_json(model.theta)},
          {"converged", model.converged},
          {"final_gradient_norm", model.final_gradient_norm},
          {"iterations_used", model.iterations_used}};
}

FittedModel checkpoint_from_json(const json& j) {
  try {
    if (j.at("format") != "approxcp-checkpoint") throw FormatError("not a model checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + j.at("version").dump());
    }
    if (j.at("flattening").get<std::string>() != kFlatteningOrder) {
      throw FormatError("checkpoint uses parameter layout " + j.at("flattening").dump());
    }
    FittedModel model;
    model.spec = spec_from_json(j.at("spec"));
    model.spec.validate();
    model.theta = vector_from_json(j.at("theta"));
    if (model.theta.size() != model.spec.n_params()) throw FormatError("checkpoint theta has the wrong length");
    if (!model.theta.allFinite()) throw FormatError("checkpoint theta is not finite");
    model.converged = j.at("converged").get<bool>();
    model.final_gradient_norm = j.at("final_gradient_norm").get<double>();
    model.iterations_used = j.at("iterations_used").get<int>();
    return model;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint spec invalid: ") + e.what());
  }
}

void save_checkpoint(const FittedModel& model, const std::filesystem::path& path) {
  write_text(path, checkpoint_json(model).dump(2) + "\n");
}

FittedModel load_checkpoint(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

std::string workspace_bytes(const InfluenceWorkspace& ws) {
  Writer payload;
  payload.put_string(checkpoint_json(ws.model()).dump());
  const Dataset& train = ws.train();
  payload.put<std::uint64_t>(train.size());
  payload.put<std::int32_t>(train.dims());
  payload.put<std::int32_t>(train.label_count());
  payload.put_doubles(train.features().data(), static_cast<std::size_t>(train.features().size()));
  for (const int y : train.labels()) payload.put<std::int32_t>(y);
  for (const auto original : train.original_labels()) payload.put<std::int64_t>(original);
  payload.put<double>(ws.damping());
  payload.put<double>(ws.sigma_max());
  const auto w = static_cast<std::size_t>(ws.hessian_inverse().rows());
  payload.put<std::uint64_t>(w);
  payload.put_doubles(ws.hessian_inverse().data(), w * w);
  payload.put_doubles(ws.gradients().data(), static_cast<std::size_t>(ws.gradients().size()));
  payload.put_doubles(ws.provisional_losses().data(), static_cast<std::size_t>(ws.provisional_losses().size()));

  Writer blob;
  blob.str().append(kWorkspaceMagic);
  blob.put<std::uint32_t>(kWorkspaceVersion);
  blob.put<std::uint64_t>(payload.str().size());
  blob.str().append(payload.str());
  blob.put<std::uint64_t>(fnv1a64(payload.str()));
  return std::move(blob.str());
}

InfluenceWorkspace workspace_from_bytes(std::string_view bytes) {
  if (bytes.substr(0, kWorkspaceMagic.size()) != kWorkspaceMagic) throw FormatError("not a workspace blob");
  Reader header(bytes.substr(kWorkspaceMagic.size()));
  const auto version = header.get<std::uint32_t>();
  if (version != kWorkspaceVersion) {
    throw FormatError("unsupported workspace version " + std::to_string(version));
  }
  const auto size = header.get<std::uint64_t>();
  const std::size_t offset = kWorkspaceMagic.size() + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() != offset + size + sizeof(std::uint64_t)) throw FormatError("workspace blob has the wrong length");
  const auto payload_bytes = bytes.substr(offset, size);
  std::uint64_t checksum;
  std::memcpy(&checksum, bytes.data() + offset + size, sizeof checksum);
  if (checksum != fnv1a64(payload_bytes)) throw FormatError("workspace checksum mismatch");

  Reader payload(payload_bytes);
  json model_json;
  try {
    model_json = json::parse(payload.get_string());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("workspace model record: ") + e.what());
  }
  FittedModel model = checkpoint_from_json(model_json);
  const auto n = payload.get<std::uint64_t>();
  const auto d = payload.get<std::int32_t>();
  const auto labels = payload.get<std::int32_t>();
  if (d != model.spec.n_features || labels != model.spec.n_labels) throw FormatError("workspace shape mismatch");
  FeatureMatrix features(static_cast<Eigen::Index>(n), d);
  payload.get_doubles(features.data(), static_cast<std::size_t>(features.size()));
  std::vector<int> y(n);
  for (auto& v : y) v = payload.get<std::int32_t>();
  std::vector<std::int64_t> original(static_cast<std::size_t>(labels));
  for (auto& v : original) v = payload.get<std::int64_t>();
  const double damping = payload.get<double>();
  const double sigma_max = payload.get<double>();
  const auto w = payload.get<std::uint64_t>();
  if (w != static_cast<std::uint64_t>(model.spec.n_params())) throw FormatError("workspace shape mismatch");
  const auto wi = static_cast<Eigen::Index>(w);
  Matrix inverse(wi, wi);
  payload.get_doubles(inverse.data(), w * w);
  Matrix gradients(static_cast<Eigen::Index>(n), wi);
  payload.get_doubles(gradients.data(), static_cast<std::size_t>(gradients.size()));
  Vector losses(static_cast<Eigen::Index>(n));
  payload.get_doubles(losses.data(), n);
  if (!payload.done()) throw FormatError("workspace blob has trailing bytes");

  Dataset train = [&] {
    try {
      return Dataset(std::move(features), std::move(y), labels, std::move(original));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("workspace training data invalid: ") + e.what());
    }
  }();
  return InfluenceWorkspace::assemble(std::move(model), std::move(train), std::move(inverse), damping,
                                      std::move(gradients), std::move(losses), sigma_max);
}

void save_workspace(const InfluenceWorkspace& ws, const std::filesystem::path& path) {
  write_text(path, workspace_bytes(ws));
}

InfluenceWorkspace load_workspace(const std::filesystem::path& path) {
  return workspace_from_bytes(read_text(path));
}

json to_json(const PValueTable& table, std::size_t test_index, double epsilon) {
  json p = json::object();
  for (std::size_t label = 0; label < table.pvalues.size(); ++label) p[std::to_string(label)] = table.pvalues[label];
  const PredictionSet set = prediction_set(table, epsilon);
  json record = {{"schema_version", kRecordSchemaVersion},
                 {"test_index", test_index},
                 {"method", std::string(to_string(table.method))},
                 {"pvalues", p},
                 {"n_effective", table.n_effective},
                 {"epsilon", epsilon},
                 {"prediction_set", set.labels},
                 {"reliable", table.reliable},
                 {"refits", table.diagnostics.refits},
                 {"refits_not_converged", table.diagnostics.not_converged},
                 {"max_refit_gradient_norm", table.diagnostics.max_gradient_norm}};
  if (table.true_label) record["true_label"] = *table.true_label;
  return record;
}

json to_json(const DistanceSummary& d) {
  return {{"mean", d.mean}, {"max", d.max}, {"sd", d.sd}, {"count", d.count}};
}

json to_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}, {"count", m.count}}; }

json to_json(const WelchResult& w) {
  return {{"t", w.t}, {"df", w.df}, {"p_value", w.p_value}, {"reject", w.reject}};
}

json to_json(const EfficiencyCurve& curve) {
  return {{"epsilons", curve.epsilons},
          {"mean_set_size", curve.mean_set_size},
          {"n_test", curve.n_test},
          {"label_count", curve.label_count}};
}

void write_curve_csv(const EfficiencyCurve& curve, const std::filesystem::path& path) {
  std::string out = "epsilon,mean_set_size\n";
  char buf[64];
  for (std::size_t k = 0; k < curve.epsilons.size(); ++k) {
    auto r = std::to_chars(buf, buf + sizeof buf, curve.epsilons[k]);
    out.append(buf, r.ptr);
    out.push_back(',');
    r = std::to_chars(buf, buf + sizeof buf, curve.mean_set_size[k]);
    out.append(buf, r.ptr);
    out.push_back('\n');
  }
  write_text(path, out);
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IngestionError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace approxcp
