#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <string>
#include <string_view>

#include "approxcp/conformal.hpp"
#include "approxcp/erm.hpp"
#include "approxcp/influence.hpp"
#include "approxcp/metrics.hpp"

namespace approxcp {

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kWorkspaceVersion = 1;
inline constexpr int kRecordSchemaVersion = 1;
inline constexpr std::string_view kWorkspaceMagic = "APXCPWS\n";

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

// Checkpoint: JSON with spec, theta, flattening tag, fit diagnostics.
nlohmann::json checkpoint_json(const FittedModel& model);
FittedModel checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const FittedModel& model, const std::filesystem::path& path);
FittedModel load_checkpoint(const std::filesystem::path& path);

// Workspace blob layout (little-endian host order):
//   magic[8] | u32 version | u64 payload bytes | payload | u64 FNV-1a(payload)
// The payload holds the checkpoint JSON, the training data, damping,
// sigma_max, the inverse Hessian, the gradient cache and provisional losses.
std::string workspace_bytes(const InfluenceWorkspace& ws);
InfluenceWorkspace workspace_from_bytes(std::string_view bytes);
void save_workspace(const InfluenceWorkspace& ws, const std::filesystem::path& path);
InfluenceWorkspace load_workspace(const std::filesystem::path& path);

// One result record per (test point, method).
nlohmann::json to_json(const PValueTable& table, std::size_t test_index, double epsilon);
nlohmann::json to_json(const DistanceSummary& d);
nlohmann::json to_json(const MeanSd& m);
nlohmann::json to_json(const WelchResult& w);
nlohmann::json to_json(const EfficiencyCurve& curve);

// epsilon,mean_set_size
void write_curve_csv(const EfficiencyCurve& curve, const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace approxcp
