#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/attention_analytics.hpp"
#include "attnlab/clustering.hpp"
#include "attnlab/dtw.hpp"
#include "attnlab/error_analytics.hpp"
#include "attnlab/granger.hpp"
#include "attnlab/st_model.hpp"

namespace attnlab {

inline constexpr int kSnapshotSchemaVersion = 1;

struct SnapshotConfig {
  std::string dataset = "dataset";
  SplitSpec split{};
  std::size_t dtw_window = kDefaultDtwWindow;
  int clusters = 0;  // 0 = use the elbow suggestion
  int max_clusters = 8;
  std::uint64_t seed = 0;
  int horizon = kDefaultCohortHorizon;
  std::size_t head_cluster_windows = kHeadClusterWindows;
  int max_lag = kDefaultMaxLag;
  double histogram_bin = 10.0;
};

nlohmann::json to_json(const SnapshotConfig& c);
SnapshotConfig snapshot_config_from_json(const nlohmann::json& j);

/// Everything the service reads, loaded into memory.
struct Snapshot {
  std::filesystem::path dir;
  std::string id;
  nlohmann::json manifest;
  SnapshotConfig config;
  SpeedPanel panel;  // filled, full range
  ModelState model;
  std::size_t test_begin = 0;  // panel index of the first test step
  std::size_t train_end = 0;   // panel index one past the training split
  DistanceMatrix distances;
  ClusterAssignment clusters;
  ElbowResult elbow;
  ErrorTable errors;
  ErrorCohorts cohorts;
  std::vector<TrendVector> trends;                         // aligned with panel roads
  std::map<RoadId, std::vector<CausalityResult>> causality;  // effect -> causes
  std::map<int, std::vector<std::vector<double>>> predicted;  // horizon -> [road][panel step]
  HeadClusterMatrices head_clusters_raw;

  SpeedPanel train_panel() const { return panel.slice(0, train_end); }
  SpeedPanel test_panel() const { return panel.slice(test_begin, panel.length()); }
};

/// Origins of the full forecast windows of an n-step panel whose first
/// predicted step falls in the test split. Inputs may reach back into
/// the validation split.
std::vector<std::size_t> test_window_origins(std::size_t n, const SplitSpec& split);

/// Runs every analysis over a filled panel and a trained model and publishes
/// the artifacts into `out` atomically (written to a sibling temporary
/// directory, then renamed). Refuses to overwrite an existing directory and
/// leaves nothing behind on failure. Returns the snapshot id.
std::string build_snapshot(const SpeedPanel& filled, const ModelState& model, const SnapshotConfig& config,
                           const std::filesystem::path& out);

/// Loads and verifies every artifact hash. Throws InvalidArgument on a
/// mismatch and NotFound for a missing directory.
Snapshot load_snapshot(const std::filesystem::path& dir);

}  // namespace attnlab
