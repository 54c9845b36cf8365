#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace attnlab {

struct RushDip {
  double center = 96.0;  // slot of day
  double width = 12.0;   // Gaussian sigma in slots
  double depth = 0.4;    // fraction of free-flow speed lost at the center
};

struct ClusterProfile {
  std::vector<RushDip> dips;
};

struct CoupledEdge {
  RoadId from;
  RoadId to;
  int lag = 1;            // 5-minute steps
  double coupling = 0.8;  // 0 adds a graph edge without propagation
  double weight = 1.0;
};

/// Settings for the synthetic road network generator. See
/// docs/synth_config.md for the JSON form.
struct SynthConfig {
  std::vector<int> roads_per_cluster{4, 4, 4, 4, 4};
  int days = 14;
  std::string start = "2024-01-01T00:00:00Z";
  std::string unit = "km/h";
  double noise = 1.0;        // master scale for every stochastic component
  double fluctuation = 4.0;  // stationary std of the AR(1) congestion term
  double ar = 0.95;          // AR(1) coefficient per 5-minute step
  double white = 1.0;        // per-reading measurement noise std
  double day_variation = 0.25;  // relative std of daily dip depth
  double free_flow_min = 55.0;
  double free_flow_max = 75.0;
  int lag = 2;               // default lag along within-cluster chains
  double coupling = 0.8;
  bool cross_edges = true;   // uncoupled edges between neighbouring clusters
  std::vector<ClusterProfile> profiles;  // generated when empty
  std::vector<CoupledEdge> edges;        // replaces the default chains when set
};

struct GroundTruth {
  std::vector<RoadId> roads;
  std::vector<int> cluster;  // aligned with roads
  std::vector<CoupledEdge> causal_edges;
};

struct SynthResult {
  SpeedPanel panel;
  RoadNetwork network;
  GroundTruth truth;
};

/// Throws InvalidArgument on malformed configs.
SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthConfig& config);
nlohmann::json to_json(const GroundTruth& truth);

/// Deterministic for a fixed seed. Throws InvalidArgument on invalid configs
/// (no roads, negative lags, unknown road ids, zero-lag cycles).
SynthResult synth_generate(const SynthConfig& config, std::uint64_t seed);

/// Road ids used by the generator: "r00", "r01", ...
RoadId synth_road_id(int index, int total);

}  // namespace attnlab
