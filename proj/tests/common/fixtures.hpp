#pragma once

#include <cstdint>
#include <vector>

#include "attnlab/error_analytics.hpp"
#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace fixtures {

/// Distracted-attention world. Triad i has a parent p<i>, a target t<i>
/// that follows the parent three steps later, and a distractor x<i> that
/// copies the parent until `decouple_at`, then moves independently. The
/// graph only links x<i> -> t<i>, so the target learns to read the parent
/// through the distractor. Fillers f<i> share the distractors' daily
/// profile with independent fluctuations and feed the parents through
/// uncoupled edges.
struct Distracted {
  attnlab::SpeedPanel panel;
  attnlab::RoadNetwork network;
  std::vector<attnlab::RoadId> parents, targets, distractors, fillers;
};

Distracted distracted_world(int triads, int days, std::size_t decouple_at, std::uint64_t seed);

/// Error table whose every horizon holds the given MAE.
attnlab::ErrorTable mae_table(const std::vector<std::pair<attnlab::RoadId, double>>& maes);

}  // namespace fixtures
