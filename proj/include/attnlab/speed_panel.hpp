#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "attnlab/road_network.hpp"
#include "attnlab/time.hpp"

namespace attnlab {

/// Per-road speed series on a uniform 5-minute UTC grid.
///
/// Missing cells hold NaN. `imputed[r][t]` is set by fill_missing for every
/// cell it replaced; loaders leave it all-false.
struct SpeedPanel {
  Timestamp start{};
  std::string unit = "km/h";
  std::vector<RoadId> roads;
  std::vector<std::vector<double>> series;
  std::vector<std::vector<bool>> imputed;

  std::size_t length() const { return series.empty() ? 0 : series.front().size(); }
  std::size_t road_count() const { return roads.size(); }

  Timestamp time_at(std::size_t t) const {
    return start + std::chrono::seconds(static_cast<std::int64_t>(t) * kIntervalSeconds);
  }
  /// Index of `ts` on the grid, or nullopt when outside or off-grid.
  std::optional<std::size_t> index_of_time(Timestamp ts) const;

  std::optional<std::size_t> index_of(const RoadId& id) const;
  /// Throws NotFound.
  std::size_t require_index(const RoadId& id) const;

  bool missing(std::size_t road, std::size_t t) const {
    double v = series[road][t];
    return !std::isfinite(v) || v < 0.0;
  }

  /// Contiguous time slice [begin, end).
  SpeedPanel slice(std::size_t begin, std::size_t end) const;

  /// Same panel with roads reordered to `order` (ids). Throws NotFound.
  SpeedPanel reordered(const std::vector<RoadId>& order) const;

  /// Throws InvalidArgument when shapes disagree.
  void validate_shape() const;
};

struct Reading {
  Timestamp time;
  RoadId road;
  double speed = 0.0;
};

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct PanelSplit {
  SpeedPanel train;
  SpeedPanel val;
  SpeedPanel test;
};

/// 288-slot mean daily profile of one road.
struct TrendVector {
  std::vector<double> slots;
  std::vector<std::size_t> support;
};

/// Buckets readings into [t, t + 5 min) cells anchored at the 5-minute
/// boundary at or before the earliest reading, averaging within each cell.
/// Empty cells become NaN. Roads keep first-seen order unless `road_order`
/// is given.
SpeedPanel aggregate_5min(const std::vector<Reading>& readings,
                          const std::vector<RoadId>& road_order = {});

/// Replaces missing and explicitly erroneous (negative, non-finite) cells
/// with the road's mean at the same weekday and slot, falling back to the
/// road's global mean. Throws InvalidArgument naming roads with no data.
SpeedPanel fill_missing(const SpeedPanel& panel);

/// Chronological train/val/test split. Each of train and val takes
/// floor(fraction * T) steps; test takes the rest. Throws InvalidArgument
/// when fractions are invalid or any segment is shorter than `min_segment`.
PanelSplit chronological_split(const SpeedPanel& panel, const SplitSpec& spec,
                               std::size_t min_segment = 12);

/// Mean speed per slot of day. Imputed cells are used only for slots that
/// have no observed cell; slots with no cell at all take the road mean and
/// report zero support.
TrendVector daily_trend(const SpeedPanel& panel, const RoadId& road);

/// Zero-mean unit-variance copy; a constant input maps to all zeros.
std::vector<double> z_normalize(const std::vector<double>& values);

}  // namespace attnlab
