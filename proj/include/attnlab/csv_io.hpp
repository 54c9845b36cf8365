#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace attnlab {

/// Reads `timestamp,road_id,speed` rows. Throws ParseError with the line
/// number on malformed rows.
std::vector<Reading> read_speed_readings(std::istream& in);

/// Parses readings, rejects conflicting duplicates (ConflictError) and
/// aggregates onto the 5-minute grid.
SpeedPanel load_speed_csv(const std::filesystem::path& path);
SpeedPanel load_speed_csv(std::istream& in);

/// Writes `timestamp,road_id,speed` rows; missing cells are skipped.
void write_speed_csv(const SpeedPanel& panel, std::ostream& out);
void write_speed_csv(const SpeedPanel& panel, const std::filesystem::path& path);

/// Writes `timestamp,road_id` rows for every imputed cell.
void write_imputed_csv(const SpeedPanel& panel, std::ostream& out);
/// Marks the listed cells as imputed. Throws ParseError for rows off the
/// panel's grid or roads.
void read_imputed_csv(std::istream& in, SpeedPanel& panel);

/// `from_id,to_id,weight` plus optional `road_id,lat,lon`. Roads are taken
/// from `roads` when non-empty, otherwise from the edge list in first-seen
/// order.
RoadNetwork load_graph_csv(const std::filesystem::path& graph,
                           const std::filesystem::path& coords = {},
                           std::vector<RoadId> roads = {});
RoadNetwork read_graph_csv(std::istream& graph, std::istream* coords,
                           std::vector<RoadId> roads = {});

void write_graph_csv(const RoadNetwork& net, std::ostream& out);
void write_coords_csv(const RoadNetwork& net, std::ostream& out);

}  // namespace attnlab
