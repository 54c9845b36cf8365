#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace attnlab {

using RoadId = std::string;

struct Edge {
  RoadId from;
  RoadId to;
  double weight = 1.0;
};

struct Coordinate {
  double lat = 0.0;
  double lon = 0.0;
};

/// Directed road graph. Road order is significant: it fixes the row order of
/// every per-road tensor in the model.
class RoadNetwork {
 public:
  RoadNetwork() = default;
  RoadNetwork(std::vector<RoadId> roads, std::vector<Edge> edges,
              std::map<RoadId, Coordinate> coordinates = {});

  const std::vector<RoadId>& roads() const { return roads_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::map<RoadId, Coordinate>& coordinates() const { return coords_; }
  std::size_t size() const { return roads_.size(); }

  std::optional<std::size_t> index_of(const RoadId& id) const;
  /// Throws NotFound.
  std::size_t require_index(const RoadId& id) const;

  /// Indices of roads with an edge into `road`, ascending.
  const std::vector<std::size_t>& in_neighbors(std::size_t road) const {
    return in_neighbors_[road];
  }

  std::optional<Coordinate> coordinate(const RoadId& id) const;

  /// Same graph with roads reordered; `order[k]` is the old index of new road k.
  RoadNetwork permuted(const std::vector<std::size_t>& order) const;

  /// Stable hex digest of roads and edges (coordinates excluded).
  std::string digest() const;

 private:
  std::vector<RoadId> roads_;
  std::vector<Edge> edges_;
  std::map<RoadId, Coordinate> coords_;
  std::map<RoadId, std::size_t> index_;
  std::vector<std::vector<std::size_t>> in_neighbors_;
};

}  // namespace attnlab
