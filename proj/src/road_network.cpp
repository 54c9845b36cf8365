#include "attnlab/road_network.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "attnlab/error.hpp"
#include "attnlab/hash.hpp"

namespace attnlab {

RoadNetwork::RoadNetwork(std::vector<RoadId> roads, std::vector<Edge> edges,
                         std::map<RoadId, Coordinate> coordinates)
    : roads_(std::move(roads)), edges_(std::move(edges)), coords_(std::move(coordinates)) {
  for (std::size_t i = 0; i < roads_.size(); ++i) {
    if (!index_.emplace(roads_[i], i).second)
      throw InvalidArgument("duplicate road id '" + roads_[i] + "'");
  }
  in_neighbors_.assign(roads_.size(), {});
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& e : edges_) {
    auto from = index_of(e.from);
    auto to = index_of(e.to);
    if (!from || !to)
      throw InvalidArgument("edge " + e.from + "->" + e.to + " references an unknown road");
    if (!(e.weight >= 0.0))
      throw InvalidArgument("edge " + e.from + "->" + e.to + " has a negative weight");
    if (!seen.emplace(*from, *to).second)
      throw InvalidArgument("duplicate edge " + e.from + "->" + e.to);
    in_neighbors_[*to].push_back(*from);
  }
  for (auto& nb : in_neighbors_) std::sort(nb.begin(), nb.end());
  for (const auto& [id, _] : coords_) {
    if (!index_.count(id)) throw InvalidArgument("coordinate for unknown road '" + id + "'");
  }
}

std::optional<std::size_t> RoadNetwork::index_of(const RoadId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t RoadNetwork::require_index(const RoadId& id) const {
  auto idx = index_of(id);
  if (!idx) throw NotFound("unknown road '" + id + "'");
  return *idx;
}

std::optional<Coordinate> RoadNetwork::coordinate(const RoadId& id) const {
  auto it = coords_.find(id);
  if (it == coords_.end()) return std::nullopt;
  return it->second;
}

RoadNetwork RoadNetwork::permuted(const std::vector<std::size_t>& order) const {
  if (order.size() != roads_.size()) throw InvalidArgument("permutation size mismatch");
  std::vector<RoadId> roads;
  roads.reserve(order.size());
  for (auto old : order) roads.push_back(roads_.at(old));
  return RoadNetwork(std::move(roads), edges_, coords_);
}

std::string RoadNetwork::digest() const {
  std::ostringstream os;
  for (const auto& r : roads_) os << r << '\n';
  os << "--\n";
  for (const auto& e : edges_) os << e.from << ',' << e.to << ',' << fmt::format("{:.17g}", e.weight) << '\n';
  return sha256_hex(os.str());
}

}  // namespace attnlab
