#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace attnlab {

inline constexpr std::size_t kDefaultDtwWindow = 4;

/// Banded dynamic time warping with L1 local cost. Paths are monotone with
/// unit steps and stay within |i - j| <= window. Throws InvalidArgument on
/// length mismatch.
double dtw_banded(std::span<const double> a, std::span<const double> b, std::size_t window);

/// DTW between z-normalized trends.
double dtw_distance(const TrendVector& a, const TrendVector& b,
                    std::size_t window = kDefaultDtwWindow);

/// Symmetric matrix of pairwise distances with zero diagonal.
struct DistanceMatrix {
  std::vector<RoadId> ids;
  Eigen::MatrixXd d;

  std::size_t size() const { return ids.size(); }
  double at(const RoadId& a, const RoadId& b) const;
  std::size_t index_of(const RoadId& id) const;  // throws NotFound
};

/// All pairwise distances between trends; `ids` and `trends` are aligned.
DistanceMatrix dtw_matrix(const std::vector<RoadId>& ids, const std::vector<TrendVector>& trends,
                          std::size_t window = kDefaultDtwWindow);

}  // namespace attnlab
