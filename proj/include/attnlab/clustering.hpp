#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnlab/dtw.hpp"

namespace attnlab {

struct ClusterAssignment {
  int k = 0;
  std::vector<RoadId> ids;
  std::vector<int> label;  // aligned with ids, values in [0, k)
  /// Elbow curve: inertia[j] is the value for k = j + 1. Empty unless the
  /// assignment came from elbow_suggest.
  std::vector<double> inertia;
  std::optional<std::string> warning;

  int label_of(const RoadId& id) const;  // throws NotFound
  std::vector<RoadId> members(int cluster) const;
};

/// Spectral clustering on a Gaussian affinity exp(-d^2 / (2 sigma^2)) with
/// sigma the median off-diagonal distance, using the k smallest eigenvectors
/// of the symmetric normalized Laplacian, row-normalized, then seeded
/// k-means++ with restarts. When every distance is zero all roads land in
/// cluster 0 and `warning` is set. Throws InvalidArgument unless 2 <= k < N.
ClusterAssignment spectral_cluster(const DistanceMatrix& d, int k, std::uint64_t seed = 0);

/// Within-cluster mean distance: mean of d over unordered pairs that share
/// a label. Zero when no such pair exists.
double within_cluster_mean(const DistanceMatrix& d, const std::vector<int>& labels);

struct ElbowResult {
  int suggested_k = 0;
  /// curve[j] belongs to k = j + 1 (k = 1 is the single-cluster baseline).
  std::vector<double> curve;
  std::vector<double> curvature;  // aligned with curve; 0 where undefined
};

/// Runs spectral_cluster for k = 2..k_max. The curve holds, for each k, the
/// lowest within-cluster mean seen over assignments with at most k labels,
/// so it never increases. Suggests the k with the largest second difference
/// of the curve normalized by its k = 1 value. Throws InvalidArgument unless
/// 2 <= k_max < N.
ElbowResult elbow_suggest(const DistanceMatrix& d, int k_max, std::uint64_t seed = 0);

/// Adjusted Rand index between two labelings of the same items.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace attnlab
