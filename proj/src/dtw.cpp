#include "attnlab/dtw.hpp"

#include <algorithm>
#include <limits>

#include "attnlab/error.hpp"

namespace attnlab {

double dtw_banded(std::span<const double> a, std::span<const double> b, std::size_t window) {
  if (a.size() != b.size())
    throw InvalidArgument("dtw: length mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  const std::size_t n = a.size();
  if (n == 0) return 0.0;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Two rolling rows indexed by j.
  std::vector<double> prev(n, kInf), cur(n, kInf);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(cur.begin(), cur.end(), kInf);
    const std::size_t lo = i > window ? i - window : 0;
    const std::size_t hi = std::min(n - 1, i + window);
    for (std::size_t j = lo; j <= hi; ++j) {
      const double cost = std::abs(a[i] - b[j]);
      if (i == 0 && j == 0) {
        cur[j] = cost;
        continue;
      }
      double best = kInf;
      if (i > 0) best = std::min(best, prev[j]);
      if (j > 0) best = std::min(best, cur[j - 1]);
      if (i > 0 && j > 0) best = std::min(best, prev[j - 1]);
      cur[j] = best + cost;
    }
    std::swap(prev, cur);
  }
  return prev[n - 1];
}

double dtw_distance(const TrendVector& a, const TrendVector& b, std::size_t window) {
  auto za = z_normalize(a.slots);
  auto zb = z_normalize(b.slots);
  return dtw_banded(za, zb, window);
}

double DistanceMatrix::at(const RoadId& a, const RoadId& b) const {
  return d(static_cast<Eigen::Index>(index_of(a)), static_cast<Eigen::Index>(index_of(b)));
}

std::size_t DistanceMatrix::index_of(const RoadId& id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw NotFound("road '" + id + "' not in distance matrix");
  return static_cast<std::size_t>(it - ids.begin());
}

DistanceMatrix dtw_matrix(const std::vector<RoadId>& ids, const std::vector<TrendVector>& trends,
                          std::size_t window) {
  if (ids.size() != trends.size()) throw InvalidArgument("dtw_matrix: ids and trends differ in size");
  const auto n = static_cast<Eigen::Index>(ids.size());
  std::vector<std::vector<double>> z;
  z.reserve(trends.size());
  for (const auto& t : trends) {
    if (t.slots.size() != trends.front().slots.size())
      throw InvalidArgument("dtw_matrix: trends differ in length");
    z.push_back(z_normalize(t.slots));
  }
  DistanceMatrix out{ids, Eigen::MatrixXd::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = dtw_banded(z[static_cast<std::size_t>(i)], z[static_cast<std::size_t>(j)], window);
      out.d(i, j) = v;
      out.d(j, i) = v;
    }
  }
  return out;
}

}  // namespace attnlab
