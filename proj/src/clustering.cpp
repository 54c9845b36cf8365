#include "attnlab/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "attnlab/error.hpp"

namespace attnlab {
namespace {

constexpr int kKMeansRestarts = 10;
constexpr int kKMeansMaxIter = 300;

struct KMeansFit {
  std::vector<int> labels;
  double sse = std::numeric_limits<double>::infinity();
};

KMeansFit kmeans_once(const Eigen::MatrixXd& x, int k, std::mt19937_64& rng) {
  const auto n = x.rows();
  Eigen::MatrixXd centers(k, x.cols());
  // k-means++ seeding
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = x.row(pick(rng));
  Eigen::VectorXd best_d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = best_d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0.0;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += best_d2(i);
        if (acc >= r) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    centers.row(c) = x.row(chosen);
    best_d2 = best_d2.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  KMeansFit fit;
  fit.labels.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < kKMeansMaxIter; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d2 = (x.row(i) - centers.row(c)).squaredNorm();
        if (d2 < bd) {
          bd = d2;
          best = c;
        }
      }
      if (fit.labels[static_cast<std::size_t>(i)] != best) {
        fit.labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(fit.labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(fit.labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)]) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }
  fit.sse = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    fit.sse += (x.row(i) - centers.row(fit.labels[static_cast<std::size_t>(i)])).squaredNorm();
  return fit;
}

// Relabel so clusters are numbered by first appearance.
std::vector<int> canonical_labels(const std::vector<int>& labels) {
  std::map<int, int> remap;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(remap.emplace(l, static_cast<int>(remap.size())).first->second);
  return out;
}

double median_offdiag(const Eigen::MatrixXd& d, bool positive_only) {
  std::vector<double> vals;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = i + 1; j < d.cols(); ++j)
      if (!positive_only || d(i, j) > 0) vals.push_back(d(i, j));
  if (vals.empty()) return 0.0;
  const auto mid = vals.size() / 2;
  std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(mid), vals.end());
  double m = vals[mid];
  if (vals.size() % 2 == 0) {
    double lower = *std::max_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(mid));
    m = 0.5 * (m + lower);
  }
  return m;
}

}  // namespace

int ClusterAssignment::label_of(const RoadId& id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw NotFound("road '" + id + "' not clustered");
  return label[static_cast<std::size_t>(it - ids.begin())];
}

std::vector<RoadId> ClusterAssignment::members(int cluster) const {
  std::vector<RoadId> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (label[i] == cluster) out.push_back(ids[i]);
  return out;
}

ClusterAssignment spectral_cluster(const DistanceMatrix& dm, int k, std::uint64_t seed) {
  const auto n = static_cast<Eigen::Index>(dm.size());
  if (k < 2 || k >= n) throw InvalidArgument("spectral_cluster: k must satisfy 2 <= k < N");
  ClusterAssignment out;
  out.k = k;
  out.ids = dm.ids;

  double sigma = median_offdiag(dm.d, false);
  if (sigma <= 0.0) sigma = median_offdiag(dm.d, true);
  if (sigma <= 0.0) {
    out.label.assign(dm.size(), 0);
    out.warning = "degenerate affinity: all distances are zero, returning a single cluster";
    return out;
  }

  Eigen::MatrixXd w = (-(dm.d.array().square()) / (2.0 * sigma * sigma)).exp().matrix();
  w.diagonal().setZero();
  Eigen::VectorXd deg = w.rowwise().sum();
  Eigen::VectorXd inv_sqrt = deg.unaryExpr([](double v) { return v > 1e-300 ? 1.0 / std::sqrt(v) : 0.0; });
  Eigen::MatrixXd lap = Eigen::MatrixXd::Identity(n, n) - inv_sqrt.asDiagonal() * w * inv_sqrt.asDiagonal();
  lap = 0.5 * (lap + lap.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lap);
  if (eig.info() != Eigen::Success) throw Error("spectral_cluster: eigendecomposition failed");
  Eigen::MatrixXd emb = eig.eigenvectors().leftCols(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = emb.row(i).norm();
    if (norm > 0) emb.row(i) /= norm;
  }

  std::mt19937_64 rng(seed);
  KMeansFit best;
  for (int r = 0; r < kKMeansRestarts; ++r) {
    auto fit = kmeans_once(emb, k, rng);
    if (fit.sse < best.sse - 1e-12) best = std::move(fit);
  }
  out.label = canonical_labels(best.labels);
  return out;
}

double within_cluster_mean(const DistanceMatrix& dm, const std::vector<int>& labels) {
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      if (labels[i] == labels[j]) {
        sum += dm.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        ++pairs;
      }
  return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

ElbowResult elbow_suggest(const DistanceMatrix& dm, int k_max, std::uint64_t seed) {
  const auto n = static_cast<int>(dm.size());
  if (k_max < 2) throw InvalidArgument("elbow_suggest: k_max must be at least 2");
  if (k_max >= n) throw InvalidArgument("elbow_suggest: k_max must be below the road count");
  ElbowResult out;
  out.curve.push_back(within_cluster_mean(dm, std::vector<int>(dm.size(), 0)));
  for (int k = 2; k <= k_max; ++k) {
    const auto assignment = spectral_cluster(dm, k, seed);
    const double v = within_cluster_mean(dm, assignment.label);
    out.curve.push_back(std::min(out.curve.back(), v));
  }
  const double scale = out.curve.front() > 0 ? out.curve.front() : 1.0;
  out.curvature.assign(out.curve.size(), 0.0);
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 2; k <= k_max; ++k) {
    const auto j = static_cast<std::size_t>(k - 1);
    const double next = k < k_max ? out.curve[j + 1] : out.curve[j];
    const double c = (out.curve[j - 1] - 2.0 * out.curve[j] + next) / scale;
    out.curvature[j] = c;
    if (c > best + 1e-12) {
      best = c;
      out.suggested_k = k;
    }
  }
  return out;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw InvalidArgument("adjusted_rand_index: size mismatch");
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> cont;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cont[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2.0; };
  double index = 0, sa = 0, sb = 0;
  for (const auto& [_, v] : cont) index += c2(v);
  for (const auto& [_, v] : ra) sa += c2(v);
  for (const auto& [_, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace attnlab
