#include <doctest.h>

#include <random>

#include "attnlab/clustering.hpp"
#include "attnlab/error.hpp"
#include "attnlab/synth.hpp"

using namespace attnlab;

namespace {

DistanceMatrix planted(const std::vector<int>& sizes, double noise, std::uint64_t seed, std::vector<int>* truth) {
  SynthConfig c;
  c.roads_per_cluster = sizes;
  c.days = 3;
  c.noise = noise;
  const auto w = synth_generate(c, seed);
  std::vector<TrendVector> trends;
  for (const auto& r : w.panel.roads) trends.push_back(daily_trend(w.panel, r));
  if (truth) *truth = w.truth.cluster;
  return dtw_matrix(w.panel.roads, trends);
}

}  // namespace

TEST_CASE("adjusted rand index") {
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == 1.0);
  // frozen from scikit-learn adjusted_rand_score
  CHECK(adjusted_rand_index({0, 0, 0, 1, 1, 1, 2, 2}, {0, 0, 1, 1, 1, 2, 2, 2}) ==
        doctest::Approx(0.23809523809523808).epsilon(1e-12));
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK_THROWS_AS(adjusted_rand_index({0}, {0, 1}), InvalidArgument);
}

TEST_CASE("spectral_cluster recovers separated groups deterministically") {
  std::vector<int> truth;
  const auto d = planted({5, 5}, 0.5, 4, &truth);
  const auto a = spectral_cluster(d, 2, 9);
  CHECK(a.k == 2);
  CHECK(adjusted_rand_index(a.label, truth) == 1.0);
  std::vector<int> relabeled = a.label;
  for (auto& l : relabeled) l = 1 - l;
  CHECK(adjusted_rand_index(relabeled, truth) == 1.0);
  CHECK(spectral_cluster(d, 2, 9).label == a.label);
  CHECK(a.label_of(a.ids[0]) == a.label[0]);
  CHECK(a.members(a.label[0]).size() == 5);
  CHECK_THROWS_AS(spectral_cluster(d, 1, 0), InvalidArgument);
  CHECK_THROWS_AS(spectral_cluster(d, 10, 0), InvalidArgument);
}

TEST_CASE("all-zero distances collapse to one cluster with a warning") {
  DistanceMatrix d{{"a", "b", "c"}, Eigen::MatrixXd::Zero(3, 3)};
  const auto a = spectral_cluster(d, 2, 0);
  CHECK(a.label == std::vector<int>{0, 0, 0});
  CHECK(a.warning.has_value());
}

TEST_CASE("within_cluster_mean") {
  DistanceMatrix d{{"a", "b", "c"}, Eigen::MatrixXd::Zero(3, 3)};
  d.d << 0, 2, 8, 2, 0, 4, 8, 4, 0;
  CHECK(within_cluster_mean(d, {0, 0, 1}) == 2.0);
  CHECK(within_cluster_mean(d, {0, 0, 0}) == doctest::Approx(14.0 / 3));
  CHECK(within_cluster_mean(d, {0, 1, 2}) == 0.0);
}

TEST_CASE("elbow_suggest") {
  SUBCASE("two planted clusters at zero noise") {
    const auto d = planted({5, 5}, 0.0, 2, nullptr);
    CHECK(elbow_suggest(d, 6).suggested_k == 2);
  }
  SUBCASE("fixture default of five clusters") {
    const auto d = planted(SynthConfig{}.roads_per_cluster, 0.0, 2, nullptr);
    CHECK(elbow_suggest(d, 8).suggested_k == 5);
  }
  SUBCASE("six clusters") {
    const auto d = planted({4, 4, 4, 4, 4, 4}, 0.0, 2, nullptr);
    CHECK(elbow_suggest(d, 8).suggested_k == 6);
  }
  SUBCASE("curve never increases on random data") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 5; ++rep) {
      const int n = 12;
      Eigen::MatrixXd pts(n, 2);
      for (int i = 0; i < n; ++i) pts.row(i) << u(rng), u(rng);
      DistanceMatrix d;
      d.d = Eigen::MatrixXd::Zero(n, n);
      for (int i = 0; i < n; ++i) {
        d.ids.push_back("r" + std::to_string(i));
        for (int j = 0; j < n; ++j) d.d(i, j) = (pts.row(i) - pts.row(j)).norm();
      }
      const auto e = elbow_suggest(d, 8, static_cast<std::uint64_t>(rep));
      REQUIRE(e.curve.size() == 8);
      for (std::size_t j = 1; j < e.curve.size(); ++j) CHECK(e.curve[j] <= e.curve[j - 1]);
      CHECK(e.suggested_k >= 2);
      CHECK(e.suggested_k <= 8);
    }
  }
  DistanceMatrix tiny{{"a", "b"}, Eigen::MatrixXd::Zero(2, 2)};
  CHECK_THROWS_AS(elbow_suggest(tiny, 2), InvalidArgument);
}
