#include <doctest.h>

#include <cmath>
#include <random>

#include "attnlab/error.hpp"
#include "attnlab/granger.hpp"

using namespace attnlab;

namespace {

// Deterministic pair with a lag-2 dependence of y on x.
void reference_pair(std::vector<double>& x, std::vector<double>& y) {
  const int n = 200;
  x.assign(n, 0.0);
  y.assign(n, 0.0);
  for (int t = 0; t < n; ++t) {
    x[t] = std::sin(0.7 * t) + 0.3 * ((t * 7919) % 101) / 101.0;
    y[t] = std::cos(1.1 * t) * 0.4 + ((t * 104729) % 97) / 97.0 * 0.5;
  }
  for (int t = 2; t < n; ++t) y[t] += 0.5 * x[t - 2];
}

SpeedPanel panel_of(const std::vector<RoadId>& ids, const std::vector<std::vector<double>>& s) {
  SpeedPanel p;
  p.start = parse_iso8601("2024-01-01T00:00:00Z");
  p.roads = ids;
  p.series = s;
  for (const auto& v : s) p.imputed.emplace_back(v.size(), false);
  return p;
}

}  // namespace

TEST_CASE("fixed-lag F test matches statsmodels") {
  std::vector<double> x, y;
  reference_pair(x, y);
  // statsmodels grangercausalitytests ssr_ftest, frozen
  const auto s2 = granger_f_test(x, y, 2);
  CHECK(s2.df_num == 2);
  CHECK(s2.df_den == 193);
  CHECK(s2.f_value == doctest::Approx(86.76673314345972).epsilon(1e-9));
  CHECK(s2.p_value == doctest::Approx(1.3161780378256896e-27).epsilon(1e-6));
  const auto s3 = granger_f_test(x, y, 3);
  CHECK(s3.df_den == 190);
  CHECK(s3.f_value == doctest::Approx(64.6505369627809).epsilon(1e-9));
  const auto rev = granger_f_test(y, x, 3);
  CHECK(rev.f_value == doctest::Approx(3.2669284379013246).epsilon(1e-9));
  CHECK(rev.p_value == doctest::Approx(0.022481336557532504).epsilon(1e-9));
}

TEST_CASE("granger_test picks a lag and rejects bad inputs") {
  std::vector<double> x, y;
  reference_pair(x, y);
  const auto s = granger_test(x, y, 6);
  CHECK(s.lag >= 2);
  CHECK(s.lag <= 6);
  CHECK(s.p_value < 0.05);
  CHECK_THROWS_AS(granger_test(x, std::vector<double>(199, 0.0), 6), InvalidArgument);
  CHECK_THROWS_AS(granger_test(std::vector<double>(30, 0.0), std::vector<double>(30, 0.0), 12), InvalidArgument);
  CHECK_THROWS_AS(granger_test(std::vector<double>(100, 1.0), std::vector<double>(100, 2.0), 3), Untestable);
}

TEST_CASE("format_granger") {
  CHECK(format_granger({6, 16.2, 6, 268, 0.001}) == "F[6,268]=16.2, p=0.001");
  CHECK(format_granger({3, 2.04, 3, 100, 0.1134}) == "F[3,100]=2.0, p=0.113");
  CHECK(format_granger({3, 40.0, 3, 100, 1e-9}) == "F[3,100]=40.0, p<0.001");
}

TEST_CASE("causality_scan ranks the planted parent first and filters") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t T = 1500;
  std::vector<double> parent(T), weak(T), noise(T), target(T);
  for (std::size_t t = 0; t < T; ++t) {
    parent[t] = n(rng);
    weak[t] = n(rng);
    noise[t] = n(rng);
  }
  for (std::size_t t = 0; t < T; ++t)
    target[t] = (t >= 2 ? 0.9 * parent[t - 2] : 0.0) + (t >= 1 ? 0.2 * weak[t - 1] : 0.0) + n(rng);
  const auto p = panel_of({"p", "w", "z", "t"}, {parent, weak, noise, target});
  const auto scan = causality_scan("t", {"z", "w", "p", "t"}, p, 4);
  REQUIRE(!scan.empty());
  CHECK(scan.front().cause == "p");
  for (const auto& r : scan) {
    CHECK(r.stat.p_value < 0.05);
    CHECK(r.effect == "t");
    CHECK(r.cause != "t");
  }
  const auto none = causality_scan("z", {"w"}, panel_of({"w", "z"}, {weak, noise}), 4);
  for (const auto& r : none) CHECK(r.displayable());
  const auto flat = causality_scan("t", {"c"}, panel_of({"c", "t"}, {std::vector<double>(T, 1.0), target}), 4);
  CHECK(flat.empty());
}
