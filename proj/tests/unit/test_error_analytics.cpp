#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "attnlab/error.hpp"
#include "attnlab/error_analytics.hpp"
#include "fixtures.hpp"

using namespace attnlab;

namespace {

SpeedPanel ramp(std::size_t n, double base = 50.0) {
  SpeedPanel p;
  p.start = parse_iso8601("2024-01-01T00:00:00Z");
  p.roads = {"a", "b"};
  p.series.assign(2, std::vector<double>(n));
  p.imputed.assign(2, std::vector<bool>(n, false));
  for (std::size_t t = 0; t < n; ++t) {
    p.series[0][t] = base + static_cast<double>(t % 7);
    p.series[1][t] = base + 10.0;
  }
  return p;
}

Forecasts echo(const SpeedPanel& p, const std::vector<std::size_t>& origins, double bias) {
  Forecasts f;
  f.roads = p.roads;
  f.origins = origins;
  for (auto o : origins) {
    Eigen::MatrixXd v(2, 12);
    for (int r = 0; r < 2; ++r)
      for (int s = 0; s < 12; ++s) v(r, s) = p.series[static_cast<std::size_t>(r)][o + static_cast<std::size_t>(s)] + bias;
    f.values.push_back(v);
  }
  return f;
}

}  // namespace

TEST_CASE("horizon steps") {
  CHECK(horizon_step(15) == 3);
  CHECK(horizon_step(60) == 12);
  CHECK(horizon_step(5) == 1);
  CHECK_THROWS_AS(horizon_step(7), InvalidArgument);
  CHECK_THROWS_AS(horizon_step(65), InvalidArgument);
  CHECK(horizon_index(45) == 2);
  CHECK_THROWS_AS(horizon_index(20), InvalidArgument);
}

TEST_CASE("error_metrics") {
  const std::vector<double> a{10, 20};
  auto m = error_metrics(a, a);
  CHECK(m.mae == 0.0);
  CHECK(m.rmse == 0.0);
  CHECK(m.mape == 0.0);
  m = error_metrics(std::vector<double>{12, 22}, a);
  CHECK(m.mae == 2.0);
  CHECK(m.rmse == 2.0);
  m = error_metrics(std::vector<double>{11, 23}, a);
  CHECK(m.mae == doctest::Approx(2.0));
  CHECK(m.rmse == doctest::Approx(std::sqrt(5.0)));
  CHECK(m.mape == doctest::Approx((10.0 + 15.0) / 2));
  CHECK(m.count == 2);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m = error_metrics(std::vector<double>{11, nan}, a);
  CHECK(m.count == 1);
  CHECK(m.mae == 1.0);
}

TEST_CASE("compute_errors") {
  const auto p = ramp(100);
  const std::vector<std::size_t> origins{12, 30, 50};
  const auto zero = compute_errors(echo(p, origins, 0.0), p);
  REQUIRE(zero.rows.size() == 2);
  for (const auto& r : zero.rows)
    for (const auto& m : r.by_horizon) {
      CHECK(m.mae == 0.0);
      CHECK(m.rmse == 0.0);
      CHECK(m.mape == 0.0);
      CHECK(m.count == 3);
    }
  const auto biased = compute_errors(echo(p, origins, 2.0), p);
  CHECK(biased.mae("a", 15) == doctest::Approx(2.0));
  CHECK(biased.find("b")->by_horizon[3].rmse == doctest::Approx(2.0));
  CHECK(biased.find("b")->average_mae == doctest::Approx(2.0));
  CHECK_THROWS_AS(biased.mae("zz", 15), NotFound);

  auto masked = p;
  masked.imputed[0][12 + 2] = true;
  CHECK(compute_errors(echo(p, origins, 2.0), masked).find("a")->by_horizon[0].count == 2);

  const auto beyond = compute_errors(echo(p, {88}, 1.0), p.slice(0, 89));
  CHECK(beyond.find("a")->flagged);
}

TEST_CASE("quartile cohorts") {
  const auto t = fixtures::mae_table({{"r1", 1}, {"r2", 2}, {"r3", 3}, {"r4", 4}, {"r5", 5}, {"r6", 6}, {"r7", 7}, {"r8", 8}});
  const auto c = quartile_cohorts(t);
  CHECK(c.q1 == doctest::Approx(2.75));
  CHECK(c.q3 == doctest::Approx(6.25));
  CHECK(c.low == std::vector<RoadId>{"r1", "r2"});
  CHECK(c.high == std::vector<RoadId>{"r7", "r8"});
  CHECK(c.is_low("r1"));
  CHECK(c.is_high("r8"));
  const auto j = to_json(c);
  CHECK(j["q1"] == 2.75);
  CHECK(j["q3"] == 6.25);

  const auto flat = quartile_cohorts(fixtures::mae_table({{"a", 3}, {"b", 3}, {"c", 3}, {"d", 3}}));
  CHECK(flat.low.empty());
  CHECK(flat.high.empty());
  CHECK_THROWS_AS(quartile_cohorts(fixtures::mae_table({{"a", 1}, {"b", 2}, {"c", 3}})), InvalidArgument);

  CHECK(percentile_linear({1, 2, 3, 4, 5, 6, 7, 8}, 0.5) == 4.5);
  CHECK(mae_filter(t, 15, 4.2) == std::vector<RoadId>{"r5", "r6", "r7", "r8"});
  CHECK(top_error_fraction(t, 15, 0.1) == std::vector<RoadId>{"r8"});
  CHECK(top_error_fraction(t, 15, 0.25).size() == 2);
}

TEST_CASE("speed histogram") {
  auto h = speed_histogram(std::vector<double>(10, 55.0), 10.0);
  CHECK(h.heights == std::vector<double>{0, 0, 0, 0, 0, 1});
  CHECK(h.stddev == 0.0);
  h = speed_histogram(std::vector<double>{5, 5, 15, 15}, 10.0);
  CHECK(h.heights == std::vector<double>{1, 1});
  CHECK(h.stddev == doctest::Approx(std::sqrt(100.0 / 3)));

  std::vector<double> bimodal;
  for (int i = 0; i < 100; ++i) bimodal.push_back(i % 2 ? 22.0 + i % 3 : 71.0 - i % 3);
  h = speed_histogram(bimodal, 10.0);
  std::size_t modes = 0;
  for (auto v : h.heights) modes += v > 0.5;
  CHECK(modes == 2);
  CHECK(h.stddev > 20.0);
  CHECK_THROWS_AS(speed_histogram(bimodal, 0.0), InvalidArgument);
  CHECK_THROWS_AS(speed_histogram(ramp(10), "zz", 10.0), NotFound);
}

TEST_CASE("windowed AE") {
  std::vector<double> actual(30, 60.0), pred(30, 60.0);
  auto w = windowed_ae(actual, pred, 20);
  CHECK(w.ae == 0.0);
  CHECK(w.stddev == 0.0);
  CHECK(w.display() == "AE: 0.00 STD:0.00");
  for (std::size_t t = 0; t < 30; ++t) pred[t] = 61.24;
  actual[15] = 100.0;
  w = windowed_ae(actual, pred, 20);
  CHECK(w.ae == doctest::Approx((11 * 1.24 + 38.76) / 12));
  CHECK(w.stddev > 0.0);
  CHECK_THROWS_AS(windowed_ae(actual, pred, 10), InvalidArgument);
  WindowedAE fmt{1.24, 160.7};
  CHECK(fmt.display() == "AE: 1.24 STD:160.70");
}

TEST_CASE("horizon_series places predictions at their target step") {
  const auto p = ramp(60);
  const auto f = echo(p, {12, 13}, 1.0);
  const auto s = horizon_series(f, 0, 15, p.length());
  CHECK(std::isnan(s[13]));
  CHECK(s[14] == p.series[0][14] + 1.0);
  CHECK(s[15] == p.series[0][15] + 1.0);
  CHECK(std::isnan(s[16]));
}

TEST_CASE("historical average") {
  auto p = ramp(7 * 288 * 2);
  const auto ha = fit_historical_average(p);
  CHECK(ha.at(1, p.time_at(5)) == doctest::Approx(60.0));
  const auto f = historical_average_forecasts(ha, p, {300});
  REQUIRE(f.values.size() == 1);
  CHECK(f.values[0](1, 0) == doctest::Approx(60.0));
  std::ostringstream csv;
  write_errors_csv(compute_errors(f, p), csv);
  CHECK(csv.str().rfind("road_id", 0) == 0);
}
