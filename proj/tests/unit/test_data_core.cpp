#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "attnlab/csv_io.hpp"
#include "attnlab/error.hpp"
#include "attnlab/hash.hpp"
#include "attnlab/speed_panel.hpp"
#include "attnlab/synth.hpp"

using namespace attnlab;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string day_csv(const std::vector<std::string>& roads, int days, int skip_slot = -1) {
  std::string s = "timestamp,road_id,speed\n";
  const auto start = parse_iso8601("2024-01-01T00:00:00Z");
  for (int t = 0; t < days * kSlotsPerDay; ++t) {
    const auto ts = format_iso8601(start + std::chrono::seconds(t * kIntervalSeconds));
    for (std::size_t r = 0; r < roads.size(); ++r) {
      if (t == skip_slot && r == 0) continue;
      s += fmt::format("{},{},{}\n", ts, roads[r], 50 + static_cast<int>(r));
    }
  }
  return s;
}

SpeedPanel one_road(std::vector<double> values, const char* start = "2024-01-01T00:00:00Z") {
  SpeedPanel p;
  p.start = parse_iso8601(start);
  p.roads = {"a"};
  p.imputed = {std::vector<bool>(values.size(), false)};
  p.series = {std::move(values)};
  return p;
}

}  // namespace

TEST_CASE("timestamps parse, format and map to slots") {
  const auto t = parse_iso8601("2024-01-01T09:00:00Z");
  CHECK(format_iso8601(t) == "2024-01-01T09:00:00Z");
  CHECK(parse_iso8601("2024-01-01T09:00") == t);
  CHECK(parse_iso8601("2024-01-01T09:00:00+00:00") == t);
  CHECK(slot_of_day(t) == 108);
  CHECK(day_of_week(t) == 0);  // 2024-01-01 is a Monday
  CHECK(day_of_week(parse_iso8601("2024-01-07T23:55:00Z")) == 6);
  CHECK_THROWS_AS(parse_iso8601("2024-01-01T09:00:00+09:00"), ParseError);
  CHECK_THROWS_AS(parse_iso8601("yesterday"), ParseError);
}

TEST_CASE("load_speed_csv builds complete grids and flags missing cells") {
  {
    std::istringstream in(day_csv({"a", "b"}, 1));
    const auto p = load_speed_csv(in);
    CHECK(p.road_count() == 2);
    CHECK(p.length() == 288);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t t = 0; t < 288; ++t) CHECK_FALSE(p.missing(r, t));
  }
  {
    std::istringstream in(day_csv({"a", "b"}, 1, 100));
    const auto p = load_speed_csv(in);
    CHECK(p.length() == 288);
    CHECK(p.missing(0, 100));
    CHECK_FALSE(p.missing(1, 100));
  }
}

TEST_CASE("load_speed_csv reports errors with line numbers") {
  std::istringstream bad("timestamp,road_id,speed\n2024-01-01T00:00:00Z,a,50\n2024-01-01T00:05:00Z,a,fast\n");
  try {
    load_speed_csv(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream header("time,road,speed\n");
  CHECK_THROWS_AS(load_speed_csv(header), ParseError);
  std::istringstream conflict("timestamp,road_id,speed\n2024-01-01T00:00:00Z,a,50\n2024-01-01T00:00:00Z,a,51\n");
  CHECK_THROWS_AS(load_speed_csv(conflict), ConflictError);
  std::istringstream dup("timestamp,road_id,speed\n2024-01-01T00:00:00Z,a,50\n2024-01-01T00:00:00Z,a,50\n");
  CHECK(load_speed_csv(dup).series[0][0] == 50.0);
}

TEST_CASE("speed csv round trips") {
  SpeedPanel p = one_road({50, kNaN, 61.5});
  std::ostringstream out;
  write_speed_csv(p, out);
  std::istringstream in(out.str());
  const auto q = load_speed_csv(in);
  REQUIRE(q.length() == 3);
  CHECK(q.series[0][0] == 50);
  CHECK(q.missing(0, 1));
  CHECK(q.series[0][2] == 61.5);
}

TEST_CASE("aggregate_5min averages within cells") {
  const auto t0 = parse_iso8601("2024-01-01T00:01:00Z");
  const std::vector<Reading> r{{t0, "a", 40},
                               {t0 + std::chrono::seconds(120), "a", 60},
                               {t0 + std::chrono::seconds(300), "a", 33},
                               {t0 + std::chrono::seconds(900), "a", 20}};
  const auto p = aggregate_5min(r);
  CHECK(p.start == parse_iso8601("2024-01-01T00:00:00Z"));
  REQUIRE(p.length() == 4);
  CHECK(p.series[0][0] == 50.0);
  CHECK(p.series[0][1] == 33.0);
  CHECK(p.missing(0, 2));
  CHECK(p.series[0][3] == 20.0);
}

TEST_CASE("fill_missing uses the weekday-slot mean") {
  // three Mondays at 09:00; the third is missing
  const std::size_t week = 7 * 288, nine = 108;
  std::vector<double> v(3 * week, 70.0);
  v[nine] = 50;
  v[week + nine] = 60;
  v[2 * week + nine] = kNaN;
  const auto filled = fill_missing(one_road(v));
  CHECK(filled.series[0][2 * week + nine] == doctest::Approx(55.0));
  CHECK(filled.imputed[0][2 * week + nine]);
  CHECK_FALSE(filled.imputed[0][nine]);

  v[2 * week + nine] = -1.0;
  CHECK(fill_missing(one_road(v)).series[0][2 * week + nine] == doctest::Approx(55.0));
  v[2 * week + nine] = std::numeric_limits<double>::infinity();
  CHECK(fill_missing(one_road(v)).series[0][2 * week + nine] == doctest::Approx(55.0));

  const auto complete = one_road({1, 2, 3});
  const auto same = fill_missing(complete);
  CHECK(same.series == complete.series);
  CHECK(same.imputed == complete.imputed);

  CHECK_THROWS_AS(fill_missing(one_road({kNaN, kNaN})), InvalidArgument);
}

TEST_CASE("chronological_split lengths") {
  auto lengths = [](std::size_t T) {
    const auto s = chronological_split(one_road(std::vector<double>(T, 1.0)), SplitSpec{});
    return std::array<std::size_t, 3>{s.train.length(), s.val.length(), s.test.length()};
  };
  CHECK(lengths(1000) == std::array<std::size_t, 3>{700, 100, 200});
  CHECK(lengths(1001) == std::array<std::size_t, 3>{700, 100, 201});
  CHECK_THROWS_AS(lengths(20), InvalidArgument);
  CHECK_THROWS_AS(chronological_split(one_road(std::vector<double>(1000, 1.0)), SplitSpec{0.8, 0.3, 0.2}),
                  InvalidArgument);
  const auto s = chronological_split(one_road(std::vector<double>(1000, 1.0)), SplitSpec{});
  CHECK(s.val.start == s.train.time_at(700));
}

TEST_CASE("daily_trend") {
  CHECK(daily_trend(one_road(std::vector<double>(576, 60.0)), "a").slots == std::vector<double>(288, 60.0));

  std::vector<double> v(576, 40.0);
  v[0] = 50;
  v[288] = 70;
  const auto tr = daily_trend(one_road(v), "a");
  CHECK(tr.slots[0] == doctest::Approx(60.0));
  CHECK(tr.support[0] == 2);
  CHECK_THROWS_AS(daily_trend(one_road(v), "zz"), NotFound);

  SynthConfig c;
  c.roads_per_cluster = {1};
  c.days = 7;
  c.noise = 0.0;
  c.profiles = {ClusterProfile{{RushDip{96.0, 8.0, 0.4}, RushDip{216.0, 8.0, 0.3}}}};
  const auto w = synth_generate(c, 1);
  const auto t = daily_trend(w.panel, w.panel.roads[0]);
  const double base = t.slots[0];
  CHECK(t.slots[96] < 0.7 * base);
  CHECK(t.slots[216] < 0.8 * base);
  CHECK(t.slots[160] > 0.95 * base);
}

TEST_CASE("z_normalize") {
  const auto z = z_normalize({1, 2, 3});
  CHECK(z[1] == doctest::Approx(0.0));
  CHECK(z[0] == doctest::Approx(-z[2]));
  CHECK(z_normalize({4, 4, 4}) == std::vector<double>{0, 0, 0});
}

TEST_CASE("synth_generate") {
  SynthConfig c;
  c.roads_per_cluster = {5, 5};
  c.days = 2;
  const auto a = synth_generate(c, 11), b = synth_generate(c, 11);
  CHECK(a.panel.series == b.panel.series);
  CHECK(a.network.digest() == b.network.digest());
  CHECK(synth_generate(c, 12).panel.series != a.panel.series);
  CHECK(a.panel.road_count() == 10);
  CHECK(a.truth.cluster.size() == 10);

  SynthConfig bad = c;
  bad.roads_per_cluster = {};
  CHECK_THROWS_AS(synth_generate(bad, 1), InvalidArgument);
  bad = c;
  bad.edges = {CoupledEdge{"r00", "nope", 1, 0.5, 1.0}};
  CHECK_THROWS_AS(synth_generate(bad, 1), InvalidArgument);
  CHECK(synth_config_from_json(to_json(c)).roads_per_cluster == c.roads_per_cluster);
  CHECK_THROWS_AS(synth_config_from_json(nlohmann::json{{"days", "many"}}), InvalidArgument);
}

TEST_CASE("graph csv") {
  std::istringstream g("from_id,to_id,weight\na,b,1\nb,c,0.5\n");
  std::istringstream coords("road_id,lat,lon\na,35.5,129.3\n");
  const auto net = read_graph_csv(g, &coords);
  CHECK(net.roads() == std::vector<RoadId>{"a", "b", "c"});
  CHECK(net.in_neighbors(1) == std::vector<std::size_t>{0});
  CHECK(net.coordinate("a")->lat == 35.5);
  CHECK_FALSE(net.coordinate("c").has_value());
  std::istringstream bad("from_id,to_id,weight\na,b,x\n");
  CHECK_THROWS_AS(read_graph_csv(bad, nullptr), ParseError);
}

TEST_CASE("imputed csv round trips and rejects unknown cells") {
  auto p = one_road({1, kNaN, 3});
  p = fill_missing(p);
  std::ostringstream out;
  write_imputed_csv(p, out);
  auto q = one_road({1, 2, 3});
  std::istringstream in(out.str());
  read_imputed_csv(in, q);
  CHECK(q.imputed == p.imputed);
  std::istringstream bad("timestamp,road_id\n2030-01-01T00:00:00Z,a\n");
  CHECK_THROWS_AS(read_imputed_csv(bad, q), ParseError);
}

TEST_CASE("sha256") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
