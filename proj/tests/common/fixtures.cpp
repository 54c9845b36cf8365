#include "fixtures.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

using namespace attnlab;

namespace fixtures {

namespace {

struct Ar {
  double phi, sigma, state = 0.0;
  double next(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, sigma);
    state = phi * state + n(rng);
    return state;
  }
};

Ar stationary(double phi, double sd) { return {phi, sd * std::sqrt(1 - phi * phi)}; }

double dip(double slot, double center, double width, double depth) {
  const double d = std::remainder(slot - center, static_cast<double>(kSlotsPerDay));
  return depth * std::exp(-0.5 * d * d / (width * width));
}

}  // namespace

Distracted distracted_world(int triads, int days, std::size_t decouple_at, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t n = static_cast<std::size_t>(days) * kSlotsPerDay;
  constexpr int kLag = 3;
  Distracted w;
  for (int i = 0; i < triads; ++i) {
    w.parents.push_back(fmt::format("p{}", i));
    w.targets.push_back(fmt::format("t{}", i));
    w.distractors.push_back(fmt::format("x{}", i));
    w.fillers.push_back(fmt::format("f{}", i));
  }
  std::vector<RoadId> roads;
  for (int i = 0; i < triads; ++i)
    for (const auto* v : {&w.parents, &w.targets, &w.distractors, &w.fillers}) roads.push_back((*v)[static_cast<std::size_t>(i)]);
  std::vector<Edge> edges;
  for (int i = 0; i < triads; ++i) {
    const auto k = static_cast<std::size_t>(i);
    edges.push_back({w.distractors[k], w.targets[k], 1.0});
    edges.push_back({w.fillers[k], w.parents[k], 0.5});
  }
  w.network = RoadNetwork(roads, edges);

  w.panel.start = parse_iso8601("2024-03-04T00:00:00Z");
  w.panel.roads = roads;
  w.panel.series.assign(roads.size(), std::vector<double>(n));
  w.panel.imputed.assign(roads.size(), std::vector<bool>(n, false));
  for (int i = 0; i < triads; ++i) {
    const auto base = static_cast<std::size_t>(i) * 4;
    const double center = 84.0 + 36.0 * i;
    Ar parent = stationary(0.95, 5.0), loose = stationary(0.995, 5.0), filler = stationary(0.8, 3.5);
    Ar own = stationary(0.8, 0.7);
    std::vector<double> pf(n);
    for (std::size_t t = 0; t < n; ++t) {
      const double slot = static_cast<double>(t % kSlotsPerDay);
      pf[t] = parent.next(rng);
      const double lagged = t >= kLag ? pf[t - kLag] : 0.0;
      const double free_flow = 62.0 + 2.0 * i;
      const double main_profile = free_flow * (1.0 - dip(slot, center, 10.0, 0.35));
      const double x_profile = 66.0 * (1.0 - dip(slot, 230.0, 14.0, 0.25));
      const bool coupled = t < decouple_at;
      const double xf = coupled ? pf[t] : loose.next(rng);
      w.panel.series[base + 0][t] = main_profile + pf[t] + 0.3 * unit(rng);
      w.panel.series[base + 1][t] = main_profile + lagged + own.next(rng) + 0.3 * unit(rng);
      w.panel.series[base + 2][t] = x_profile + xf + (coupled ? 0.3 : 2.5) * unit(rng);
      w.panel.series[base + 3][t] = x_profile + filler.next(rng) + 1.0 * unit(rng);
    }
  }
  return w;
}

ErrorTable mae_table(const std::vector<std::pair<RoadId, double>>& maes) {
  ErrorTable t;
  for (const auto& [road, mae] : maes) {
    RoadErrors r;
    r.road = road;
    for (auto& m : r.by_horizon) {
      m.mae = mae;
      m.rmse = mae;
      m.count = 1;
    }
    r.average_mae = mae;
    t.rows.push_back(r);
  }
  return t;
}

}  // namespace fixtures
