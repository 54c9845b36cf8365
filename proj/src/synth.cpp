#include "attnlab/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {

RoadId synth_road_id(int index, int total) {
  const int digits = std::max(2, static_cast<int>(std::to_string(std::max(total - 1, 0)).size()));
  return fmt::format("r{:0{}d}", index, digits);
}

namespace {

std::vector<ClusterProfile> default_profiles(int clusters) {
  std::vector<ClusterProfile> out;
  const double span = 132.0 / std::max(clusters, 1);
  for (int c = 0; c < clusters; ++c) {
    const double main = 84.0 + span * c;
    ClusterProfile p;
    p.dips.push_back({main, 10.0, 0.40});
    p.dips.push_back({std::fmod(main + 144.0, 288.0), 18.0, 0.15});
    out.push_back(p);
  }
  return out;
}

double dip_shape(const ClusterProfile& p, double slot, double depth_scale) {
  double loss = 0.0;
  for (const auto& d : p.dips) {
    double dist = std::abs(slot - d.center);
    dist = std::min(dist, 288.0 - dist);
    loss += d.depth * std::exp(-0.5 * (dist / d.width) * (dist / d.width));
  }
  return std::max(0.05, 1.0 - depth_scale * loss);
}

}  // namespace

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    if (j.contains("roads_per_cluster")) {
      const auto& rpc = j.at("roads_per_cluster");
      if (rpc.is_array()) {
        c.roads_per_cluster = rpc.get<std::vector<int>>();
      } else {
        int clusters = j.value("clusters", 5);
        c.roads_per_cluster.assign(static_cast<std::size_t>(std::max(clusters, 0)), rpc.get<int>());
      }
    } else if (j.contains("clusters")) {
      c.roads_per_cluster.assign(static_cast<std::size_t>(std::max(j.at("clusters").get<int>(), 0)), 4);
    }
    c.days = j.value("days", c.days);
    c.start = j.value("start", c.start);
    c.unit = j.value("unit", c.unit);
    c.noise = j.value("noise", c.noise);
    c.fluctuation = j.value("fluctuation", c.fluctuation);
    c.ar = j.value("ar", c.ar);
    c.white = j.value("white", c.white);
    c.day_variation = j.value("day_variation", c.day_variation);
    c.free_flow_min = j.value("free_flow_min", c.free_flow_min);
    c.free_flow_max = j.value("free_flow_max", c.free_flow_max);
    c.lag = j.value("lag", c.lag);
    c.coupling = j.value("coupling", c.coupling);
    c.cross_edges = j.value("cross_edges", c.cross_edges);
    if (j.contains("profiles")) {
      for (const auto& pj : j.at("profiles")) {
        ClusterProfile p;
        for (const auto& dj : pj.at("dips"))
          p.dips.push_back({dj.at("center").get<double>(), dj.at("width").get<double>(),
                            dj.at("depth").get<double>()});
        c.profiles.push_back(std::move(p));
      }
    }
    if (j.contains("edges")) {
      for (const auto& ej : j.at("edges")) {
        CoupledEdge e;
        e.from = ej.at("from").get<std::string>();
        e.to = ej.at("to").get<std::string>();
        e.lag = ej.value("lag", c.lag);
        e.coupling = ej.value("coupling", c.coupling);
        e.weight = ej.value("weight", 1.0);
        c.edges.push_back(std::move(e));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("synth config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json j;
  j["roads_per_cluster"] = c.roads_per_cluster;
  j["days"] = c.days;
  j["start"] = c.start;
  j["unit"] = c.unit;
  j["noise"] = c.noise;
  j["fluctuation"] = c.fluctuation;
  j["ar"] = c.ar;
  j["white"] = c.white;
  j["day_variation"] = c.day_variation;
  j["free_flow_min"] = c.free_flow_min;
  j["free_flow_max"] = c.free_flow_max;
  j["lag"] = c.lag;
  j["coupling"] = c.coupling;
  j["cross_edges"] = c.cross_edges;
  if (!c.profiles.empty()) {
    auto& arr = j["profiles"] = nlohmann::json::array();
    for (const auto& p : c.profiles) {
      nlohmann::json pj;
      for (const auto& d : p.dips) pj["dips"].push_back({{"center", d.center}, {"width", d.width}, {"depth", d.depth}});
      arr.push_back(pj);
    }
  }
  if (!c.edges.empty()) {
    auto& arr = j["edges"] = nlohmann::json::array();
    for (const auto& e : c.edges)
      arr.push_back({{"from", e.from}, {"to", e.to}, {"lag", e.lag}, {"coupling", e.coupling}, {"weight", e.weight}});
  }
  return j;
}

nlohmann::json to_json(const GroundTruth& truth) {
  nlohmann::json j;
  j["roads"] = truth.roads;
  j["cluster"] = truth.cluster;
  j["causal_edges"] = nlohmann::json::array();
  for (const auto& e : truth.causal_edges)
    j["causal_edges"].push_back({{"from", e.from}, {"to", e.to}, {"lag", e.lag}, {"coupling", e.coupling}});
  return j;
}

SynthResult synth_generate(const SynthConfig& config, std::uint64_t seed) {
  int total = 0;
  for (int n : config.roads_per_cluster) {
    if (n <= 0) throw InvalidArgument("every cluster needs at least one road");
    total += n;
  }
  if (total == 0) throw InvalidArgument("synth config declares zero roads");
  if (config.days <= 0) throw InvalidArgument("synth config needs at least one day");
  if (config.noise < 0 || config.fluctuation < 0 || config.white < 0 || config.day_variation < 0)
    throw InvalidArgument("noise levels must be nonnegative");
  if (!(std::abs(config.ar) < 1.0)) throw InvalidArgument("ar coefficient must lie in (-1, 1)");
  if (config.lag < 0) throw InvalidArgument("lag must be nonnegative");
  if (config.free_flow_min <= 0 || config.free_flow_max < config.free_flow_min)
    throw InvalidArgument("invalid free-flow range");
  const int clusters = static_cast<int>(config.roads_per_cluster.size());
  auto profiles = config.profiles.empty() ? default_profiles(clusters) : config.profiles;
  if (static_cast<int>(profiles.size()) != clusters)
    throw InvalidArgument("profiles must list one entry per cluster");

  SynthResult out;
  auto& truth = out.truth;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(clusters));
  for (int c = 0, idx = 0; c < clusters; ++c) {
    for (int k = 0; k < config.roads_per_cluster[static_cast<std::size_t>(c)]; ++k, ++idx) {
      truth.roads.push_back(synth_road_id(idx, total));
      truth.cluster.push_back(c);
      members[static_cast<std::size_t>(c)].push_back(idx);
    }
  }
  std::map<RoadId, int> index;
  for (int i = 0; i < total; ++i) index[truth.roads[static_cast<std::size_t>(i)]] = i;

  std::vector<CoupledEdge> edges = config.edges;
  if (edges.empty()) {
    for (int c = 0; c < clusters; ++c) {
      const auto& m = members[static_cast<std::size_t>(c)];
      for (std::size_t k = 1; k < m.size(); ++k)
        edges.push_back({truth.roads[static_cast<std::size_t>(m[k - 1])],
                         truth.roads[static_cast<std::size_t>(m[k])], config.lag, config.coupling, 1.0});
    }
    if (config.cross_edges && clusters > 1) {
      for (int c = 0; c < clusters; ++c) {
        const auto& a = members[static_cast<std::size_t>(c)];
        const auto& b = members[static_cast<std::size_t>((c + 1) % clusters)];
        if (clusters == 2 && c == 1) break;
        edges.push_back({truth.roads[static_cast<std::size_t>(a.back())],
                         truth.roads[static_cast<std::size_t>(b.front())], config.lag, 0.0, 0.5});
      }
    }
  }
  // parents[i] = (parent index, lag, coupling) for coupled in-edges
  std::vector<std::vector<std::tuple<int, int, double>>> parents(static_cast<std::size_t>(total));
  std::vector<Edge> graph_edges;
  for (const auto& e : edges) {
    auto f = index.find(e.from), t = index.find(e.to);
    if (f == index.end() || t == index.end())
      throw InvalidArgument("synth edge " + e.from + "->" + e.to + " references an unknown road");
    if (e.lag < 0) throw InvalidArgument("synth edge " + e.from + "->" + e.to + " has a negative lag");
    graph_edges.push_back({e.from, e.to, e.weight});
    if (e.coupling != 0.0) {
      parents[static_cast<std::size_t>(t->second)].emplace_back(f->second, e.lag, e.coupling);
      truth.causal_edges.push_back(e);
    }
  }
  // Zero-lag couplings need a topological evaluation order.
  std::vector<int> order;
  {
    std::vector<int> indeg(static_cast<std::size_t>(total), 0);
    std::vector<std::vector<int>> children(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i)
      for (auto [p, lag, _] : parents[static_cast<std::size_t>(i)])
        if (lag == 0) {
          ++indeg[static_cast<std::size_t>(i)];
          children[static_cast<std::size_t>(p)].push_back(i);
        }
    std::vector<int> ready;
    for (int i = total - 1; i >= 0; --i)
      if (!indeg[static_cast<std::size_t>(i)]) ready.push_back(i);
    while (!ready.empty()) {
      int i = ready.back();
      ready.pop_back();
      order.push_back(i);
      for (int ch : children[static_cast<std::size_t>(i)])
        if (--indeg[static_cast<std::size_t>(ch)] == 0) ready.push_back(ch);
    }
    if (static_cast<int>(order.size()) != total) throw InvalidArgument("zero-lag coupling cycle");
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(config.free_flow_min, config.free_flow_max);

  std::vector<double> free_flow(static_cast<std::size_t>(total));
  for (auto& f : free_flow) f = uni(rng);
  std::vector<std::vector<double>> day_scale(static_cast<std::size_t>(clusters),
                                             std::vector<double>(static_cast<std::size_t>(config.days)));
  for (auto& row : day_scale)
    for (auto& g : row) g = std::max(0.0, 1.0 + config.noise * config.day_variation * gauss(rng));

  const Timestamp start = parse_iso8601(config.start);
  const std::size_t steps = static_cast<std::size_t>(config.days) * kSlotsPerDay;
  const double innov_sd = config.noise * config.fluctuation * std::sqrt(1.0 - config.ar * config.ar);
  const double own_share = 0.5;  // downstream roads keep part of their own fluctuation

  std::vector<std::vector<double>> fluct(static_cast<std::size_t>(total), std::vector<double>(steps, 0.0));
  std::vector<std::vector<double>> local(static_cast<std::size_t>(total), std::vector<double>(steps, 0.0));
  auto& panel = out.panel;
  panel.start = start;
  panel.unit = config.unit;
  panel.roads = truth.roads;
  panel.series.assign(static_cast<std::size_t>(total), std::vector<double>(steps, 0.0));
  panel.imputed.assign(static_cast<std::size_t>(total), std::vector<bool>(steps, false));
  for (std::size_t t = 0; t < steps; ++t) {
    const auto ts = start + std::chrono::seconds(static_cast<std::int64_t>(t) * kIntervalSeconds);
    const double slot = slot_of_day(ts);
    const auto day = t / kSlotsPerDay;
    for (int i : order) {
      const auto ui = static_cast<std::size_t>(i);
      const double prev = t ? local[ui][t - 1] : 0.0;
      local[ui][t] = config.ar * prev + innov_sd * gauss(rng);
      double e = local[ui][t];
      if (!parents[ui].empty()) {
        e *= own_share;
        for (auto [p, lag, coupling] : parents[ui]) {
          const auto up = static_cast<std::size_t>(p);
          if (t >= static_cast<std::size_t>(lag)) e += coupling * fluct[up][t - static_cast<std::size_t>(lag)];
        }
      }
      fluct[ui][t] = e;
      const int c = truth.cluster[ui];
      const double base =
          free_flow[ui] * dip_shape(profiles[static_cast<std::size_t>(c)], slot, day_scale[static_cast<std::size_t>(c)][day]);
      const double v = base + e + config.noise * config.white * gauss(rng);
      panel.series[ui][t] = std::max(0.0, v);
    }
  }

  std::map<RoadId, Coordinate> coords;
  for (int c = 0; c < clusters; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / clusters;
    const double clat = 35.0 + 0.05 * std::cos(angle), clon = 129.3 + 0.05 * std::sin(angle);
    const auto& m = members[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < m.size(); ++k)
      coords[truth.roads[static_cast<std::size_t>(m[k])]] =
          Coordinate{clat + 0.004 * static_cast<double>(k) * std::cos(angle + 1.0),
                     clon + 0.004 * static_cast<double>(k) * std::sin(angle + 1.0)};
  }
  out.network = RoadNetwork(truth.roads, std::move(graph_edges), std::move(coords));
  return out;
}

}  // namespace attnlab
