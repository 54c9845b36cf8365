#include "attnlab/csv_io.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {
namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    auto comma = line.find(',', pos);
    out.push_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

double parse_double(std::string_view s, std::size_t line, const char* what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    if (s == "nan" || s == "NaN" || s == "NA" || s == "") return std::numeric_limits<double>::quiet_NaN();
    throw ParseError(fmt::format("bad {} '{}'", what, s), line);
  }
  return v;
}

template <typename Fn>
void for_each_row(std::istream& in, std::initializer_list<std::string_view> header, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    std::string_view sv(line);
    if (!sv.empty() && sv.back() == '\r') sv.remove_suffix(1);
    if (sv.empty()) continue;
    auto fields = split_fields(sv);
    if (!header_seen) {
      header_seen = true;
      bool matches = fields.size() == header.size();
      std::size_t i = 0;
      for (auto h : header) matches = matches && fields[i++] == h;
      if (!matches) {
        std::string expected;
        for (auto h : header) expected += (expected.empty() ? "" : ",") + std::string(h);
        throw ParseError("expected header '" + expected + "'", lineno);
      }
      continue;
    }
    if (fields.size() != header.size())
      throw ParseError(fmt::format("expected {} fields, got {}", header.size(), fields.size()), lineno);
    fn(fields, lineno);
  }
  if (!header_seen) throw ParseError("empty file", 0);
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path.string());
  return in;
}

}  // namespace

std::vector<Reading> read_speed_readings(std::istream& in) {
  std::vector<Reading> out;
  for_each_row(in, {"timestamp", "road_id", "speed"}, [&](const auto& f, std::size_t line) {
    Reading r;
    try {
      r.time = parse_iso8601(f[0]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line);
    }
    if (f[1].empty()) throw ParseError("empty road_id", line);
    r.road = std::string(f[1]);
    r.speed = parse_double(f[2], line, "speed");
    out.push_back(std::move(r));
  });
  return out;
}

SpeedPanel load_speed_csv(std::istream& in) {
  auto readings = read_speed_readings(in);
  std::map<std::pair<std::int64_t, RoadId>, double> seen;
  for (const auto& r : readings) {
    auto key = std::make_pair(r.time.time_since_epoch().count(), r.road);
    auto [it, inserted] = seen.emplace(key, r.speed);
    if (!inserted) {
      const bool both_nan = std::isnan(it->second) && std::isnan(r.speed);
      if (!both_nan && it->second != r.speed)
        throw ConflictError(fmt::format("conflicting readings for road {} at {}: {} vs {}", r.road,
                                        format_iso8601(r.time), it->second, r.speed));
    }
  }
  // Exact duplicates count once.
  std::vector<Reading> unique;
  unique.reserve(seen.size());
  std::set<std::pair<std::int64_t, RoadId>> emitted;
  for (auto& r : readings) {
    if (emitted.emplace(r.time.time_since_epoch().count(), r.road).second) unique.push_back(std::move(r));
  }
  return aggregate_5min(unique);
}

SpeedPanel load_speed_csv(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  return load_speed_csv(in);
}

void write_speed_csv(const SpeedPanel& panel, std::ostream& out) {
  out << "timestamp,road_id,speed\n";
  for (std::size_t t = 0; t < panel.length(); ++t) {
    const auto ts = format_iso8601(panel.time_at(t));
    for (std::size_t r = 0; r < panel.road_count(); ++r) {
      const double v = panel.series[r][t];
      if (!std::isfinite(v)) continue;
      out << ts << ',' << panel.roads[r] << ',' << fmt::format("{:.17g}", v) << '\n';
    }
  }
}

void write_speed_csv(const SpeedPanel& panel, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_speed_csv(panel, out);
}

void write_imputed_csv(const SpeedPanel& panel, std::ostream& out) {
  out << "timestamp,road_id\n";
  for (std::size_t t = 0; t < panel.length(); ++t) {
    for (std::size_t r = 0; r < panel.road_count(); ++r) {
      if (panel.imputed[r][t]) out << format_iso8601(panel.time_at(t)) << ',' << panel.roads[r] << '\n';
    }
  }
}

void read_imputed_csv(std::istream& in, SpeedPanel& panel) {
  for_each_row(in, {"timestamp", "road_id"}, [&](const auto& f, std::size_t line) {
    Timestamp ts;
    try {
      ts = parse_iso8601(f[0]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line);
    }
    const auto t = panel.index_of_time(ts);
    if (!t) throw ParseError("imputed cell off the panel grid", line);
    const auto r = panel.index_of(std::string(f[1]));
    if (!r) throw ParseError("unknown road " + std::string(f[1]), line);
    panel.imputed[*r][*t] = true;
  });
}

RoadNetwork read_graph_csv(std::istream& graph, std::istream* coords, std::vector<RoadId> roads) {
  std::vector<Edge> edges;
  const bool collect = roads.empty();
  std::set<RoadId> known(roads.begin(), roads.end());
  for_each_row(graph, {"from_id", "to_id", "weight"}, [&](const auto& f, std::size_t line) {
    Edge e{std::string(f[0]), std::string(f[1]), parse_double(f[2], line, "weight")};
    if (!(e.weight >= 0.0)) throw ParseError("weight must be a nonnegative number", line);
    if (collect) {
      for (const auto& id : {e.from, e.to}) {
        if (known.insert(id).second) roads.push_back(id);
      }
    }
    edges.push_back(std::move(e));
  });
  std::map<RoadId, Coordinate> cmap;
  if (coords) {
    for_each_row(*coords, {"road_id", "lat", "lon"}, [&](const auto& f, std::size_t line) {
      RoadId id(f[0]);
      if (collect && known.insert(id).second) roads.push_back(id);
      cmap[id] = Coordinate{parse_double(f[1], line, "lat"), parse_double(f[2], line, "lon")};
    });
  }
  return RoadNetwork(std::move(roads), std::move(edges), std::move(cmap));
}

RoadNetwork load_graph_csv(const std::filesystem::path& graph, const std::filesystem::path& coords,
                           std::vector<RoadId> roads) {
  auto gin = open_or_throw(graph);
  if (coords.empty()) return read_graph_csv(gin, nullptr, std::move(roads));
  auto cin = open_or_throw(coords);
  return read_graph_csv(gin, &cin, std::move(roads));
}

void write_graph_csv(const RoadNetwork& net, std::ostream& out) {
  out << "from_id,to_id,weight\n";
  for (const auto& e : net.edges()) out << e.from << ',' << e.to << ',' << fmt::format("{:.17g}", e.weight) << '\n';
}

void write_coords_csv(const RoadNetwork& net, std::ostream& out) {
  out << "road_id,lat,lon\n";
  for (const auto& id : net.roads()) {
    if (auto c = net.coordinate(id)) out << id << ',' << fmt::format("{:.8f},{:.8f}", c->lat, c->lon) << '\n';
  }
}

}  // namespace attnlab
