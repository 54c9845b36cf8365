#include "attnlab/snapshot.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "attnlab/csv_io.hpp"
#include "attnlab/error.hpp"
#include "attnlab/hash.hpp"

namespace attnlab {

namespace fs = std::filesystem;

nlohmann::json to_json(const SnapshotConfig& c) {
  return {{"dataset", c.dataset},
          {"split", {c.split.train, c.split.val, c.split.test}},
          {"dtw_window", c.dtw_window},
          {"clusters", c.clusters},
          {"max_clusters", c.max_clusters},
          {"seed", c.seed},
          {"horizon", c.horizon},
          {"head_cluster_windows", c.head_cluster_windows},
          {"max_lag", c.max_lag},
          {"histogram_bin", c.histogram_bin}};
}

SnapshotConfig snapshot_config_from_json(const nlohmann::json& j) {
  SnapshotConfig c;
  try {
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("split")) {
      const auto s = j.at("split").get<std::vector<double>>();
      if (s.size() != 3) throw InvalidArgument("split needs three fractions");
      c.split = {s[0], s[1], s[2]};
    }
    c.dtw_window = j.value("dtw_window", c.dtw_window);
    c.clusters = j.value("clusters", c.clusters);
    c.max_clusters = j.value("max_clusters", c.max_clusters);
    c.seed = j.value("seed", c.seed);
    c.horizon = j.value("horizon", c.horizon);
    c.head_cluster_windows = j.value("head_cluster_windows", c.head_cluster_windows);
    c.max_lag = j.value("max_lag", c.max_lag);
    c.histogram_bin = j.value("histogram_bin", c.histogram_bin);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("snapshot config: ") + e.what());
  }
  horizon_index(c.horizon);
  return c;
}

namespace {

struct SplitPoints {
  std::size_t train_end, test_begin;
};

SplitPoints split_points(std::size_t n, const SplitSpec& spec) {
  SpeedPanel probe;
  probe.roads = {"probe"};
  probe.series.assign(1, std::vector<double>(n, 0.0));
  probe.imputed.assign(1, std::vector<bool>(n, false));
  const auto s = chronological_split(probe, spec);
  return {s.train.length(), s.train.length() + s.val.length()};
}

nlohmann::json dtw_json(const DistanceMatrix& d, std::size_t window) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < d.d.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(d.d.cols()));
    for (Eigen::Index j = 0; j < d.d.cols(); ++j) row[static_cast<std::size_t>(j)] = d.d(i, j);
    rows.push_back(row);
  }
  return {{"window", window}, {"ids", d.ids}, {"distances", rows}};
}

DistanceMatrix dtw_from_json(const nlohmann::json& j) {
  DistanceMatrix d;
  d.ids = j.at("ids").get<std::vector<RoadId>>();
  const auto n = static_cast<Eigen::Index>(d.ids.size());
  d.d.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < n; ++k)
      d.d(i, k) = j.at("distances").at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
  return d;
}

nlohmann::json clusters_json(const ClusterAssignment& c, const ElbowResult& e) {
  nlohmann::json j = {{"k", c.k}, {"ids", c.ids}, {"labels", c.label},
                      {"elbow", {{"suggested_k", e.suggested_k}, {"curve", e.curve}, {"curvature", e.curvature}}}};
  j["warning"] = c.warning ? nlohmann::json(*c.warning) : nlohmann::json();
  return j;
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
double number_or_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

ErrorTable errors_from_json(const nlohmann::json& j) {
  ErrorTable t;
  for (const auto& r : j.at("roads")) {
    RoadErrors re;
    re.road = r.at("road_id").get<RoadId>();
    re.flagged = r.at("flagged").get<bool>();
    re.average_mae = number_or_nan(r.at("average_mae"));
    for (std::size_t h = 0; h < kHorizons.size(); ++h) {
      const auto& m = r.at("horizons").at(std::to_string(kHorizons[h]));
      re.by_horizon[h] = {number_or_nan(m.at("mae")), number_or_nan(m.at("rmse")), number_or_nan(m.at("mape")),
                          m.at("count").get<std::size_t>()};
    }
    t.rows.push_back(std::move(re));
  }
  return t;
}

ErrorCohorts cohorts_from_json(const nlohmann::json& j) {
  ErrorCohorts c;
  c.horizon = j.at("horizon").get<int>();
  c.q1 = j.at("q1").get<double>();
  c.q3 = j.at("q3").get<double>();
  c.low = j.at("low").get<std::vector<RoadId>>();
  c.high = j.at("high").get<std::vector<RoadId>>();
  c.excluded = j.at("excluded").get<std::vector<RoadId>>();
  return c;
}

nlohmann::json causality_json(const std::map<RoadId, std::vector<CausalityResult>>& all) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [effect, list] : all) {
    auto arr = nlohmann::json::array();
    for (const auto& c : list)
      arr.push_back({{"cause", c.cause},
                     {"lag", c.stat.lag},
                     {"f", c.stat.f_value},
                     {"df", {c.stat.df_num, c.stat.df_den}},
                     {"p", c.stat.p_value}});
    j[effect] = arr;
  }
  return j;
}

std::map<RoadId, std::vector<CausalityResult>> causality_from_json(const nlohmann::json& j) {
  std::map<RoadId, std::vector<CausalityResult>> out;
  for (const auto& [effect, arr] : j.items()) {
    auto& list = out[effect];
    for (const auto& c : arr) {
      CausalityResult r;
      r.cause = c.at("cause").get<RoadId>();
      r.effect = effect;
      r.stat.lag = c.at("lag").get<int>();
      r.stat.f_value = c.at("f").get<double>();
      r.stat.df_num = c.at("df").at(0).get<int>();
      r.stat.df_den = c.at("df").at(1).get<int>();
      r.stat.p_value = c.at("p").get<double>();
      list.push_back(std::move(r));
    }
  }
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFound("missing snapshot artifact " + p.filename().string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << bytes;
  if (!out) throw Error("failed writing " + p.string());
}

std::string snapshot_id(const std::map<std::string, std::string>& hashes) {
  std::string all;
  for (const auto& [name, h] : hashes) all += name + ':' + h + '\n';
  return sha256_hex(all).substr(0, 16);
}

}  // namespace

std::vector<std::size_t> test_window_origins(std::size_t n, const SplitSpec& split) {
  const auto sp = split_points(n, split);
  std::vector<std::size_t> out;
  for (std::size_t o = std::max<std::size_t>(sp.test_begin, kWindowSteps); o + kWindowSteps <= n; ++o) out.push_back(o);
  return out;
}

std::string build_snapshot(const SpeedPanel& filled, const ModelState& model, const SnapshotConfig& config,
                           const fs::path& out) {
  filled.validate_shape();
  for (std::size_t r = 0; r < filled.road_count(); ++r)
    for (std::size_t t = 0; t < filled.length(); ++t)
      if (filled.missing(r, t))
        throw InvalidArgument("panel has missing cells; fill it before building a snapshot");
  if (std::set<RoadId>(filled.roads.begin(), filled.roads.end()) !=
      std::set<RoadId>(model.network.roads().begin(), model.network.roads().end()))
    throw InvalidArgument("panel roads differ from the model's graph");
  if (fs::exists(out)) throw ConflictError("snapshot directory " + out.string() + " already exists");

  const auto n = filled.length();
  const auto sp = split_points(n, config.split);
  const auto N = filled.road_count();

  std::vector<TrendVector> trends;
  for (const auto& id : filled.roads) trends.push_back(daily_trend(filled, id));
  const auto dist = dtw_matrix(filled.roads, trends, config.dtw_window);
  const int k_max = std::min<int>(config.max_clusters, static_cast<int>(N) - 1);
  ElbowResult elbow;
  if (k_max >= 2) elbow = elbow_suggest(dist, k_max, config.seed);
  const int k = config.clusters > 0 ? config.clusters : std::max(2, elbow.suggested_k);
  auto clusters = spectral_cluster(dist, k, config.seed);
  clusters.inertia = elbow.curve;

  const auto origins = test_window_origins(n, config.split);
  if (origins.empty()) throw InvalidArgument("test split too short for a forecast window");
  const auto forecasts = predict(model, filled, origins).forecasts;
  const auto errors = compute_errors(forecasts, filled);
  const auto cohorts = quartile_cohorts(errors, config.horizon);

  nlohmann::json predicted = nlohmann::json::object();
  for (int h : kHorizons) {
    nlohmann::json per_road = nlohmann::json::object();
    for (std::size_t i = 0; i < forecasts.roads.size(); ++i) {
      const auto series = horizon_series(forecasts, i, h, n);
      auto arr = nlohmann::json::array();
      for (std::size_t t = sp.test_begin; t < n; ++t) arr.push_back(number_or_null(series[t]));
      per_road[forecasts.roads[i]] = arr;
    }
    predicted[std::to_string(h)] = per_road;
  }

  const auto train = filled.slice(0, sp.train_end);
  std::map<RoadId, std::vector<CausalityResult>> causality;
  for (const auto& effect : filled.roads) {
    std::vector<RoadId> others;
    for (const auto& c : filled.roads)
      if (c != effect) others.push_back(c);
    causality[effect] = causality_scan(effect, others, train, config.max_lag);
  }

  const auto sampled = sample_origins(origins, config.head_cluster_windows, config.seed);
  PredictOptions po;
  po.record_attention = true;
  const auto bundles = predict(model, filled, sampled, po).attention;
  const auto raw = head_cluster_raw(model, bundles, clusters, cohorts, config.horizon);

  std::map<std::string, std::string> files;
  {
    std::ostringstream s;
    write_speed_csv(filled, s);
    files["speeds.csv"] = s.str();
  }
  {
    std::ostringstream s;
    write_imputed_csv(filled, s);
    files["imputed.csv"] = s.str();
  }
  {
    std::ostringstream s;
    write_graph_csv(model.network, s);
    files["graph.csv"] = s.str();
  }
  {
    std::ostringstream s;
    write_coords_csv(model.network, s);
    files["coords.csv"] = s.str();
  }
  {
    std::ostringstream s;
    write_errors_csv(errors, s);
    files["errors.csv"] = s.str();
  }
  files["model.json"] = checkpoint_json(model).dump();
  files["dtw.json"] = dtw_json(dist, config.dtw_window).dump();
  files["clusters.json"] = clusters_json(clusters, elbow).dump();
  files["errors.json"] = to_json(errors).dump();
  files["cohorts.json"] = to_json(cohorts).dump();
  nlohmann::json tj = nlohmann::json::object();
  for (std::size_t r = 0; r < N; ++r) tj[filled.roads[r]] = {{"slots", trends[r].slots}, {"support", trends[r].support}};
  files["trends.json"] = tj.dump();
  files["causality.json"] = causality_json(causality).dump();
  files["predictions.json"] = nlohmann::json{{"first_step", sp.test_begin}, {"horizons", predicted}}.dump();
  files["headclusters.json"] = to_json(raw, Scale::Global).dump();

  std::map<std::string, std::string> hashes;
  for (const auto& [name, bytes] : files) hashes[name] = sha256_hex(bytes);
  const auto id = snapshot_id(hashes);
  nlohmann::json manifest = {
      {"schema_version", kSnapshotSchemaVersion},
      {"snapshot_id", id},
      {"dataset", config.dataset},
      {"config", to_json(config)},
      {"unit", filled.unit},
      {"roads", N},
      {"date_range", {{"start", format_iso8601(filled.time_at(0))}, {"end", format_iso8601(filled.time_at(n - 1))}}},
      {"train_end", sp.train_end},
      {"test_begin", sp.test_begin},
      {"test_range",
       {{"start", format_iso8601(filled.time_at(sp.test_begin))}, {"end", format_iso8601(filled.time_at(n - 1))}}},
      {"horizons", kHorizons},
      {"model", {{"graph_digest", model.network.digest()}, {"config", to_json(model.config)}}},
      {"artifacts", hashes}};
  files["manifest.json"] = manifest.dump(2);

  const fs::path parent = out.has_parent_path() ? out.parent_path() : fs::path(".");
  fs::create_directories(parent);
  const fs::path tmp = parent / ("." + out.filename().string() + ".tmp-" + id);
  fs::remove_all(tmp);
  try {
    fs::create_directory(tmp);
    for (const auto& [name, bytes] : files) write_file(tmp / name, bytes);
    fs::rename(tmp, out);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  return id;
}

Snapshot load_snapshot(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw NotFound("no snapshot at " + dir.string());
  Snapshot s;
  s.dir = dir;
  try {
    s.manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    if (s.manifest.at("schema_version").get<int>() != kSnapshotSchemaVersion)
      throw InvalidArgument("unsupported snapshot schema version");
    const auto hashes = s.manifest.at("artifacts").get<std::map<std::string, std::string>>();
    std::map<std::string, std::string> bytes;
    for (const auto& [name, h] : hashes) {
      bytes[name] = read_file(dir / name);
      if (sha256_hex(bytes[name]) != h) throw InvalidArgument("artifact " + name + " does not match its hash");
    }
    s.id = s.manifest.at("snapshot_id").get<std::string>();
    if (snapshot_id(hashes) != s.id) throw InvalidArgument("snapshot id does not match its artifacts");
    s.config = snapshot_config_from_json(s.manifest.at("config"));
    s.train_end = s.manifest.at("train_end").get<std::size_t>();
    s.test_begin = s.manifest.at("test_begin").get<std::size_t>();

    s.model = model_from_checkpoint(nlohmann::json::parse(bytes.at("model.json")));
    {
      std::istringstream in(bytes.at("speeds.csv"));
      s.panel = load_speed_csv(in).reordered(s.model.network.roads());
      s.panel.unit = s.manifest.at("unit").get<std::string>();
      std::istringstream imp(bytes.at("imputed.csv"));
      read_imputed_csv(imp, s.panel);
    }
    s.distances = dtw_from_json(nlohmann::json::parse(bytes.at("dtw.json")));
    const auto cj = nlohmann::json::parse(bytes.at("clusters.json"));
    s.clusters.k = cj.at("k").get<int>();
    s.clusters.ids = cj.at("ids").get<std::vector<RoadId>>();
    s.clusters.label = cj.at("labels").get<std::vector<int>>();
    if (!cj.at("warning").is_null()) s.clusters.warning = cj.at("warning").get<std::string>();
    s.elbow.suggested_k = cj.at("elbow").at("suggested_k").get<int>();
    s.elbow.curve = cj.at("elbow").at("curve").get<std::vector<double>>();
    s.elbow.curvature = cj.at("elbow").at("curvature").get<std::vector<double>>();
    s.clusters.inertia = s.elbow.curve;
    s.errors = errors_from_json(nlohmann::json::parse(bytes.at("errors.json")));
    s.cohorts = cohorts_from_json(nlohmann::json::parse(bytes.at("cohorts.json")));
    const auto tj = nlohmann::json::parse(bytes.at("trends.json"));
    for (const auto& id : s.panel.roads)
      s.trends.push_back({tj.at(id).at("slots").get<std::vector<double>>(),
                          tj.at(id).at("support").get<std::vector<std::size_t>>()});
    s.causality = causality_from_json(nlohmann::json::parse(bytes.at("causality.json")));
    const auto pj = nlohmann::json::parse(bytes.at("predictions.json"));
    const auto first = pj.at("first_step").get<std::size_t>();
    for (int h : kHorizons) {
      auto& per_road = s.predicted[h];
      for (const auto& id : s.panel.roads) {
        std::vector<double> v(s.panel.length(), std::numeric_limits<double>::quiet_NaN());
        const auto& arr = pj.at("horizons").at(std::to_string(h)).at(id);
        for (std::size_t k = 0; k < arr.size() && first + k < v.size(); ++k) v[first + k] = number_or_nan(arr[k]);
        per_road.push_back(std::move(v));
      }
    }
    s.head_clusters_raw = head_clusters_from_json(nlohmann::json::parse(bytes.at("headclusters.json")));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed snapshot: ") + e.what());
  }
  return s;
}

}  // namespace attnlab
