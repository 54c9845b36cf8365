#include "attnlab/server.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <httplib.h>

#include "attnlab/enforcement.hpp"
#include "attnlab/error.hpp"

namespace attnlab {

namespace {

Response json_response(int status, nlohmann::json body) {
  body["schema_version"] = kSnapshotSchemaVersion;
  return {status, body.dump()};
}

Response error_response(int status, const std::string& code, const std::string& message) {
  return json_response(status, {{"error", {{"code", code}, {"message", message}}}});
}

Response bad_request(const std::string& message) { return error_response(400, "bad_request", message); }
Response not_found(const std::string& message) { return error_response(404, "not_found", message); }

struct BadRequest : InvalidArgument {
  using InvalidArgument::InvalidArgument;
};

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < path.size()) {
    if (path[i] == '/') {
      ++i;
      continue;
    }
    const auto j = path.find('/', i);
    parts.push_back(path.substr(i, j == std::string::npos ? std::string::npos : j - i));
    if (j == std::string::npos) break;
    i = j;
  }
  return parts;
}

int parse_int(const std::string& name, const std::string& text) {
  int v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || p != text.data() + text.size()) throw BadRequest(name + " must be an integer");
  return v;
}

double parse_double(const std::string& name, const std::string& text) {
  double v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || p != text.data() + text.size() || !std::isfinite(v))
    throw BadRequest(name + " must be a number");
  return v;
}

int query_horizon(const Query& q, int fallback) {
  const auto it = q.find("horizon");
  const int h = it == q.end() ? fallback : parse_int("horizon", it->second);
  try {
    horizon_index(h);
  } catch (const InvalidArgument&) {
    throw BadRequest("horizon must be one of 15, 30, 45, 60");
  }
  return h;
}

// Grid index of a timestamp parameter: 400 when unparsable, 404 when off the panel.
std::size_t query_time(const SpeedPanel& panel, const std::string& name, const std::string& text) {
  Timestamp ts;
  try {
    ts = parse_iso8601(text);
  } catch (const ParseError&) {
    throw BadRequest(name + " is not an ISO-8601 UTC timestamp");
  }
  const auto t = panel.index_of_time(ts);
  if (!t) throw NotFound("timestamp " + text + " is not on the snapshot grid");
  return *t;
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string cohort_of(const ErrorCohorts& c, const RoadId& id) {
  if (c.is_high(id)) return "high";
  if (c.is_low(id)) return "low";
  return "middle";
}

}  // namespace

SnapshotService::SnapshotService(Snapshot snapshot, ServiceOptions options)
    : snap_(std::move(snapshot)), options_(options) {
  test_origins_ = test_window_origins(snap_.panel.length(), snap_.config.split);
  const auto workers = std::max<std::size_t>(1, options_.workers);
  for (std::size_t i = 0; i < workers; ++i) workers_.emplace_back([this] { worker(); });
}

SnapshotService::~SnapshotService() {
  {
    std::lock_guard lock(jobs_mu_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  for (auto& w : workers_) w.join();
}

Response SnapshotService::handle(const std::string& method, const std::string& path, const Query& query,
                                 const std::string& body) {
  const auto parts = split_path(path);
  try {
    if (method == "GET") {
      if (parts.size() == 1 && parts[0] == "snapshot") return get_snapshot();
      if (parts.size() == 1 && parts[0] == "roads") return get_roads();
      if (parts.size() == 1 && parts[0] == "clusters") return get_clusters();
      if (parts.size() == 1 && parts[0] == "headclusters") return get_headclusters(query);
      if (parts.size() == 3 && parts[0] == "roads") {
        if (!snap_.model.network.index_of(parts[1])) return not_found("unknown road " + parts[1]);
        if (parts[2] == "trend") return get_trend(parts[1]);
        if (parts[2] == "series") return get_series(parts[1], query);
        if (parts[2] == "attention") return get_attention(parts[1], query);
        if (parts[2] == "causality") return get_causality(parts[1]);
      }
      if (parts.size() == 2 && parts[0] == "enforce") return get_job(parts[1]);
    } else if (method == "POST") {
      if (parts.size() == 1 && parts[0] == "enforce") return post_enforce(body);
    }
    return not_found("no endpoint " + method + " " + path);
  } catch (const BadRequest& e) {
    return bad_request(e.what());
  } catch (const NotFound& e) {
    return not_found(e.what());
  } catch (const InvalidArgument& e) {
    return bad_request(e.what());
  }
}

Response SnapshotService::get_snapshot() const {
  const auto& m = snap_.manifest;
  return json_response(200, {{"snapshot_id", snap_.id},
                             {"dataset", snap_.config.dataset},
                             {"unit", snap_.panel.unit},
                             {"roads", snap_.panel.road_count()},
                             {"date_range", m.at("date_range")},
                             {"test_range", m.at("test_range")},
                             {"step_seconds", kIntervalSeconds},
                             {"horizons", kHorizons},
                             {"default_horizon", snap_.config.horizon},
                             {"quartiles", {{"horizon", snap_.cohorts.horizon},
                                            {"q1", snap_.cohorts.q1},
                                            {"q3", snap_.cohorts.q3}}},
                             {"clusters", snap_.clusters.k},
                             {"heads", snap_.model.config.heads},
                             {"config", to_json(snap_.config)}});
}

Response SnapshotService::get_roads() const {
  auto roads = nlohmann::json::array();
  for (const auto& id : snap_.model.network.roads()) {
    nlohmann::json r = {{"id", id}};
    if (const auto c = snap_.model.network.coordinate(id))
      r["coordinates"] = {{"lat", c->lat}, {"lon", c->lon}};
    else
      r["coordinates"] = nullptr;
    r["cluster"] = snap_.clusters.label_of(id);
    nlohmann::json mae = nlohmann::json::object();
    if (const auto* e = snap_.errors.find(id)) {
      for (std::size_t h = 0; h < kHorizons.size(); ++h)
        mae[std::to_string(kHorizons[h])] = number_or_null(e->by_horizon[h].mae);
      r["average_mae"] = number_or_null(e->average_mae);
      r["flagged"] = e->flagged;
    }
    r["mae"] = mae;
    r["cohort"] = cohort_of(snap_.cohorts, id);
    const auto hist = speed_histogram(snap_.panel, id, snap_.config.histogram_bin);
    r["std"] = hist.stddev;
    r["histogram"] = to_json(hist);
    roads.push_back(std::move(r));
  }
  return json_response(200, {{"roads", roads}});
}

Response SnapshotService::get_trend(const RoadId& id) const {
  const auto& tr = snap_.trends[snap_.panel.require_index(id)];
  return json_response(200, {{"road", id}, {"slots", tr.slots}, {"support", tr.support}});
}

Response SnapshotService::get_series(const RoadId& id, const Query& q) const {
  const auto& panel = snap_.panel;
  const auto n = panel.length();
  const int horizon = query_horizon(q, snap_.config.horizon);
  std::size_t from = snap_.test_begin, to = n - 1;
  if (auto it = q.find("from"); it != q.end()) from = query_time(panel, "from", it->second);
  if (auto it = q.find("to"); it != q.end()) to = query_time(panel, "to", it->second);
  if (from > to) throw BadRequest("from is after to");

  const auto r = panel.require_index(id);
  std::vector<double> actual(n);
  for (std::size_t t = 0; t < n; ++t)
    actual[t] = panel.imputed[r][t] ? std::numeric_limits<double>::quiet_NaN() : panel.series[r][t];
  const auto& predicted = snap_.predicted.at(horizon)[r];

  auto a = nlohmann::json::array(), p = nlohmann::json::array(), imp = nlohmann::json::array();
  for (std::size_t t = from; t <= to; ++t) {
    a.push_back(panel.series[r][t]);
    imp.push_back(static_cast<bool>(panel.imputed[r][t]));
    p.push_back(number_or_null(predicted[t]));
  }
  nlohmann::json body = {{"road", id},
                         {"horizon", horizon},
                         {"from", format_iso8601(panel.time_at(from))},
                         {"to", format_iso8601(panel.time_at(to))},
                         {"step_seconds", kIntervalSeconds},
                         {"actual", a},
                         {"imputed", imp},
                         {"predicted", p}};
  if (auto it = q.find("cursor"); it != q.end()) {
    const auto t = query_time(panel, "cursor", it->second);
    nlohmann::json cur = {{"time", format_iso8601(panel.time_at(t))}};
    try {
      const auto w = windowed_ae(actual, predicted, t);
      cur["ae"] = w.ae;
      cur["std"] = w.stddev;
      cur["display"] = w.display();
    } catch (const InvalidArgument& e) {
      cur["ae"] = nullptr;
      cur["std"] = nullptr;
      cur["display"] = nullptr;
      cur["reason"] = e.what();
    }
    body["cursor"] = cur;
  }
  return json_response(200, body);
}

std::shared_ptr<const SnapshotService::AttentionEntry> SnapshotService::attention(std::size_t road,
                                                                                  std::size_t origin, int horizon) {
  const auto key = std::make_tuple(road, origin, horizon);
  {
    std::lock_guard lock(cache_mu_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  PredictOptions po;
  po.record_attention = true;
  auto res = predict(snap_.model, snap_.panel, {origin}, po);
  auto entry = std::make_shared<AttentionEntry>();
  entry->bundle = std::make_shared<const AttentionBundle>(std::move(res.attention.front()));
  entry->st = extract_st_attention(snap_.model, *entry->bundle, road, horizon);
  std::lock_guard lock(cache_mu_);
  cache_[key] = entry;
  return entry;
}

Response SnapshotService::get_attention(const RoadId& id, const Query& q) {
  const auto it = q.find("t");
  if (it == q.end()) throw BadRequest("t is required");
  const auto t = query_time(snap_.panel, "t", it->second);
  if (t + 1 < static_cast<std::size_t>(kWindowSteps)) throw BadRequest("t needs an hour of history");
  const int horizon = query_horizon(q, snap_.config.horizon);
  int head = -1;
  if (auto h = q.find("head"); h != q.end() && h->second != "mean") {
    head = parse_int("head", h->second);
    if (head < 0 || head >= snap_.model.config.heads) throw BadRequest("head out of range");
  }
  double threshold = kDefaultAttentionThreshold;
  if (auto th = q.find("threshold"); th != q.end()) {
    threshold = parse_double("threshold", th->second);
    if (threshold < 0 || threshold > 1) throw BadRequest("threshold must lie in [0, 1]");
  }
  std::string source = "encoder";
  if (auto s = q.find("source"); s != q.end()) source = s->second;
  if (source != "encoder" && source != "decoder") throw BadRequest("source must be 'encoder' or 'decoder'");

  const auto road = snap_.model.network.require_index(id);
  const auto entry = attention(road, origin_for_cursor(t), horizon);
  const auto arrows = source == "encoder"
                          ? attn_arrows(entry->st, threshold, head)
                          : decoder_arrows(snap_.model, *entry->bundle, road, horizon, threshold, head);
  return json_response(200, {{"road", id},
                             {"t", format_iso8601(snap_.panel.time_at(t))},
                             {"horizon", horizon},
                             {"head", head < 0 ? nlohmann::json("mean") : nlohmann::json(head)},
                             {"st", to_json(entry->st, head)},
                             {"arrows", to_json(arrows)}});
}

Response SnapshotService::get_causality(const RoadId& id) const {
  auto causes = nlohmann::json::array();
  if (auto it = snap_.causality.find(id); it != snap_.causality.end())
    for (const auto& c : it->second)
      causes.push_back({{"cause", c.cause},
                        {"lag", c.stat.lag},
                        {"f", c.stat.f_value},
                        {"df_num", c.stat.df_num},
                        {"df_den", c.stat.df_den},
                        {"p", c.stat.p_value},
                        {"label", format_granger(c.stat)}});
  return json_response(200, {{"road", id}, {"causes", causes}});
}

Response SnapshotService::get_clusters() const {
  auto assignment = nlohmann::json::array();
  for (std::size_t i = 0; i < snap_.clusters.ids.size(); ++i)
    assignment.push_back({{"id", snap_.clusters.ids[i]}, {"cluster", snap_.clusters.label[i]}});
  return json_response(200, {{"k", snap_.clusters.k},
                             {"assignment", assignment},
                             {"elbow",
                              {{"suggested_k", snap_.elbow.suggested_k},
                               {"curve", snap_.elbow.curve},
                               {"curvature", snap_.elbow.curvature}}},
                             {"warning", snap_.clusters.warning ? nlohmann::json(*snap_.clusters.warning)
                                                                : nlohmann::json(nullptr)}});
}

Response SnapshotService::get_headclusters(const Query& q) const {
  Scale scale = Scale::Global;
  if (auto it = q.find("scale"); it != q.end()) scale = parse_scale(it->second);
  return json_response(200, to_json(normalize(snap_.head_clusters_raw, scale), scale));
}

Response SnapshotService::post_enforce(const std::string& body) {
  nlohmann::json req;
  try {
    req = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    return bad_request("body is not valid JSON");
  }
  if (!req.is_object()) return bad_request("body must be a JSON object");
  static const std::vector<std::string> known{"clusters", "k", "alpha", "horizon", "per_head", "selection", "stride"};
  for (const auto& [key, _] : req.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) return bad_request("unknown field " + key);

  nlohmann::json norm;
  try {
    if (!req.contains("clusters") || !req["clusters"].is_array() || req["clusters"].empty())
      return bad_request("clusters must be a non-empty array");
    std::vector<int> clusters;
    for (const auto& c : req["clusters"]) {
      if (!c.is_number_integer()) return bad_request("cluster ids must be integers");
      const int v = c.get<int>();
      if (v < 0 || v >= snap_.clusters.k) return bad_request(fmt::format("cluster {} does not exist", v));
      clusters.push_back(v);
    }
    const int k = req.value("k", kDefaultTargetsPerCluster);
    if (k < 1) return bad_request("k must be at least 1");
    const double alpha = req.value("alpha", kDefaultAlpha);
    if (!(alpha >= 0 && alpha <= 1)) return bad_request("alpha must lie in [0, 1]");
    const int horizon = req.value("horizon", snap_.config.horizon);
    try {
      horizon_index(horizon);
    } catch (const InvalidArgument&) {
      return bad_request("horizon must be one of 15, 30, 45, 60");
    }
    const std::string selection = req.value("selection", std::string("cohort"));
    if (selection != "cohort" && selection != "top_percent")
      return bad_request("selection must be 'cohort' or 'top_percent'");
    const int stride = req.value("stride", static_cast<int>(options_.enforce_stride));
    if (stride < 1) return bad_request("stride must be at least 1");
    norm = {{"clusters", clusters},      {"k", k},
            {"alpha", alpha},            {"horizon", horizon},
            {"per_head", req.value("per_head", true)},
            {"selection", selection},    {"stride", stride}};
  } catch (const nlohmann::json::type_error& e) {
    return bad_request(std::string("malformed field: ") + e.what());
  }

  auto job = std::make_shared<Job>();
  job->request = norm;
  {
    std::lock_guard lock(jobs_mu_);
    job->id = fmt::format("job-{}", next_job_++);
    jobs_[job->id] = job;
    queue_.push_back(job);
  }
  jobs_cv_.notify_one();
  return json_response(202, {{"job", job->id}, {"status", "queued"}});
}

Response SnapshotService::get_job(const std::string& id) {
  std::lock_guard lock(jobs_mu_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return not_found("unknown job " + id);
  const auto& job = *it->second;
  nlohmann::json body = {{"job", job.id}, {"status", job.status}, {"request", job.request}};
  if (job.status == "done") body["report"] = job.report;
  if (job.status == "failed") body["error"] = {{"code", "job_failed"}, {"message", job.error}};
  return json_response(200, body);
}

bool SnapshotService::wait(const std::string& id) {
  std::unique_lock lock(jobs_mu_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return false;
  const auto job = it->second;
  jobs_cv_.wait(lock, [&] { return job->status == "done" || job->status == "failed"; });
  return true;
}

void SnapshotService::run_job(const std::shared_ptr<Job>& job) {
  nlohmann::json report;
  std::string error;
  try {
    const auto& r = job->request;
    PlanOptions po;
    po.k = r.at("k").get<int>();
    po.alpha = r.at("alpha").get<double>();
    po.horizon = r.at("horizon").get<int>();
    po.per_head = r.at("per_head").get<bool>();
    po.selection = r.at("selection").get<std::string>() == "cohort" ? TargetSelection::Cohort
                                                                     : TargetSelection::TopPercent;
    po.max_lag = snap_.config.max_lag;
    const auto cohorts = po.horizon == snap_.cohorts.horizon ? snap_.cohorts
                                                             : quartile_cohorts(snap_.errors, po.horizon);
    const auto plan = plan_enforcement(snap_.errors, cohorts, snap_.clusters, snap_.distances, snap_.train_panel(),
                                       r.at("clusters").get<std::vector<int>>(), po);
    const auto stride = r.at("stride").get<std::size_t>();
    std::vector<std::size_t> origins;
    for (std::size_t i = 0; i < test_origins_.size(); i += stride) origins.push_back(test_origins_[i]);
    report = to_json(run_alternative_inference(snap_.model, plan, snap_.panel, origins));
  } catch (const std::exception& e) {
    error = e.what();
  }
  {
    std::lock_guard lock(jobs_mu_);
    if (error.empty()) {
      job->report = std::move(report);
      job->status = "done";
    } else {
      job->error = error;
      job->status = "failed";
    }
  }
  jobs_cv_.notify_all();
}

void SnapshotService::worker() {
  for (;;) {
    std::shared_ptr<Job> job;
    {
      std::unique_lock lock(jobs_mu_);
      jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_ && queue_.empty()) return;
      job = queue_.front();
      queue_.pop_front();
      job->status = "running";
    }
    run_job(job);
  }
}

struct HttpServer::Impl {
  SnapshotService& service;
  httplib::Server server;
};

HttpServer::HttpServer(SnapshotService& service) : impl_(new Impl{service, {}}) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    Query q;
    for (const auto& [k, v] : req.params) q.emplace(k, v);
    const auto r = impl_->service.handle(req.method, req.path, q, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  impl_->server.Get(".*", handler);
  impl_->server.Post(".*", handler);
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw Error("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error(fmt::format("cannot bind {}:{}", host, port));
  return port;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace attnlab
