#include <malloc.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "attnlab/clustering.hpp"
#include "attnlab/csv_io.hpp"
#include "attnlab/dtw.hpp"
#include "attnlab/enforcement.hpp"
#include "attnlab/error.hpp"
#include "attnlab/error_analytics.hpp"
#include "attnlab/granger.hpp"
#include "attnlab/server.hpp"
#include "attnlab/snapshot.hpp"
#include "attnlab/st_model.hpp"
#include "attnlab/synth.hpp"
#include "cli_support.hpp"

using namespace attnlab;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> g_argv;

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw NotFound("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& p, const nlohmann::json& j) { cli::write_text(p, j.dump(2) + "\n"); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct Common {
  std::uint64_t seed = 0;
  std::string out;
};

// ---- synth

struct SynthArgs {
  Common c;
  std::string config;
  std::string name = "synthetic";
};

void run_synth(const SynthArgs& a) {
  SynthConfig cfg;
  cli::Manifest m("synth", g_argv, a.c.seed);
  if (!a.config.empty()) {
    cfg = synth_config_from_json(read_json(a.config));
    m.input(a.config);
  }
  m.config(to_json(cfg));
  const auto res = synth_generate(cfg, a.c.seed);
  const fs::path out(a.c.out);
  cli::save_dataset({a.name, res.panel, res.network}, out);
  write_json(out / "truth.json", to_json(res.truth));
  for (const char* f : {"speeds.csv", "imputed.csv", "graph.csv", "coords.csv", "dataset.json", "truth.json"})
    m.output(out / f);
  m.write(out);
  fmt::print("{} roads x {} steps -> {}\n", res.panel.road_count(), res.panel.length(), out.string());
}

// ---- ingest

struct IngestArgs {
  Common c;
  std::string speeds, graph, coords, name;
  std::string unit = "km/h";
};

void run_ingest(const IngestArgs& a) {
  cli::Manifest m("ingest", g_argv, a.c.seed);
  m.input(a.speeds);
  m.input(a.graph);
  if (!a.coords.empty()) m.input(a.coords);
  auto raw = load_speed_csv(a.speeds);
  const auto net = load_graph_csv(a.graph, a.coords.empty() ? fs::path() : fs::path(a.coords), raw.roads);
  raw = raw.reordered(net.roads());
  std::size_t missing = 0;
  for (std::size_t r = 0; r < raw.road_count(); ++r)
    for (std::size_t t = 0; t < raw.length(); ++t) missing += raw.missing(r, t);
  auto filled = fill_missing(raw);
  filled.unit = a.unit;
  const fs::path out(a.c.out);
  const std::string name = a.name.empty() ? fs::path(a.speeds).stem().string() : a.name;
  cli::save_dataset({name, filled, net}, out);
  m.config({{"unit", a.unit}, {"name", name}});
  for (const char* f : {"speeds.csv", "imputed.csv", "graph.csv", "coords.csv", "dataset.json"}) m.output(out / f);
  m.write(out);
  fmt::print("{} roads x {} steps, {} cells filled -> {}\n", filled.road_count(), filled.length(), missing,
             out.string());
}

// ---- train

struct TrainArgs {
  Common c;
  std::string data, config;
  ModelConfig model;
  std::size_t eval_stride = 1;
  bool quiet = false;
};

void run_train(TrainArgs a) {
  cli::Manifest m("train", g_argv, a.c.seed);
  if (!a.config.empty()) {
    a.model = model_config_from_json(read_json(a.config));
    m.input(a.config);
  }
  a.model.seed = a.c.seed;
  a.model.validate();
  m.config(to_json(a.model));
  m.input(a.data);
  const auto d = cli::load_dataset(a.data);
  const auto split = chronological_split(d.panel, SplitSpec{});
  TrainReport report;
  const auto model = train(split.train, split.val, d.network, a.model, &report, {!a.quiet});

  const auto origins = [&] {
    const auto all = test_window_origins(d.panel.length(), SplitSpec{});
    std::vector<std::size_t> o;
    for (std::size_t i = 0; i < all.size(); i += std::max<std::size_t>(1, a.eval_stride)) o.push_back(all[i]);
    return o;
  }();
  const auto errors = compute_errors(predict(model, d.panel, origins).forecasts, d.panel);
  const auto ha = fit_historical_average(split.train);
  const auto ha_errors = compute_errors(historical_average_forecasts(ha, d.panel, origins), d.panel);
  auto mean_mae = [](const ErrorTable& t, std::size_t h) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : t.rows)
      if (std::isfinite(r.by_horizon[h].mae)) {
        s += r.by_horizon[h].mae;
        ++n;
      }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  };
  nlohmann::json eval = nlohmann::json::object();
  for (std::size_t h = 0; h < kHorizons.size(); ++h)
    eval[std::to_string(kHorizons[h])] = {{"model_mae", mean_mae(errors, h)},
                                          {"historical_average_mae", mean_mae(ha_errors, h)}};

  const fs::path out(a.c.out);
  fs::create_directories(out);
  save_checkpoint(model, out / "model.json");
  write_json(out / "train_report.json", {{"train_loss", report.train_loss},
                                         {"val_mae", report.val_mae},
                                         {"best_epoch", report.best_epoch},
                                         {"epochs_run", model.epochs_run},
                                         {"test_windows", origins.size()},
                                         {"evaluation", eval}});
  m.output(out / "model.json");
  m.output(out / "train_report.json");
  m.write(out);
  fmt::print("15-min MAE {:.3f} (historical average {:.3f}) -> {}\n", mean_mae(errors, 0), mean_mae(ha_errors, 0),
             out.string());
}

// ---- analyze

struct AnalyzeArgs {
  Common c;
  std::string data, model, target, candidates;
  std::size_t window = kDefaultDtwWindow;
  int k = 0, max_k = 8, max_lag = kDefaultMaxLag, horizon = kDefaultCohortHorizon;
};

DistanceMatrix distances_of(const cli::Dataset& d, std::size_t window) {
  std::vector<TrendVector> trends;
  for (const auto& id : d.panel.roads) trends.push_back(daily_trend(d.panel, id));
  return dtw_matrix(d.panel.roads, trends, window);
}

void run_analyze_dtw(const AnalyzeArgs& a) {
  cli::Manifest m("analyze dtw", g_argv, a.c.seed);
  m.input(a.data);
  m.config({{"window", a.window}});
  const auto d = cli::load_dataset(a.data);
  const auto dist = distances_of(d, a.window);
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < dist.d.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(dist.d.cols()));
    for (Eigen::Index j = 0; j < dist.d.cols(); ++j) row[static_cast<std::size_t>(j)] = dist.d(i, j);
    rows.push_back(row);
  }
  const fs::path out(a.c.out);
  fs::create_directories(out);
  write_json(out / "dtw.json", {{"ids", dist.ids}, {"window", a.window}, {"distances", rows}});
  m.output(out / "dtw.json");
  m.write(out);
  fmt::print("{} x {} DTW matrix -> {}\n", dist.size(), dist.size(), (out / "dtw.json").string());
}

void run_analyze_cluster(const AnalyzeArgs& a) {
  cli::Manifest m("analyze cluster", g_argv, a.c.seed);
  m.input(a.data);
  m.config({{"window", a.window}, {"k", a.k}, {"max_k", a.max_k}});
  const auto d = cli::load_dataset(a.data);
  const auto dist = distances_of(d, a.window);
  const int k_max = std::min<int>(a.max_k, static_cast<int>(dist.size()) - 1);
  ElbowResult elbow;
  if (k_max >= 2) elbow = elbow_suggest(dist, k_max, a.c.seed);
  const int k = a.k > 0 ? a.k : std::max(2, elbow.suggested_k);
  const auto cl = spectral_cluster(dist, k, a.c.seed);
  auto assignment = nlohmann::json::array();
  for (std::size_t i = 0; i < cl.ids.size(); ++i) assignment.push_back({{"id", cl.ids[i]}, {"cluster", cl.label[i]}});
  const fs::path out(a.c.out);
  fs::create_directories(out);
  write_json(out / "clusters.json",
             {{"k", k},
              {"assignment", assignment},
              {"elbow", {{"suggested_k", elbow.suggested_k}, {"curve", elbow.curve}, {"curvature", elbow.curvature}}},
              {"warning", cl.warning ? nlohmann::json(*cl.warning) : nlohmann::json(nullptr)}});
  m.output(out / "clusters.json");
  m.write(out);
  for (int c = 0; c < k; ++c) {
    std::string members;
    for (const auto& id : cl.members(c)) members += (members.empty() ? "" : " ") + id;
    fmt::print("cluster {}: {}\n", c, members);
  }
  if (elbow.suggested_k) fmt::print("elbow suggests k = {}\n", elbow.suggested_k);
}

void run_analyze_granger(const AnalyzeArgs& a) {
  cli::Manifest m("analyze granger", g_argv, a.c.seed);
  m.input(a.data);
  m.config({{"target", a.target}, {"candidates", a.candidates}, {"max_lag", a.max_lag}});
  const auto d = cli::load_dataset(a.data);
  d.panel.require_index(a.target);
  std::vector<RoadId> cands = split_list(a.candidates);
  if (cands.empty())
    for (const auto& id : d.panel.roads)
      if (id != a.target) cands.push_back(id);
  const auto train = chronological_split(d.panel, SplitSpec{}).train;
  auto results = nlohmann::json::array();
  for (const auto& c : cands) {
    try {
      const auto& cx = train.series[train.require_index(c)];
      const auto& ty = train.series[train.require_index(a.target)];
      const auto stat = granger_test(cx, ty, a.max_lag);
      fmt::print("{} -> {}: {}{}\n", c, a.target, format_granger(stat), stat.p_value < kSignificance ? "" : " (n.s.)");
      results.push_back({{"cause", c},
                         {"lag", stat.lag},
                         {"f", stat.f_value},
                         {"df", {stat.df_num, stat.df_den}},
                         {"p", stat.p_value},
                         {"text", format_granger(stat)}});
    } catch (const Untestable& e) {
      fmt::print("{} -> {}: untestable ({})\n", c, a.target, e.what());
    }
  }
  if (a.c.out.empty()) return;
  const fs::path out(a.c.out);
  fs::create_directories(out);
  write_json(out / "granger.json", {{"target", a.target}, {"results", results}});
  m.output(out / "granger.json");
  m.write(out);
}

void run_analyze_errors(const AnalyzeArgs& a) {
  cli::Manifest m("analyze errors", g_argv, a.c.seed);
  m.input(a.data);
  m.input(a.model);
  m.config({{"horizon", a.horizon}});
  const auto d = cli::load_dataset(a.data);
  const auto model = load_checkpoint(a.model);
  const auto origins = test_window_origins(d.panel.length(), SplitSpec{});
  const auto errors = compute_errors(predict(model, d.panel, origins).forecasts, d.panel);
  const auto cohorts = quartile_cohorts(errors, a.horizon);
  const fs::path out(a.c.out);
  fs::create_directories(out);
  {
    std::ofstream f(out / "errors.csv");
    write_errors_csv(errors, f);
  }
  write_json(out / "errors.json", to_json(errors));
  write_json(out / "cohorts.json", to_json(cohorts));
  for (const char* f : {"errors.csv", "errors.json", "cohorts.json"}) m.output(out / f);
  m.write(out);
  fmt::print("Q1 {:.3f} Q3 {:.3f} at {} min; {} low, {} high\n", cohorts.q1, cohorts.q3, cohorts.horizon,
             cohorts.low.size(), cohorts.high.size());
}

// ---- snapshot

struct SnapshotArgs {
  Common c;
  std::string data, model, dataset;
  int clusters = 0;
  int horizon = kDefaultCohortHorizon;
  std::size_t head_windows = kHeadClusterWindows;
};

void run_snapshot(const SnapshotArgs& a) {
  if (!fs::exists(a.model)) throw NotFound("checkpoint " + a.model + " does not exist");
  const auto d = cli::load_dataset(a.data);
  const auto model = load_checkpoint(a.model);
  SnapshotConfig cfg;
  cfg.dataset = a.dataset.empty() ? d.name : a.dataset;
  cfg.clusters = a.clusters;
  cfg.seed = a.c.seed;
  cfg.horizon = a.horizon;
  cfg.head_cluster_windows = a.head_windows;
  cli::Manifest m("snapshot", g_argv, a.c.seed);
  m.input(a.data);
  m.input(a.model);
  m.config(to_json(cfg));
  const auto id = build_snapshot(d.panel, model, cfg, a.c.out);
  m.output(fs::path(a.c.out) / "manifest.json");
  m.write(a.c.out);
  fmt::print("snapshot {} -> {}\n", id, a.c.out);
}

// ---- enforce

struct EnforceArgs {
  Common c;
  std::string snapshot, clusters;
  int k = kDefaultTargetsPerCluster;
  double alpha = kDefaultAlpha;
  int horizon = kDefaultCohortHorizon;
  bool mean_heads = false;
  std::string selection = "cohort";
  std::size_t stride = 1;
  std::size_t bins = 20;
};

void run_enforce(const EnforceArgs& a) {
  cli::Manifest m("enforce", g_argv, a.c.seed);
  const auto snap = load_snapshot(a.snapshot);
  m.input(fs::path(a.snapshot) / "manifest.json");
  std::vector<int> selected;
  for (const auto& s : split_list(a.clusters)) {
    try {
      selected.push_back(std::stoi(s));
    } catch (const std::exception&) {
      throw InvalidArgument("cluster ids must be integers: " + s);
    }
  }
  if (selected.empty()) throw InvalidArgument("--clusters needs at least one cluster id");
  PlanOptions po;
  po.k = a.k;
  po.alpha = a.alpha;
  po.horizon = a.horizon;
  po.per_head = !a.mean_heads;
  po.max_lag = snap.config.max_lag;
  if (a.selection == "cohort")
    po.selection = TargetSelection::Cohort;
  else if (a.selection == "top_percent")
    po.selection = TargetSelection::TopPercent;
  else
    throw InvalidArgument("--selection must be cohort or top_percent");
  m.config({{"clusters", selected},
            {"k", a.k},
            {"alpha", a.alpha},
            {"horizon", a.horizon},
            {"per_head", po.per_head},
            {"selection", a.selection},
            {"stride", a.stride},
            {"bins", a.bins}});
  const auto cohorts = a.horizon == snap.cohorts.horizon ? snap.cohorts : quartile_cohorts(snap.errors, a.horizon);
  const auto plan =
      plan_enforcement(snap.errors, cohorts, snap.clusters, snap.distances, snap.train_panel(), selected, po);
  const auto all = test_window_origins(snap.panel.length(), snap.config.split);
  std::vector<std::size_t> origins;
  for (std::size_t i = 0; i < all.size(); i += std::max<std::size_t>(1, a.stride)) origins.push_back(all[i]);
  AlternativeOptions ao;
  ao.histogram_bins = a.bins;
  const auto report = run_alternative_inference(snap.model, plan, snap.panel, origins, ao);

  const fs::path out(a.c.out);
  fs::create_directories(out);
  auto j = to_json(report);
  j["snapshot_id"] = snap.id;
  j["unit"] = snap.panel.unit;
  write_json(out / "report.json", j);
  {
    std::ofstream f(out / "enforcement.csv");
    write_enforcement_csv(report, f);
  }
  m.output(out / "report.json");
  m.output(out / "enforcement.csv");
  m.write(out);
  for (const auto& t : report.targets)
    fmt::print("{} (ref {}): {:.3f} -> {:.3f}\n", t.road, t.reference, t.mae_before[horizon_index(a.horizon)],
               t.mae_after[horizon_index(a.horizon)]);
  for (const auto& w : report.warnings) fmt::print(stderr, "warning: {}\n", w);
  fmt::print("mean MAE {:.3f} -> {:.3f}, {:.0f}% improved\n", report.mean_mae_before, report.mean_mae_after,
             100.0 * report.fraction_improved);
}

// ---- serve

struct ServeArgs {
  std::string snapshot;
  std::string bind = "127.0.0.1:8080";
  std::size_t workers = 2;
  std::size_t stride = 4;
};

HttpServer* g_server = nullptr;

void run_serve(const ServeArgs& a) {
  const auto colon = a.bind.rfind(':');
  if (colon == std::string::npos) throw InvalidArgument("--bind must be host:port");
  const std::string host = a.bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(a.bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw InvalidArgument("--bind port is not a number");
  }
  ServiceOptions so;
  so.workers = a.workers;
  so.enforce_stride = a.stride;
  SnapshotService service(load_snapshot(a.snapshot), so);
  HttpServer server(service);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  fmt::print("serving snapshot {} on {}:{}\n", service.snapshot().id, host, bound);
  std::fflush(stdout);
  server.run();
  g_server = nullptr;
}

// ---- export

struct ExportArgs {
  Common c;
  std::string report;
};

void run_export(const ExportArgs& a) {
  cli::Manifest m("export", g_argv, a.c.seed);
  m.input(a.report);
  const auto j = read_json(a.report);
  const auto& h = j.at("histogram");
  const auto edges = h.at("edges").get<std::vector<double>>();
  const auto before = h.at("before").get<std::vector<std::size_t>>();
  const auto after = h.at("after").get<std::vector<std::size_t>>();
  if (edges.size() != before.size() + 1 || before.size() != after.size())
    throw InvalidArgument("report histogram is malformed");
  const fs::path out(a.c.out);
  fs::create_directories(out);
  std::string csv = "bin_low,bin_high,before,after\n";
  for (std::size_t b = 0; b < before.size(); ++b)
    csv += fmt::format("{:.6f},{:.6f},{},{}\n", edges[b], edges[b + 1], before[b], after[b]);
  cli::write_text(out / "histogram.csv", csv);
  cli::write_text(out / "histogram.svg", cli::histogram_svg(edges, before, after, j.value("unit", "km/h")));
  m.output(out / "histogram.csv");
  m.output(out / "histogram.svg");
  m.write(out);
  fmt::print("mean AE {:.3f} -> {:.3f} (shift {:+.3f})\n", h.at("mean_before").get<double>(),
             h.at("mean_after").get<double>(), h.at("shift").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  g_argv.assign(argv, argv + argc);

  CLI::App app{"Attention analytics for spatio-temporal traffic forecasting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ATTNLAB_VERSION);

  auto add_common = [](CLI::App* sub, Common& c, bool out_required = true) {
    sub->add_option("--seed", c.seed, "Seed for every random choice")->default_val(0);
    auto* o = sub->add_option("--out,-o", c.out, "Output directory");
    if (out_required) o->required();
  };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic road network dataset");
  add_common(s_synth, synth.c);
  s_synth->add_option("--config", synth.config, "Generator config (JSON)")->check(CLI::ExistingFile);
  s_synth->add_option("--name", synth.name, "Dataset name");

  IngestArgs ingest;
  auto* s_ingest = app.add_subcommand("ingest", "Aggregate, validate and fill raw readings");
  add_common(s_ingest, ingest.c);
  s_ingest->add_option("--speeds", ingest.speeds, "timestamp,road_id,speed CSV")->required()->check(CLI::ExistingFile);
  s_ingest->add_option("--graph", ingest.graph, "from_id,to_id,weight CSV")->required()->check(CLI::ExistingFile);
  s_ingest->add_option("--coords", ingest.coords, "road_id,lat,lon CSV")->check(CLI::ExistingFile);
  s_ingest->add_option("--name", ingest.name, "Dataset name");
  s_ingest->add_option("--unit", ingest.unit, "Speed unit label");

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train the forecasting model");
  add_common(s_train, tr.c);
  s_train->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  s_train->add_option("--config", tr.config, "Model config (JSON); overrides the flags below")
      ->check(CLI::ExistingFile);
  s_train->add_option("--epochs", tr.model.epochs)->capture_default_str();
  s_train->add_option("--lr", tr.model.learning_rate)->capture_default_str();
  s_train->add_option("--heads", tr.model.heads)->capture_default_str();
  s_train->add_option("--width", tr.model.width)->capture_default_str();
  s_train->add_option("--ffn", tr.model.ffn_width)->capture_default_str();
  s_train->add_option("--encoder-layers", tr.model.encoder_layers)->capture_default_str();
  s_train->add_option("--decoder-layers", tr.model.decoder_layers)->capture_default_str();
  s_train->add_option("--batch", tr.model.batch_size)->capture_default_str();
  s_train->add_option("--patience", tr.model.patience)->capture_default_str();
  s_train->add_option("--windows-per-epoch", tr.model.windows_per_epoch, "0 = all")->capture_default_str();
  s_train->add_option("--eval-stride", tr.eval_stride, "Spacing of evaluated test windows")->capture_default_str();
  s_train->add_flag("--quiet", tr.quiet);

  AnalyzeArgs an;
  auto* s_an = app.add_subcommand("analyze", "Run one analysis");
  s_an->require_subcommand(1);
  auto* s_dtw = s_an->add_subcommand("dtw", "Pairwise DTW distances between daily trends");
  auto* s_cl = s_an->add_subcommand("cluster", "Spectral clustering of the DTW matrix");
  auto* s_gr = s_an->add_subcommand("granger", "Granger causality tests into a target road");
  auto* s_er = s_an->add_subcommand("errors", "Per-road test errors and quartile cohorts");
  for (auto* sub : {s_dtw, s_cl, s_gr, s_er}) {
    add_common(sub, an.c, sub != s_gr);
    sub->add_option("--data", an.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  }
  for (auto* sub : {s_dtw, s_cl}) sub->add_option("--window", an.window, "DTW band")->capture_default_str();
  s_cl->add_option("--k", an.k, "Clusters (0 = elbow suggestion)")->capture_default_str();
  s_cl->add_option("--max-k", an.max_k)->capture_default_str();
  s_gr->add_option("--target", an.target)->required();
  s_gr->add_option("--candidates", an.candidates, "Comma-separated causes (default: every other road)");
  s_gr->add_option("--max-lag", an.max_lag)->capture_default_str();
  s_er->add_option("--model", an.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  s_er->add_option("--horizon", an.horizon, "Cohort horizon in minutes")->capture_default_str();

  SnapshotArgs sn;
  auto* s_snap = app.add_subcommand("snapshot", "Build an immutable analysis snapshot");
  add_common(s_snap, sn.c);
  s_snap->add_option("--data", sn.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  s_snap->add_option("--model", sn.model, "Checkpoint")->required();
  s_snap->add_option("--dataset", sn.dataset, "Dataset name shown in the UI");
  s_snap->add_option("--clusters", sn.clusters, "Clusters (0 = elbow suggestion)")->capture_default_str();
  s_snap->add_option("--horizon", sn.horizon)->capture_default_str();
  s_snap->add_option("--head-windows", sn.head_windows, "Windows sampled for head-cluster matrices")
      ->capture_default_str();

  EnforceArgs en;
  auto* s_enf = app.add_subcommand("enforce", "Replace high-error roads' attention and re-run inference");
  add_common(s_enf, en.c);
  s_enf->add_option("--snapshot", en.snapshot)->required()->check(CLI::ExistingDirectory);
  s_enf->add_option("--clusters", en.clusters, "Comma-separated cluster ids")->required();
  s_enf->add_option("--k", en.k, "Targets per cluster")->capture_default_str();
  s_enf->add_option("--alpha", en.alpha, "DTW weight in the reference score")->capture_default_str();
  s_enf->add_option("--horizon", en.horizon)->capture_default_str();
  s_enf->add_flag("--mean-heads", en.mean_heads, "Enforce the head-mean row on every head");
  s_enf->add_option("--selection", en.selection, "cohort or top_percent")->capture_default_str();
  s_enf->add_option("--stride", en.stride, "Spacing of test windows")->capture_default_str();
  s_enf->add_option("--bins", en.bins, "Histogram bins")->capture_default_str();

  ServeArgs sv;
  auto* s_serve = app.add_subcommand("serve", "Serve a snapshot over HTTP");
  s_serve->add_option("--snapshot", sv.snapshot)->required()->check(CLI::ExistingDirectory);
  s_serve->add_option("--bind", sv.bind, "host:port")->capture_default_str();
  s_serve->add_option("--workers", sv.workers, "Enforcement worker threads")->capture_default_str();
  s_serve->add_option("--stride", sv.stride, "Default test-window spacing for enforcement jobs")
      ->capture_default_str();

  ExportArgs ex;
  auto* s_export = app.add_subcommand("export", "Before/after error histograms as CSV and SVG");
  add_common(s_export, ex.c);
  s_export->add_option("--report", ex.report, "report.json from enforce")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*s_synth) run_synth(synth);
    if (*s_ingest) run_ingest(ingest);
    if (*s_train) run_train(tr);
    if (*s_dtw) run_analyze_dtw(an);
    if (*s_cl) run_analyze_cluster(an);
    if (*s_gr) run_analyze_granger(an);
    if (*s_er) run_analyze_errors(an);
    if (*s_snap) run_snapshot(sn);
    if (*s_enf) run_enforce(en);
    if (*s_serve) run_serve(sv);
    if (*s_export) run_export(ex);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
