// One PASS/FAIL line per acceptance criterion. Optional argv filters by name prefix.
#include <malloc.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "attnlab/attention_analytics.hpp"
#include "attnlab/clustering.hpp"
#include "attnlab/dtw.hpp"
#include "attnlab/enforcement.hpp"
#include "attnlab/error.hpp"
#include "attnlab/error_analytics.hpp"
#include "attnlab/granger.hpp"
#include "attnlab/server.hpp"
#include "attnlab/snapshot.hpp"
#include "attnlab/st_model.hpp"
#include "attnlab/synth.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace attnlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<double> uniform_seq(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

Outcome dtw_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::size_t pairs = 0, mismatches = 0;
  for (std::size_t n = 1; n <= 12; ++n) {
    const std::size_t count = n <= 8 ? 100 : n <= 10 ? 20 : 5;
    for (std::size_t p = 0; p < count; ++p) {
      const auto a = uniform_seq(rng, n), b = uniform_seq(rng, n);
      for (std::size_t w = 0; w <= 4; ++w) {
        ++pairs;
        if (dtw_banded(a, b, w) != oracles::dtw_enumerate(a, b, w)) ++mismatches;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 60.0,
          fmt::format("{} (pair, window) cases up to length 12, {} mismatches, {:.1f}s", pairs, mismatches, secs)};
}

Outcome dtw_monotone() {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  std::size_t violations = 0, l1_mismatches = 0;
  for (int p = 0; p < 1000; ++p) {
    const auto n = len(rng);
    const auto a = uniform_seq(rng, n), b = uniform_seq(rng, n);
    double l1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) l1 += std::abs(a[i] - b[i]);
    double prev = dtw_banded(a, b, 0);
    if (prev != l1) ++l1_mismatches;
    for (std::size_t w = 1; w <= n; ++w) {
      const double d = dtw_banded(a, b, w);
      if (d > prev) ++violations;
      prev = d;
    }
  }
  return {violations == 0 && l1_mismatches == 0,
          fmt::format("1000 pairs, {} increases with window, {} window-0 L1 mismatches", violations, l1_mismatches)};
}

bool rejects(std::span<const double> x, std::span<const double> y) {
  try {
    return granger_test(x, y).p_value < kSignificance;
  } catch (const Untestable&) {
    return false;
  }
}

Outcome granger() {
  const std::size_t n = 2000;
  int forward = 0, reverse = 0;
  double worst_affine = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = g(rng);
    for (std::size_t t = 0; t < n; ++t) y[t] = (t >= 2 ? 0.9 * x[t - 2] : 0.0) + g(rng);
    forward += rejects(x, y);
    reverse += rejects(y, x);

    if (seed < 20) {
      std::uniform_real_distribution<double> scale(0.1, 50.0), shift(-100.0, 100.0);
      const double a = seed == 0 ? 3.6 : (seed % 2 ? -1.0 : 1.0) * scale(rng), b = seed == 0 ? 0.0 : shift(rng);
      auto xs = x, ys = y;
      for (auto& v : xs) v = a * v + b;
      for (auto& v : ys) v = a * v - b;
      for (int lag : {1, 2, 5}) {
        const double f = granger_f_test(x, y, lag).f_value;
        worst_affine = std::max(worst_affine, std::abs(granger_f_test(xs, y, lag).f_value - f));
        worst_affine = std::max(worst_affine, std::abs(granger_f_test(x, ys, lag).f_value - f));
      }
      const double f = granger_test(x, y).f_value;
      worst_affine = std::max(worst_affine, std::abs(granger_test(xs, y).f_value - f));
      worst_affine = std::max(worst_affine, std::abs(granger_test(x, ys).f_value - f));
    }
  }
  int null_rejections = 0;
  for (int seed = 0; seed < 500; ++seed) {
    std::mt19937_64 rng(5000 + static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = g(rng);
    for (auto& v : y) v = g(rng);
    null_rejections += rejects(x, y);
  }
  const double power = forward / 100.0, rev = reverse / 100.0, cal = null_rejections / 500.0;
  const bool pass = power >= 0.95 && rev <= 0.15 && std::abs(cal - 0.05) <= 0.03 && worst_affine <= 1e-8;
  return {pass, fmt::format("power {:.2f}, reversed {:.2f}, null rejection {:.3f}, max affine |dF| {:.2e}", power, rev,
                            cal, worst_affine)};
}

DistanceMatrix trend_distances(const SpeedPanel& panel) {
  std::vector<TrendVector> trends;
  for (const auto& id : panel.roads) trends.push_back(daily_trend(panel, id));
  return dtw_matrix(panel.roads, trends);
}

Outcome clustering() {
  double worst = 1.0, sum = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    SynthConfig c;  // 5 clusters x 4 roads, noise 1
    const auto w = synth_generate(c, static_cast<std::uint64_t>(seed));
    const auto d = trend_distances(w.panel);
    const auto a = spectral_cluster(d, 5, static_cast<std::uint64_t>(seed));
    std::vector<int> truth;
    for (const auto& id : a.ids)
      truth.push_back(w.truth.cluster[static_cast<std::size_t>(
          std::find(w.truth.roads.begin(), w.truth.roads.end(), id) - w.truth.roads.begin())]);
    const double ari = adjusted_rand_index(a.label, truth);
    worst = std::min(worst, ari);
    sum += ari;
  }
  SynthConfig zero;
  zero.noise = 0.0;
  const auto w = synth_generate(zero, 0);
  const auto elbow = elbow_suggest(trend_distances(w.panel), 8, 0);
  return {worst >= 0.9 && elbow.suggested_k == 5,
          fmt::format("ARI min {:.3f} mean {:.3f} over 20 seeds; zero-noise elbow k = {}", worst, sum / 20,
                      elbow.suggested_k)};
}

Outcome attention_validity() {
  std::size_t rows = 0, bad_rows = 0, cells = 0, bad_cells = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(300 + static_cast<std::uint64_t>(trial));
    SynthConfig sc;
    sc.roads_per_cluster = {2 + static_cast<int>(rng() % 3), 1 + static_cast<int>(rng() % 3)};
    sc.days = 2;
    const auto w = synth_generate(sc, rng());
    ModelConfig mc;
    mc.heads = 1 + static_cast<int>(rng() % 3);
    mc.width = 4 * mc.heads;
    mc.ffn_width = 8;
    mc.encoder_layers = 1 + static_cast<int>(rng() % 2);
    mc.decoder_layers = 1 + static_cast<int>(rng() % 2);
    mc.seed = rng();
    const auto m = init_model(mc, w.network, w.panel);
    const auto origin = 12 + rng() % (w.panel.length() - 24);
    const auto res = predict(m, w.panel, {origin}, PredictOptions{true});
    const auto& b = res.attention.front();
    auto check = [&](std::span<const double> r) {
      const double s = std::accumulate(r.begin(), r.end(), 0.0);
      worst = std::max(worst, std::abs(s - 1.0));
      ++rows;
      bad_rows += std::abs(s - 1.0) > 1e-5;
    };
    for (const auto* set : {&b.sa, &b.dec_sa})
      for (const auto& sa : *set)
        for (int h = 0; h < sa.heads(); ++h)
          for (int s = 0; s < sa.steps(); ++s)
            for (std::size_t i = 0; i < m.roads(); ++i) check(sa.row(h, s, i));
    for (const auto* set : {&b.enc_ta, &b.cross_ta})
      for (const auto& ta : *set)
        for (int h = 0; h < ta.heads(); ++h)
          for (std::size_t i = 0; i < m.roads(); ++i)
            for (int q = 0; q < ta.q_steps(); ++q) check(ta.row(h, i, q));

    for (std::size_t i = 0; i < m.roads(); ++i)
      for (int hz : kHorizons) {
        const auto st = extract_st_attention(m, b, i, hz);
        const int q = horizon_step(hz) - 1;
        for (int h = 0; h < st.heads(); ++h)
          for (int p = 0; p < kWindowSteps; ++p) {
            const double ta = b.cross_ta.back().at(h, i, q, kWindowSteps - 1 - p);
            const auto row = b.sa.back().row(h, kWindowSteps - 1 - p, i);
            const auto& c = st.cells[static_cast<std::size_t>(h)];
            for (Eigen::Index k = 0; k < c.rows(); ++k) {
              ++cells;
              bad_cells += c(k, p) != ta * row[static_cast<std::size_t>(k)];
            }
            ++cells;
            bad_cells += st.sentinel[static_cast<std::size_t>(h)](p) != ta * row.back();
          }
      }
  }
  return {bad_rows == 0 && bad_cells == 0,
          fmt::format("{} rows, max |sum-1| {:.1e}; {} ST cells, {} differ from TA x SA", rows, worst, cells,
                      bad_cells)};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.roads_per_cluster = {3};
  sc.days = 2;
  const auto w = synth_generate(sc, 7);
  ModelConfig mc;
  mc.heads = 2;
  mc.width = 8;
  mc.ffn_width = 8;
  mc.seed = 3;
  auto model = init_model(mc, w.network, w.panel);
  const std::vector<std::size_t> origins{40, 300};
  std::vector<ad::Matrix> grad;
  loss_and_gradient(model, w.panel, origins, &grad);
  const double h = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    auto& param = model.params[p];
    for (Eigen::Index k = 0; k < param.size(); ++k) {
      const double keep = param.data()[k];
      param.data()[k] = keep + h;
      const double up = loss_and_gradient(model, w.panel, origins, nullptr);
      param.data()[k] = keep - h;
      const double down = loss_and_gradient(model, w.panel, origins, nullptr);
      param.data()[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad[p].data()[k];
      worst = std::max(worst, std::abs(numeric - analytic) / std::max({1e-6, std::abs(numeric), std::abs(analytic)}));
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt::format("{} parameters, max relative error {:.2e}, {:.1f}s", checked, worst, secs)};
}

double mean_mae(const ErrorTable& t, int horizon) {
  double s = 0.0;
  for (const auto& r : t.rows) s += r.by_horizon[static_cast<std::size_t>(horizon_index(horizon))].mae;
  return s / static_cast<double>(t.rows.size());
}

Outcome forecasting() {
  const auto t0 = Clock::now();
  SynthConfig sc;  // 20 roads
  sc.days = 21;
  const auto w = synth_generate(sc, 42);
  const auto split = chronological_split(w.panel, SplitSpec{});
  ModelConfig mc;
  mc.heads = 4;
  mc.width = 32;
  mc.ffn_width = 64;
  mc.epochs = 8;
  mc.windows_per_epoch = 1500;
  mc.learning_rate = 3e-3;
  const auto model = train(split.train, split.val, w.network, mc);
  const auto origins = window_origins(split.test, 2);
  const auto pm = compute_errors(predict(model, split.test, origins).forecasts, split.test);
  const auto hm =
      compute_errors(historical_average_forecasts(fit_historical_average(split.train), split.test, origins), split.test);
  const double m = mean_mae(pm, 15), ha = mean_mae(hm, 15);
  const double gain = (ha - m) / ha;
  const double secs = seconds_since(t0);
  return {gain >= 0.10 && secs < 900.0,
          fmt::format("20 roads, 15-min MAE {:.3f} vs HA {:.3f} ({:.1f}% better), {:.0f}s", m, ha, 100 * gain, secs)};
}

Outcome enforcement() {
  const auto t0 = Clock::now();
  const int days = 21;
  const auto n = static_cast<std::size_t>(days) * kSlotsPerDay;
  const auto w = fixtures::distracted_world(4, days, static_cast<std::size_t>(static_cast<double>(n) * 0.8), 2);
  const auto split = chronological_split(w.panel, SplitSpec{});
  ModelConfig mc;
  mc.epochs = 10;
  mc.windows_per_epoch = 2000;
  mc.learning_rate = 3e-3;
  mc.patience = 100;
  const auto model = train(split.train, split.val, w.network, mc);
  const auto origins = window_origins(split.test, 2);
  const auto errors = compute_errors(predict(model, split.test, origins).forecasts, split.test);
  const auto cohorts = quartile_cohorts(errors, 15);
  const auto d = trend_distances(w.panel);
  const auto clusters = spectral_cluster(d, 5, 0);
  std::set<int> chosen;
  for (const auto& t : w.targets) chosen.insert(clusters.label_of(t));
  const auto plan = plan_enforcement(errors, cohorts, clusters, d, split.train,
                                     std::vector<int>(chosen.begin(), chosen.end()));
  const auto r = run_alternative_inference(model, plan, split.test, origins);
  const bool pass = !r.targets.empty() && r.others_unchanged && r.mean_mae_after < r.mean_mae_before &&
                    r.fraction_improved >= 0.6;
  return {pass, fmt::format("{} targets, non-targets bitwise unchanged: {}, mean MAE {:.3f} -> {:.3f}, {:.0f}% "
                            "improved, {:.0f}s",
                            r.targets.size(), r.others_unchanged ? "yes" : "no", r.mean_mae_before,
                            r.mean_mae_after, 100 * r.fraction_improved, seconds_since(t0))};
}

Outcome quartiles() {
  const auto c = quartile_cohorts(
      fixtures::mae_table({{"r1", 1}, {"r2", 2}, {"r3", 3}, {"r4", 4}, {"r5", 5}, {"r6", 6}, {"r7", 7}, {"r8", 8}}));
  const bool pass = std::abs(c.q1 - 2.75) < 1e-12 && std::abs(c.q3 - 6.25) < 1e-12 && c.low.size() == 2 &&
                    c.high.size() == 2;
  return {pass, fmt::format("Q1 {} Q3 {}, {} low, {} high", c.q1, c.q3, c.low.size(), c.high.size())};
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Every GET the API offers, in a fixed order.
std::vector<std::pair<std::string, Query>> all_gets(const Snapshot& s) {
  std::vector<std::pair<std::string, Query>> g{{"/snapshot", {}},
                                               {"/roads", {}},
                                               {"/clusters", {}},
                                               {"/headclusters", {{"scale", "global"}}},
                                               {"/headclusters", {{"scale", "local"}}}};
  const auto cursor = format_iso8601(s.panel.time_at(s.test_begin + 40));
  for (const auto& id : s.panel.roads) {
    g.push_back({"/roads/" + id + "/trend", {}});
    g.push_back({"/roads/" + id + "/causality", {}});
    g.push_back({"/roads/" + id + "/series", {{"horizon", "30"}, {"cursor", cursor}}});
    g.push_back({"/roads/" + id + "/attention", {{"t", cursor}}});
    g.push_back({"/roads/" + id + "/attention", {{"t", cursor}, {"head", "0"}, {"source", "decoder"}}});
  }
  return g;
}

Outcome snapshot_determinism() {
  const auto root = fs::temp_directory_path() / ("attnlab_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  SynthConfig sc;
  sc.days = 5;
  const auto w = synth_generate(sc, 9);
  const auto split = chronological_split(w.panel, SplitSpec{});
  ModelConfig mc;
  mc.epochs = 1;
  mc.windows_per_epoch = 200;
  const auto model = train(split.train, split.val, w.network, mc);
  SnapshotConfig config;
  config.head_cluster_windows = 32;
  const auto id1 = build_snapshot(w.panel, model, config, root / "a");
  const auto id2 = build_snapshot(w.panel, model, config, root / "b");
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    ++files;
    differing += read_file(e.path()) != read_file(root / "b" / e.path().filename());
  }

  SnapshotService one(load_snapshot(root / "a"), {1, 16}), two(load_snapshot(root / "b"), {1, 16});
  const auto gets = all_gets(one.snapshot());
  std::size_t unstable = 0, non_ok = 0;
  for (const auto& [path, q] : gets) {
    const auto first = one.handle("GET", path, q);
    non_ok += first.status != 200;
    unstable += one.handle("GET", path, q).body != first.body || two.handle("GET", path, q).body != first.body;
  }
  const std::string req = R"({"clusters": [0], "k": 2})";
  const auto j1 = nlohmann::json::parse(one.handle("POST", "/enforce", {}, req).body)["job"].get<std::string>();
  const auto j2 = nlohmann::json::parse(two.handle("POST", "/enforce", {}, req).body)["job"].get<std::string>();
  one.wait(j1);
  two.wait(j2);
  const auto r1 = one.handle("GET", "/enforce/" + j1), r2 = two.handle("GET", "/enforce/" + j2);
  unstable += r1.body != r2.body || one.handle("GET", "/enforce/" + j1).body != r1.body;
  fs::remove_all(root);
  const bool pass = id1 == id2 && differing == 0 && unstable == 0 && non_ok == 0;
  return {pass, fmt::format("ids {}, {} artifacts, {} differ; {} GETs, {} not byte-stable, {} non-200; no UI built",
                            id1 == id2 ? "equal" : "differ", files, differing, gets.size() + 1, unstable, non_ok)};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"dtw-oracle", dtw_oracle},
      {"dtw-monotone", dtw_monotone},
      {"granger", granger},
      {"clustering", clustering},
      {"attention-validity", attention_validity},
      {"gradient-check", gradient_check},
      {"forecasting", forecasting},
      {"enforcement", enforcement},
      {"quartiles", quartiles},
      {"snapshot-determinism", snapshot_determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (argc > 1 && std::none_of(argv + 1, argv + argc, [&](const char* a) { return name.rfind(a, 0) == 0; }))
      continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    fmt::print("{} {}: {}\n", o.pass ? "PASS" : "FAIL", name, o.detail);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
