#include <doctest.h>

#include <functional>
#include <numeric>

#include "attnlab/attention_analytics.hpp"
#include "attnlab/error.hpp"
#include "attnlab/synth.hpp"
#include "fixtures.hpp"

using namespace attnlab;

namespace {

using SaFn = std::function<std::vector<double>(int head, int step, std::size_t road, std::size_t degree)>;
using TaFn = std::function<double(int head, std::size_t road, int q, int k)>;

// Bundle with one encoder and one decoder layer built from weight functions.
AttentionBundle make_bundle(const ModelState& m, const SaFn& sa, const TaFn& ta) {
  const int H = m.config.heads, T = kWindowSteps;
  std::vector<std::vector<std::size_t>> nbrs;
  for (std::size_t i = 0; i < m.roads(); ++i) nbrs.push_back(m.network.in_neighbors(i));
  const auto off = ad::spatial_weight_offsets(nbrs);
  std::vector<double> data(static_cast<std::size_t>(T * H) * off.back());
  for (int s = 0; s < T; ++s)
    for (int h = 0; h < H; ++h)
      for (std::size_t i = 0; i < m.roads(); ++i) {
        const auto row = sa(h, s, i, nbrs[i].size());
        REQUIRE(row.size() == nbrs[i].size() + 1);
        for (std::size_t k = 0; k < row.size(); ++k)
          data[(static_cast<std::size_t>(s) * H + static_cast<std::size_t>(h)) * off.back() + off[i] + k] = row[k];
      }
  TemporalWeights t(H, static_cast<int>(m.roads()), T, T);
  for (int h = 0; h < H; ++h)
    for (std::size_t i = 0; i < m.roads(); ++i)
      for (int q = 0; q < T; ++q)
        for (int k = 0; k < T; ++k) t.at(h, i, q, k) = ta(h, i, q, k);
  AttentionBundle b;
  b.origin = 100;
  b.sa.emplace_back(H, T, off, data);
  b.enc_ta.push_back(t);
  b.cross_ta.push_back(t);
  b.dec_sa.emplace_back(H, T, off, data);
  return b;
}

// Roads a, b, c, d with a -> b, c -> b, d -> b, b -> a.
ModelState star_model(int heads = 1) {
  RoadNetwork net({"a", "b", "c", "d"}, {{"a", "b"}, {"c", "b"}, {"d", "b"}, {"b", "a"}});
  SpeedPanel p;
  p.start = parse_iso8601("2024-01-01T00:00:00Z");
  p.roads = net.roads();
  for (int r = 0; r < 4; ++r) {
    std::vector<double> v(300);
    for (std::size_t t = 0; t < v.size(); ++t) v[t] = 50.0 + r + static_cast<double>(t % 5);
    p.series.push_back(v);
    p.imputed.emplace_back(v.size(), false);
  }
  ModelConfig c;
  c.heads = heads;
  c.width = 4 * heads;
  c.ffn_width = 8;
  return init_model(c, net, p);
}

std::vector<double> one_hot(std::size_t n, std::size_t at) {
  std::vector<double> v(n, 0.0);
  v[at] = 1.0;
  return v;
}

}  // namespace

TEST_CASE("one-hot attention gives a single ST cell and arrow") {
  const auto m = star_model();
  // road b: neighbors a, c, d; TA one-hot at key 8 (past step 4), SA one-hot on c
  const auto b = make_bundle(
      m, [](int, int, std::size_t road, std::size_t deg) { return road == 1 ? one_hot(deg + 1, 1) : one_hot(deg + 1, deg); },
      [](int, std::size_t, int, int k) { return k == 8 ? 1.0 : 0.0; });
  const auto st = extract_st_attention(m, b, "b", 15);
  CHECK(st.references == std::vector<RoadId>{"a", "c", "d"});
  CHECK(st.mean_cells.sum() == 1.0);
  CHECK(st.mean_cells(1, 3) == 1.0);
  CHECK(st.mean_self_reference == 0.0);
  const auto arrows = attn_arrows(st);
  REQUIRE(arrows.arrows.size() == 1);
  CHECK(arrows.arrows[0].reference == "c");
  CHECK(arrows.arrows[0].intensity == 1.0);

  const auto self = extract_st_attention(m, b, "a", 15);
  CHECK(self.mean_self_reference == 1.0);
  CHECK(attn_arrows(self).arrows.empty());
}

TEST_CASE("arrow threshold and mass conservation") {
  const auto m = star_model();
  // b: a 0.6, c 0.05, d 0.15, sentinel 0.2
  const auto b = make_bundle(
      m,
      [](int, int, std::size_t road, std::size_t deg) {
        return road == 1 ? std::vector<double>{0.6, 0.05, 0.15, 0.2} : one_hot(deg + 1, deg);
      },
      [](int, std::size_t, int, int) { return 1.0 / 12; });
  const auto st = extract_st_attention(m, b, "b", 30);
  const auto a = attn_arrows(st, 0.1);
  REQUIRE(a.arrows.size() == 2);
  CHECK(a.arrows[0].reference == "a");
  CHECK(a.arrows[1].reference == "d");
  CHECK(a.dropped == doctest::Approx(0.05));
  double total = a.self_reference + a.dropped;
  for (const auto& x : a.arrows) total += x.intensity;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(attn_arrows(st, 0.0).arrows.size() == 3);

  const auto d = decoder_arrows(m, b, 1, 30, 0.1);
  CHECK(d.source == "decoder");
  CHECK(d.arrows.size() == 2);
  CHECK(d.self_reference == doctest::Approx(0.2));
  CHECK_THROWS_AS(decoder_arrows(m, b, 1, 30, 0.1, 4), InvalidArgument);
}

TEST_CASE("display order sorts by intensity then road id") {
  const auto m = star_model();
  const auto b = make_bundle(
      m,
      [](int, int, std::size_t road, std::size_t deg) {
        return road == 1 ? std::vector<double>{0.2, 0.4, 0.2, 0.2} : one_hot(deg + 1, deg);
      },
      [](int, std::size_t, int, int) { return 1.0 / 12; });
  const auto st = extract_st_attention(m, b, "b", 15);
  CHECK(st_display_order(st) == std::vector<std::size_t>{1, 0, 2});
  const auto j = to_json(st);
  CHECK(j["references"][0]["road_id"] == "c");
  CHECK(j["past_steps"].size() == 12);
}

TEST_CASE("ST cells from a real model stay in [0, 1]") {
  SynthConfig c;
  c.roads_per_cluster = {5};
  c.days = 2;
  const auto w = synth_generate(c, 3);
  ModelConfig mc;
  mc.heads = 2;
  mc.width = 8;
  const auto m = init_model(mc, w.network, w.panel);
  const auto res = predict(m, w.panel, {200}, PredictOptions{true});
  for (std::size_t i = 0; i < m.roads(); ++i)
    for (int hz : kHorizons) {
      const auto st = extract_st_attention(m, res.attention[0], i, hz);
      for (const auto& cells : st.cells) {
        if (cells.size() == 0) continue;
        CHECK(cells.minCoeff() >= 0.0);
        CHECK(cells.maxCoeff() <= 1.0);
      }
      double total = st.mean_cells.sum() + st.mean_sentinel.sum();
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("ST view windows follow the cursor") {
  SynthConfig c;
  c.roads_per_cluster = {3};
  c.days = 2;
  const auto w = synth_generate(c, 3);
  ModelConfig mc;
  mc.heads = 2;
  mc.width = 8;
  const auto m = init_model(mc, w.network, w.panel);
  const auto t = w.panel.time_at(150);
  const auto a = st_matrix_for_view(m, w.panel, w.panel.roads[1], t, 15);
  const auto b = st_matrix_for_view(m, w.panel, w.panel.roads[1], t + std::chrono::minutes(5), 15);
  CHECK(a.mean_cells.cols() == 12);
  CHECK(a.origin == 151);
  CHECK(b.origin == 152);
  CHECK(b.window_start - a.window_start == std::chrono::minutes(5));
  CHECK(origin_for_cursor(11) == 12);
  CHECK_THROWS_AS(origin_for_cursor(10), InvalidArgument);
  CHECK_THROWS_AS(st_matrix_for_view(m, w.panel, "nope", t, 15), NotFound);
  CHECK_THROWS_AS(st_matrix_for_view(m, w.panel, w.panel.roads[1], t + std::chrono::seconds(7), 15), NotFound);
}

TEST_CASE("head cluster matrices") {
  SUBCASE("single head and cluster") {
    const auto m = star_model();
    const auto b = make_bundle(
        m, [](int, int, std::size_t, std::size_t deg) { return std::vector<double>(deg + 1, 1.0 / (deg + 1)); },
        [](int, std::size_t, int, int) { return 1.0 / 12; });
    ClusterAssignment one{1, m.network.roads(), {0, 0, 0, 0}};
    const auto cohorts = quartile_cohorts(fixtures::mae_table({{"a", 1}, {"b", 2}, {"c", 3}, {"d", 4}}));
    const auto raw = head_cluster_raw(m, {b}, one, cohorts);
    const auto local = normalize(raw, Scale::Local);
    CHECK(local.cells[0][0](0, 0) == doctest::Approx(1.0));
    CHECK(local.cells[1][0](0, 0) == doctest::Approx(1.0));
  }
  SUBCASE("accurate roads self-refer") {
    const auto m = star_model(2);
    // a and c are low-error and attend to their sentinel; b and d are high-error and look outward
    const auto b = make_bundle(
        m,
        [](int, int, std::size_t road, std::size_t deg) {
          if (road == 0 || road == 2) return one_hot(deg + 1, deg);
          if (road == 1) return std::vector<double>{0.0, 0.1, 0.8, 0.1};
          return one_hot(deg + 1, deg);
        },
        [](int, std::size_t, int, int) { return 1.0 / 12; });
    ClusterAssignment two{2, m.network.roads(), {0, 0, 1, 1}};
    const auto cohorts = quartile_cohorts(fixtures::mae_table({{"a", 1}, {"b", 8}, {"c", 1.5}, {"d", 2}}));
    REQUIRE(cohorts.low == std::vector<RoadId>{"a"});
    REQUIRE(cohorts.high == std::vector<RoadId>{"b"});
    const auto raw = head_cluster_raw(m, {b, b}, two, cohorts);
    for (int h = 0; h < 2; ++h) {
      const auto& hi = raw.cells[0][static_cast<std::size_t>(h)];
      const auto& lo = raw.cells[1][static_cast<std::size_t>(h)];
      CHECK(lo.trace() > hi.trace());
      CHECK(lo(0, 0) == doctest::Approx(1.0));
      CHECK(hi(0, 1) == doctest::Approx(0.9));
    }
    const auto global = normalize(raw, Scale::Global);
    double peak = 0.0;
    for (const auto& g : global.cells)
      for (const auto& x : g) peak = std::max(peak, x.maxCoeff());
    CHECK(peak == 1.0);
    const auto local = normalize(raw, Scale::Local);
    CHECK(local.empty_rows[1][0][1]);
    CHECK(local.cells[0][0].row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));
    const auto back = head_clusters_from_json(to_json(raw, Scale::Global));
    CHECK(back.cells[0][1] == raw.cells[0][1]);
    CHECK(back.empty_rows == raw.empty_rows);
  }
  CHECK(parse_scale("local") == Scale::Local);
  CHECK_THROWS_AS(parse_scale("huge"), InvalidArgument);
}

TEST_CASE("sample_origins") {
  std::vector<std::size_t> o(1000);
  std::iota(o.begin(), o.end(), 12);
  const auto a = sample_origins(o, 50, 1);
  CHECK(a.size() == 50);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(sample_origins(o, 50, 1) == a);
  CHECK(sample_origins(o, 50, 2) != a);
  CHECK(sample_origins({5, 3}, 10, 0) == std::vector<std::size_t>{3, 5});
}
