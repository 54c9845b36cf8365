#include "attnlab/attention_analytics.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {

namespace {

int resolve_layer(int layer, std::size_t count, const char* what) {
  const int n = static_cast<int>(count);
  const int l = layer < 0 ? n - 1 : layer;
  if (l < 0 || l >= n) throw InvalidArgument(fmt::format("{} layer {} not recorded", what, layer));
  return l;
}

}  // namespace

STMatrix extract_st_attention(const ModelState& model, const AttentionBundle& bundle, std::size_t target, int horizon,
                              const STOptions& options) {
  if (target >= model.roads()) throw NotFound(fmt::format("road index {} not in graph", target));
  const int q = horizon_step(horizon) - 1;
  const auto& sa = bundle.sa[static_cast<std::size_t>(resolve_layer(options.encoder_layer, bundle.sa.size(), "encoder"))];
  const auto& ta =
      bundle.cross_ta[static_cast<std::size_t>(resolve_layer(options.decoder_layer, bundle.cross_ta.size(), "decoder"))];
  const int H = sa.heads();
  const int T = kWindowSteps;

  STMatrix st;
  st.target = model.network.roads()[target];
  st.target_index = target;
  st.horizon = horizon;
  st.origin = bundle.origin;
  st.window_start = bundle.window_start;
  st.reference_index = model.network.in_neighbors(target);
  for (auto j : st.reference_index) st.references.push_back(model.network.roads()[j]);
  const auto R = static_cast<Eigen::Index>(st.references.size());
  st.mean_cells = Eigen::MatrixXd::Zero(R, T);
  st.mean_sentinel = Eigen::VectorXd::Zero(T);
  for (int h = 0; h < H; ++h) {
    Eigen::MatrixXd cells(R, T);
    Eigen::VectorXd sentinel(T), tav(T);
    for (int p = 0; p < T; ++p) {
      const int key = T - 1 - p;
      const double a = ta.at(h, target, q, key);
      const auto row = sa.row(h, key, target);
      for (Eigen::Index r = 0; r < R; ++r) cells(r, p) = a * row[static_cast<std::size_t>(r)];
      sentinel(p) = a * row[static_cast<std::size_t>(R)];
      tav(p) = a;
    }
    double self = sentinel.sum();
    for (Eigen::Index r = 0; r < R; ++r)
      if (st.reference_index[static_cast<std::size_t>(r)] == target) self += cells.row(r).sum();
    st.mean_cells += cells;
    st.mean_sentinel += sentinel;
    st.cells.push_back(std::move(cells));
    st.sentinel.push_back(std::move(sentinel));
    st.ta.push_back(std::move(tav));
    st.self_reference.push_back(self);
  }
  st.mean_cells /= H;
  st.mean_sentinel /= H;
  st.mean_self_reference = std::accumulate(st.self_reference.begin(), st.self_reference.end(), 0.0) / H;
  return st;
}

STMatrix extract_st_attention(const ModelState& model, const AttentionBundle& bundle, const RoadId& target,
                              int horizon, const STOptions& options) {
  return extract_st_attention(model, bundle, model.network.require_index(target), horizon, options);
}

namespace {

AttnArrowSet arrows_from_masses(const RoadId& target, std::vector<AttnArrow> masses, double self, double threshold) {
  AttnArrowSet out;
  out.target = target;
  out.threshold = threshold;
  out.self_reference = self;
  for (auto& a : masses) {
    if (a.intensity < threshold)
      out.dropped += a.intensity;
    else
      out.arrows.push_back(std::move(a));
  }
  std::sort(out.arrows.begin(), out.arrows.end(), [](const AttnArrow& a, const AttnArrow& b) {
    return a.intensity != b.intensity ? a.intensity > b.intensity : a.reference < b.reference;
  });
  return out;
}

}  // namespace

AttnArrowSet attn_arrows(const STMatrix& st, double threshold, int head) {
  const auto& cells = st.view_cells(head);
  std::vector<AttnArrow> masses;
  for (std::size_t r = 0; r < st.references.size(); ++r) {
    if (st.reference_index[r] == st.target_index) continue;
    masses.push_back({st.references[r], std::clamp(cells.row(static_cast<Eigen::Index>(r)).sum(), 0.0, 1.0)});
  }
  return arrows_from_masses(st.target, std::move(masses), std::clamp(st.view_self_reference(head), 0.0, 1.0),
                            threshold);
}

AttnArrowSet decoder_arrows(const ModelState& model, const AttentionBundle& bundle, std::size_t target, int horizon,
                            double threshold, int head, int decoder_layer) {
  if (target >= model.roads()) throw NotFound(fmt::format("road index {} not in graph", target));
  const int q = horizon_step(horizon) - 1;
  const auto& sa = bundle.dec_sa[static_cast<std::size_t>(resolve_layer(decoder_layer, bundle.dec_sa.size(), "decoder"))];
  const auto nbrs = model.network.in_neighbors(target);
  std::vector<double> w(nbrs.size() + 1, 0.0);
  const int h0 = head < 0 ? 0 : head, h1 = head < 0 ? sa.heads() : head + 1;
  if (h0 >= sa.heads()) throw InvalidArgument(fmt::format("head {} out of range", head));
  for (int h = h0; h < h1; ++h) {
    const auto row = sa.row(h, q, target);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] += row[k] / (h1 - h0);
  }
  double self = w.back();
  std::vector<AttnArrow> masses;
  for (std::size_t k = 0; k < nbrs.size(); ++k) {
    if (nbrs[k] == target)
      self += w[k];
    else
      masses.push_back({model.network.roads()[nbrs[k]], w[k]});
  }
  auto out = arrows_from_masses(model.network.roads()[target], std::move(masses), self, threshold);
  out.source = "decoder";
  return out;
}

std::vector<std::size_t> st_display_order(const STMatrix& st, int head) {
  const auto& cells = st.view_cells(head);
  std::vector<std::size_t> order(st.references.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> mass(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) mass[r] = cells.row(static_cast<Eigen::Index>(r)).sum();
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return mass[a] != mass[b] ? mass[a] > mass[b] : st.references[a] < st.references[b];
  });
  return order;
}

std::size_t origin_for_cursor(std::size_t t) {
  if (t + 1 < static_cast<std::size_t>(kWindowSteps))
    throw InvalidArgument("the cursor needs 12 steps of history");
  return t + 1;
}

STMatrix st_matrix_for_view(const ModelState& model, const SpeedPanel& panel, const RoadId& road, Timestamp timestamp,
                            int horizon, const STOptions& options) {
  const auto target = model.network.require_index(road);
  const auto t = panel.index_of_time(timestamp);
  if (!t) throw NotFound("timestamp " + format_iso8601(timestamp) + " is not on the panel grid");
  PredictOptions po;
  po.record_attention = true;
  const auto res = predict(model, panel, {origin_for_cursor(*t)}, po);
  return extract_st_attention(model, res.attention.front(), target, horizon, options);
}

Scale parse_scale(const std::string& s) {
  if (s == "global") return Scale::Global;
  if (s == "local") return Scale::Local;
  throw InvalidArgument("scale must be 'global' or 'local'");
}

std::string to_string(Scale s) { return s == Scale::Global ? "global" : "local"; }

std::vector<std::size_t> sample_origins(const std::vector<std::size_t>& origins, std::size_t limit,
                                        std::uint64_t seed) {
  std::vector<std::size_t> out = origins;
  if (out.size() > limit) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < limit; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, out.size() - 1);
      std::swap(out[i], out[pick(rng)]);
    }
    out.resize(limit);
  }
  std::sort(out.begin(), out.end());
  return out;
}

HeadClusterMatrices head_cluster_raw(const ModelState& model, const std::vector<AttentionBundle>& bundles,
                                     const ClusterAssignment& clusters, const ErrorCohorts& cohorts, int horizon,
                                     const STOptions& options) {
  if (bundles.empty()) throw InvalidArgument("no attention windows to aggregate");
  const int K = clusters.k;
  const int H = model.config.heads;
  std::vector<int> label(model.roads());
  for (std::size_t i = 0; i < model.roads(); ++i) label[i] = clusters.label_of(model.network.roads()[i]);

  HeadClusterMatrices out;
  out.k = K;
  out.heads = H;
  out.horizon = horizon;
  out.windows = bundles.size();
  out.cells.assign(2, std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(H), Eigen::MatrixXd::Zero(K, K)));
  std::vector<std::vector<int>> members(2, std::vector<int>(static_cast<std::size_t>(K), 0));
  for (std::size_t i = 0; i < model.roads(); ++i) {
    const auto& id = model.network.roads()[i];
    const int g = cohorts.is_high(id) ? 0 : cohorts.is_low(id) ? 1 : -1;
    if (g < 0) continue;
    const int ct = label[i];
    ++members[static_cast<std::size_t>(g)][static_cast<std::size_t>(ct)];
    for (const auto& b : bundles) {
      const auto st = extract_st_attention(model, b, i, horizon, options);
      for (int h = 0; h < H; ++h) {
        auto& m = out.cells[static_cast<std::size_t>(g)][static_cast<std::size_t>(h)];
        m(ct, ct) += st.sentinel[static_cast<std::size_t>(h)].sum();
        for (std::size_t r = 0; r < st.references.size(); ++r)
          m(ct, label[st.reference_index[r]]) += st.cells[static_cast<std::size_t>(h)].row(static_cast<Eigen::Index>(r)).sum();
      }
    }
  }
  out.empty_rows.assign(2, std::vector<std::vector<bool>>(static_cast<std::size_t>(H), std::vector<bool>(static_cast<std::size_t>(K))));
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t h = 0; h < static_cast<std::size_t>(H); ++h)
      for (int c = 0; c < K; ++c) {
        const int n = members[g][static_cast<std::size_t>(c)];
        out.empty_rows[g][h][static_cast<std::size_t>(c)] = n == 0;
        if (n > 0) out.cells[g][h].row(c) /= static_cast<double>(n) * static_cast<double>(bundles.size());
      }
  return out;
}

HeadClusterMatrices normalize(const HeadClusterMatrices& raw, Scale scale) {
  HeadClusterMatrices out = raw;
  if (scale == Scale::Global) {
    double peak = 0.0;
    for (const auto& g : raw.cells)
      for (const auto& m : g) peak = std::max(peak, m.maxCoeff());
    if (peak > 0)
      for (auto& g : out.cells)
        for (auto& m : g) m /= peak;
  } else {
    for (std::size_t g = 0; g < out.cells.size(); ++g)
      for (std::size_t h = 0; h < out.cells[g].size(); ++h) {
        auto& m = out.cells[g][h];
        for (Eigen::Index c = 0; c < m.rows(); ++c) {
          const double s = m.row(c).sum();
          if (s > 0)
            m.row(c) /= s;
          else
            out.empty_rows[g][h][static_cast<std::size_t>(c)] = true;
        }
      }
  }
  return out;
}

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
  return m;
}

}  // namespace

nlohmann::json to_json(const STMatrix& st, int head) {
  const auto& cells = st.view_cells(head);
  const auto& sentinel = st.view_sentinel(head);
  const auto order = st_display_order(st, head);
  auto refs = nlohmann::json::array();
  for (auto r : order) {
    std::vector<double> row(kWindowSteps);
    for (int p = 0; p < kWindowSteps; ++p) row[static_cast<std::size_t>(p)] = cells(static_cast<Eigen::Index>(r), p);
    refs.push_back({{"road_id", st.references[r]}, {"intensity", cells.row(static_cast<Eigen::Index>(r)).sum()},
                    {"cells", row}});
  }
  std::vector<double> sent(sentinel.data(), sentinel.data() + sentinel.size());
  std::vector<int> steps(kWindowSteps);
  std::iota(steps.begin(), steps.end(), 1);
  return {{"target", st.target},
          {"horizon", st.horizon},
          {"head", head < 0 ? nlohmann::json("mean") : nlohmann::json(head)},
          {"window_start", format_iso8601(st.window_start)},
          {"past_steps", steps},
          {"references", refs},
          {"sentinel", sent},
          {"self_reference", st.view_self_reference(head)}};
}

nlohmann::json to_json(const AttnArrowSet& a) {
  auto arrows = nlohmann::json::array();
  for (const auto& x : a.arrows) arrows.push_back({{"road_id", x.reference}, {"intensity", x.intensity}});
  return {{"target", a.target},       {"arrows", arrows},          {"self_reference", a.self_reference},
          {"dropped", a.dropped},     {"threshold", a.threshold},  {"source", a.source}};
}

nlohmann::json to_json(const HeadClusterMatrices& m, Scale scale) {
  auto mats = nlohmann::json::array();
  const char* names[2] = {"high", "low"};
  for (std::size_t g = 0; g < m.cells.size(); ++g)
    for (std::size_t h = 0; h < m.cells[g].size(); ++h) {
      std::vector<bool> empty = m.empty_rows[g][h];
      mats.push_back({{"cohort", names[g]}, {"head", h}, {"cells", matrix_json(m.cells[g][h])}, {"empty_rows", empty}});
    }
  return {{"scale", to_string(scale)}, {"k", m.k},     {"heads", m.heads},
          {"horizon", m.horizon},      {"windows", m.windows}, {"matrices", mats}};
}

HeadClusterMatrices head_clusters_from_json(const nlohmann::json& j) {
  HeadClusterMatrices m;
  m.k = j.at("k").get<int>();
  m.heads = j.at("heads").get<int>();
  m.horizon = j.at("horizon").get<int>();
  m.windows = j.at("windows").get<std::size_t>();
  m.cells.assign(2, std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(m.heads)));
  m.empty_rows.assign(2, std::vector<std::vector<bool>>(static_cast<std::size_t>(m.heads)));
  for (const auto& x : j.at("matrices")) {
    const std::size_t g = x.at("cohort").get<std::string>() == "high" ? 0 : 1;
    const auto h = x.at("head").get<std::size_t>();
    m.cells.at(g).at(h) = matrix_from_json(x.at("cells"));
    m.empty_rows.at(g).at(h) = x.at("empty_rows").get<std::vector<bool>>();
  }
  return m;
}

}  // namespace attnlab
