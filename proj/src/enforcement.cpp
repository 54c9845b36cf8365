#include "attnlab/enforcement.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <limits>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {

std::vector<RoadId> select_targets(const ErrorTable& table, const ErrorCohorts& cohorts,
                                   const ClusterAssignment& clusters, const std::vector<int>& selected, int k) {
  if (selected.empty()) throw InvalidArgument("select at least one cluster");
  if (k < 1) throw InvalidArgument("k must be at least 1");
  const auto h = horizon_index(cohorts.horizon);
  std::vector<RoadId> out;
  for (int c : std::set<int>(selected.begin(), selected.end())) {
    if (c < 0 || c >= clusters.k) throw InvalidArgument(fmt::format("cluster {} does not exist", c));
    std::vector<std::pair<double, RoadId>> pool;
    for (const auto& id : clusters.members(c)) {
      if (!cohorts.is_high(id)) continue;
      const auto* r = table.find(id);
      if (r) pool.emplace_back(r->by_horizon[h].mae, id);
    }
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t i = 0; i < pool.size() && i < static_cast<std::size_t>(k); ++i) out.push_back(pool[i].second);
  }
  return out;
}

ReferenceChoice find_reference(const RoadId& target, const std::vector<RoadId>& candidates, const DistanceMatrix& d,
                               const SpeedPanel& panel, double alpha, int max_lag) {
  if (candidates.empty()) throw InvalidArgument("no reference candidates for " + target);
  if (alpha < 0 || alpha > 1) throw InvalidArgument("alpha must lie in [0, 1]");
  const auto& y = panel.series[panel.require_index(target)];
  struct Cand {
    RoadId id;
    double dist;
    std::optional<GrangerStat> stat;
  };
  std::vector<Cand> cands;
  double max_d = 0.0, max_f = 0.0;
  for (const auto& c : candidates) {
    Cand x{c, d.at(target, c), std::nullopt};
    try {
      x.stat = granger_test(panel.series[panel.require_index(c)], y, max_lag);
      if (x.stat->p_value < kSignificance) max_f = std::max(max_f, x.stat->f_value);
    } catch (const Untestable&) {
    }
    max_d = std::max(max_d, x.dist);
    cands.push_back(std::move(x));
  }
  std::optional<ReferenceChoice> best;
  for (const auto& c : cands) {
    ReferenceChoice r;
    r.road = c.id;
    r.distance = c.dist;
    r.granger = c.stat;
    r.sim_dtw = max_d > 0 ? 1.0 - c.dist / max_d : 1.0;
    r.sim_granger = (c.stat && c.stat->p_value < kSignificance && max_f > 0) ? c.stat->f_value / max_f : 0.0;
    r.score = alpha * r.sim_dtw + (1.0 - alpha) * r.sim_granger;
    if (!best || r.score > best->score ||
        (r.score == best->score && (r.distance < best->distance || (r.distance == best->distance && r.road < best->road))))
      best = r;
  }
  const bool all_untestable = std::none_of(cands.begin(), cands.end(), [](const Cand& c) { return c.stat.has_value(); });
  if (all_untestable && max_d == std::min_element(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                                     return a.dist < b.dist;
                                   })->dist)
    best->warning = "all candidates untestable and equidistant; picked the first by road id";
  return *best;
}

EnforcementPlan plan_enforcement(const ErrorTable& table, const ErrorCohorts& cohorts,
                                 const ClusterAssignment& clusters, const DistanceMatrix& d, const SpeedPanel& panel,
                                 const std::vector<int>& selected, const PlanOptions& o) {
  EnforcementPlan plan;
  plan.clusters = selected;
  plan.k = o.k;
  plan.alpha = o.alpha;
  plan.horizon = o.horizon;
  plan.per_head = o.per_head;
  plan.selection = o.selection;
  if (cohorts.horizon != o.horizon) throw InvalidArgument("cohorts were computed for a different horizon");

  std::vector<RoadId> targets;
  if (o.selection == TargetSelection::Cohort) {
    targets = select_targets(table, cohorts, clusters, selected, o.k);
  } else {
    if (selected.empty()) throw InvalidArgument("select at least one cluster");
    const std::set<int> chosen(selected.begin(), selected.end());
    for (int c : chosen)
      if (c < 0 || c >= clusters.k) throw InvalidArgument(fmt::format("cluster {} does not exist", c));
    ErrorTable sub;
    for (const auto& r : table.rows)
      if (chosen.count(clusters.label_of(r.road))) sub.rows.push_back(r);
    if (!sub.rows.empty()) targets = top_error_fraction(sub, o.horizon, o.top_fraction);
  }
  if (targets.empty()) {
    plan.warnings.push_back("no high-error roads in the selected clusters; the plan is empty");
    return plan;
  }
  const auto h = horizon_index(o.horizon);
  for (const auto& t : targets) {
    PlannedTarget pt;
    pt.target = t;
    pt.cluster = clusters.label_of(t);
    pt.mae = table.find(t)->by_horizon[h].mae;
    std::vector<RoadId> pool;
    for (const auto& id : cohorts.low)
      if (id != t && clusters.label_of(id) == pt.cluster) pool.push_back(id);
    if (pool.empty()) {
      pt.same_cluster_reference = false;
      for (const auto& id : cohorts.low)
        if (id != t) pool.push_back(id);
    }
    if (pool.empty()) {
      plan.warnings.push_back("no low-error reference available for " + t);
      continue;
    }
    pt.reference = find_reference(t, pool, d, panel, o.alpha, o.max_lag);
    if (pt.reference.warning) plan.warnings.push_back(t + ": " + *pt.reference.warning);
    plan.targets.push_back(std::move(pt));
  }
  return plan;
}

EnforcedAttention build_enforced_attention(const ModelState& model, const AttentionBundle& bundle, std::size_t target,
                                           std::size_t reference, int horizon, bool per_head) {
  if (target >= model.roads() || reference >= model.roads()) throw InvalidArgument("road index out of range");
  const auto st = extract_st_attention(model, bundle, reference, horizon);
  const int H = st.heads();
  const int T = kWindowSteps;
  EnforcedAttention out;
  out.override_rows.sa_refs.resize(static_cast<std::size_t>(H));
  out.override_rows.sa_sentinel.resize(static_cast<std::size_t>(H));

  auto profile = [&](int h, Eigen::VectorXd& self, Eigen::VectorXd& marginal) {
    if (h < 0) {
      self = st.mean_sentinel;
      marginal = Eigen::VectorXd::Zero(T);
      for (const auto& ta : st.ta) marginal += ta;
      marginal /= H;
    } else {
      self = st.sentinel[static_cast<std::size_t>(h)];
      marginal = st.ta[static_cast<std::size_t>(h)];
    }
    const auto& cells = st.view_cells(per_head ? h : -1);
    for (std::size_t r = 0; r < st.references.size(); ++r)
      if (st.reference_index[r] == reference) self += cells.row(static_cast<Eigen::Index>(r)).transpose();
  };

  for (int h = 0; h < H; ++h) {
    Eigen::VectorXd self, marginal;
    profile(per_head ? h : -1, self, marginal);
    double s = self.sum();
    if (!(s > 1e-12)) {
      out.degenerate = true;
      self = Eigen::VectorXd::Constant(T, 1.0 / T);
      s = 0.0;
    }
    const double msum = marginal.sum();
    Eigen::VectorXd ref = msum > 0 ? Eigen::VectorXd(std::max(0.0, 1.0 - s) * marginal / msum)
                                   : Eigen::VectorXd(Eigen::VectorXd::Constant(T, std::max(0.0, 1.0 - s) / T));
    const double total = self.sum() + ref.sum();
    self /= total;
    ref /= total;

    auto& refs = out.override_rows.sa_refs[static_cast<std::size_t>(h)];
    auto& sent = out.override_rows.sa_sentinel[static_cast<std::size_t>(h)];
    refs.resize(static_cast<std::size_t>(T));
    sent.resize(static_cast<std::size_t>(T));
    ad::Matrix ta(T, T);
    for (int p = 0; p < T; ++p) {
      const int key = T - 1 - p;
      const double a = self(p) + ref(p);
      ta.col(key).setConstant(a);
      if (a > 0) {
        sent[static_cast<std::size_t>(key)] = self(p) / a;
        refs[static_cast<std::size_t>(key)] = {{static_cast<int>(reference), ref(p) / a}};
      } else {
        sent[static_cast<std::size_t>(key)] = 1.0;
        refs[static_cast<std::size_t>(key)] = {{static_cast<int>(reference), 0.0}};
      }
    }
    out.override_rows.cross_ta.push_back(std::move(ta));
    out.override_rows.dec_sa_sentinel.push_back(self.sum());
    out.override_rows.dec_sa_refs.push_back({{static_cast<int>(reference), ref.sum()}});
    out.self.push_back(std::move(self));
    out.reference.push_back(std::move(ref));
  }
  return out;
}

PairedHistogram report_histogram(const std::vector<double>& before, const std::vector<double>& after,
                                 std::size_t bins) {
  if (before.size() != after.size()) throw InvalidArgument("before/after populations differ");
  if (bins == 0) throw InvalidArgument("histogram needs at least one bin");
  PairedHistogram h;
  double hi = 0.0;
  for (double v : before) hi = std::max(hi, v);
  for (double v : after) hi = std::max(hi, v);
  if (!(hi > 0)) hi = 1.0;
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(hi * static_cast<double>(b) / static_cast<double>(bins));
  h.before.assign(bins, 0);
  h.after.assign(bins, 0);
  auto bin_of = [&](double v) {
    return std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, v) / hi * static_cast<double>(bins)));
  };
  double sb = 0.0, sa = 0.0;
  for (double v : before) {
    ++h.before[bin_of(v)];
    sb += v;
  }
  for (double v : after) {
    ++h.after[bin_of(v)];
    sa += v;
  }
  if (!before.empty()) {
    h.mean_before = sb / static_cast<double>(before.size());
    h.mean_after = sa / static_cast<double>(after.size());
  }
  h.shift = h.mean_after - h.mean_before;
  return h;
}

EnforcementReport run_alternative_inference(const ModelState& model, const EnforcementPlan& plan,
                                            const SpeedPanel& panel, const std::vector<std::size_t>& origins,
                                            const AlternativeOptions& options) {
  EnforcementReport rep;
  rep.plan = plan;
  rep.windows = origins.size();
  rep.warnings = plan.warnings;
  rep.histogram = report_histogram({}, {}, options.histogram_bins);
  if (plan.targets.empty()) return rep;

  struct Slot {
    std::size_t target;
    std::size_t reference;
    std::size_t panel_row;
  };
  std::vector<Slot> slots;
  std::set<std::size_t> target_set;
  for (const auto& t : plan.targets) {
    Slot s{model.network.require_index(t.target), model.network.require_index(t.reference.road),
           panel.require_index(t.target)};
    if (!target_set.insert(s.target).second) throw InvalidArgument("road " + t.target + " is targeted twice");
    slots.push_back(s);
  }
  const auto hz = horizon_index(plan.horizon);
  // abs errors [slot][horizon] before/after
  std::vector<std::array<std::vector<double>, 4>> before(slots.size()), after(slots.size());

  const auto chunk = std::max<std::size_t>(1, options.batch_windows);
  for (std::size_t start = 0; start < origins.size(); start += chunk) {
    const std::vector<std::size_t> part(origins.begin() + static_cast<std::ptrdiff_t>(start),
                                        origins.begin() + static_cast<std::ptrdiff_t>(std::min(origins.size(), start + chunk)));
    PredictOptions base_opt;
    base_opt.record_attention = true;
    base_opt.record_trace = true;
    base_opt.batch_windows = part.size();
    const auto base = predict(model, panel, part, base_opt);

    AttentionOverrides ov;
    for (std::size_t w = 0; w < part.size(); ++w)
      for (const auto& s : slots) {
        auto ea = build_enforced_attention(model, base.attention[w], s.target, s.reference, plan.horizon, plan.per_head);
        if (ea.degenerate) ++rep.degenerate_rows;
        ov.emplace(std::make_pair(w, s.target), std::move(ea.override_rows));
      }
    PredictOptions alt_opt;
    alt_opt.overrides = &ov;
    alt_opt.context = &base.trace;
    alt_opt.batch_windows = part.size();
    const auto alt = predict(model, panel, part, alt_opt);

    for (std::size_t w = 0; w < part.size(); ++w) {
      const auto& b = base.forecasts.values[w];
      const auto& a = alt.forecasts.values[w];
      for (Eigen::Index i = 0; i < b.rows(); ++i) {
        if (target_set.count(static_cast<std::size_t>(i))) continue;
        for (Eigen::Index s = 0; s < b.cols(); ++s)
          if (std::memcmp(&b(i, s), &a(i, s), sizeof(double)) != 0) rep.others_unchanged = false;
      }
      for (std::size_t k = 0; k < slots.size(); ++k)
        for (std::size_t h = 0; h < kHorizons.size(); ++h) {
          const auto step = horizon_step(kHorizons[h]) - 1;
          const auto t = part[w] + static_cast<std::size_t>(step);
          if (t >= panel.length() || panel.missing(slots[k].panel_row, t) || panel.imputed[slots[k].panel_row][t]) continue;
          const double actual = panel.series[slots[k].panel_row][t];
          const auto i = static_cast<Eigen::Index>(slots[k].target);
          before[k][h].push_back(std::abs(b(i, step) - actual));
          after[k][h].push_back(std::abs(a(i, step) - actual));
        }
    }
  }

  std::vector<double> pooled_before, pooled_after;
  std::size_t improved = 0, counted = 0;
  double sum_b = 0.0, sum_a = 0.0;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    TargetOutcome o;
    o.road = plan.targets[k].target;
    o.reference = plan.targets[k].reference.road;
    for (std::size_t h = 0; h < kHorizons.size(); ++h) {
      auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
      };
      o.mae_before[h] = mean(before[k][h]);
      o.mae_after[h] = mean(after[k][h]);
    }
    pooled_before.insert(pooled_before.end(), before[k][hz].begin(), before[k][hz].end());
    pooled_after.insert(pooled_after.end(), after[k][hz].begin(), after[k][hz].end());
    if (std::isfinite(o.mae_before[hz])) {
      ++counted;
      sum_b += o.mae_before[hz];
      sum_a += o.mae_after[hz];
      if (o.mae_after[hz] < o.mae_before[hz]) ++improved;
    }
    rep.targets.push_back(std::move(o));
  }
  if (counted) {
    rep.mean_mae_before = sum_b / static_cast<double>(counted);
    rep.mean_mae_after = sum_a / static_cast<double>(counted);
    rep.mean_delta_mae = rep.mean_mae_after - rep.mean_mae_before;
    rep.fraction_improved = static_cast<double>(improved) / static_cast<double>(counted);
  }
  rep.histogram = report_histogram(pooled_before, pooled_after, options.histogram_bins);
  if (rep.degenerate_rows)
    rep.warnings.push_back(fmt::format("{} reference rows had no self-reference; used a uniform self profile",
                                       rep.degenerate_rows));
  return rep;
}

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

nlohmann::json granger_json(const std::optional<GrangerStat>& g) {
  if (!g) return nullptr;
  return {{"lag", g->lag}, {"f", g->f_value}, {"df", {g->df_num, g->df_den}}, {"p", g->p_value},
          {"text", format_granger(*g)}};
}

}  // namespace

nlohmann::json to_json(const EnforcementPlan& plan) {
  auto targets = nlohmann::json::array();
  for (const auto& t : plan.targets)
    targets.push_back({{"road_id", t.target},
                       {"cluster", t.cluster},
                       {"mae", t.mae},
                       {"reference", t.reference.road},
                       {"same_cluster_reference", t.same_cluster_reference},
                       {"score", t.reference.score},
                       {"dtw_component", t.reference.sim_dtw},
                       {"granger_component", t.reference.sim_granger},
                       {"dtw_distance", t.reference.distance},
                       {"granger", granger_json(t.reference.granger)}});
  return {{"clusters", plan.clusters},
          {"k", plan.k},
          {"alpha", plan.alpha},
          {"horizon", plan.horizon},
          {"per_head", plan.per_head},
          {"selection", plan.selection == TargetSelection::Cohort ? "cohort" : "top_percent"},
          {"targets", targets},
          {"warnings", plan.warnings}};
}

nlohmann::json to_json(const EnforcementReport& r) {
  auto targets = nlohmann::json::array();
  for (const auto& t : r.targets) {
    nlohmann::json hz = nlohmann::json::object();
    for (std::size_t h = 0; h < kHorizons.size(); ++h)
      hz[std::to_string(kHorizons[h])] = {{"mae_before", number_or_null(t.mae_before[h])},
                                          {"mae_after", number_or_null(t.mae_after[h])}};
    targets.push_back({{"road_id", t.road}, {"reference", t.reference}, {"horizons", hz}});
  }
  return {{"plan", to_json(r.plan)},
          {"windows", r.windows},
          {"targets", targets},
          {"histogram",
           {{"edges", r.histogram.edges},
            {"before", r.histogram.before},
            {"after", r.histogram.after},
            {"mean_before", r.histogram.mean_before},
            {"mean_after", r.histogram.mean_after},
            {"shift", r.histogram.shift}}},
          {"summary",
           {{"mean_mae_before", r.mean_mae_before},
            {"mean_mae_after", r.mean_mae_after},
            {"mean_delta_mae", r.mean_delta_mae},
            {"fraction_improved", r.fraction_improved},
            {"others_unchanged", r.others_unchanged},
            {"degenerate_rows", r.degenerate_rows}}},
          {"warnings", r.warnings}};
}

void write_enforcement_csv(const EnforcementReport& r, std::ostream& out) {
  out << "road_id,horizon,mae_before,mae_after\n";
  auto num = [](double v) { return std::isfinite(v) ? fmt::format("{:.6f}", v) : std::string(); };
  for (const auto& t : r.targets)
    for (std::size_t h = 0; h < kHorizons.size(); ++h)
      out << t.road << ',' << kHorizons[h] << ',' << num(t.mae_before[h]) << ',' << num(t.mae_after[h]) << '\n';
}

}  // namespace attnlab
