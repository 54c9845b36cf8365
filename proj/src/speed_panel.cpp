#include "attnlab/speed_panel.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <map>
#include <numeric>

#include "attnlab/error.hpp"

namespace attnlab {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

std::optional<std::size_t> SpeedPanel::index_of_time(Timestamp ts) const {
  auto delta = (ts - start).count();
  if (delta < 0 || delta % kIntervalSeconds != 0) return std::nullopt;
  auto idx = static_cast<std::size_t>(delta / kIntervalSeconds);
  if (idx >= length()) return std::nullopt;
  return idx;
}

std::optional<std::size_t> SpeedPanel::index_of(const RoadId& id) const {
  auto it = std::find(roads.begin(), roads.end(), id);
  if (it == roads.end()) return std::nullopt;
  return static_cast<std::size_t>(it - roads.begin());
}

std::size_t SpeedPanel::require_index(const RoadId& id) const {
  auto idx = index_of(id);
  if (!idx) throw NotFound("road '" + id + "' not in panel");
  return *idx;
}

SpeedPanel SpeedPanel::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > length()) throw InvalidArgument("slice out of range");
  SpeedPanel out;
  out.start = time_at(begin);
  out.unit = unit;
  out.roads = roads;
  for (std::size_t r = 0; r < roads.size(); ++r) {
    out.series.emplace_back(series[r].begin() + begin, series[r].begin() + end);
    out.imputed.emplace_back(imputed[r].begin() + begin, imputed[r].begin() + end);
  }
  return out;
}

SpeedPanel SpeedPanel::reordered(const std::vector<RoadId>& order) const {
  SpeedPanel out;
  out.start = start;
  out.unit = unit;
  out.roads = order;
  for (const auto& id : order) {
    auto r = require_index(id);
    out.series.push_back(series[r]);
    out.imputed.push_back(imputed[r]);
  }
  return out;
}

void SpeedPanel::validate_shape() const {
  if (series.size() != roads.size() || imputed.size() != roads.size())
    throw InvalidArgument("panel road count mismatch");
  const auto n = length();
  for (std::size_t r = 0; r < roads.size(); ++r) {
    if (series[r].size() != n || imputed[r].size() != n)
      throw InvalidArgument("panel series for '" + roads[r] + "' has the wrong length");
  }
}

SpeedPanel aggregate_5min(const std::vector<Reading>& readings,
                          const std::vector<RoadId>& road_order) {
  SpeedPanel panel;
  if (readings.empty()) {
    panel.roads = road_order;
    panel.series.assign(road_order.size(), {});
    panel.imputed.assign(road_order.size(), {});
    return panel;
  }
  auto [lo, hi] = std::minmax_element(readings.begin(), readings.end(),
                                      [](const Reading& a, const Reading& b) { return a.time < b.time; });
  auto floor_grid = [](Timestamp t) {
    auto s = t.time_since_epoch().count();
    auto q = s / kIntervalSeconds;
    if (s % kIntervalSeconds < 0) --q;
    return Timestamp{std::chrono::seconds(q * kIntervalSeconds)};
  };
  panel.start = floor_grid(lo->time);
  const auto length =
      static_cast<std::size_t>((floor_grid(hi->time) - panel.start).count() / kIntervalSeconds) + 1;

  std::map<RoadId, std::size_t> index;
  for (const auto& id : road_order) index.emplace(id, index.size());
  panel.roads = road_order;
  if (road_order.empty()) {
    for (const auto& rd : readings) {
      if (index.emplace(rd.road, index.size()).second) panel.roads.push_back(rd.road);
    }
  }

  std::vector<std::vector<double>> sum(panel.roads.size(), std::vector<double>(length, 0.0));
  std::vector<std::vector<std::size_t>> count(panel.roads.size(), std::vector<std::size_t>(length, 0));
  for (const auto& rd : readings) {
    auto it = index.find(rd.road);
    if (it == index.end()) continue;
    auto t = static_cast<std::size_t>((floor_grid(rd.time) - panel.start).count() / kIntervalSeconds);
    sum[it->second][t] += rd.speed;
    ++count[it->second][t];
  }
  for (std::size_t r = 0; r < panel.roads.size(); ++r) {
    std::vector<double> s(length, kNaN);
    for (std::size_t t = 0; t < length; ++t) {
      if (count[r][t]) s[t] = sum[r][t] / static_cast<double>(count[r][t]);
    }
    panel.series.push_back(std::move(s));
    panel.imputed.emplace_back(length, false);
  }
  return panel;
}

SpeedPanel fill_missing(const SpeedPanel& panel) {
  panel.validate_shape();
  SpeedPanel out = panel;
  const auto n = panel.length();
  std::vector<RoadId> empty_roads;
  for (std::size_t r = 0; r < panel.road_count(); ++r) {
    // (weekday, slot) -> running sum / count over observed cells
    std::vector<double> sum(7 * kSlotsPerDay, 0.0);
    std::vector<std::size_t> cnt(7 * kSlotsPerDay, 0);
    double total = 0.0;
    std::size_t total_n = 0;
    bool any_missing = false;
    for (std::size_t t = 0; t < n; ++t) {
      if (panel.missing(r, t)) {
        any_missing = true;
        continue;
      }
      auto ts = panel.time_at(t);
      auto key = static_cast<std::size_t>(day_of_week(ts) * kSlotsPerDay + slot_of_day(ts));
      sum[key] += panel.series[r][t];
      ++cnt[key];
      total += panel.series[r][t];
      ++total_n;
    }
    if (!any_missing) continue;
    if (total_n == 0) {
      empty_roads.push_back(panel.roads[r]);
      continue;
    }
    const double global_mean = total / static_cast<double>(total_n);
    for (std::size_t t = 0; t < n; ++t) {
      if (!panel.missing(r, t)) continue;
      auto ts = panel.time_at(t);
      auto key = static_cast<std::size_t>(day_of_week(ts) * kSlotsPerDay + slot_of_day(ts));
      out.series[r][t] = cnt[key] ? sum[key] / static_cast<double>(cnt[key]) : global_mean;
      out.imputed[r][t] = true;
    }
  }
  if (!empty_roads.empty()) {
    std::string list;
    for (const auto& id : empty_roads) list += (list.empty() ? "" : ", ") + id;
    throw InvalidArgument("roads with no observations: " + list);
  }
  return out;
}

PanelSplit chronological_split(const SpeedPanel& panel, const SplitSpec& spec,
                               std::size_t min_segment) {
  const double sum = spec.train + spec.val + spec.test;
  if (!(spec.train > 0 && spec.val > 0 && spec.test > 0) || std::abs(sum - 1.0) > 1e-9)
    throw InvalidArgument("split fractions must be positive and sum to 1");
  const auto n = panel.length();
  auto take = [n](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  const auto n_train = take(spec.train);
  const auto n_val = take(spec.val);
  const auto n_test = n - n_train - n_val;
  if (n_train < min_segment || n_val < min_segment || n_test < min_segment)
    throw InvalidArgument("split segment shorter than " + std::to_string(min_segment) + " steps");
  return {panel.slice(0, n_train), panel.slice(n_train, n_train + n_val),
          panel.slice(n_train + n_val, n)};
}

TrendVector daily_trend(const SpeedPanel& panel, const RoadId& road) {
  const auto r = panel.require_index(road);
  std::array<double, kSlotsPerDay> obs_sum{}, imp_sum{};
  std::array<std::size_t, kSlotsPerDay> obs_n{}, imp_n{};
  double total = 0.0;
  std::size_t total_n = 0;
  for (std::size_t t = 0; t < panel.length(); ++t) {
    if (panel.missing(r, t)) continue;
    auto s = static_cast<std::size_t>(slot_of_day(panel.time_at(t)));
    const double v = panel.series[r][t];
    if (panel.imputed[r][t]) {
      imp_sum[s] += v;
      ++imp_n[s];
    } else {
      obs_sum[s] += v;
      ++obs_n[s];
    }
    total += v;
    ++total_n;
  }
  const double fallback = total_n ? total / static_cast<double>(total_n) : 0.0;
  TrendVector tv;
  tv.slots.resize(kSlotsPerDay);
  tv.support.resize(kSlotsPerDay);
  for (std::size_t s = 0; s < kSlotsPerDay; ++s) {
    if (obs_n[s]) {
      tv.slots[s] = obs_sum[s] / static_cast<double>(obs_n[s]);
      tv.support[s] = obs_n[s];
    } else if (imp_n[s]) {
      tv.slots[s] = imp_sum[s] / static_cast<double>(imp_n[s]);
      tv.support[s] = imp_n[s];
    } else {
      tv.slots[s] = fallback;
      tv.support[s] = 0;
    }
  }
  return tv;
}

std::vector<double> z_normalize(const std::vector<double>& values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / n);
  std::vector<double> out(values.size(), 0.0);
  if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean) / sd;
  return out;
}

}  // namespace attnlab
