#include "attnlab/error_analytics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

int horizon_step(int minutes) {
  if (minutes <= 0 || minutes % 5 != 0 || minutes > 5 * kWindowSteps)
    throw InvalidArgument(fmt::format("horizon must be a multiple of 5 minutes up to 60, got {}", minutes));
  return minutes / 5;
}

std::size_t horizon_index(int minutes) {
  auto it = std::find(kHorizons.begin(), kHorizons.end(), minutes);
  if (it == kHorizons.end()) throw InvalidArgument(fmt::format("horizon must be one of 15, 30, 45, 60; got {}", minutes));
  return static_cast<std::size_t>(it - kHorizons.begin());
}

ErrorMetrics error_metrics(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw InvalidArgument("prediction/actual length mismatch");
  ErrorMetrics m;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t pct_n = 0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (!std::isfinite(predicted[i]) || !std::isfinite(actual[i])) continue;
    const double e = predicted[i] - actual[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (actual[i] != 0.0) {
      pct_sum += std::abs(e / actual[i]);
      ++pct_n;
    }
    ++m.count;
  }
  if (m.count == 0) return {kNaN, kNaN, kNaN, 0};
  const auto n = static_cast<double>(m.count);
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  m.mape = pct_n ? 100.0 * pct_sum / static_cast<double>(pct_n) : kNaN;
  return m;
}

const RoadErrors* ErrorTable::find(const RoadId& road) const {
  for (const auto& r : rows)
    if (r.road == road) return &r;
  return nullptr;
}

double ErrorTable::mae(const RoadId& road, int horizon) const {
  const auto* r = find(road);
  if (!r) throw NotFound("road '" + road + "' has no error entry");
  return r->by_horizon[horizon_index(horizon)].mae;
}

ErrorTable compute_errors(const Forecasts& f, const SpeedPanel& actuals) {
  ErrorTable table;
  for (std::size_t i = 0; i < f.roads.size(); ++i) {
    const auto pr = actuals.require_index(f.roads[i]);
    RoadErrors re;
    re.road = f.roads[i];
    double mae_sum = 0.0;
    for (std::size_t h = 0; h < kHorizons.size(); ++h) {
      const auto step = static_cast<std::size_t>(horizon_step(kHorizons[h]) - 1);
      std::vector<double> pred, act;
      for (std::size_t w = 0; w < f.origins.size(); ++w) {
        const auto t = f.origins[w] + step;
        if (t >= actuals.length() || actuals.missing(pr, t) || actuals.imputed[pr][t]) continue;
        pred.push_back(f.values[w](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(step)));
        act.push_back(actuals.series[pr][t]);
      }
      re.by_horizon[h] = error_metrics(pred, act);
      if (re.by_horizon[h].count == 0) re.flagged = true;
      mae_sum += re.by_horizon[h].mae;
    }
    re.average_mae = re.flagged ? kNaN : mae_sum / static_cast<double>(kHorizons.size());
    table.rows.push_back(std::move(re));
  }
  return table;
}

double percentile_linear(std::vector<double> v, double p) {
  if (v.empty()) throw InvalidArgument("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

bool ErrorCohorts::is_low(const RoadId& road) const { return std::find(low.begin(), low.end(), road) != low.end(); }
bool ErrorCohorts::is_high(const RoadId& road) const {
  return std::find(high.begin(), high.end(), road) != high.end();
}

ErrorCohorts quartile_cohorts(const ErrorTable& table, int horizon) {
  const auto h = horizon_index(horizon);
  ErrorCohorts c;
  c.horizon = horizon;
  std::vector<double> values;
  for (const auto& r : table.rows) {
    if (r.flagged || !std::isfinite(r.by_horizon[h].mae)) {
      c.excluded.push_back(r.road);
      continue;
    }
    values.push_back(r.by_horizon[h].mae);
  }
  if (values.size() < 4)
    throw InvalidArgument(fmt::format("quartile cohorts need at least 4 roads with errors, have {}", values.size()));
  c.q1 = percentile_linear(values, 0.25);
  c.q3 = percentile_linear(values, 0.75);
  for (const auto& r : table.rows) {
    if (r.flagged || !std::isfinite(r.by_horizon[h].mae)) continue;
    if (r.by_horizon[h].mae < c.q1) c.low.push_back(r.road);
    if (r.by_horizon[h].mae > c.q3) c.high.push_back(r.road);
  }
  std::sort(c.low.begin(), c.low.end());
  std::sort(c.high.begin(), c.high.end());
  return c;
}

std::vector<RoadId> mae_filter(const ErrorTable& table, int horizon, double threshold) {
  const auto h = horizon_index(horizon);
  std::vector<RoadId> out;
  for (const auto& r : table.rows)
    if (!r.flagged && r.by_horizon[h].mae > threshold) out.push_back(r.road);
  return out;
}

std::vector<RoadId> top_error_fraction(const ErrorTable& table, int horizon, double fraction) {
  const auto h = horizon_index(horizon);
  std::vector<std::pair<double, RoadId>> v;
  for (const auto& r : table.rows)
    if (!r.flagged) v.emplace_back(r.by_horizon[h].mae, r.road);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size()) - 1e-9)));
  std::vector<RoadId> out;
  for (std::size_t i = 0; i < std::min(n, v.size()); ++i) out.push_back(v[i].second);
  return out;
}

SpeedHistogram speed_histogram(std::span<const double> speeds, double bin_width) {
  if (!(bin_width > 0)) throw InvalidArgument("bin width must be positive");
  SpeedHistogram h;
  h.bin_width = bin_width;
  double sum = 0.0;
  std::size_t n = 0;
  for (double s : speeds) {
    if (!std::isfinite(s) || s < 0) continue;
    const auto b = static_cast<std::size_t>(std::floor(s / bin_width));
    if (b >= h.counts.size()) h.counts.resize(b + 1, 0);
    ++h.counts[b];
    sum += s;
    ++n;
  }
  const std::size_t peak = h.counts.empty() ? 0 : *std::max_element(h.counts.begin(), h.counts.end());
  for (auto c : h.counts) h.heights.push_back(peak ? static_cast<double>(c) / static_cast<double>(peak) : 0.0);
  if (n > 1) {
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (double s : speeds)
      if (std::isfinite(s) && s >= 0) ss += (s - mean) * (s - mean);
    h.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return h;
}

SpeedHistogram speed_histogram(const SpeedPanel& panel, const RoadId& road, double bin_width) {
  const auto r = panel.require_index(road);
  std::vector<double> observed;
  for (std::size_t t = 0; t < panel.length(); ++t)
    if (!panel.imputed[r][t]) observed.push_back(panel.series[r][t]);
  return speed_histogram(observed, bin_width);
}

std::string WindowedAE::display() const { return fmt::format("AE: {:.2f} STD:{:.2f}", ae, stddev); }

WindowedAE windowed_ae(std::span<const double> actual, std::span<const double> predicted, std::size_t t) {
  constexpr std::size_t kHour = 12;
  if (t + 1 < kHour) throw InvalidArgument("windowed AE needs an hour of history before the cursor");
  if (t >= actual.size() || t >= predicted.size()) throw InvalidArgument("cursor beyond the series");
  WindowedAE w;
  double ae = 0.0, sum = 0.0;
  std::size_t n_ae = 0, n = 0;
  for (std::size_t u = t + 1 - kHour; u <= t; ++u) {
    if (!std::isfinite(actual[u])) continue;
    sum += actual[u];
    ++n;
    if (std::isfinite(predicted[u])) {
      ae += std::abs(predicted[u] - actual[u]);
      ++n_ae;
    }
  }
  if (n_ae == 0) throw InvalidArgument("no predictions in the trailing hour");
  w.ae = ae / static_cast<double>(n_ae);
  if (n > 1) {
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t u = t + 1 - kHour; u <= t; ++u)
      if (std::isfinite(actual[u])) ss += (actual[u] - mean) * (actual[u] - mean);
    w.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return w;
}

std::vector<double> horizon_series(const Forecasts& f, std::size_t road, int horizon, std::size_t length) {
  const auto step = static_cast<std::size_t>(horizon_step(horizon) - 1);
  std::vector<double> out(length, kNaN);
  for (std::size_t w = 0; w < f.origins.size(); ++w) {
    const auto t = f.origins[w] + step;
    if (t < length) out[t] = f.values[w](static_cast<Eigen::Index>(road), static_cast<Eigen::Index>(step));
  }
  return out;
}

double HistoricalAverage::at(std::size_t road, Timestamp time) const {
  const auto slot = static_cast<std::size_t>(slot_of_day(time));
  const double v = by_weekday_slot[road][static_cast<std::size_t>(day_of_week(time)) * kSlotsPerDay + slot];
  if (std::isfinite(v)) return v;
  if (std::isfinite(by_slot[road][slot])) return by_slot[road][slot];
  return overall[road];
}

HistoricalAverage fit_historical_average(const SpeedPanel& train) {
  HistoricalAverage ha;
  ha.roads = train.roads;
  for (std::size_t r = 0; r < train.road_count(); ++r) {
    std::vector<double> ws(7 * kSlotsPerDay, 0.0), s(kSlotsPerDay, 0.0);
    std::vector<std::size_t> wn(7 * kSlotsPerDay, 0), sn(kSlotsPerDay, 0);
    double total = 0.0;
    std::size_t tn = 0;
    for (std::size_t t = 0; t < train.length(); ++t) {
      if (train.missing(r, t) || train.imputed[r][t]) continue;
      const auto time = train.time_at(t);
      const auto slot = static_cast<std::size_t>(slot_of_day(time));
      const auto key = static_cast<std::size_t>(day_of_week(time)) * kSlotsPerDay + slot;
      const double v = train.series[r][t];
      ws[key] += v;
      ++wn[key];
      s[slot] += v;
      ++sn[slot];
      total += v;
      ++tn;
    }
    for (std::size_t k = 0; k < ws.size(); ++k) ws[k] = wn[k] ? ws[k] / static_cast<double>(wn[k]) : kNaN;
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = sn[k] ? s[k] / static_cast<double>(sn[k]) : kNaN;
    ha.by_weekday_slot.push_back(std::move(ws));
    ha.by_slot.push_back(std::move(s));
    ha.overall.push_back(tn ? total / static_cast<double>(tn) : kNaN);
  }
  return ha;
}

Forecasts historical_average_forecasts(const HistoricalAverage& ha, const SpeedPanel& panel,
                                       const std::vector<std::size_t>& origins) {
  Forecasts f;
  f.roads = panel.roads;
  f.origins = origins;
  std::vector<std::size_t> ha_row;
  for (const auto& id : panel.roads) {
    auto it = std::find(ha.roads.begin(), ha.roads.end(), id);
    if (it == ha.roads.end()) throw NotFound("road '" + id + "' absent from the historical average");
    ha_row.push_back(static_cast<std::size_t>(it - ha.roads.begin()));
  }
  for (auto o : origins) {
    Eigen::MatrixXd v(static_cast<Eigen::Index>(panel.road_count()), kWindowSteps);
    for (std::size_t i = 0; i < panel.road_count(); ++i)
      for (int s = 0; s < kWindowSteps; ++s)
        v(static_cast<Eigen::Index>(i), s) = ha.at(ha_row[i], panel.time_at(o + static_cast<std::size_t>(s)));
    f.values.push_back(std::move(v));
  }
  return f;
}

namespace {
nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
}  // namespace

nlohmann::json to_json(const ErrorTable& table) {
  auto rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    nlohmann::json hz = nlohmann::json::object();
    for (std::size_t h = 0; h < kHorizons.size(); ++h) {
      const auto& m = r.by_horizon[h];
      hz[std::to_string(kHorizons[h])] = {{"mae", number_or_null(m.mae)},
                                          {"rmse", number_or_null(m.rmse)},
                                          {"mape", number_or_null(m.mape)},
                                          {"count", m.count}};
    }
    rows.push_back({{"road_id", r.road}, {"horizons", hz}, {"average_mae", number_or_null(r.average_mae)},
                    {"flagged", r.flagged}});
  }
  return {{"roads", rows}};
}

nlohmann::json to_json(const ErrorCohorts& c) {
  return {{"horizon", c.horizon}, {"q1", c.q1}, {"q3", c.q3}, {"low", c.low}, {"high", c.high},
          {"excluded", c.excluded}};
}

nlohmann::json to_json(const SpeedHistogram& h) {
  return {{"bin_width", h.bin_width}, {"counts", h.counts}, {"heights", h.heights}, {"std", h.stddev}};
}

void write_errors_csv(const ErrorTable& table, std::ostream& out) {
  out << "road_id,horizon,mae,rmse,mape\n";
  auto num = [](double v) { return std::isfinite(v) ? fmt::format("{:.6f}", v) : std::string(); };
  for (const auto& r : table.rows)
    for (std::size_t h = 0; h < kHorizons.size(); ++h) {
      const auto& m = r.by_horizon[h];
      out << r.road << ',' << kHorizons[h] << ',' << num(m.mae) << ',' << num(m.rmse) << ',' << num(m.mape) << '\n';
    }
}

}  // namespace attnlab
