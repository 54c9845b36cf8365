#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/speed_panel.hpp"
#include "attnlab/st_model.hpp"

namespace attnlab {

inline constexpr std::array<int, 4> kHorizons{15, 30, 45, 60};
inline constexpr int kDefaultCohortHorizon = 15;

/// Prediction step (1-based) for a horizon in minutes: 15 -> 3.
/// Throws InvalidArgument unless minutes is a positive multiple of 5 up to 60.
int horizon_step(int minutes);
/// Position of `minutes` in kHorizons. Throws InvalidArgument.
std::size_t horizon_index(int minutes);

struct ErrorMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent, over nonzero actuals; NaN when none
  std::size_t count = 0;
};

/// Pairs with a non-finite value on either side are skipped.
ErrorMetrics error_metrics(std::span<const double> predicted, std::span<const double> actual);

struct RoadErrors {
  RoadId road;
  std::array<ErrorMetrics, 4> by_horizon{};
  double average_mae = 0.0;
  bool flagged = false;  // no test overlap
};

struct ErrorTable {
  std::vector<RoadErrors> rows;

  const RoadErrors* find(const RoadId& road) const;
  /// Throws NotFound.
  double mae(const RoadId& road, int horizon) const;
};

/// Errors of `forecasts` against `actuals` (observed cells only; imputed
/// cells do not count).
ErrorTable compute_errors(const Forecasts& forecasts, const SpeedPanel& actuals);

/// Type-7 (linear interpolation) percentile, p in [0, 1].
double percentile_linear(std::vector<double> values, double p);

struct ErrorCohorts {
  int horizon = kDefaultCohortHorizon;
  double q1 = 0.0;
  double q3 = 0.0;
  std::vector<RoadId> low;   // MAE < q1
  std::vector<RoadId> high;  // MAE > q3
  std::vector<RoadId> excluded;

  bool is_low(const RoadId& road) const;
  bool is_high(const RoadId& road) const;
};

/// Throws InvalidArgument with fewer than 4 usable roads.
ErrorCohorts quartile_cohorts(const ErrorTable& table, int horizon = kDefaultCohortHorizon);

/// Roads whose MAE exceeds `threshold`.
std::vector<RoadId> mae_filter(const ErrorTable& table, int horizon, double threshold);

/// Roads in the top `fraction` by MAE (at least one).
std::vector<RoadId> top_error_fraction(const ErrorTable& table, int horizon, double fraction);

struct SpeedHistogram {
  double bin_width = 10.0;
  std::vector<std::size_t> counts;  // bin b covers [b*w, (b+1)*w)
  std::vector<double> heights;      // counts / max count
  double stddev = 0.0;              // sample standard deviation
};

SpeedHistogram speed_histogram(std::span<const double> speeds, double bin_width);
/// Observed speeds of one road. Throws NotFound.
SpeedHistogram speed_histogram(const SpeedPanel& panel, const RoadId& road, double bin_width);

struct WindowedAE {
  double ae = 0.0;
  double stddev = 0.0;
  std::string display() const;  // "AE: 1.24 STD:3.10"
};

/// Mean absolute error and sample std of actual speeds over the 12 steps
/// ending at `t`. Throws InvalidArgument with less than an hour of history.
WindowedAE windowed_ae(std::span<const double> actual, std::span<const double> predicted, std::size_t t);

/// Per-time prediction at one horizon for one forecast road: entry t holds
/// the prediction made for panel step t, NaN where no window covers it.
std::vector<double> horizon_series(const Forecasts& forecasts, std::size_t road, int horizon, std::size_t length);

/// Weekday x slot mean of the training panel, with a slot-of-day mean
/// fallback and the road mean after that.
struct HistoricalAverage {
  std::vector<RoadId> roads;
  std::vector<std::vector<double>> by_weekday_slot;  // [road][weekday*288+slot]
  std::vector<std::vector<double>> by_slot;          // [road][slot]
  std::vector<double> overall;

  double at(std::size_t road, Timestamp time) const;
};

HistoricalAverage fit_historical_average(const SpeedPanel& train);
Forecasts historical_average_forecasts(const HistoricalAverage& ha, const SpeedPanel& panel,
                                       const std::vector<std::size_t>& origins);

nlohmann::json to_json(const ErrorTable& table);
nlohmann::json to_json(const ErrorCohorts& cohorts);
nlohmann::json to_json(const SpeedHistogram& h);
void write_errors_csv(const ErrorTable& table, std::ostream& out);

}  // namespace attnlab
