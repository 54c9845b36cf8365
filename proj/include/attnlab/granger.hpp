#pragma once

#include <span>
#include <string>
#include <vector>

#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace attnlab {

inline constexpr int kDefaultMaxLag = 12;
inline constexpr double kSignificance = 0.05;

struct GrangerStat {
  int lag = 0;
  double f_value = 0.0;
  int df_num = 0;
  int df_den = 0;
  double p_value = 1.0;
};

struct CausalityResult {
  RoadId cause;
  RoadId effect;
  GrangerStat stat;

  bool displayable() const { return stat.p_value < kSignificance; }
};

/// Bivariate linear Granger F-test of "x helps predict y". The lag order is
/// chosen in [1, max_lag] by BIC of the unrestricted regression over the
/// common sample; the final test at that lag uses every usable row.
/// Throws InvalidArgument on length mismatch or length <= 3 * max_lag and
/// Untestable when either design matrix is rank deficient.
GrangerStat granger_test(std::span<const double> x, std::span<const double> y,
                         int max_lag = kDefaultMaxLag);

/// The F-test at a fixed lag.
GrangerStat granger_f_test(std::span<const double> x, std::span<const double> y, int lag);

/// "F[6,268]=16.2, p=0.001"; p below 0.001 renders as "p<0.001".
std::string format_granger(const GrangerStat& stat);

/// Tests every candidate -> target, keeps p < 0.05 and sorts by F
/// descending (ties by road id). Untestable pairs are skipped.
std::vector<CausalityResult> causality_scan(const RoadId& target, const std::vector<RoadId>& candidates,
                                            const SpeedPanel& panel, int max_lag = kDefaultMaxLag);

}  // namespace attnlab
