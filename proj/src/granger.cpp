#include "attnlab/granger.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {
namespace {

// Rows t in [first, T); columns: intercept, y lags 1..lag, then x lags 1..lag
// when `with_x`.
Eigen::MatrixXd design(std::span<const double> x, std::span<const double> y, int lag, std::size_t first,
                       bool with_x) {
  const auto rows = static_cast<Eigen::Index>(y.size() - first);
  const Eigen::Index cols = 1 + lag + (with_x ? lag : 0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::size_t t = first + static_cast<std::size_t>(r);
    m(r, 0) = 1.0;
    for (int l = 1; l <= lag; ++l) {
      m(r, l) = y[t - static_cast<std::size_t>(l)];
      if (with_x) m(r, lag + l) = x[t - static_cast<std::size_t>(l)];
    }
  }
  return m;
}

Eigen::VectorXd response(std::span<const double> y, std::size_t first) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(y.size() - first));
  for (Eigen::Index r = 0; r < v.size(); ++r) v(r) = y[first + static_cast<std::size_t>(r)];
  return v;
}

double residual_ss(const Eigen::MatrixXd& m, const Eigen::VectorXd& v) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  if (qr.rank() < m.cols()) throw Untestable("granger: rank-deficient regressors (constant or collinear series)");
  Eigen::VectorXd beta = qr.solve(v);
  return (v - m * beta).squaredNorm();
}

void check_inputs(std::span<const double> x, std::span<const double> y, int max_lag) {
  if (x.size() != y.size()) throw InvalidArgument("granger: series lengths differ");
  if (max_lag < 1) throw InvalidArgument("granger: max_lag must be positive");
  if (y.size() <= 3 * static_cast<std::size_t>(max_lag))
    throw InvalidArgument("granger: series must be longer than 3 * max_lag");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw InvalidArgument("granger: non-finite value");
}

}  // namespace

GrangerStat granger_f_test(std::span<const double> x, std::span<const double> y, int lag) {
  check_inputs(x, y, lag);
  const auto first = static_cast<std::size_t>(lag);
  const auto v = response(y, first);
  const double rss_r = residual_ss(design(x, y, lag, first, false), v);
  const double rss_u = residual_ss(design(x, y, lag, first, true), v);
  const int n = static_cast<int>(v.size());
  GrangerStat s;
  s.lag = lag;
  s.df_num = lag;
  s.df_den = n - 2 * lag - 1;
  if (s.df_den <= 0) throw Untestable("granger: not enough observations");
  if (!(rss_u > 0.0)) throw Untestable("granger: unrestricted model fits exactly");
  s.f_value = std::max(0.0, ((rss_r - rss_u) / lag) / (rss_u / s.df_den));
  boost::math::fisher_f_distribution<double> dist(s.df_num, s.df_den);
  s.p_value = std::clamp(boost::math::cdf(boost::math::complement(dist, s.f_value)), 0.0, 1.0);
  return s;
}

GrangerStat granger_test(std::span<const double> x, std::span<const double> y, int max_lag) {
  check_inputs(x, y, max_lag);
  const auto first = static_cast<std::size_t>(max_lag);
  const auto v = response(y, first);
  const double n = static_cast<double>(v.size());
  int best_lag = 1;
  double best_ic = std::numeric_limits<double>::infinity();
  for (int lag = 1; lag <= max_lag; ++lag) {
    const double rss = residual_ss(design(x, y, lag, first, true), v);
    if (!(rss > 0.0)) throw Untestable("granger: unrestricted model fits exactly");
    const double ic = n * std::log(rss / n) + std::log(n) * (2 * lag + 1);
    if (ic < best_ic) {
      best_ic = ic;
      best_lag = lag;
    }
  }
  return granger_f_test(x, y, best_lag);
}

std::string format_granger(const GrangerStat& s) {
  const std::string p = s.p_value < 0.001 ? "p<0.001" : fmt::format("p={:.3f}", s.p_value);
  return fmt::format("F[{},{}]={:.1f}, {}", s.df_num, s.df_den, s.f_value, p);
}

std::vector<CausalityResult> causality_scan(const RoadId& target, const std::vector<RoadId>& candidates,
                                            const SpeedPanel& panel, int max_lag) {
  const auto& y = panel.series[panel.require_index(target)];
  std::vector<CausalityResult> out;
  for (const auto& c : candidates) {
    if (c == target) continue;
    const auto& x = panel.series[panel.require_index(c)];
    try {
      auto stat = granger_test(x, y, max_lag);
      if (stat.p_value < kSignificance) out.push_back({c, target, stat});
    } catch (const Untestable&) {
    }
  }
  std::sort(out.begin(), out.end(), [](const CausalityResult& a, const CausalityResult& b) {
    if (a.stat.f_value != b.stat.f_value) return a.stat.f_value > b.stat.f_value;
    return a.cause < b.cause;
  });
  return out;
}

}  // namespace attnlab
