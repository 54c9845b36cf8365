#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/attention_analytics.hpp"
#include "attnlab/clustering.hpp"
#include "attnlab/dtw.hpp"
#include "attnlab/error_analytics.hpp"
#include "attnlab/granger.hpp"
#include "attnlab/st_model.hpp"

namespace attnlab {

inline constexpr int kDefaultTargetsPerCluster = 3;
inline constexpr double kDefaultAlpha = 0.5;

enum class TargetSelection {
  Cohort,      // k highest-error roads of the high cohort per cluster
  TopPercent,  // the highest-error 10% of roads within the selected clusters
};

/// Per selected cluster, the k highest-MAE roads of the high cohort, ties by
/// road id ascending. Throws InvalidArgument when `selected` is empty or k < 1.
std::vector<RoadId> select_targets(const ErrorTable& table, const ErrorCohorts& cohorts,
                                   const ClusterAssignment& clusters, const std::vector<int>& selected, int k);

struct ReferenceChoice {
  RoadId road;
  double score = 0.0;
  double sim_dtw = 0.0;
  double sim_granger = 0.0;
  double distance = 0.0;
  std::optional<GrangerStat> granger;  // reference -> target, when testable
  std::optional<std::string> warning;
};

/// score = alpha * (1 - d / max d) + (1 - alpha) * F / max F, with F counted
/// only when p < 0.05. Ties go to the smaller distance, then the road id.
/// Throws InvalidArgument when `candidates` is empty.
ReferenceChoice find_reference(const RoadId& target, const std::vector<RoadId>& candidates, const DistanceMatrix& d,
                               const SpeedPanel& panel, double alpha = kDefaultAlpha, int max_lag = kDefaultMaxLag);

struct PlannedTarget {
  RoadId target;
  int cluster = 0;
  double mae = 0.0;
  bool same_cluster_reference = true;
  ReferenceChoice reference;
};

struct EnforcementPlan {
  std::vector<int> clusters;
  int k = kDefaultTargetsPerCluster;
  double alpha = kDefaultAlpha;
  int horizon = kDefaultCohortHorizon;
  bool per_head = true;
  TargetSelection selection = TargetSelection::Cohort;
  std::vector<PlannedTarget> targets;
  std::vector<std::string> warnings;
};

struct PlanOptions {
  int k = kDefaultTargetsPerCluster;
  double alpha = kDefaultAlpha;
  int horizon = kDefaultCohortHorizon;
  bool per_head = true;
  TargetSelection selection = TargetSelection::Cohort;
  double top_fraction = 0.1;
  int max_lag = kDefaultMaxLag;
};

/// Targets plus their references. References come from the low cohort of
/// the target's cluster, or from every low-error road when that is empty.
/// `panel` feeds the Granger tests (normally the training split).
EnforcementPlan plan_enforcement(const ErrorTable& table, const ErrorCohorts& cohorts,
                                 const ClusterAssignment& clusters, const DistanceMatrix& d, const SpeedPanel& panel,
                                 const std::vector<int>& selected, const PlanOptions& options = {});

/// Enforced ST row of one target in one window: per head, the mass on the
/// target's own slot and on the reference, by past step.
struct EnforcedAttention {
  std::vector<Eigen::VectorXd> self;       // [head]: 12
  std::vector<Eigen::VectorXd> reference;  // [head]: 12
  RoadAttentionOverride override_rows;
  bool degenerate = false;
};

/// The target's row places the reference's self-reference profile on the
/// target's self slot and gives the remaining mass to the reference road
/// along the reference's temporal marginal, then renormalizes. With
/// `per_head` false every head receives the head-mean construction.
EnforcedAttention build_enforced_attention(const ModelState& model, const AttentionBundle& bundle, std::size_t target,
                                           std::size_t reference, int horizon, bool per_head = true);

struct PairedHistogram {
  std::vector<double> edges;  // bins.size() + 1
  std::vector<std::size_t> before;
  std::vector<std::size_t> after;
  double mean_before = 0.0;
  double mean_after = 0.0;
  double shift = 0.0;  // mean_after - mean_before
};

PairedHistogram report_histogram(const std::vector<double>& before, const std::vector<double>& after,
                                 std::size_t bins = 20);

struct TargetOutcome {
  RoadId road;
  RoadId reference;
  std::array<double, 4> mae_before{};
  std::array<double, 4> mae_after{};
};

struct EnforcementReport {
  EnforcementPlan plan;
  std::size_t windows = 0;
  std::vector<TargetOutcome> targets;
  PairedHistogram histogram;  // pooled absolute errors at the plan horizon
  double mean_mae_before = 0.0;
  double mean_mae_after = 0.0;
  double mean_delta_mae = 0.0;
  double fraction_improved = 0.0;
  bool others_unchanged = true;  // non-target predictions bitwise identical
  std::size_t degenerate_rows = 0;
  std::vector<std::string> warnings;
};

struct AlternativeOptions {
  std::size_t batch_windows = 32;
  std::size_t histogram_bins = 20;
};

/// Runs inference on `origins` of `panel` twice: unmodified, then with every
/// planned target's attention replaced. Weights are never modified.
EnforcementReport run_alternative_inference(const ModelState& model, const EnforcementPlan& plan,
                                            const SpeedPanel& panel, const std::vector<std::size_t>& origins,
                                            const AlternativeOptions& options = {});

nlohmann::json to_json(const EnforcementPlan& plan);
nlohmann::json to_json(const EnforcementReport& report);
void write_enforcement_csv(const EnforcementReport& report, std::ostream& out);

}  // namespace attnlab
