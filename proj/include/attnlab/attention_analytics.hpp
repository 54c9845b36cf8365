#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "attnlab/clustering.hpp"
#include "attnlab/error_analytics.hpp"
#include "attnlab/st_model.hpp"

namespace attnlab {

/// Spatio-temporal attention of one target at one horizon. Column p is the
/// past step p + 1 (p = 0 is five minutes before the forecast origin).
/// cell_h(r, p) = TA_h(query, key) * SA_h(key step; target -> r) where the
/// key step is 11 - p.
struct STMatrix {
  RoadId target;
  std::size_t target_index = 0;
  int horizon = 15;
  std::size_t origin = 0;
  Timestamp window_start{};
  std::vector<RoadId> references;           // in-neighbors of the target
  std::vector<std::size_t> reference_index;  // model road indices
  std::vector<Eigen::MatrixXd> cells;        // [head]: references x 12
  std::vector<Eigen::VectorXd> sentinel;     // [head]: 12
  std::vector<Eigen::VectorXd> ta;           // [head]: 12, by past step
  std::vector<double> self_reference;        // [head]
  Eigen::MatrixXd mean_cells;
  Eigen::VectorXd mean_sentinel;
  double mean_self_reference = 0.0;

  int heads() const { return static_cast<int>(cells.size()); }
  /// Head h, or the head mean for h < 0.
  const Eigen::MatrixXd& view_cells(int head) const { return head < 0 ? mean_cells : cells.at(static_cast<std::size_t>(head)); }
  const Eigen::VectorXd& view_sentinel(int head) const {
    return head < 0 ? mean_sentinel : sentinel.at(static_cast<std::size_t>(head));
  }
  double view_self_reference(int head) const {
    return head < 0 ? mean_self_reference : self_reference.at(static_cast<std::size_t>(head));
  }
};

struct STOptions {
  int encoder_layer = -1;  // -1 = last
  int decoder_layer = -1;  // -1 = last
};

/// Throws NotFound for an unknown target and InvalidArgument for a horizon
/// outside 5..60 minutes.
STMatrix extract_st_attention(const ModelState& model, const AttentionBundle& bundle, std::size_t target, int horizon,
                              const STOptions& options = {});
STMatrix extract_st_attention(const ModelState& model, const AttentionBundle& bundle, const RoadId& target,
                              int horizon, const STOptions& options = {});

struct AttnArrow {
  RoadId reference;
  double intensity = 0.0;
};

struct AttnArrowSet {
  RoadId target;
  std::vector<AttnArrow> arrows;  // intensity descending, ties by id
  double self_reference = 0.0;
  double dropped = 0.0;  // mass of non-self references below the threshold
  double threshold = 0.1;
  std::string source = "encoder";
};

inline constexpr double kDefaultAttentionThreshold = 0.1;

AttnArrowSet attn_arrows(const STMatrix& st, double threshold = kDefaultAttentionThreshold, int head = -1);

/// Arrows from the decoder's spatial attention at the horizon's decoding
/// step instead of the encoder-based ST matrix.
AttnArrowSet decoder_arrows(const ModelState& model, const AttentionBundle& bundle, std::size_t target, int horizon,
                            double threshold = kDefaultAttentionThreshold, int head = -1, int decoder_layer = -1);

/// Display order of the ST view: reference positions sorted by total
/// intensity descending, ties by road id.
std::vector<std::size_t> st_display_order(const STMatrix& st, int head = -1);

/// Origin of the window whose last input step is panel step `t`.
/// Throws InvalidArgument with less than 12 steps of history.
std::size_t origin_for_cursor(std::size_t t);

/// ST matrix for the window ending at `timestamp` on `panel`.
/// Throws NotFound for an unknown road or off-grid timestamp.
STMatrix st_matrix_for_view(const ModelState& model, const SpeedPanel& panel, const RoadId& road, Timestamp timestamp,
                            int horizon, const STOptions& options = {});

enum class Scale { Global, Local };
Scale parse_scale(const std::string& s);  // throws InvalidArgument
std::string to_string(Scale s);

/// cells[g][h] is the k x k matrix of cohort g (0 = high, 1 = low) and head h.
struct HeadClusterMatrices {
  int k = 0;
  int heads = 0;
  int horizon = 15;
  std::size_t windows = 0;
  std::vector<std::vector<Eigen::MatrixXd>> cells;
  std::vector<std::vector<std::vector<bool>>> empty_rows;  // [g][h][row]
};

inline constexpr std::size_t kHeadClusterWindows = 256;

/// Up to `limit` origins drawn uniformly without replacement (seeded),
/// returned in ascending order.
std::vector<std::size_t> sample_origins(const std::vector<std::size_t>& origins, std::size_t limit, std::uint64_t seed);

/// Mean ST mass per (target cluster, reference cluster) before scaling.
/// Sentinel and self mass count toward the target's own cluster.
HeadClusterMatrices head_cluster_raw(const ModelState& model, const std::vector<AttentionBundle>& bundles,
                                     const ClusterAssignment& clusters, const ErrorCohorts& cohorts,
                                     int horizon = kDefaultCohortHorizon, const STOptions& options = {});

/// Global: every cell divided by the largest cell of all matrices.
/// Local: every row divided by its sum; empty rows stay zero.
HeadClusterMatrices normalize(const HeadClusterMatrices& raw, Scale scale);

nlohmann::json to_json(const STMatrix& st, int head = -1);
nlohmann::json to_json(const AttnArrowSet& arrows);
nlohmann::json to_json(const HeadClusterMatrices& m, Scale scale);
HeadClusterMatrices head_clusters_from_json(const nlohmann::json& j);

}  // namespace attnlab
