#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace attnlab::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  int id = -1;
};

/// Reverse-mode tape over dense row-major matrices. A tape built with
/// `record = false` only evaluates values.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  Var constant(Matrix value);
  Var parameter(const Matrix& value);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  /// Gradient accumulated by backward(); zero-sized when none reached `v`.
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and runs all closures.
  void backward(Var loss);

  bool recording() const { return record_; }
  bool needs_grad(Var v) const { return record_ && nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  // Op plumbing.
  Var push(Matrix value, bool needs_grad, std::function<void(Tape&, int)> back);
  Matrix& grad_ref(Var v);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;
  };
  bool record_;
  std::vector<Node> nodes_;
};

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// a + broadcast of a 1 x cols row.
Var add_row(Tape& t, Var a, Var row);
/// out.row(r) = a.row(r) + table.row(index[r]).
Var gather_add(Tape& t, Var a, Var table, std::vector<int> index);
Var relu(Tape& t, Var a);
/// Row-wise layer normalization with gain and bias rows.
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
/// Mean absolute error as a 1x1 value.
Var mean_abs_error(Tape& t, Var pred, const Matrix& target);

/// Row layout shared by the attention kernels: rows are grouped by window
/// `g`, then road `i`, then step `s`: row = (g * roads + i) * steps + s.
struct RowLayout {
  int windows = 0;
  int roads = 0;
  int steps = 0;
  Eigen::Index row(int g, int i, int s) const {
    return (static_cast<Eigen::Index>(g) * roads + i) * steps + s;
  }
  Eigen::Index rows() const { return static_cast<Eigen::Index>(windows) * roads * steps; }
};

/// Replacement weights for one spatial attention row: per head, a list of
/// (road index, weight) pairs read from the context, plus a sentinel weight.
struct SpatialRowOverride {
  std::vector<std::vector<std::pair<int, double>>> refs;
  std::vector<double> sentinel;
};

/// Graph attention with a sentinel key. For each row (g, i, s) and head,
/// the query attends over context rows (g, j, s) for j in in_neighbors(i)
/// plus the sentinel key ks(g, i, s); the sentinel value is vs(g, i, s).
/// `weights`, when non-null, is resized and filled so that the weight of
/// neighbor k of road i at (window g, step s, head h) sits at
/// ((g * steps + s) * heads + h) * offsets.back() + offsets[i] + k, with
/// k = deg(i) for the sentinel (offsets from spatial_weight_offsets).
/// Overridden rows take their weights verbatim and pass no gradient to the
/// query or keys.
struct SpatialAttentionArgs {
  Var q, k, v, ks, vs;
  int heads = 1;
  RowLayout layout;
  const std::vector<std::vector<std::size_t>>* in_neighbors = nullptr;
  const std::map<Eigen::Index, SpatialRowOverride>* overrides = nullptr;
  std::vector<double>* weights = nullptr;
};
Var spatial_attention(Tape& t, const SpatialAttentionArgs& args);

/// Start offset of each road's block (deg + 1 entries per head) within one
/// (window, step, head) block of spatial weights; the last entry is the
/// block size.
std::vector<std::size_t> spatial_weight_offsets(const std::vector<std::vector<std::size_t>>& in_neighbors);

/// Multi-head scaled dot-product attention within each (window, road)
/// group: query rows use `q_layout`, key/value rows use `kv_layout`
/// (same windows and roads). With `causal`, query step s sees keys <= s.
/// `overrides` maps a group index (g * roads + i) to per-head
/// q_steps x kv_steps weight tables used verbatim. `weights`, when
/// non-null, receives [group][head][q][k].
struct TemporalAttentionArgs {
  Var q, k, v;
  int heads = 1;
  RowLayout q_layout;
  RowLayout kv_layout;
  bool causal = false;
  const std::map<Eigen::Index, std::vector<Matrix>>* overrides = nullptr;
  std::vector<double>* weights = nullptr;
};
Var temporal_attention(Tape& t, const TemporalAttentionArgs& args);

}  // namespace attnlab::ad
