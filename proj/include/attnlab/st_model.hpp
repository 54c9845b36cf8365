#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "attnlab/autodiff.hpp"
#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace attnlab {

inline constexpr int kWindowSteps = 12;
/// Raw input features per (road, step): z-speed, sin/cos time of day,
/// weekday one-hot.
inline constexpr int kFeatureCount = 10;

struct ModelConfig {
  int input_steps = kWindowSteps;
  int output_steps = kWindowSteps;
  int heads = 4;
  int width = 32;
  int ffn_width = 64;
  int encoder_layers = 1;
  int decoder_layers = 1;
  double learning_rate = 1e-3;
  int epochs = 20;
  int batch_size = 16;
  std::uint64_t seed = 0;
  int patience = 5;
  int windows_per_epoch = 0;  // 0 = every training window
  int val_stride = 4;         // validation uses every n-th window origin
  double grad_clip = 5.0;

  /// Throws InvalidArgument.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Named parameter tensors in a fixed order.
class ParameterSet {
 public:
  void add(std::string name, ad::Matrix value);
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  ad::Matrix& operator[](std::size_t i) { return values_[i]; }
  const ad::Matrix& operator[](std::size_t i) const { return values_[i]; }
  std::size_t index_of(const std::string& name) const;  // throws NotFound
  const ad::Matrix& get(const std::string& name) const { return values_[index_of(name)]; }
  ad::Matrix& get(const std::string& name) { return values_[index_of(name)]; }
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Matrix> values_;
  std::map<std::string, std::size_t> index_;
};

struct ModelState {
  ModelConfig config;
  RoadNetwork network;
  std::string unit = "km/h";
  std::vector<double> mean;    // per road, training split only
  std::vector<double> stddev;  // per road, training split only
  ParameterSet params;
  bool trained = false;
  int epochs_run = 0;
  double best_val_mae = std::numeric_limits<double>::quiet_NaN();

  std::size_t roads() const { return network.size(); }
};

/// Fresh parameters for `network` with normalization from `train`.
ModelState init_model(const ModelConfig& config, const RoadNetwork& network, const SpeedPanel& train);

/// Per-road mean/std of the panel (std floored at 1e-6).
void normalization_stats(const SpeedPanel& panel, std::vector<double>& mean, std::vector<double>& stddev);

/// Input feature rows for one road at panel step `t`:
/// [z-speed, sin(slot), cos(slot), weekday one-hot x7]. Throws
/// InvalidArgument when the speed is missing.
std::array<double, kFeatureCount> step_features(double speed, double mean, double stddev, Timestamp time);

/// Fixed sinusoidal position table, steps x width.
ad::Matrix position_encoding(int steps, int width);

/// Window origins: `origin` is the panel index of the first predicted step;
/// inputs are [origin - 12, origin) and targets [origin, origin + 12).
std::vector<std::size_t> window_origins(const SpeedPanel& panel, std::size_t stride = 1);

/// Flat spatial weights of one encoder layer for one window. Row for road i
/// at input step s and head h lists weights over in_neighbors(i), then the
/// sentinel.
class SpatialWeights {
 public:
  SpatialWeights() = default;
  SpatialWeights(int heads, int steps, std::vector<std::size_t> offsets, std::vector<double> data)
      : heads_(heads), steps_(steps), offsets_(std::move(offsets)), data_(std::move(data)) {}
  std::span<const double> row(int head, int step, std::size_t road) const {
    const auto block = offsets_.back();
    const auto start = (static_cast<std::size_t>(step) * heads_ + head) * block + offsets_[road];
    return {data_.data() + start, offsets_[road + 1] - offsets_[road]};
  }
  int heads() const { return heads_; }
  int steps() const { return steps_; }
  const std::vector<double>& data() const { return data_; }

 private:
  int heads_ = 0;
  int steps_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<double> data_;
};

/// Flat temporal weights for one window: per head and road a q x k table.
class TemporalWeights {
 public:
  TemporalWeights() = default;
  TemporalWeights(int heads, int roads, int q_steps, int k_steps)
      : heads_(heads), roads_(roads), q_(q_steps), k_(k_steps),
        data_(static_cast<std::size_t>(heads) * roads * q_steps * k_steps, 0.0) {}
  double& at(int head, std::size_t road, int q, int k) { return data_[index(head, road, q, k)]; }
  double at(int head, std::size_t road, int q, int k) const { return data_[index(head, road, q, k)]; }
  std::span<const double> row(int head, std::size_t road, int q) const {
    return {data_.data() + index(head, road, q, 0), static_cast<std::size_t>(k_)};
  }
  int heads() const { return heads_; }
  int q_steps() const { return q_; }
  int k_steps() const { return k_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

 private:
  std::size_t index(int head, std::size_t road, int q, int k) const {
    return ((road * static_cast<std::size_t>(heads_) + static_cast<std::size_t>(head)) * q_ + q) * k_ + k;
  }
  int heads_ = 0, roads_ = 0, q_ = 0, k_ = 0;
  std::vector<double> data_;
};

/// Every attention table from one forward pass over one window.
struct AttentionBundle {
  std::size_t origin = 0;
  Timestamp window_start{};
  std::vector<SpatialWeights> sa;         // per encoder layer
  std::vector<TemporalWeights> enc_ta;    // encoder self-attention, per layer
  std::vector<TemporalWeights> cross_ta;  // decoder -> encoder, per decoder layer
  /// Decoder spatial weights per decoder layer; step s is decoder position s
  /// at the iteration that produced prediction s.
  std::vector<SpatialWeights> dec_sa;
};

/// Inference-time replacement of one road's attention in one window.
struct RoadAttentionOverride {
  int encoder_layer = -1;  // -1 = last
  int decoder_layer = -1;  // -1 = last
  /// sa_refs[h][s]: (road index, weight) pairs at input step s.
  std::vector<std::vector<std::vector<std::pair<int, double>>>> sa_refs;
  std::vector<std::vector<double>> sa_sentinel;  // [h][s]
  std::vector<ad::Matrix> cross_ta;              // [h], output_steps x input_steps
  /// Decoder spatial row at every decoder position: [h] -> (road, weight).
  std::vector<std::vector<std::pair<int, double>>> dec_sa_refs;
  std::vector<double> dec_sa_sentinel;  // [h]
};

/// Keyed by (window position within the call, road index).
using AttentionOverrides = std::map<std::pair<std::size_t, std::size_t>, RoadAttentionOverride>;

/// Inputs of every spatial attention call of an inference pass, in call
/// order; used as cross-road context when replaying with overrides.
struct ForwardTrace {
  std::vector<ad::Matrix> spatial_inputs;
};

struct PredictOptions {
  bool record_attention = false;
  bool record_trace = false;
  const AttentionOverrides* overrides = nullptr;
  /// Required with overrides: trace of the unmodified pass over the same
  /// windows. Cross-road keys and values are read from it.
  const ForwardTrace* context = nullptr;
  std::size_t batch_windows = 32;
};

/// Forecasts for a set of windows, de-normalized to the panel unit.
struct Forecasts {
  std::vector<RoadId> roads;
  std::vector<std::size_t> origins;
  std::vector<Eigen::MatrixXd> values;  // per window: roads x output_steps
};

struct PredictResult {
  Forecasts forecasts;
  std::vector<AttentionBundle> attention;  // per window when recorded
  ForwardTrace trace;                      // when recorded
};

/// Autoregressive inference. The panel must hold exactly the model's roads
/// (any order) with no missing cells in the windows used. Throws NotFound
/// for a road absent from the training graph.
PredictResult predict(const ModelState& model, const SpeedPanel& panel, const std::vector<std::size_t>& origins,
                      const PredictOptions& options = {});

struct TrainReport {
  std::vector<double> train_loss;  // per epoch, normalized MAE
  std::vector<double> val_mae;     // per epoch, panel units
  int best_epoch = -1;
};

struct TrainOptions {
  bool verbose = false;
};

/// Adam on normalized MAE with teacher forcing; keeps the parameters with the
/// best validation MAE and stops after `patience` epochs without
/// improvement. Deterministic for a fixed seed. Throws Diverged when the loss
/// becomes non-finite.
ModelState train(const SpeedPanel& train_panel, const SpeedPanel& val_panel, const RoadNetwork& network,
                 const ModelConfig& config, TrainReport* report = nullptr, const TrainOptions& options = {});

/// Normalized teacher-forced MAE for the given windows and its gradient per
/// parameter (aligned with model.params).
double loss_and_gradient(const ModelState& model, const SpeedPanel& panel, const std::vector<std::size_t>& origins,
                         std::vector<ad::Matrix>* gradient);

/// Same model with roads relabelled; `order[k]` is the old index of new road k.
ModelState permute_roads(const ModelState& model, const std::vector<std::size_t>& order);

/// Checkpoint: one JSON document with a format version, config, network,
/// normalization, parameters and the network digest.
nlohmann::json checkpoint_json(const ModelState& model);
ModelState model_from_checkpoint(const nlohmann::json& j);
void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

inline constexpr int kCheckpointVersion = 1;

}  // namespace attnlab
