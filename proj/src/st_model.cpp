#include "attnlab/st_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {

using ad::Matrix;
using ad::RowLayout;
using ad::Tape;
using ad::Var;

void ModelConfig::validate() const {
  if (input_steps != kWindowSteps || output_steps != kWindowSteps)
    throw InvalidArgument("input_steps and output_steps must both be 12");
  if (heads < 1 || width < 1 || ffn_width < 1 || encoder_layers < 1 || decoder_layers < 1)
    throw InvalidArgument("model counts must be positive");
  if (width % heads != 0) throw InvalidArgument("width must be divisible by heads");
  if (epochs < 0 || batch_size < 1 || patience < 1 || val_stride < 1 || windows_per_epoch < 0)
    throw InvalidArgument("invalid training hyperparameters");
  if (!(learning_rate > 0)) throw InvalidArgument("learning_rate must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_steps", c.input_steps},     {"output_steps", c.output_steps},
          {"heads", c.heads},                 {"width", c.width},
          {"ffn_width", c.ffn_width},         {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers}, {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},               {"batch_size", c.batch_size},
          {"seed", c.seed},                   {"patience", c.patience},
          {"windows_per_epoch", c.windows_per_epoch}, {"val_stride", c.val_stride},
          {"grad_clip", c.grad_clip}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.input_steps = j.value("input_steps", c.input_steps);
    c.output_steps = j.value("output_steps", c.output_steps);
    c.heads = j.value("heads", c.heads);
    c.width = j.value("width", c.width);
    c.ffn_width = j.value("ffn_width", c.ffn_width);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.patience = j.value("patience", c.patience);
    c.windows_per_epoch = j.value("windows_per_epoch", c.windows_per_epoch);
    c.val_stride = j.value("val_stride", c.val_stride);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void ParameterSet::add(std::string name, Matrix value) {
  if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw NotFound("no parameter " + name);
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

void normalization_stats(const SpeedPanel& panel, std::vector<double>& mean, std::vector<double>& stddev) {
  mean.assign(panel.road_count(), 0.0);
  stddev.assign(panel.road_count(), 1.0);
  for (std::size_t r = 0; r < panel.road_count(); ++r) {
    double s = 0.0, ss = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < panel.length(); ++t) {
      if (panel.missing(r, t)) continue;
      s += panel.series[r][t];
      ++n;
    }
    if (n == 0) throw InvalidArgument("road '" + panel.roads[r] + "' has no training data");
    const double m = s / static_cast<double>(n);
    for (std::size_t t = 0; t < panel.length(); ++t) {
      if (panel.missing(r, t)) continue;
      ss += (panel.series[r][t] - m) * (panel.series[r][t] - m);
    }
    mean[r] = m;
    stddev[r] = std::max(1e-6, std::sqrt(ss / static_cast<double>(n)));
  }
}

std::array<double, kFeatureCount> step_features(double speed, double mean, double stddev, Timestamp time) {
  if (!std::isfinite(speed) || speed < 0)
    throw InvalidArgument("missing speed at " + format_iso8601(time) + "; fill the panel first");
  std::array<double, kFeatureCount> f{};
  f[0] = (speed - mean) / stddev;
  const double angle = 2.0 * std::numbers::pi * slot_of_day(time) / kSlotsPerDay;
  f[1] = std::sin(angle);
  f[2] = std::cos(angle);
  f[3 + static_cast<std::size_t>(day_of_week(time))] = 1.0;
  return f;
}

Matrix position_encoding(int steps, int width) {
  Matrix pe(steps, width);
  for (int t = 0; t < steps; ++t) {
    for (int c = 0; c < width; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / width);
      pe(t, c) = (c % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
    }
  }
  return pe;
}

std::vector<std::size_t> window_origins(const SpeedPanel& panel, std::size_t stride) {
  std::vector<std::size_t> out;
  if (stride == 0) stride = 1;
  const auto n = panel.length();
  if (n < 2 * static_cast<std::size_t>(kWindowSteps)) return out;
  for (std::size_t o = kWindowSteps; o + kWindowSteps <= n; o += stride) out.push_back(o);
  return out;
}

namespace {

Matrix xavier(std::mt19937_64& rng, int rows, int cols) {
  const double a = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Matrix ones_row(int cols) { return Matrix::Ones(1, cols); }
Matrix zeros_row(int cols) { return Matrix::Zero(1, cols); }

void add_attention(ParameterSet& p, std::mt19937_64& rng, const std::string& pre, int d, bool sentinel) {
  p.add(pre + ".wq", xavier(rng, d, d));
  p.add(pre + ".wk", xavier(rng, d, d));
  p.add(pre + ".wv", xavier(rng, d, d));
  if (sentinel) {
    p.add(pre + ".wks", xavier(rng, d, d));
    p.add(pre + ".wvs", xavier(rng, d, d));
  }
  p.add(pre + ".wo", xavier(rng, d, d));
}

void add_norm(ParameterSet& p, const std::string& pre, int d) {
  p.add(pre + ".g", ones_row(d));
  p.add(pre + ".b", zeros_row(d));
}

void add_ffn(ParameterSet& p, std::mt19937_64& rng, const std::string& pre, int d, int f) {
  p.add(pre + ".w1", xavier(rng, d, f));
  p.add(pre + ".b1", zeros_row(f));
  p.add(pre + ".w2", xavier(rng, f, d));
  p.add(pre + ".b2", zeros_row(d));
}

// Rows of one batch of windows, laid out (window, road, step).
struct Batch {
  int windows = 0;
  int roads = 0;
  Matrix enc_x;       // rows x kFeatureCount
  Matrix dec_time;    // rows x (kFeatureCount - 1): time features of target steps
  Matrix last_z;      // (windows * roads) x 1
  Matrix target_z;    // rows x 1, NaN where the target is missing
  std::vector<int> road_of_row;
  std::vector<int> step_of_row;
};

// Maps panel road order onto model road order.
std::vector<std::size_t> panel_rows_for_model(const ModelState& m, const SpeedPanel& panel) {
  std::vector<std::size_t> rows(m.roads());
  if (panel.road_count() != m.roads())
    throw NotFound(fmt::format("panel has {} roads, model was trained on {}", panel.road_count(), m.roads()));
  for (std::size_t r = 0; r < panel.road_count(); ++r) {
    auto idx = m.network.index_of(panel.roads[r]);
    if (!idx) throw NotFound("road '" + panel.roads[r] + "' absent from the training graph");
    rows[*idx] = r;
  }
  return rows;
}

Batch make_batch(const ModelState& m, const SpeedPanel& panel, const std::vector<std::size_t>& rows_for_model,
                 std::span<const std::size_t> origins, bool need_targets) {
  Batch b;
  b.windows = static_cast<int>(origins.size());
  b.roads = static_cast<int>(m.roads());
  const int T = kWindowSteps;
  const Eigen::Index rows = static_cast<Eigen::Index>(b.windows) * b.roads * T;
  b.enc_x = Matrix::Zero(rows, kFeatureCount);
  b.dec_time = Matrix::Zero(rows, kFeatureCount - 1);
  b.last_z = Matrix::Zero(static_cast<Eigen::Index>(b.windows) * b.roads, 1);
  b.target_z = Matrix::Constant(rows, 1, std::numeric_limits<double>::quiet_NaN());
  b.road_of_row.resize(static_cast<std::size_t>(rows));
  b.step_of_row.resize(static_cast<std::size_t>(rows));
  const RowLayout L{b.windows, b.roads, T};
  for (int g = 0; g < b.windows; ++g) {
    const auto o = origins[static_cast<std::size_t>(g)];
    if (o < static_cast<std::size_t>(T) || (need_targets && o + T > panel.length()) || o > panel.length())
      throw InvalidArgument(fmt::format("window origin {} out of range", o));
    for (int i = 0; i < b.roads; ++i) {
      const auto pr = rows_for_model[static_cast<std::size_t>(i)];
      const auto& series = panel.series[pr];
      for (int s = 0; s < T; ++s) {
        const auto t = o - static_cast<std::size_t>(T) + static_cast<std::size_t>(s);
        const auto f = step_features(series[t], m.mean[static_cast<std::size_t>(i)],
                                     m.stddev[static_cast<std::size_t>(i)], panel.time_at(t));
        const auto r = L.row(g, i, s);
        for (int c = 0; c < kFeatureCount; ++c) b.enc_x(r, c) = f[static_cast<std::size_t>(c)];
        b.road_of_row[static_cast<std::size_t>(r)] = i;
        b.step_of_row[static_cast<std::size_t>(r)] = s;
        if (s == T - 1) b.last_z(static_cast<Eigen::Index>(g) * b.roads + i, 0) = f[0];

        const auto tt = o + static_cast<std::size_t>(s);
        const auto future = panel.time_at(tt);
        const double angle = 2.0 * std::numbers::pi * slot_of_day(future) / kSlotsPerDay;
        b.dec_time(r, 0) = std::sin(angle);
        b.dec_time(r, 1) = std::cos(angle);
        b.dec_time(r, 2 + day_of_week(future)) = 1.0;
        if (need_targets) {
          const double v = series[tt];
          if (!std::isfinite(v) || v < 0)
            throw InvalidArgument("missing target speed at " + format_iso8601(future));
          b.target_z(r, 0) = (v - m.mean[static_cast<std::size_t>(i)]) / m.stddev[static_cast<std::size_t>(i)];
        }
      }
    }
  }
  return b;
}

// Forward machinery shared by training and inference.
class Network {
 public:
  Network(const ModelState& m, Tape& tape) : m_(m), t_(tape) {
    vars_.reserve(m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i)
      vars_.push_back(tape.recording() ? tape.parameter(m.params[i]) : tape.constant(m.params[i]));
    pos_ = tape.constant(position_encoding(kWindowSteps, m.config.width));
  }

  const std::vector<Var>& vars() const { return vars_; }
  Var P(const std::string& name) const { return vars_[m_.params.index_of(name)]; }

  struct CallHooks {
    ForwardTrace* record = nullptr;
    const ForwardTrace* context = nullptr;
    std::size_t call = 0;
  };

  Var embed(Var x, const std::string& pre, const std::vector<int>& road_of_row, const std::vector<int>& step_of_row) {
    Var h = ad::add_row(t_, ad::matmul(t_, x, P(pre + ".w")), P(pre + ".b"));
    h = ad::gather_add(t_, h, P("road_emb"), road_of_row);
    return ad::gather_add(t_, h, pos_, step_of_row);
  }

  Var norm(Var x, const std::string& pre) { return ad::layer_norm(t_, x, P(pre + ".g"), P(pre + ".b")); }

  Var spatial(Var x, const std::string& pre, const RowLayout& L, CallHooks& hooks,
              const std::map<Eigen::Index, ad::SpatialRowOverride>* ov, std::vector<double>* weights) {
    if (hooks.record) hooks.record->spatial_inputs.push_back(t_.value(x));
    Var ctx = x;
    if (hooks.context) {
      if (hooks.call >= hooks.context->spatial_inputs.size()) throw Error("context trace too short");
      const auto& c = hooks.context->spatial_inputs[hooks.call];
      if (c.rows() != t_.value(x).rows() || c.cols() != t_.value(x).cols())
        throw InvalidArgument("override context shape mismatch");
      ctx = t_.constant(c);
    }
    ++hooks.call;
    ad::SpatialAttentionArgs a;
    a.q = ad::matmul(t_, x, P(pre + ".wq"));
    a.k = ad::matmul(t_, ctx, P(pre + ".wk"));
    a.v = ad::matmul(t_, ctx, P(pre + ".wv"));
    a.ks = ad::matmul(t_, x, P(pre + ".wks"));
    a.vs = ad::matmul(t_, x, P(pre + ".wvs"));
    a.heads = m_.config.heads;
    a.layout = L;
    a.in_neighbors = &in_neighbors();
    a.overrides = ov;
    a.weights = weights;
    return ad::matmul(t_, ad::spatial_attention(t_, a), P(pre + ".wo"));
  }

  Var temporal(Var xq, Var xkv, const std::string& pre, const RowLayout& LQ, const RowLayout& LK, bool causal,
               const std::map<Eigen::Index, std::vector<Matrix>>* ov, std::vector<double>* weights) {
    ad::TemporalAttentionArgs a;
    a.q = ad::matmul(t_, xq, P(pre + ".wq"));
    a.k = ad::matmul(t_, xkv, P(pre + ".wk"));
    a.v = ad::matmul(t_, xkv, P(pre + ".wv"));
    a.heads = m_.config.heads;
    a.q_layout = LQ;
    a.kv_layout = LK;
    a.causal = causal;
    a.overrides = ov;
    a.weights = weights;
    return ad::matmul(t_, ad::temporal_attention(t_, a), P(pre + ".wo"));
  }

  Var ffn(Var x, const std::string& pre) {
    Var h = ad::relu(t_, ad::add_row(t_, ad::matmul(t_, x, P(pre + ".w1")), P(pre + ".b1")));
    return ad::add_row(t_, ad::matmul(t_, h, P(pre + ".w2")), P(pre + ".b2"));
  }

  struct EncoderRecord {
    std::vector<std::vector<double>> sa;  // per layer, flat
    std::vector<std::vector<double>> ta;
  };

  Var encode(const Batch& b, CallHooks& hooks, const std::vector<std::map<Eigen::Index, ad::SpatialRowOverride>>* sa_ov,
             EncoderRecord* rec) {
    const RowLayout L{b.windows, b.roads, kWindowSteps};
    Var x = embed(t_.constant(b.enc_x), "enc.embed", b.road_of_row, b.step_of_row);
    for (int l = 0; l < m_.config.encoder_layers; ++l) {
      const auto pre = fmt::format("enc{}", l);
      std::vector<double>* saw = nullptr;
      std::vector<double>* taw = nullptr;
      if (rec) {
        saw = &rec->sa.emplace_back();
        taw = &rec->ta.emplace_back();
      }
      const auto* ov = sa_ov ? &(*sa_ov)[static_cast<std::size_t>(l)] : nullptr;
      x = norm(ad::add(t_, x, spatial(x, pre + ".sa", L, hooks, ov, saw)), pre + ".ln1");
      x = norm(ad::add(t_, x, temporal(x, x, pre + ".ta", L, L, false, nullptr, taw)), pre + ".ln2");
      x = norm(ad::add(t_, x, ffn(x, pre + ".ffn")), pre + ".ln3");
    }
    return x;
  }

  // Runs all decoder layers on `steps` decoder positions; returns 1-column output.
  Var decode(Var y, Var enc, int windows, int steps, CallHooks& hooks,
             const std::vector<std::map<Eigen::Index, std::vector<Matrix>>>* cross_ov,
             std::vector<std::vector<double>>* cross_rec, std::vector<std::vector<double>>* sa_rec,
             const std::vector<std::map<Eigen::Index, ad::SpatialRowOverride>>* dec_sa_ov = nullptr) {
    const RowLayout LQ{windows, static_cast<int>(m_.roads()), steps};
    const RowLayout LK{windows, static_cast<int>(m_.roads()), kWindowSteps};
    for (int l = 0; l < m_.config.decoder_layers; ++l) {
      const auto pre = fmt::format("dec{}", l);
      std::vector<double>* sw = sa_rec ? &(*sa_rec)[static_cast<std::size_t>(l)] : nullptr;
      const auto* sov = dec_sa_ov ? &(*dec_sa_ov)[static_cast<std::size_t>(l)] : nullptr;
      y = norm(ad::add(t_, y, spatial(y, pre + ".sa", LQ, hooks, sov, sw)), pre + ".ln1");
      y = norm(ad::add(t_, y, temporal(y, y, pre + ".self", LQ, LQ, true, nullptr, nullptr)), pre + ".ln2");
      std::vector<double>* cw = cross_rec ? &(*cross_rec)[static_cast<std::size_t>(l)] : nullptr;
      const auto* ov = cross_ov ? &(*cross_ov)[static_cast<std::size_t>(l)] : nullptr;
      y = norm(ad::add(t_, y, temporal(y, enc, pre + ".cross", LQ, LK, false, ov, cw)), pre + ".ln3");
      y = norm(ad::add(t_, y, ffn(y, pre + ".ffn")), pre + ".ln4");
    }
    return ad::add_row(t_, ad::matmul(t_, y, P("out.w")), P("out.b"));
  }

  const std::vector<std::vector<std::size_t>>& in_neighbors() {
    if (nbrs_.empty()) {
      nbrs_.resize(m_.roads());
      for (std::size_t i = 0; i < m_.roads(); ++i) nbrs_[i] = m_.network.in_neighbors(i);
    }
    return nbrs_;
  }

 private:
  const ModelState& m_;
  Tape& t_;
  std::vector<Var> vars_;
  Var pos_;
  std::vector<std::vector<std::size_t>> nbrs_;
};

// Teacher-forced decoder input: previous true speed plus target-step time.
Matrix teacher_inputs(const Batch& b) {
  const int T = kWindowSteps;
  Matrix x(b.target_z.rows(), kFeatureCount);
  const RowLayout L{b.windows, b.roads, T};
  for (int g = 0; g < b.windows; ++g)
    for (int i = 0; i < b.roads; ++i)
      for (int s = 0; s < T; ++s) {
        const auto r = L.row(g, i, s);
        x(r, 0) = s == 0 ? b.last_z(static_cast<Eigen::Index>(g) * b.roads + i, 0) : b.target_z(r - 1, 0);
        x.row(r).tail(kFeatureCount - 1) = b.dec_time.row(r);
      }
  return x;
}

double batch_loss(const ModelState& m, const Batch& b, std::vector<Matrix>* grads) {
  Tape tape(grads != nullptr);
  Network net(m, tape);
  Network::CallHooks hooks;
  Var enc = net.encode(b, hooks, nullptr, nullptr);
  Var y = net.embed(tape.constant(teacher_inputs(b)), "dec.embed", b.road_of_row, b.step_of_row);
  Var out = net.decode(y, enc, b.windows, kWindowSteps, hooks, nullptr, nullptr, nullptr);
  Var loss = ad::mean_abs_error(tape, out, b.target_z);
  const double value = tape.value(loss)(0, 0);
  if (grads) {
    tape.backward(loss);
    grads->clear();
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      const Matrix& g = tape.grad(net.vars()[i]);
      grads->push_back(g.size() ? g : Matrix::Zero(m.params[i].rows(), m.params[i].cols()));
    }
  }
  return value;
}

double mean_abs_error_units(const Forecasts& f, const SpeedPanel& panel, const std::vector<std::size_t>& rows) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t w = 0; w < f.origins.size(); ++w) {
    const auto& v = f.values[w];
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index s = 0; s < v.cols(); ++s) {
        const double a = panel.series[rows[static_cast<std::size_t>(i)]][f.origins[w] + static_cast<std::size_t>(s)];
        sum += std::abs(v(i, s) - a);
        ++n;
      }
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

ModelState init_model(const ModelConfig& config, const RoadNetwork& network, const SpeedPanel& train) {
  config.validate();
  ModelState m;
  m.config = config;
  m.network = network;
  m.unit = train.unit;
  const auto rows = [&] {
    ModelState probe;
    probe.network = network;
    return panel_rows_for_model(probe, train);
  }();
  std::vector<double> mean, sd;
  normalization_stats(train, mean, sd);
  m.mean.resize(network.size());
  m.stddev.resize(network.size());
  for (std::size_t i = 0; i < network.size(); ++i) {
    m.mean[i] = mean[rows[i]];
    m.stddev[i] = sd[rows[i]];
  }

  std::mt19937_64 rng(config.seed);
  const int d = config.width;
  auto& p = m.params;
  p.add("enc.embed.w", xavier(rng, kFeatureCount, d));
  p.add("enc.embed.b", zeros_row(d));
  p.add("dec.embed.w", xavier(rng, kFeatureCount, d));
  p.add("dec.embed.b", zeros_row(d));
  {
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    Matrix emb(static_cast<Eigen::Index>(network.size()), d);
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = u(rng);
    p.add("road_emb", std::move(emb));
  }
  for (int l = 0; l < config.encoder_layers; ++l) {
    const auto pre = fmt::format("enc{}", l);
    add_attention(p, rng, pre + ".sa", d, true);
    add_norm(p, pre + ".ln1", d);
    add_attention(p, rng, pre + ".ta", d, false);
    add_norm(p, pre + ".ln2", d);
    add_ffn(p, rng, pre + ".ffn", d, config.ffn_width);
    add_norm(p, pre + ".ln3", d);
  }
  for (int l = 0; l < config.decoder_layers; ++l) {
    const auto pre = fmt::format("dec{}", l);
    add_attention(p, rng, pre + ".sa", d, true);
    add_norm(p, pre + ".ln1", d);
    add_attention(p, rng, pre + ".self", d, false);
    add_norm(p, pre + ".ln2", d);
    add_attention(p, rng, pre + ".cross", d, false);
    add_norm(p, pre + ".ln3", d);
    add_ffn(p, rng, pre + ".ffn", d, config.ffn_width);
    add_norm(p, pre + ".ln4", d);
  }
  p.add("out.w", xavier(rng, d, 1));
  p.add("out.b", Matrix::Zero(1, 1));
  return m;
}

double loss_and_gradient(const ModelState& model, const SpeedPanel& panel, const std::vector<std::size_t>& origins,
                         std::vector<Matrix>* gradient) {
  const auto rows = panel_rows_for_model(model, panel);
  const Batch b = make_batch(model, panel, rows, origins, true);
  return batch_loss(model, b, gradient);
}

PredictResult predict(const ModelState& m, const SpeedPanel& panel, const std::vector<std::size_t>& origins,
                      const PredictOptions& opt) {
  const auto rows = panel_rows_for_model(m, panel);
  const int N = static_cast<int>(m.roads());
  const int T = kWindowSteps;
  const int E = m.config.encoder_layers, Ld = m.config.decoder_layers;
  if (opt.overrides && !opt.context) throw InvalidArgument("attention overrides need a context trace");
  const auto batch_size = std::max<std::size_t>(1, opt.batch_windows);

  PredictResult res;
  res.forecasts.roads = m.network.roads();
  res.forecasts.origins = origins;
  const auto sa_offsets = ad::spatial_weight_offsets([&] {
    std::vector<std::vector<std::size_t>> nb(m.roads());
    for (std::size_t i = 0; i < m.roads(); ++i) nb[i] = m.network.in_neighbors(i);
    return nb;
  }());

  std::size_t call_base = 0;  // spatial calls consumed from the context
  for (std::size_t start = 0; start < origins.size(); start += batch_size) {
    const auto count = std::min(batch_size, origins.size() - start);
    std::span<const std::size_t> chunk(origins.data() + start, count);
    const Batch b = make_batch(m, panel, rows, chunk, false);
    const int W = b.windows;

    // Translate overrides for this chunk into kernel form.
    std::vector<std::map<Eigen::Index, ad::SpatialRowOverride>> sa_ov(static_cast<std::size_t>(E));
    std::vector<std::map<Eigen::Index, std::vector<Matrix>>> cross_ov(static_cast<std::size_t>(Ld));
    // (window, road) -> decoder spatial row, per decoder layer
    std::vector<std::map<std::pair<int, int>, ad::SpatialRowOverride>> dec_rows(static_cast<std::size_t>(Ld));
    bool has_ov = false;
    if (opt.overrides) {
      const RowLayout L{W, N, T};
      for (const auto& [key, ov] : *opt.overrides) {
        const auto [w, road] = key;
        if (w < start || w >= start + count) continue;
        if (road >= m.roads()) throw InvalidArgument("override road index out of range");
        const int g = static_cast<int>(w - start);
        const int el = ov.encoder_layer < 0 ? E - 1 : ov.encoder_layer;
        const int dl = ov.decoder_layer < 0 ? Ld - 1 : ov.decoder_layer;
        if (el >= E || dl >= Ld) throw InvalidArgument("override layer out of range");
        if (!ov.sa_refs.empty()) {
          if (ov.sa_refs.size() != static_cast<std::size_t>(m.config.heads) ||
              ov.sa_sentinel.size() != ov.sa_refs.size())
            throw InvalidArgument("override shape mismatch: spatial heads");
          for (int s = 0; s < T; ++s) {
            ad::SpatialRowOverride row;
            for (int h = 0; h < m.config.heads; ++h) {
              const auto& refs = ov.sa_refs[static_cast<std::size_t>(h)];
              const auto& sent = ov.sa_sentinel[static_cast<std::size_t>(h)];
              if (refs.size() != static_cast<std::size_t>(T) || sent.size() != static_cast<std::size_t>(T))
                throw InvalidArgument("override shape mismatch: spatial steps");
              for (auto [j, wj] : refs[static_cast<std::size_t>(s)])
                if (j < 0 || j >= N) throw InvalidArgument("override shape mismatch: reference road");
              row.refs.push_back(refs[static_cast<std::size_t>(s)]);
              row.sentinel.push_back(sent[static_cast<std::size_t>(s)]);
            }
            sa_ov[static_cast<std::size_t>(el)][L.row(g, static_cast<int>(road), s)] = std::move(row);
          }
        }
        if (!ov.cross_ta.empty()) {
          if (ov.cross_ta.size() != static_cast<std::size_t>(m.config.heads))
            throw InvalidArgument("override shape mismatch: temporal heads");
          for (const auto& mtx : ov.cross_ta)
            if (mtx.rows() != T || mtx.cols() != T) throw InvalidArgument("override shape mismatch: temporal table");
          cross_ov[static_cast<std::size_t>(dl)][static_cast<Eigen::Index>(g) * N + static_cast<Eigen::Index>(road)] =
              ov.cross_ta;
        }
        if (!ov.dec_sa_refs.empty()) {
          if (ov.dec_sa_refs.size() != static_cast<std::size_t>(m.config.heads) ||
              ov.dec_sa_sentinel.size() != ov.dec_sa_refs.size())
            throw InvalidArgument("override shape mismatch: decoder spatial heads");
          ad::SpatialRowOverride row;
          for (int h = 0; h < m.config.heads; ++h) {
            for (auto [j, wj] : ov.dec_sa_refs[static_cast<std::size_t>(h)])
              if (j < 0 || j >= N) throw InvalidArgument("override shape mismatch: reference road");
            row.refs.push_back(ov.dec_sa_refs[static_cast<std::size_t>(h)]);
            row.sentinel.push_back(ov.dec_sa_sentinel[static_cast<std::size_t>(h)]);
          }
          dec_rows[static_cast<std::size_t>(dl)][{g, static_cast<int>(road)}] = std::move(row);
        }
        has_ov = true;
      }
    }

    Tape tape(false);
    Network net(m, tape);
    Network::CallHooks hooks;
    ForwardTrace chunk_trace;
    ForwardTrace chunk_context;
    const std::size_t calls_per_chunk = static_cast<std::size_t>(E) + static_cast<std::size_t>(T) * Ld;
    if (opt.record_trace) hooks.record = &chunk_trace;
    if (opt.context) {
      // Context was recorded chunk by chunk with the same batching.
      if (opt.context->spatial_inputs.size() < call_base + calls_per_chunk)
        throw InvalidArgument("context trace does not cover these windows");
      chunk_context.spatial_inputs.assign(
          opt.context->spatial_inputs.begin() + static_cast<std::ptrdiff_t>(call_base),
          opt.context->spatial_inputs.begin() + static_cast<std::ptrdiff_t>(call_base + calls_per_chunk));
      hooks.context = &chunk_context;
    }
    call_base += calls_per_chunk;

    Network::EncoderRecord enc_rec;
    Var enc = net.encode(b, hooks, has_ov ? &sa_ov : nullptr, opt.record_attention ? &enc_rec : nullptr);

    Matrix preds(static_cast<Eigen::Index>(W) * N, T);
    std::vector<TemporalWeights> cross(static_cast<std::size_t>(W) * Ld);
    const std::size_t sa_block = static_cast<std::size_t>(m.config.heads) * sa_offsets.back();
    std::vector<std::vector<double>> dec_sa(static_cast<std::size_t>(W) * Ld);
    if (opt.record_attention) {
      for (auto& c : cross) c = TemporalWeights(m.config.heads, N, T, T);
      for (auto& d : dec_sa) d.assign(static_cast<std::size_t>(T) * sa_block, 0.0);
    }
    for (int s = 0; s < T; ++s) {
      const int steps = s + 1;
      const RowLayout L{W, N, steps};
      Matrix x(L.rows(), kFeatureCount);
      std::vector<int> road_of_row(static_cast<std::size_t>(L.rows())), step_of_row(static_cast<std::size_t>(L.rows()));
      const RowLayout LT{W, N, T};
      for (int g = 0; g < W; ++g)
        for (int i = 0; i < N; ++i)
          for (int u = 0; u <= s; ++u) {
            const auto r = L.row(g, i, u);
            const auto gi = static_cast<Eigen::Index>(g) * N + i;
            x(r, 0) = u == 0 ? b.last_z(gi, 0) : preds(gi, u - 1);
            x.row(r).tail(kFeatureCount - 1) = b.dec_time.row(LT.row(g, i, u));
            road_of_row[static_cast<std::size_t>(r)] = i;
            step_of_row[static_cast<std::size_t>(r)] = u;
          }
      std::vector<std::vector<double>> cross_rec(static_cast<std::size_t>(Ld)), sa_rec(static_cast<std::size_t>(Ld));
      Var y = net.embed(tape.constant(std::move(x)), "dec.embed", road_of_row, step_of_row);
      std::vector<std::map<Eigen::Index, ad::SpatialRowOverride>> dec_sa_ov(static_cast<std::size_t>(Ld));
      for (int l = 0; l < Ld; ++l)
        for (const auto& [gi, row] : dec_rows[static_cast<std::size_t>(l)])
          for (int u = 0; u <= s; ++u) dec_sa_ov[static_cast<std::size_t>(l)][L.row(gi.first, gi.second, u)] = row;
      Var out = net.decode(y, enc, W, steps, hooks, has_ov ? &cross_ov : nullptr,
                           opt.record_attention ? &cross_rec : nullptr, opt.record_attention ? &sa_rec : nullptr,
                           has_ov ? &dec_sa_ov : nullptr);
      const Matrix& ov = tape.value(out);
      for (int g = 0; g < W; ++g)
        for (int i = 0; i < N; ++i) preds(static_cast<Eigen::Index>(g) * N + i, s) = ov(L.row(g, i, s), 0);
      if (opt.record_attention) {
        const int H = m.config.heads;
        for (int l = 0; l < Ld; ++l) {
          const auto& sflat = sa_rec[static_cast<std::size_t>(l)];
          for (int g = 0; g < W; ++g) {
            const auto src = sflat.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(g) * steps + s) * sa_block);
            std::copy(src, src + static_cast<std::ptrdiff_t>(sa_block),
                      dec_sa[static_cast<std::size_t>(g) * Ld + static_cast<std::size_t>(l)].begin() +
                          static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s) * sa_block));
          }
          const auto& flat = cross_rec[static_cast<std::size_t>(l)];
          for (int g = 0; g < W; ++g)
            for (int i = 0; i < N; ++i)
              for (int h = 0; h < H; ++h) {
                const auto grp = static_cast<std::size_t>(g) * N + static_cast<std::size_t>(i);
                const double* src = flat.data() + ((grp * H + static_cast<std::size_t>(h)) * steps + s) * T;
                for (int k = 0; k < T; ++k)
                  cross[static_cast<std::size_t>(g) * Ld + static_cast<std::size_t>(l)].at(h, static_cast<std::size_t>(i), s, k) =
                      src[k];
              }
        }
      }
    }

    for (int g = 0; g < W; ++g) {
      Eigen::MatrixXd v(N, T);
      for (int i = 0; i < N; ++i)
        for (int s = 0; s < T; ++s)
          v(i, s) = preds(static_cast<Eigen::Index>(g) * N + i, s) * m.stddev[static_cast<std::size_t>(i)] +
                    m.mean[static_cast<std::size_t>(i)];
      res.forecasts.values.push_back(std::move(v));
    }
    if (opt.record_attention) {
      const int H = m.config.heads;
      const std::size_t sa_window = static_cast<std::size_t>(T) * sa_block;
      const std::size_t ta_block = static_cast<std::size_t>(N) * H * T * T;
      for (int g = 0; g < W; ++g) {
        AttentionBundle bundle;
        bundle.origin = chunk[static_cast<std::size_t>(g)];
        bundle.window_start = panel.time_at(bundle.origin - static_cast<std::size_t>(T));
        for (int l = 0; l < E; ++l) {
          const auto& sa = enc_rec.sa[static_cast<std::size_t>(l)];
          bundle.sa.emplace_back(H, T, sa_offsets,
                                 std::vector<double>(sa.begin() + static_cast<std::ptrdiff_t>(g * sa_window),
                                                     sa.begin() + static_cast<std::ptrdiff_t>((g + 1) * sa_window)));
          TemporalWeights tw(H, N, T, T);
          const auto& ta = enc_rec.ta[static_cast<std::size_t>(l)];
          std::copy(ta.begin() + static_cast<std::ptrdiff_t>(g * ta_block),
                    ta.begin() + static_cast<std::ptrdiff_t>((g + 1) * ta_block),
                    tw.data().begin());
          bundle.enc_ta.push_back(std::move(tw));
        }
        for (int l = 0; l < Ld; ++l) {
          const auto k = static_cast<std::size_t>(g) * Ld + static_cast<std::size_t>(l);
          bundle.cross_ta.push_back(std::move(cross[k]));
          bundle.dec_sa.emplace_back(H, T, sa_offsets, std::move(dec_sa[k]));
        }
        res.attention.push_back(std::move(bundle));
      }
    }
    if (opt.record_trace)
      for (auto& mtx : chunk_trace.spatial_inputs) res.trace.spatial_inputs.push_back(std::move(mtx));
  }
  return res;
}

ModelState train(const SpeedPanel& train_panel, const SpeedPanel& val_panel, const RoadNetwork& network,
                 const ModelConfig& config, TrainReport* report, const TrainOptions& options) {
  ModelState m = init_model(config, network, train_panel);
  const auto train_rows = panel_rows_for_model(m, train_panel);
  const auto train_origins = window_origins(train_panel, 1);
  const auto val_origins = window_origins(val_panel, static_cast<std::size_t>(config.val_stride));
  if (train_origins.empty()) throw InvalidArgument("training split too short for a 12+12 step window");
  if (val_origins.empty()) throw InvalidArgument("validation split too short for a 12+12 step window");
  const auto val_rows = panel_rows_for_model(m, val_panel);
  if (config.epochs == 0) return m;

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Matrix> adam_m, adam_v;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    adam_m.push_back(Matrix::Zero(m.params[i].rows(), m.params[i].cols()));
    adam_v.push_back(Matrix::Zero(m.params[i].rows(), m.params[i].cols()));
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  long step = 0;
  ParameterSet best = m.params;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1, since_best = 0;
  TrainReport local;
  TrainReport& rep = report ? *report : local;

  std::vector<std::size_t> order = train_origins;
  std::vector<Matrix> grads;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t used = order.size();
    if (config.windows_per_epoch > 0) used = std::min(used, static_cast<std::size_t>(config.windows_per_epoch));
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < used; start += static_cast<std::size_t>(config.batch_size)) {
      const auto count = std::min(static_cast<std::size_t>(config.batch_size), used - start);
      const Batch b = make_batch(m, train_panel, train_rows, std::span(order.data() + start, count), true);
      const double loss = batch_loss(m, b, &grads);
      if (!std::isfinite(loss))
        throw Diverged(fmt::format("non-finite training loss at epoch {} batch {} (lr={})", epoch, batches,
                                   config.learning_rate));
      double norm2 = 0.0;
      for (const auto& g : grads) norm2 += g.squaredNorm();
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) throw Diverged(fmt::format("non-finite gradient at epoch {} batch {}", epoch, batches));
      const double clip = (config.grad_clip > 0 && norm > config.grad_clip) ? config.grad_clip / norm : 1.0;
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t i = 0; i < m.params.size(); ++i) {
        const Matrix g = grads[i] * clip;
        adam_m[i] = kBeta1 * adam_m[i] + (1 - kBeta1) * g;
        adam_v[i] = kBeta2 * adam_v[i] + (1 - kBeta2) * g.cwiseProduct(g);
        m.params[i].array() -=
            config.learning_rate * (adam_m[i].array() / c1) / ((adam_v[i].array() / c2).sqrt() + kEps);
      }
      loss_sum += loss;
      ++batches;
    }
    const double val = mean_abs_error_units(predict(m, val_panel, val_origins).forecasts, val_panel, val_rows);
    if (!std::isfinite(val)) throw Diverged(fmt::format("non-finite validation MAE at epoch {}", epoch));
    rep.train_loss.push_back(loss_sum / std::max(batches, 1));
    rep.val_mae.push_back(val);
    if (options.verbose)
      fmt::print(stderr, "epoch {:3d}  train {:.4f}  val MAE {:.4f}\n", epoch, rep.train_loss.back(), val);
    m.epochs_run = epoch + 1;
    if (val < best_val) {
      best_val = val;
      best = m.params;
      best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  m.params = std::move(best);
  m.trained = true;
  m.best_val_mae = best_val;
  rep.best_epoch = best_epoch;
  return m;
}

ModelState permute_roads(const ModelState& model, const std::vector<std::size_t>& order) {
  ModelState out = model;
  out.network = model.network.permuted(order);
  auto& emb = out.params.get("road_emb");
  const auto& old = model.params.get("road_emb");
  for (std::size_t k = 0; k < order.size(); ++k) {
    emb.row(static_cast<Eigen::Index>(k)) = old.row(static_cast<Eigen::Index>(order[k]));
    out.mean[k] = model.mean[order[k]];
    out.stddev[k] = model.stddev[order[k]];
  }
  return out;
}

nlohmann::json checkpoint_json(const ModelState& m) {
  nlohmann::json j;
  j["format"] = "attnlab-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = to_json(m.config);
  j["unit"] = m.unit;
  j["roads"] = m.network.roads();
  auto& edges = j["edges"] = nlohmann::json::array();
  for (const auto& e : m.network.edges()) edges.push_back({e.from, e.to, e.weight});
  auto& coords = j["coordinates"] = nlohmann::json::object();
  for (const auto& [id, c] : m.network.coordinates()) coords[id] = {c.lat, c.lon};
  j["graph_digest"] = m.network.digest();
  j["mean"] = m.mean;
  j["stddev"] = m.stddev;
  j["trained"] = m.trained;
  j["epochs_run"] = m.epochs_run;
  j["best_val_mae"] = std::isfinite(m.best_val_mae) ? nlohmann::json(m.best_val_mae) : nlohmann::json();
  auto& params = j["parameters"] = nlohmann::json::array();
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& p = m.params[i];
    params.push_back({{"name", m.params.name(i)},
                      {"rows", p.rows()},
                      {"cols", p.cols()},
                      {"data", std::vector<double>(p.data(), p.data() + p.size())}});
  }
  return j;
}

ModelState model_from_checkpoint(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "attnlab-checkpoint") throw InvalidArgument("not a model checkpoint");
    if (!j.contains("version") || j.at("version").get<int>() != kCheckpointVersion)
      throw InvalidArgument("unsupported checkpoint version");
    ModelState m;
    m.config = model_config_from_json(j.at("config"));
    m.unit = j.value("unit", "km/h");
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) edges.push_back({e.at(0).get<std::string>(), e.at(1).get<std::string>(), e.at(2).get<double>()});
    std::map<RoadId, Coordinate> coords;
    for (const auto& [id, c] : j.at("coordinates").items()) coords[id] = {c.at(0).get<double>(), c.at(1).get<double>()};
    m.network = RoadNetwork(j.at("roads").get<std::vector<RoadId>>(), std::move(edges), std::move(coords));
    if (m.network.digest() != j.at("graph_digest").get<std::string>())
      throw InvalidArgument("checkpoint graph digest mismatch");
    m.mean = j.at("mean").get<std::vector<double>>();
    m.stddev = j.at("stddev").get<std::vector<double>>();
    if (m.mean.size() != m.roads() || m.stddev.size() != m.roads())
      throw InvalidArgument("checkpoint normalization size mismatch");
    m.trained = j.at("trained").get<bool>();
    m.epochs_run = j.value("epochs_run", 0);
    if (j.contains("best_val_mae") && !j.at("best_val_mae").is_null()) m.best_val_mae = j.at("best_val_mae").get<double>();
    for (const auto& p : j.at("parameters")) {
      const auto rows = p.at("rows").get<Eigen::Index>(), cols = p.at("cols").get<Eigen::Index>();
      const auto data = p.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw InvalidArgument("checkpoint parameter size mismatch");
      Matrix mtx(rows, cols);
      std::copy(data.begin(), data.end(), mtx.data());
      if (!mtx.allFinite()) throw InvalidArgument("checkpoint parameter is not finite");
      m.params.add(p.at("name").get<std::string>(), std::move(mtx));
    }
    // Shapes must match a fresh model with the same config.
    ModelState probe;
    probe.config = m.config;
    {
      SpeedPanel dummy;
      dummy.roads = m.network.roads();
      dummy.series.assign(m.roads(), std::vector<double>{1.0});
      dummy.imputed.assign(m.roads(), std::vector<bool>{false});
      probe = init_model(m.config, m.network, dummy);
    }
    if (probe.params.size() != m.params.size()) throw InvalidArgument("checkpoint parameter list mismatch");
    for (std::size_t i = 0; i < m.params.size(); ++i)
      if (probe.params.name(i) != m.params.name(i) || probe.params[i].rows() != m.params[i].rows() ||
          probe.params[i].cols() != m.params[i].cols())
        throw InvalidArgument("checkpoint parameter " + m.params.name(i) + " has the wrong shape");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << checkpoint_json(model).dump();
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed checkpoint: ") + e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace attnlab
