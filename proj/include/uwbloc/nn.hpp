// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "uwbloc/geometry.hpp"
#include "uwbloc/measurement.hpp"
#include "uwbloc/rng.hpp"
#include "uwbloc/types.hpp"

namespace uwbloc {

/// Per-feature z-score constants, folded into the model so the deployed
/// forward pass is self-contained.
struct Normalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Normalizer identity(int dim) {
    Normalizer n;
    n.mean = Eigen::VectorXd::Zero(dim);
    n.std = Eigen::VectorXd::Ones(dim);
    return n;
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    return (x - mean).cwiseQuotient(std);
  }
};

/// Feed-forward bias estimator: ReLU hidden layers, linear scalar output.
/// The pipeline default is two hidden layers of 50 neurons.
struct MlpModel {
  Mode mode = Mode::Twr;
  std::vector<Eigen::MatrixXd> weights;  // layer l maps dims[l] -> dims[l+1]
  std::vector<Eigen::VectorXd> biases;
  Normalizer normalizer;

  int input_dim() const { return static_cast<int>(weights.front().cols()); }
  std::size_t layer_count() const { return weights.size(); }

  std::vector<int> layer_dims() const {
    std::vector<int> dims;
    dims.push_back(input_dim());
    for (const auto& w : weights) dims.push_back(static_cast<int>(w.rows()));
    return dims;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  /// He-style uniform initialization on the hidden layers, deterministic for
  /// a given seed. The output layer starts at zero so the initial prediction
  /// carries no random structure that constant-rate gradient descent would
  /// have to anneal away.
  static MlpModel init(Mode mode, const std::vector<int>& dims, std::uint64_t seed) {
    if (dims.size() < 2) throw ConfigError("mlp needs at least input and output dims");
    MlpModel m;
    m.mode = mode;
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const int fan_in = dims[l];
      const int fan_out = dims[l + 1];
      const bool output_layer = l + 2 == dims.size();
      const double limit = output_layer ? 0.0 : std::sqrt(6.0 / static_cast<double>(fan_in));
      Eigen::MatrixXd w(fan_out, fan_in);
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) w(r, c) = limit == 0.0 ? 0.0 : rng.uniform(-limit, limit);
      m.weights.push_back(std::move(w));
      m.biases.push_back(Eigen::VectorXd::Zero(fan_out));
    }
    m.normalizer = Normalizer::identity(dims.front());
    return m;
  }

  /// Scalar prediction for an already-assembled raw (unnormalized) input.
  double forward_raw(const Eigen::VectorXd& x) const {
    if (x.size() != input_dim()) throw ConfigError("mlp input dimension mismatch");
    Eigen::VectorXd a = normalizer.apply(x);
    for (std::size_t l = 0; l < weights.size(); ++l) {
      a = (weights[l] * a + biases[l]).eval();
      if (l + 1 < weights.size()) a = a.cwiseMax(0.0);
    }
    return a(0);
  }

  double forward(const FeatureVector& feature) const {
    if (feature.mode != mode) throw ConfigError("feature mode does not match model mode");
    if (!feature.finite()) throw ConfigError("non-finite feature");
    return forward_raw(feature.view());
  }
};

inline bool models_identical(const MlpModel& a, const MlpModel& b) {
  if (a.mode != b.mode || a.layer_count() != b.layer_count()) return false;
  if (a.normalizer.mean.size() != b.normalizer.mean.size()) return false;
  if ((a.normalizer.mean.array() != b.normalizer.mean.array()).any()) return false;
  if ((a.normalizer.std.array() != b.normalizer.std.array()).any()) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    if (a.weights[l].rows() != b.weights[l].rows() || a.weights[l].cols() != b.weights[l].cols())
      return false;
    if ((a.weights[l].array() != b.weights[l].array()).any()) return false;
    if ((a.biases[l].array() != b.biases[l].array()).any()) return false;
  }
  return true;
}

struct TrainingSample {
  FeatureVector feature;
  double target_bias = 0.0;  // measured minus true range
};

struct TrainConfig {
  double learning_rate = 0.03;
  int batch_size = 32;
  int epochs = 500;
  double xi_threshold = 0.7;    // training-set filter, meters
  double split_fraction = 0.9;  // share used for training, remainder validates
  std::uint64_t seed = 1;
  std::vector<int> hidden{50, 50};

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(xi_threshold > 0.0)) throw ConfigError("xi_threshold must be > 0");
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
      throw ConfigError("split_fraction must be in (0, 1)");
  }
};

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  MlpModel model;
  std::vector<EpochStats> history;
  int best_epoch = 0;
};

/// Keep exactly the samples with |target| <= xi, order preserved.
inline std::vector<TrainingSample> filter_training_set(const std::vector<TrainingSample>& samples,
                                                       double xi) {
  if (!(xi > 0.0)) throw std::invalid_argument("xi must be > 0");
  std::vector<TrainingSample> kept;
  kept.reserve(samples.size());
  for (const auto& s : samples)
    if (std::abs(s.target_bias) <= xi) kept.push_back(s);
  return kept;
}

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

namespace detail {

/// Forward and backward over a column-per-sample batch that is already
/// normalized. Returns the mean squared error; writes parameter gradients.
inline double batch_loss_and_gradient(const MlpModel& model, const Eigen::MatrixXd& xn,
                                      const Eigen::RowVectorXd& targets, Gradients& grads) {
  const std::size_t layers = model.weights.size();
  const auto batch = static_cast<double>(xn.cols());

  std::vector<Eigen::MatrixXd> pre(layers);   // pre-activations
  std::vector<Eigen::MatrixXd> act(layers);   // post-activations
  const Eigen::MatrixXd* input = &xn;
  for (std::size_t l = 0; l < layers; ++l) {
    pre[l].noalias() = model.weights[l] * *input;
    pre[l].colwise() += model.biases[l];
    act[l] = l + 1 < layers ? pre[l].cwiseMax(0.0) : pre[l];
    input = &act[l];
  }

  const Eigen::RowVectorXd residual = act.back().row(0) - targets;
  const double loss = residual.squaredNorm() / batch;

  Eigen::MatrixXd delta = (2.0 / batch) * residual;
  for (std::size_t l = layers; l-- > 0;) {
    const Eigen::MatrixXd& below = l == 0 ? xn : act[l - 1];
    grads.weights[l].noalias() = delta * below.transpose();
    grads.biases[l] = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd up;
      up.noalias() = model.weights[l].transpose() * delta;
      delta = up.cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return loss;
}

inline Gradients make_gradients(const MlpModel& model) {
  Gradients g;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    g.weights.emplace_back(Eigen::MatrixXd::Zero(model.weights[l].rows(), model.weights[l].cols()));
    g.biases.emplace_back(Eigen::VectorXd::Zero(model.biases[l].size()));
  }
  return g;
}

inline double batch_loss(const MlpModel& model, const Eigen::MatrixXd& xn,
                         const Eigen::RowVectorXd& targets) {
  const std::size_t layers = model.weights.size();
  Eigen::MatrixXd a = xn;
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd z;
    z.noalias() = model.weights[l] * a;
    z.colwise() += model.biases[l];
    a = l + 1 < layers ? z.cwiseMax(0.0) : z;
  }
  return (a.row(0) - targets).squaredNorm() / static_cast<double>(xn.cols());
}

}  // namespace detail

/// Mean squared error over the batch and its gradient with respect to every
/// weight and bias.
inline std::pair<double, Gradients> loss_and_gradient(const MlpModel& model,
                                                      std::span<const TrainingSample> batch) {
  if (batch.empty()) throw std::invalid_argument("loss_and_gradient: empty batch");
  const int dim = model.input_dim();
  Eigen::MatrixXd xn(dim, batch.size());
  Eigen::RowVectorXd targets(batch.size());
  for (std::size_t c = 0; c < batch.size(); ++c) {
    if (batch[c].feature.mode != model.mode)
      throw ConfigError("training sample mode does not match model");
    xn.col(c) = model.normalizer.apply(batch[c].feature.view());
    targets(static_cast<Eigen::Index>(c)) = batch[c].target_bias;
  }
  Gradients grads = detail::make_gradients(model);
  const double loss = detail::batch_loss_and_gradient(model, xn, targets, grads);
  return {loss, std::move(grads)};
}

/// Filter by xi, shuffle, split, fit the normalizer on the training split,
/// then run plain mini-batch gradient descent with a constant learning rate.
/// Returns the weights of the best validation epoch plus the full history.
/// Fully deterministic for a given seed.
inline TrainResult train(const std::vector<TrainingSample>& samples, const TrainConfig& config) {
  config.validate();
  const std::vector<TrainingSample> filtered = filter_training_set(samples, config.xi_threshold);
  if (filtered.size() < static_cast<std::size_t>(10 * config.batch_size))
    throw TrainingError("too few training samples after xi filter: have " +
                        std::to_string(filtered.size()) + ", need " +
                        std::to_string(10 * config.batch_size));
  const Mode mode = filtered.front().feature.mode;
  const int dim = filtered.front().feature.length();
  for (const auto& s : filtered)
    if (s.feature.mode != mode) throw TrainingError("mixed feature modes in training set");

  Rng rng(config.seed);
  std::vector<std::size_t> order(filtered.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i-- > 1;)
    std::swap(order[i], order[rng.uniform_index(i + 1)]);

  const auto n = filtered.size();
  const auto n_train = static_cast<std::size_t>(config.split_fraction * static_cast<double>(n));
  const auto n_val = n - n_train;
  if (n_train < static_cast<std::size_t>(config.batch_size) || n_val < 1)
    throw TrainingError("split leaves too few samples");

  Eigen::MatrixXd x_train(dim, n_train), x_val(dim, n_val);
  Eigen::RowVectorXd t_train(n_train), t_val(n_val);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = filtered[order[i]];
    if (i < n_train) {
      x_train.col(static_cast<Eigen::Index>(i)) = s.feature.view();
      t_train(static_cast<Eigen::Index>(i)) = s.target_bias;
    } else {
      x_val.col(static_cast<Eigen::Index>(i - n_train)) = s.feature.view();
      t_val(static_cast<Eigen::Index>(i - n_train)) = s.target_bias;
    }
  }

  Normalizer norm;
  norm.mean = x_train.rowwise().mean();
  norm.std = ((x_train.colwise() - norm.mean).array().square().rowwise().sum() /
              static_cast<double>(n_train))
                 .sqrt()
                 .matrix()
                 .cwiseMax(1e-8);

  std::vector<int> dims;
  dims.push_back(dim);
  for (int h : config.hidden) dims.push_back(h);
  dims.push_back(1);
  MlpModel model = MlpModel::init(mode, dims, config.seed);
  model.normalizer = norm;

  x_train = (x_train.colwise() - norm.mean).array().colwise() / norm.std.array();
  x_val = (x_val.colwise() - norm.mean).array().colwise() / norm.std.array();

  Gradients grads = detail::make_gradients(model);
  TrainResult result;
  result.history.reserve(config.epochs);
  double best_val = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n_train; start += config.batch_size) {
      const auto count =
          std::min<std::size_t>(config.batch_size, n_train - start);
      const auto xb = x_train.middleCols(static_cast<Eigen::Index>(start),
                                         static_cast<Eigen::Index>(count));
      const auto tb =
          t_train.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
      const double loss = detail::batch_loss_and_gradient(model, xb, tb, grads);
      loss_sum += loss * static_cast<double>(count);
      for (std::size_t l = 0; l < model.weights.size(); ++l) {
        model.weights[l].noalias() -= config.learning_rate * grads.weights[l];
        model.biases[l].noalias() -= config.learning_rate * grads.biases[l];
      }
    }
    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(n_train);
    stats.val_loss = detail::batch_loss(model, x_val, t_val);
    if (!std::isfinite(stats.train_loss) || !std::isfinite(stats.val_loss))
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
    result.history.push_back(stats);
    if (stats.val_loss < best_val) {
      best_val = stats.val_loss;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

/// Compensated range: measured value minus the predicted bias.
inline double compensate(const RangeMeasurement& measurement, const MlpModel& model,
                         const FeatureVector& feature) {
  if (measurement.mode != model.mode || feature.mode != model.mode)
    throw ConfigError("compensate: measurement/feature/model modes disagree");
  return measurement.value - model.forward(feature);
}

// ---------------------------------------------------------------------------
// Weight file: versioned json container. Doubles are written in shortest
// round-trip form, so save/load is bitwise exact on every parameter.
// ---------------------------------------------------------------------------

inline constexpr int kWeightFileVersion = 1;

inline nlohmann::json weights_to_json(const MlpModel& model) {
  nlohmann::json j;
  j["version"] = kWeightFileVersion;
  j["mode"] = to_string(model.mode);
  j["layer_dims"] = model.layer_dims();
  j["normalizer"]["mean"] = std::vector<double>(
      model.normalizer.mean.data(), model.normalizer.mean.data() + model.normalizer.mean.size());
  j["normalizer"]["std"] = std::vector<double>(
      model.normalizer.std.data(), model.normalizer.std.data() + model.normalizer.std.size());
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    std::vector<double> flat;
    flat.reserve(model.weights[l].size());
    for (Eigen::Index r = 0; r < model.weights[l].rows(); ++r)  // row-major on disk
      for (Eigen::Index c = 0; c < model.weights[l].cols(); ++c) flat.push_back(model.weights[l](r, c));
    j["weights"].push_back(flat);
    j["biases"].push_back(std::vector<double>(model.biases[l].data(),
                                              model.biases[l].data() + model.biases[l].size()));
  }
  return j;
}

inline MlpModel weights_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw IoError("weight file: not a json object");
  for (const auto& key : {"version", "mode", "layer_dims", "normalizer", "weights", "biases"})
    if (!j.contains(key)) throw IoError(std::string("weight file: missing field '") + key + "'");
  if (j.at("version").get<int>() != kWeightFileVersion)
    throw IoError("weight file: unsupported version " + j.at("version").dump());
  MlpModel m;
  const auto mode = parse_mode(j.at("mode").get<std::string>());
  if (!mode) throw IoError("weight file: unknown mode '" + j.at("mode").get<std::string>() + "'");
  m.mode = *mode;
  const auto dims = j.at("layer_dims").get<std::vector<int>>();
  if (dims.size() < 2) throw IoError("weight file: layer_dims too short");
  const int expected_in = m.mode == Mode::Twr ? 6 : 9;
  if (dims.front() != expected_in)
    throw ConfigError("weight file: mode '" + std::string(to_string(m.mode)) + "' expects input dim " +
                      std::to_string(expected_in) + ", file has " + std::to_string(dims.front()));
  const auto& jw = j.at("weights");
  const auto& jb = j.at("biases");
  if (jw.size() != dims.size() - 1 || jb.size() != dims.size() - 1)
    throw IoError("weight file: layer count does not match layer_dims");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto flat = jw[l].get<std::vector<double>>();
    const auto bias = jb[l].get<std::vector<double>>();
    if (flat.size() != static_cast<std::size_t>(dims[l]) * dims[l + 1] ||
        bias.size() != static_cast<std::size_t>(dims[l + 1]))
      throw IoError("weight file: layer " + std::to_string(l) + " dimension mismatch");
    Eigen::MatrixXd w(dims[l + 1], dims[l]);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat[k++];
    m.weights.push_back(std::move(w));
    m.biases.push_back(Eigen::Map<const Eigen::VectorXd>(bias.data(), bias.size()));
  }
  const auto mean = j.at("normalizer").at("mean").get<std::vector<double>>();
  const auto stdv = j.at("normalizer").at("std").get<std::vector<double>>();
  if (mean.size() != static_cast<std::size_t>(dims.front()) || stdv.size() != mean.size())
    throw IoError("weight file: normalizer dimension mismatch");
  m.normalizer.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), mean.size());
  m.normalizer.std = Eigen::Map<const Eigen::VectorXd>(stdv.data(), stdv.size());
  for (double s : stdv)
    if (!(s > 1e-9)) throw IoError("weight file: normalizer std must be > 1e-9");
  for (std::size_t l = 0; l < m.weights.size(); ++l)
    if (!m.weights[l].allFinite() || !m.biases[l].allFinite())
      throw IoError("weight file: non-finite parameter");
  return m;
}

inline void save_weights(const MlpModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open weight file for writing: " + path);
  out << weights_to_json(model).dump(2) << '\n';
  if (!out) throw IoError("failed writing weight file: " + path);
}

inline MlpModel load_weights(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open weight file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed weight file (" + path + "): " + e.what());
  }
  return weights_from_json(j);
}

// ---------------------------------------------------------------------------
// Training dataset csv: feat_0..feat_k,target. Mode is implied by the column
// count (6 features for TWR, 9 for TDoA).
// ---------------------------------------------------------------------------

inline void write_dataset_csv(std::ostream& out, const std::vector<TrainingSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("write_dataset_csv: empty dataset");
  const int k = samples.front().feature.length();
  for (int i = 0; i < k; ++i) out << "feat_" << i << ',';
  out << "target\n";
  for (const auto& s : samples) {
    for (int i = 0; i < k; ++i) out << format_double(s.feature.data[i]) << ',';
    out << format_double(s.target_bias) << '\n';
  }
}

inline std::vector<TrainingSample> read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("dataset csv: empty file");
  std::size_t columns = 1 + std::count(line.begin(), line.end(), ',');
  Mode mode;
  if (columns == 7)
    mode = Mode::Twr;
  else if (columns == 10)
    mode = Mode::Tdoa;
  else
    throw IoError("dataset csv: expected 7 or 10 columns, got " + std::to_string(columns));
  std::vector<TrainingSample> samples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrainingSample s;
    s.feature.mode = mode;
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t c = 0; c + 1 < columns; ++c) {
      if (!std::getline(ss, cell, ',')) throw IoError("dataset csv: short row: " + line);
      s.feature.data[c] = parse_double(cell);
    }
    if (!std::getline(ss, cell)) throw IoError("dataset csv: missing target: " + line);
    s.target_bias = parse_double(cell);
    samples.push_back(s);
  }
  return samples;
}

inline void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history) {
  out << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < history.size(); ++e)
    out << e << ',' << format_double(history[e].train_loss) << ','
        << format_double(history[e].val_loss) << '\n';
}

}  // namespace uwbloc
