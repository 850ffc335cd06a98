// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uwbloc/nn.hpp"
#include "uwbloc/rng.hpp"

using namespace uwbloc;

namespace {

FeatureVector random_twr_feature(Rng& rng) {
  FeatureVector f;
  f.mode = Mode::Twr;
  for (int i = 0; i < 3; ++i) f.data[i] = rng.uniform(-5, 5);
  for (int i = 3; i < 6; ++i) f.data[i] = rng.uniform(-1, 1);
  return f;
}

MlpModel random_model(Mode mode, const std::vector<int>& dims, std::uint64_t seed) {
  MlpModel m = MlpModel::init(mode, dims, seed);
  Rng rng(seed + 1000);
  for (auto& b : m.biases)
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-0.5, 0.5);
  return m;
}

/// Independent dense matvec evaluation: plain index loops, no Eigen products.
double forward_oracle(const MlpModel& model, const FeatureVector& x) {
  std::vector<double> a(static_cast<std::size_t>(x.length()));
  for (int i = 0; i < x.length(); ++i)
    a[i] = (x.data[i] - model.normalizer.mean(i)) / model.normalizer.std(i);
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    const auto& w = model.weights[l];
    std::vector<double> next(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double acc = model.biases[l](r);
      for (Eigen::Index c = 0; c < w.cols(); ++c) acc += w(r, c) * a[static_cast<std::size_t>(c)];
      next[static_cast<std::size_t>(r)] =
          l + 1 < model.weights.size() ? std::max(0.0, acc) : acc;
    }
    a = std::move(next);
  }
  return a[0];
}

std::vector<TrainingSample> constant_bias_samples(int n, double target, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainingSample> samples;
  for (int i = 0; i < n; ++i) samples.push_back({random_twr_feature(rng), target});
  return samples;
}

}  // namespace

TEST_CASE("forward with zero parameters is zero") {
  MlpModel m = MlpModel::init(Mode::Twr, {6, 50, 50, 1}, 1);
  for (auto& w : m.weights) w.setZero();
  Rng rng(2);
  for (int i = 0; i < 20; ++i) CHECK(m.forward(random_twr_feature(rng)) == 0.0);
}

TEST_CASE("relu passes positives through an identity stack") {
  MlpModel m;
  m.mode = Mode::Twr;
  m.weights = {Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1)};
  m.biases = {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
  m.normalizer = Normalizer::identity(1);
  Eigen::VectorXd x(1);
  x << 0.3;
  CHECK(m.forward_raw(x) == doctest::Approx(0.3));
  x << -0.3;  // clipped by the hidden relu
  CHECK(m.forward_raw(x) == 0.0);
}

TEST_CASE("forward matches an independent matvec oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    MlpModel m = random_model(Mode::Twr, {6, 50, 50, 1}, 100 + trial);
    m.normalizer.mean.setConstant(0.3);
    m.normalizer.std.setConstant(1.7);
    for (int i = 0; i < 20; ++i) {
      const FeatureVector x = random_twr_feature(rng);
      CHECK(m.forward(x) == doctest::Approx(forward_oracle(m, x)).epsilon(1e-10));
    }
  }
}

TEST_CASE("mode and dimension guards") {
  MlpModel m = MlpModel::init(Mode::Twr, {6, 10, 1}, 1);
  FeatureVector f;
  f.mode = Mode::Tdoa;
  CHECK_THROWS_AS(m.forward(f), ConfigError);
  f.mode = Mode::Twr;
  f.data[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(m.forward(f), ConfigError);
}

TEST_CASE("loss on a perfect model is zero with zero gradient") {
  // zero weights + output bias equal to the constant target fit exactly
  MlpModel m = MlpModel::init(Mode::Twr, {6, 8, 1}, 3);
  for (auto& w : m.weights) w.setZero();
  m.biases.back()(0) = 0.2;
  const auto samples = constant_bias_samples(16, 0.2, 9);
  const auto [loss, grads] = loss_and_gradient(m, samples);
  CHECK(loss == doctest::Approx(0.0));
  for (const auto& g : grads.weights) CHECK(g.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  for (const auto& g : grads.biases) CHECK(g.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("loss of the zero model on one 0.2 target is 0.04") {
  MlpModel m = MlpModel::init(Mode::Twr, {6, 8, 1}, 3);
  for (auto& w : m.weights) w.setZero();
  const auto samples = constant_bias_samples(1, 0.2, 4);
  const auto [loss, grads] = loss_and_gradient(m, samples);
  CHECK(loss == doctest::Approx(0.04));
  CHECK_THROWS_AS(loss_and_gradient(m, std::span<const TrainingSample>{}), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    MlpModel m = random_model(Mode::Twr, {6, 8, 8, 1}, 500 + trial);
    std::vector<TrainingSample> batch;
    for (int i = 0; i < 4; ++i) batch.push_back({random_twr_feature(rng), rng.uniform(-0.3, 0.3)});

    const auto [loss, grads] = loss_and_gradient(m, batch);
    const double h = 1e-5;
    double max_violation = 0.0;
    auto check_param = [&](double& param, double analytic) {
      const double saved = param;
      param = saved + h;
      const double plus = loss_and_gradient(m, batch).first;
      param = saved - h;
      const double minus = loss_and_gradient(m, batch).first;
      param = saved;
      const double fd = (plus - minus) / (2.0 * h);
      const double err = std::abs(fd - analytic);
      const double tol = std::max(1e-8, 1e-5 * std::abs(fd));
      max_violation = std::max(max_violation, err - tol);
    };
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
      for (Eigen::Index r = 0; r < m.weights[l].rows(); ++r)
        for (Eigen::Index c = 0; c < m.weights[l].cols(); ++c)
          check_param(m.weights[l](r, c), grads.weights[l](r, c));
      for (Eigen::Index r = 0; r < m.biases[l].size(); ++r)
        check_param(m.biases[l](r), grads.biases[l](r));
    }
    CHECK(max_violation <= 0.0);
  }
}

TEST_CASE("xi filter keeps |target| <= xi, order preserved") {
  std::vector<TrainingSample> samples;
  Rng rng(1);
  for (double t : {0.1, -0.69, 0.71}) samples.push_back({random_twr_feature(rng), t});
  auto kept = filter_training_set(samples, 0.7);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].target_bias == 0.1);
  CHECK(kept[1].target_bias == -0.69);

  CHECK(filter_training_set(samples, 1e9).size() == 3);
  CHECK(filter_training_set(samples, 0.01).empty());
  CHECK_THROWS_AS(filter_training_set(samples, 0.0), std::invalid_argument);

  TrainConfig cfg;
  cfg.xi_threshold = 0.01;  // filters everything -> too few samples
  CHECK_THROWS_AS(train(samples, cfg), TrainingError);
}

TEST_CASE("training fits a constant bias to better than 5 mm") {
  const auto samples = constant_bias_samples(5000, 0.2, 21);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.seed = 3;
  const TrainResult result = train(samples, cfg);
  CHECK(std::sqrt(result.history[result.best_epoch].val_loss) <= 0.005);
  // oracle: the constant predictor 0.2 is in the hypothesis class
  Rng rng(77);
  for (int i = 0; i < 50; ++i)
    CHECK(result.model.forward(random_twr_feature(rng)) == doctest::Approx(0.2).epsilon(0.05));
}

TEST_CASE("training is deterministic per seed") {
  const auto samples = constant_bias_samples(1000, 0.1, 5);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.hidden = {16, 16};
  const TrainResult a = train(samples, cfg);
  const TrainResult b = train(samples, cfg);
  CHECK(models_identical(a.model, b.model));
  CHECK(a.best_epoch == b.best_epoch);
  cfg.seed = 2;
  const TrainResult c = train(samples, cfg);
  CHECK_FALSE(models_identical(a.model, c.model));
}

TEST_CASE("smoothed training loss is non-increasing on a learnable field") {
  Rng rng(31);
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 20000; ++i) {
    FeatureVector f = random_twr_feature(rng);
    const double target = 0.1 * std::sin(f.data[0]) + 0.05 * std::cos(2.0 * f.data[5]) +
                          rng.gaussian(0.0, 0.02);
    samples.push_back({f, target});
  }
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.seed = 11;
  const TrainResult result = train(samples, cfg);
  std::vector<double> smoothed;
  for (std::size_t e = 4; e < result.history.size(); ++e) {
    double acc = 0.0;
    for (std::size_t k = e - 4; k <= e; ++k) acc += result.history[k].train_loss;
    smoothed.push_back(acc / 5.0);
  }
  for (std::size_t e = 1; e < smoothed.size(); ++e) CHECK(smoothed[e] <= smoothed[e - 1] * 1.001);
  // and it actually learned something
  CHECK(result.history.back().train_loss < 0.5 * result.history.front().train_loss);
}

TEST_CASE("diverging training reports a training error") {
  const auto samples = constant_bias_samples(2000, 0.2, 8);
  TrainConfig cfg;
  cfg.learning_rate = 1e6;
  cfg.epochs = 50;
  CHECK_THROWS_AS(train(samples, cfg), TrainingError);
}

TEST_CASE("compensate subtracts the predicted bias") {
  MlpModel zero = MlpModel::init(Mode::Twr, {6, 8, 1}, 1);
  for (auto& w : zero.weights) w.setZero();
  RangeMeasurement meas;
  meas.mode = Mode::Twr;
  meas.value = 4.2;
  Rng rng(3);
  const FeatureVector f = random_twr_feature(rng);
  CHECK(compensate(meas, zero, f) == 4.2);

  MlpModel constant = zero;
  constant.biases.back()(0) = 0.15;  // predicts a constant 0.15 m bias
  CHECK(compensate(meas, constant, f) == doctest::Approx(4.05));

  MlpModel tdoa = MlpModel::init(Mode::Tdoa, {9, 8, 1}, 1);
  CHECK_THROWS_AS(compensate(meas, tdoa, f), ConfigError);
}

TEST_CASE("weight file round trip is bitwise exact") {
  MlpModel m = random_model(Mode::Tdoa, {9, 50, 50, 1}, 1234);
  m.normalizer.mean.setRandom();
  m.normalizer.std = m.normalizer.std.setRandom().cwiseAbs() + Eigen::VectorXd::Ones(9);
  const auto path = std::filesystem::temp_directory_path() / "uwbloc_weights_test.json";
  save_weights(m, path.string());
  const MlpModel back = load_weights(path.string());
  CHECK(models_identical(m, back));

  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    FeatureVector f;
    f.mode = Mode::Tdoa;
    for (int k = 0; k < 9; ++k) f.data[k] = rng.uniform(-5, 5);
    const double a = m.forward(f);
    const double b = back.forward(f);
    CHECK(a == b);  // bitwise
  }
  std::filesystem::remove(path);
}

TEST_CASE("weight file error paths") {
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "uwbloc_weights_bad.json").string();

  CHECK_THROWS_AS(load_weights("/nonexistent/weights.json"), IoError);

  {
    std::ofstream out(path);
    out << "{\"version\": 1, \"mode\": \"twr\"";  // truncated
  }
  CHECK_THROWS_AS(load_weights(path), IoError);

  MlpModel m = MlpModel::init(Mode::Twr, {6, 8, 1}, 1);
  auto j = weights_to_json(m);
  j["version"] = 99;
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_AS(load_weights(path), IoError);

  j = weights_to_json(m);
  j["mode"] = "tdoa";  // d_in 6 but tdoa expects 9
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_AS(load_weights(path), ConfigError);

  j = weights_to_json(m);
  j["weights"][0].erase(0);  // dimension mismatch
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_AS(load_weights(path), IoError);

  std::filesystem::remove(path);
}

TEST_CASE("dataset csv round trip") {
  Rng rng(9);
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 200; ++i) samples.push_back({random_twr_feature(rng), rng.gaussian(0, 0.1)});
  std::stringstream ss;
  write_dataset_csv(ss, samples);
  const auto back = read_dataset_csv(ss);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].feature == samples[i].feature);
    CHECK(back[i].target_bias == samples[i].target_bias);
  }
  std::stringstream bad("a,b,c\n");
  CHECK_THROWS_AS(read_dataset_csv(bad), IoError);
}

TEST_CASE("single forward pass stays within the 200 Hz inference budget") {
  MlpModel m = random_model(Mode::Tdoa, {9, 50, 50, 1}, 7);
  Rng rng(8);
  FeatureVector f;
  f.mode = Mode::Tdoa;
  for (int k = 0; k < 9; ++k) f.data[k] = rng.uniform(-5, 5);
  volatile double sink = 0.0;
  const int n = 20000;
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < n; ++i) {
    f.data[0] = static_cast<double>(i % 10);
    sink = sink + m.forward(f);
  }
  const auto elapsed = std::chrono::duration<double, std::micro>(
                           std::chrono::steady_clock::now() - start)
                           .count();
  CHECK(elapsed / n <= 50.0);  // microseconds per call
}
