// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "uwbloc/geometry.hpp"
#include "uwbloc/rng.hpp"
#include "uwbloc/types.hpp"

namespace uwbloc {

/// One TWR or TDoA sample. anchor_j is -1 for TWR.
struct RangeMeasurement {
  Mode mode = Mode::Twr;
  int anchor_i = 0;
  int anchor_j = -1;
  double value = 0.0;
  double timestamp = 0.0;
};

/// Pose-dependent systematic range error of the synthetic radios: a truncated
/// Fourier series in azimuth plus elevation and range terms. Smooth and
/// periodic, so a constant correction cannot fit it but a small network can.
struct BiasFieldParams {
  double constant_offset = 0.05;
  std::vector<double> amplitude_az{0.06, 0.03};  // harmonic orders 1..K
  std::vector<double> phase_az{0.0, 0.8};
  double amplitude_el = 0.13;
  double range_gain = 0.008;

  static BiasFieldParams zero() {
    BiasFieldParams p;
    p.constant_offset = 0.0;
    p.amplitude_az = {0.0, 0.0};
    p.phase_az = {0.0, 0.0};
    p.amplitude_el = 0.0;
    p.range_gain = 0.0;
    return p;
  }

  /// Worst-case |bias| over any pose within max_range of an anchor.
  double max_bias_bound(double max_range) const {
    double amp = std::abs(constant_offset) + std::abs(amplitude_el);
    for (double a : amplitude_az) amp += std::abs(a);
    return amp + std::abs(range_gain) * max_range;
  }

  void validate() const {
    if (amplitude_az.size() != phase_az.size())
      throw ConfigError("bias field: amplitude_az and phase_az must have equal length");
    if (!std::isfinite(max_bias_bound(1.0))) throw ConfigError("bias field parameters not finite");
  }
};

/// Measurement noise and NLOS outlier mixture. The optional ground boost
/// raises the outlier rate below ground_height to mimic on-ground multipath;
/// it is off by default.
struct NoiseConfig {
  double sigma_twr = 0.05;
  double sigma_tdoa = 0.10;
  double outlier_rate = 0.05;
  double outlier_scale = 1.0;
  bool ground_boost = false;
  double ground_outlier_rate = 0.30;
  double ground_scale_factor = 3.0;  // reflections near the ground detour further
  double ground_height = 0.3;
  std::uint64_t seed = 1;

  double sigma(Mode mode) const { return mode == Mode::Twr ? sigma_twr : sigma_tdoa; }

  void validate() const {
    if (!(sigma_twr > 0.0) || !(sigma_tdoa > 0.0)) throw ConfigError("noise sigmas must be > 0");
    if (outlier_rate < 0.0 || outlier_rate >= 0.5)
      throw ConfigError("outlier_rate must be in [0, 0.5)");
    if (ground_outlier_rate < 0.0 || ground_outlier_rate >= 0.5)
      throw ConfigError("ground_outlier_rate must be in [0, 0.5)");
    if (outlier_scale < 0.0) throw ConfigError("outlier_scale must be >= 0");
  }
};

inline double true_twr_range(const Vec3& p, const Vec3& p_i) { return (p - p_i).norm(); }

inline double true_tdoa_range(const Vec3& p, const Vec3& p_i, const Vec3& p_j) {
  return (p - p_i).norm() - (p - p_j).norm();
}

namespace detail {

inline double bias_term(const Vec3& dp, const Vec3& attitude, const BiasFieldParams& params) {
  const auto [alpha, beta] = azimuth_elevation(dp, attitude);
  double b = params.constant_offset;
  for (std::size_t k = 0; k < params.amplitude_az.size(); ++k) {
    const double order = static_cast<double>(k + 1);
    b += params.amplitude_az[k] * std::cos(order * alpha + params.phase_az[k]);
  }
  b += params.amplitude_el * std::sin(beta);
  b += params.range_gain * dp.norm();
  return b;
}

}  // namespace detail

/// Ground-truth bias for a feature. TWR evaluates the field at dp_i; TDoA is
/// the difference of the per-anchor terms (the constant offset cancels).
inline double bias_field_eval(const FeatureVector& feature, const BiasFieldParams& params) {
  const Vec3 attitude(feature.data[feature.mode == Mode::Twr ? 3 : 6],
                      feature.data[feature.mode == Mode::Twr ? 4 : 7],
                      feature.data[feature.mode == Mode::Twr ? 5 : 8]);
  const Vec3 dpi(feature.data[0], feature.data[1], feature.data[2]);
  if (feature.mode == Mode::Twr) return detail::bias_term(dpi, attitude, params);
  const Vec3 dpj(feature.data[3], feature.data[4], feature.data[5]);
  return detail::bias_term(dpi, attitude, params) - detail::bias_term(dpj, attitude, params);
}

/// Per-sample ground truth, exposed for test oracles only. The measurement
/// itself carries no outlier flag.
struct SampleDebug {
  bool outlier = false;
  double true_range = 0.0;
  double bias = 0.0;
  double noise = 0.0;
  double spike = 0.0;
};

/// Draw one corrupted range sample: true range + bias field + N(0, sigma) +
/// (with probability outlier_rate) an NLOS spike. TWR spikes are positive
/// path-length excesses, Exponential(outlier_scale). TDoA spikes hit either
/// anchor's arrival time, so they are two-sided; their magnitude is a shifted
/// exponential (minimum excess 0.25 * outlier_scale) since a reflected path
/// is never arbitrarily close to the direct one.
inline RangeMeasurement sample_measurement(const AnchorConstellation& constellation,
                                           const TagState& tag, Mode mode, int anchor_i,
                                           int anchor_j, const BiasFieldParams& bias,
                                           const NoiseConfig& noise, Rng& rng,
                                           SampleDebug* debug = nullptr) {
  const Vec3& pi = constellation.position_of(anchor_i);
  RangeMeasurement m;
  m.mode = mode;
  m.anchor_i = anchor_i;
  m.anchor_j = mode == Mode::Tdoa ? anchor_j : -1;
  m.timestamp = tag.time;

  double true_range = 0.0;
  FeatureVector feature;
  if (mode == Mode::Twr) {
    true_range = true_twr_range(tag.position, pi);
    feature = twr_feature(tag, pi);
  } else {
    const Vec3& pj = constellation.position_of(anchor_j);
    true_range = true_tdoa_range(tag.position, pi, pj);
    feature = tdoa_feature(tag, pi, pj);
  }

  const double b = bias_field_eval(feature, bias);
  const double eps = rng.gaussian(0.0, noise.sigma(mode));

  double rate = noise.outlier_rate;
  double scale = noise.outlier_scale;
  if (noise.ground_boost && tag.position.z() < noise.ground_height) {
    rate = noise.ground_outlier_rate;
    scale *= noise.ground_scale_factor;
  }

  double spike = 0.0;
  bool outlier = rng.bernoulli(rate);
  if (outlier) {
    if (mode == Mode::Twr) {
      spike = rng.exponential(scale);
    } else {
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      spike = sign * (0.25 * scale + rng.exponential(scale));
    }
  }

  m.value = true_range + b + eps + spike;
  if (debug) *debug = SampleDebug{outlier, true_range, b, eps, spike};
  return m;
}

/// CSV stream format: t,mode,i,j,value with j empty for TWR.
inline void write_measurements_csv(std::ostream& out, const std::vector<RangeMeasurement>& ms) {
  out << "t,mode,i,j,value\n";
  for (const auto& m : ms) {
    out << format_double(m.timestamp) << ',' << to_string(m.mode) << ',' << m.anchor_i << ',';
    if (m.mode == Mode::Tdoa) out << m.anchor_j;
    out << ',' << format_double(m.value) << '\n';
  }
}

inline std::vector<RangeMeasurement> read_measurements_csv(std::istream& in) {
  std::vector<RangeMeasurement> out;
  std::string line;
  if (!std::getline(in, line) || line != "t,mode,i,j,value")
    throw IoError("measurement csv: bad header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string t, mode, i, j, value;
    if (!std::getline(ss, t, ',') || !std::getline(ss, mode, ',') || !std::getline(ss, i, ',') ||
        !std::getline(ss, j, ',') || !std::getline(ss, value))
      throw IoError("measurement csv: malformed row: " + line);
    RangeMeasurement m;
    const auto parsed = parse_mode(mode);
    if (!parsed) throw IoError("measurement csv: unknown mode '" + mode + "'");
    m.mode = *parsed;
    m.timestamp = parse_double(t);
    m.anchor_i = std::atoi(i.c_str());
    m.anchor_j = m.mode == Mode::Tdoa ? std::atoi(j.c_str()) : -1;
    m.value = parse_double(value);
    out.push_back(m);
  }
  return out;
}

}  // namespace uwbloc
