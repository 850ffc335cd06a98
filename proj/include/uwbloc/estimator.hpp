// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "uwbloc/geometry.hpp"
#include "uwbloc/measurement.hpp"
#include "uwbloc/nn.hpp"
#include "uwbloc/types.hpp"

namespace uwbloc {

/// Position/velocity filter state. Covariance is kept symmetric and PSD by
/// construction (Joseph-form updates plus explicit symmetrization).
///
/// The accept stamps record when each measurement channel (anchor or anchor
/// pair) last passed the gates. The dynamics gate widens with the time since
/// the channel's own stamp, so a channel that keeps disagreeing re-engages
/// within a fraction of a second instead of being locked out while other
/// channels hold the filter on a wrong solution.
struct EkfState {
  struct AcceptStamp {
    int anchor_i = 0;
    int anchor_j = -1;
    double time = 0.0;
  };

  Vec6 mean = Vec6::Zero();
  Mat6 covariance = Mat6::Identity();
  double time = 0.0;
  double created_time = 0.0;
  double last_accept_time = 0.0;
  std::vector<AcceptStamp> accept_stamps;

  Vec3 position() const { return mean.head<3>(); }
  Vec3 velocity() const { return mean.tail<3>(); }

  /// A channel that has never been validated is maximally stale: its window
  /// grows from the filter start, never from other channels' acceptances.
  double channel_baseline(int anchor_i, int anchor_j) const {
    for (const auto& s : accept_stamps)
      if (s.anchor_i == anchor_i && s.anchor_j == anchor_j) return s.time;
    return created_time;
  }

  void stamp_accept(int anchor_i, int anchor_j, double t) {
    last_accept_time = t;
    for (auto& s : accept_stamps)
      if (s.anchor_i == anchor_i && s.anchor_j == anchor_j) {
        s.time = t;
        return;
      }
    if (accept_stamps.size() >= 64) {  // recycle the stalest entry
      auto* oldest = &accept_stamps.front();
      for (auto& s : accept_stamps)
        if (s.time < oldest->time) oldest = &s;
      *oldest = {anchor_i, anchor_j, t};
      return;
    }
    accept_stamps.push_back({anchor_i, anchor_j, t});
  }
};

inline EkfState make_ekf_state(const Vec3& position, const Vec3& velocity, double position_var,
                               double velocity_var, double time = 0.0) {
  EkfState s;
  s.mean.head<3>() = position;
  s.mean.tail<3>() = velocity;
  s.covariance = Mat6::Zero();
  s.covariance.topLeftCorner<3, 3>() = position_var * Eigen::Matrix3d::Identity();
  s.covariance.bottomRightCorner<3, 3>() = velocity_var * Eigen::Matrix3d::Identity();
  s.time = time;
  s.created_time = time;
  s.last_accept_time = time;
  return s;
}

/// Outlier-gate settings. The dynamics gate bounds how far the platform can
/// plausibly have moved within dynamics_horizon seconds; the chi-squared gate
/// tests the normalized innovation against the 0.95 quantile (1 dof, scalar
/// sequential updates).
struct GateConfig {
  double a_max = 10.0;             // m/s^2
  double chi2_threshold = 3.8415;  // chi^2(0.95), 1 dof
  double r_twr = 0.05 * 0.05;      // measurement variance per mode
  double r_tdoa = 0.10 * 0.10;
  // Feasibility window in seconds. update() passes the gate
  // dynamics_horizon + (time since this channel last passed the gates), so
  // the bound stays tight while a channel flows and reopens when it starves.
  double dynamics_horizon = 0.065;
  bool dynamics_enabled = true;
  bool chi2_enabled = true;

  double measurement_variance(Mode mode) const { return mode == Mode::Twr ? r_twr : r_tdoa; }

  void validate() const {
    if (!(a_max > 0.0)) throw ConfigError("a_max must be > 0");
    if (!(chi2_threshold > 0.0)) throw ConfigError("chi2_threshold must be > 0");
    if (!(r_twr > 0.0) || !(r_tdoa > 0.0)) throw ConfigError("measurement variances must be > 0");
    if (!(dynamics_horizon > 0.0)) throw ConfigError("dynamics_horizon must be > 0");
  }
};

enum class GateReason { Accepted, RejectedDynamics, RejectedChi2 };

inline const char* to_string(GateReason r) {
  switch (r) {
    case GateReason::Accepted: return "accepted";
    case GateReason::RejectedDynamics: return "rejected_dynamics";
    default: return "rejected_chi2";
  }
}

struct GateOutcome {
  bool accepted = false;
  GateReason reason = GateReason::Accepted;
  double innovation = 0.0;
  double innovation_variance = 0.0;
};

/// Constant-velocity prediction with white-acceleration process noise of the
/// given spectral density (m^2/s^3).
inline EkfState predict(const EkfState& state, double dt, double process_noise) {
  if (!(dt > 0.0)) throw std::invalid_argument("predict: dt must be > 0");
  EkfState out = state;
  out.mean.head<3>() += dt * state.mean.tail<3>();
  out.time = state.time + dt;

  Mat6 f = Mat6::Identity();
  f.topRightCorner<3, 3>() = dt * Eigen::Matrix3d::Identity();
  Mat6 p = f * state.covariance * f.transpose();

  const double q3 = process_noise * dt * dt * dt / 3.0;
  const double q2 = process_noise * dt * dt / 2.0;
  const double q1 = process_noise * dt;
  for (int axis = 0; axis < 3; ++axis) {
    p(axis, axis) += q3;
    p(axis, axis + 3) += q2;
    p(axis + 3, axis) += q2;
    p(axis + 3, axis + 3) += q1;
  }
  out.covariance = 0.5 * (p + p.transpose());
  return out;
}

struct MeasurementModel {
  double predicted = 0.0;
  Vec6 jacobian = Vec6::Zero();  // d(range)/d(state); velocity block is zero
};

inline MeasurementModel twr_measurement_model(const EkfState& state, const Vec3& anchor) {
  const Vec3 diff = state.position() - anchor;
  const double range = diff.norm();
  if (range <= 0.01)
    throw DegenerateGeometryError("twr measurement model: tag within 1 cm of anchor");
  MeasurementModel m;
  m.predicted = range;
  m.jacobian.head<3>() = diff / range;
  return m;
}

inline MeasurementModel tdoa_measurement_model(const EkfState& state, const Vec3& anchor_i,
                                               const Vec3& anchor_j) {
  const Vec3 di = state.position() - anchor_i;
  const Vec3 dj = state.position() - anchor_j;
  const double ri = di.norm();
  const double rj = dj.norm();
  if (ri <= 0.01 || rj <= 0.01)
    throw DegenerateGeometryError("tdoa measurement model: tag within 1 cm of an anchor");
  MeasurementModel m;
  m.predicted = ri - rj;
  m.jacobian.head<3>() = di / ri - dj / rj;
  return m;
}

inline MeasurementModel measurement_model(const EkfState& state, Mode mode, const Vec3& anchor_i,
                                          const Vec3& anchor_j = Vec3::Zero()) {
  return mode == Mode::Twr ? twr_measurement_model(state, anchor_i)
                           : tdoa_measurement_model(state, anchor_i, anchor_j);
}

/// Feasibility bound: the platform cannot have covered more than
/// d_max = |v| dt + a_max dt^2 / 2 within dt, so a larger innovation cannot
/// stem from motion. TDoA innovations mix two ranges, hence the doubled bound.
inline bool gate_dynamics(double innovation, const EkfState& state, double dt,
                          const GateConfig& config, Mode mode) {
  if (!(dt > 0.0)) throw std::invalid_argument("gate_dynamics: dt must be > 0");
  const double d_max = state.velocity().norm() * dt + 0.5 * config.a_max * dt * dt;
  const double bound = mode == Mode::Twr ? d_max : 2.0 * d_max;
  return std::abs(innovation) <= bound;
}

struct InnovationStats {
  double y_tilde = 0.0;
  double variance = 0.0;  // S = G P G^T + R
};

inline InnovationStats innovation_stats(const EkfState& state, double measurement_value, Mode mode,
                                        const Vec3& anchor_i, const Vec3& anchor_j,
                                        const GateConfig& config) {
  const MeasurementModel m = measurement_model(state, mode, anchor_i, anchor_j);
  InnovationStats s;
  s.y_tilde = measurement_value - m.predicted;
  s.variance = m.jacobian.dot(state.covariance * m.jacobian) + config.measurement_variance(mode);
  return s;
}

inline bool gate_chi2(double y_tilde, double innovation_variance, const GateConfig& config) {
  if (!(innovation_variance > 0.0))
    throw std::invalid_argument("gate_chi2: innovation variance must be > 0");
  return y_tilde * y_tilde / innovation_variance <= config.chi2_threshold;
}

struct UpdateResult {
  EkfState state;
  GateOutcome outcome;
  double raw = 0.0;
  double compensated = 0.0;
};

/// Full scalar update pipeline: bias compensation (when a model is supplied),
/// dynamics gate, chi-squared gate, then the EKF correction with Joseph-form
/// covariance. A rejected measurement leaves the state untouched.
///
/// The compensation feature is assembled from the prior state estimate plus
/// the externally supplied attitude, mirroring the deployed system where only
/// the estimated pose is available.
inline UpdateResult update(const EkfState& state, const RangeMeasurement& measurement,
                           const AnchorConstellation& constellation, const Vec3& attitude,
                           const MlpModel* model, const GateConfig& config) {
  const Vec3& pi = constellation.position_of(measurement.anchor_i);
  const Vec3 pj = measurement.mode == Mode::Tdoa ? constellation.position_of(measurement.anchor_j)
                                                 : Vec3::Zero();

  UpdateResult result;
  result.raw = measurement.value;
  result.compensated = measurement.value;
  if (model) {
    if (model->mode != measurement.mode) throw ConfigError("update: model/measurement mode mismatch");
    TagState prior;
    prior.position = state.position();
    prior.attitude = attitude;
    const FeatureVector feature = measurement.mode == Mode::Twr
                                      ? twr_feature(prior, pi)
                                      : tdoa_feature(prior, pi, pj);
    result.compensated = compensate(measurement, *model, feature);
  }

  const MeasurementModel mm = measurement_model(state, measurement.mode, pi, pj);
  const double y_tilde = result.compensated - mm.predicted;
  const double s_var =
      mm.jacobian.dot(state.covariance * mm.jacobian) + config.measurement_variance(measurement.mode);

  result.outcome.innovation = y_tilde;
  result.outcome.innovation_variance = s_var;
  result.state = state;

  const double baseline = state.channel_baseline(measurement.anchor_i, measurement.anchor_j);
  const double gate_window = config.dynamics_horizon + std::max(0.0, state.time - baseline);
  if (config.dynamics_enabled &&
      !gate_dynamics(y_tilde, state, gate_window, config, measurement.mode)) {
    result.outcome.accepted = false;
    result.outcome.reason = GateReason::RejectedDynamics;
    return result;
  }
  if (config.chi2_enabled && !gate_chi2(y_tilde, s_var, config)) {
    result.outcome.accepted = false;
    result.outcome.reason = GateReason::RejectedChi2;
    return result;
  }

  const Vec6 gain = state.covariance * mm.jacobian / s_var;
  result.state.mean += gain * y_tilde;
  const Mat6 ikg = Mat6::Identity() - gain * mm.jacobian.transpose();
  Mat6 p = ikg * state.covariance * ikg.transpose() +
           gain * config.measurement_variance(measurement.mode) * gain.transpose();
  result.state.covariance = 0.5 * (p + p.transpose());
  result.state.stamp_accept(measurement.anchor_i, measurement.anchor_j, state.time);
  result.outcome.accepted = true;
  result.outcome.reason = GateReason::Accepted;
  return result;
}

}  // namespace uwbloc
