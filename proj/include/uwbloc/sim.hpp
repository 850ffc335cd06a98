// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwbloc/estimator.hpp"
#include "uwbloc/geometry.hpp"
#include "uwbloc/measurement.hpp"
#include "uwbloc/nn.hpp"
#include "uwbloc/rng.hpp"
#include "uwbloc/trajectory.hpp"
#include "uwbloc/types.hpp"

namespace uwbloc {

/// Kinematic waypoint tracker: commanded velocity is a proportional pull
/// toward the waypoint plus the reference feedforward, saturated.
struct ControllerConfig {
  double gain = 1.0;        // 1/s
  double saturation = 1.0;  // m/s
};

struct RunConfig {
  Trajectory trajectory;
  AnchorConstellation constellation = AnchorConstellation::default_arena();
  BiasFieldParams bias;
  NoiseConfig noise;
  GateConfig gate;
  Mode mode = Mode::Twr;
  bool compensation = false;
  bool rejection = true;
  double measurement_rate = 200.0;  // Hz
  std::uint64_t seed = 1;
  double process_noise = 0.02;  // accel spectral density, m^2/s^3
  Vec3 init_offset{0.08, -0.06, 0.05};
  double init_position_var = 0.25;
  double init_velocity_var = 0.25;
  double burn_in = 1.0;  // s excluded from RMSE
  double divergence_threshold = 5.0;
  ControllerConfig controller;
  bool start_on_ground = true;      // closed loop: take off from z = ground_z
  double ground_z = 0.05;
  double ground_dwell = 2.0;        // s holding the pad before the trajectory starts
  bool perfect_estimation = false;  // closed-loop controller baseline

  void validate() const {
    if (!(measurement_rate > 0.0) || measurement_rate > 1000.0)
      throw ConfigError("measurement_rate must be in (0, 1000] Hz");
    const std::size_t minimum = mode == Mode::Twr ? 4 : 5;
    if (constellation.size() < minimum)
      throw ConfigError(std::string("need at least ") + std::to_string(minimum) + " anchors for " +
                        to_string(mode));
    bias.validate();
    noise.validate();
    gate.validate();
    if (!(burn_in >= 0.0)) throw ConfigError("burn_in must be >= 0");
    if (burn_in >= trajectory.duration) throw ConfigError("burn_in must be below the run duration");
    if (!(divergence_threshold > 0.0)) throw ConfigError("divergence_threshold must be > 0");
  }
};

/// One row per processed measurement; source data for the log files and for
/// every error metric.
struct StepRecord {
  double t = 0.0;
  Mode mode = Mode::Twr;
  int anchor_i = 0;
  int anchor_j = -1;
  double raw = 0.0;
  double compensated = 0.0;
  double y_tilde = 0.0;
  double innovation_variance = 0.0;
  GateReason reason = GateReason::Accepted;
  Vec3 est{Vec3::Zero()};
  Vec3 truth{Vec3::Zero()};
  Vec3 commanded{Vec3::Zero()};
  bool truth_outlier = false;  // simulator debug channel, for oracles only
};

struct RunSummary {
  double estimation_rmse = 0.0;
  Vec3 per_axis_rmse{Vec3::Zero()};
  double tracking_rmse = 0.0;
  std::size_t accepted = 0;
  std::size_t rejected_dynamics = 0;
  std::size_t rejected_chi2 = 0;
  bool diverged = false;
  std::size_t record_count = 0;
};

struct RunLog {
  std::string trajectory_id;
  Mode mode = Mode::Twr;
  bool compensation = false;
  bool rejection = true;
  bool closed_loop = false;
  std::uint64_t seed = 0;
  double measurement_rate = 0.0;
  double burn_in = 0.0;
  double divergence_threshold = 5.0;
  double duration = 0.0;
  std::vector<StepRecord> records;
  RunSummary summary;
};

/// Recompute the summary from the records: RMSE over t >= burn_in, gate
/// counts and the divergence flag over the whole run.
inline RunSummary metrics(const RunLog& log) {
  if (log.records.empty()) throw std::invalid_argument("metrics: empty log");
  RunSummary s;
  s.record_count = log.records.size();
  double sum_e2 = 0.0, sum_t2 = 0.0;
  Vec3 sum_axis2 = Vec3::Zero();
  std::size_t n = 0;
  for (const auto& r : log.records) {
    switch (r.reason) {
      case GateReason::Accepted: ++s.accepted; break;
      case GateReason::RejectedDynamics: ++s.rejected_dynamics; break;
      case GateReason::RejectedChi2: ++s.rejected_chi2; break;
    }
    const Vec3 err = r.est - r.truth;
    if (err.norm() > log.divergence_threshold) s.diverged = true;
    if (r.t + 1e-12 >= log.burn_in) {
      sum_e2 += err.squaredNorm();
      sum_axis2 += err.cwiseProduct(err);
      sum_t2 += (r.truth - r.commanded).squaredNorm();
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("metrics: burn-in leaves no records");
  s.estimation_rmse = std::sqrt(sum_e2 / static_cast<double>(n));
  s.per_axis_rmse = (sum_axis2 / static_cast<double>(n)).cwiseSqrt();
  s.tracking_rmse = log.closed_loop ? std::sqrt(sum_t2 / static_cast<double>(n)) : 0.0;
  return s;
}

namespace detail {

struct AnchorCycle {
  const AnchorConstellation& constellation;
  Mode mode;

  std::pair<int, int> pair_for(std::size_t step) const {
    const std::size_t m = constellation.size();
    const int ai = constellation.anchor_at(step % m).id;
    if (mode == Mode::Twr) return {ai, -1};
    return {ai, constellation.anchor_at((step + 1) % m).id};
  }
};

inline GateConfig effective_gate(const RunConfig& config) {
  GateConfig g = config.gate;
  if (!config.rejection) {
    g.dynamics_enabled = false;
    g.chi2_enabled = false;
  }
  return g;
}

inline RunLog make_log(const RunConfig& config, bool closed_loop) {
  RunLog log;
  log.trajectory_id = config.trajectory.id();
  log.mode = config.mode;
  log.compensation = config.compensation;
  log.rejection = config.rejection;
  log.closed_loop = closed_loop;
  log.seed = config.noise.seed;
  log.measurement_rate = config.measurement_rate;
  log.burn_in = config.burn_in;
  log.divergence_threshold = config.divergence_threshold;
  log.duration = config.trajectory.duration;
  return log;
}

}  // namespace detail

/// Open-loop estimation experiment: the tag follows the reference trajectory
/// exactly while the filter tracks it from corrupted measurements, one per
/// tick, anchors cycled round-robin (consecutive pairs for TDoA).
inline RunLog run_estimation(const RunConfig& config, const MlpModel* model = nullptr) {
  config.validate();
  validate_trajectory(config.trajectory, config.constellation.bounds());
  if (config.compensation && model == nullptr)
    throw ConfigError("run_estimation: compensation enabled but no model supplied");
  const MlpModel* active_model = config.compensation ? model : nullptr;
  if (active_model && active_model->mode != config.mode)
    throw ConfigError("run_estimation: model mode does not match run mode");

  RunLog log = detail::make_log(config, false);
  const double dt = 1.0 / config.measurement_rate;
  const auto steps = static_cast<std::size_t>(config.trajectory.duration * config.measurement_rate);
  log.records.reserve(steps + 1);

  const GateConfig gate = detail::effective_gate(config);
  const detail::AnchorCycle cycle{config.constellation, config.mode};
  Rng rng(config.noise.seed);

  const TagState start = trajectory_pose(config.trajectory, 0.0);
  EkfState est = make_ekf_state(start.position + config.init_offset, Vec3::Zero(),
                                config.init_position_var, config.init_velocity_var, 0.0);

  for (std::size_t k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (k > 0) est = predict(est, dt, config.process_noise);
    const TagState truth = trajectory_pose(config.trajectory, t);
    const auto [ai, aj] = cycle.pair_for(k);
    SampleDebug debug;
    const RangeMeasurement meas = sample_measurement(config.constellation, truth, config.mode, ai,
                                                     aj, config.bias, config.noise, rng, &debug);
    const UpdateResult res =
        update(est, meas, config.constellation, truth.attitude, active_model, gate);
    est = res.state;

    StepRecord rec;
    rec.t = t;
    rec.mode = config.mode;
    rec.anchor_i = ai;
    rec.anchor_j = aj;
    rec.raw = res.raw;
    rec.compensated = res.compensated;
    rec.y_tilde = res.outcome.innovation;
    rec.innovation_variance = res.outcome.innovation_variance;
    rec.reason = res.outcome.reason;
    rec.est = est.position();
    rec.truth = truth.position;
    rec.commanded = truth.position;  // open loop: the reference is the truth
    rec.truth_outlier = debug.outlier;
    log.records.push_back(rec);
  }
  log.summary = metrics(log);
  return log;
}

/// Closed-loop tracking experiment: a kinematic plant follows the saturated
/// velocity command computed from the filter estimate, so estimation errors
/// feed back into the flown path.
inline RunLog run_closed_loop(const RunConfig& config, const MlpModel* model = nullptr) {
  config.validate();
  validate_trajectory(config.trajectory, config.constellation.bounds());
  if (config.compensation && model == nullptr)
    throw ConfigError("run_closed_loop: compensation enabled but no model supplied");
  const MlpModel* active_model = config.compensation ? model : nullptr;
  if (active_model && active_model->mode != config.mode)
    throw ConfigError("run_closed_loop: model mode does not match run mode");

  RunLog log = detail::make_log(config, true);
  const double dt = 1.0 / config.measurement_rate;
  const double total_duration = config.ground_dwell + config.trajectory.duration;
  log.duration = total_duration;
  const auto steps = static_cast<std::size_t>(total_duration * config.measurement_rate);
  log.records.reserve(steps + 1);

  const GateConfig gate = detail::effective_gate(config);
  const detail::AnchorCycle cycle{config.constellation, config.mode};
  Rng rng(config.noise.seed);

  TagState plant = trajectory_pose(config.trajectory, 0.0);
  if (config.start_on_ground) plant.position.z() = config.ground_z;
  plant.velocity = Vec3::Zero();
  plant.attitude = Vec3::Zero();
  const Vec3 pad = plant.position;
  EkfState est = make_ekf_state(plant.position + config.init_offset, Vec3::Zero(),
                                config.init_position_var, config.init_velocity_var, 0.0);

  // reference: hold the pad while armed, then fly the trajectory
  auto reference_at = [&](double t) {
    if (t < config.ground_dwell) {
      TagState hold = trajectory_pose(config.trajectory, 0.0);
      hold.position = pad;
      hold.velocity = Vec3::Zero();
      return hold;
    }
    return trajectory_pose(config.trajectory, t - config.ground_dwell);
  };

  for (std::size_t k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (k > 0) {
      const TagState ref_prev = reference_at(t - dt);
      const Vec3 ctrl_pos = config.perfect_estimation ? plant.position : est.position();
      Vec3 v_cmd = config.controller.gain * (ref_prev.position - ctrl_pos) + ref_prev.velocity;
      const double v_norm = v_cmd.norm();
      if (v_norm > config.controller.saturation) v_cmd *= config.controller.saturation / v_norm;
      const Vec3 accel = (v_cmd - plant.velocity) / dt;
      plant.position += v_cmd * dt;
      plant.velocity = v_cmd;
      plant.attitude = detail::attitude_from_motion(plant.velocity, accel, plant.attitude.z());
      plant.time = t;
      est = predict(est, dt, config.process_noise);
    }
    const TagState ref = reference_at(t);
    const auto [ai, aj] = cycle.pair_for(k);
    SampleDebug debug;
    const RangeMeasurement meas = sample_measurement(config.constellation, plant, config.mode, ai,
                                                     aj, config.bias, config.noise, rng, &debug);
    const UpdateResult res =
        update(est, meas, config.constellation, plant.attitude, active_model, gate);
    est = res.state;

    StepRecord rec;
    rec.t = t;
    rec.mode = config.mode;
    rec.anchor_i = ai;
    rec.anchor_j = aj;
    rec.raw = res.raw;
    rec.compensated = res.compensated;
    rec.y_tilde = res.outcome.innovation;
    rec.innovation_variance = res.outcome.innovation_variance;
    rec.reason = res.outcome.reason;
    rec.est = est.position();
    rec.truth = plant.position;
    rec.commanded = ref.position;
    rec.truth_outlier = debug.outlier;
    log.records.push_back(rec);
  }
  log.summary = metrics(log);
  return log;
}

// ---------------------------------------------------------------------------
// Training data generation
// ---------------------------------------------------------------------------

struct DatasetConfig {
  int flights = 20;
  double flight_duration = 120.0;  // s
  double rate = 50.0;              // Hz
  double speed = 0.9;              // m/s, data-collection cruise
  int waypoints_per_flight = 16;
  std::uint64_t seed = 7;
};

struct Dataset {
  Mode mode = Mode::Twr;
  std::vector<TrainingSample> samples;
  std::vector<Vec3> poses;  // tag position per sample, for coverage checks
};

/// Fly seeded generic waypoint loops through the arena and log
/// (feature, measured - true) pairs at the data-collection rate.
inline Dataset generate_dataset(const DatasetConfig& config,
                                const AnchorConstellation& constellation,
                                const BiasFieldParams& bias, const NoiseConfig& noise, Mode mode,
                                int n_flights) {
  if (n_flights < 1) throw ConfigError("generate_dataset: need at least one flight");
  bias.validate();
  noise.validate();
  Dataset out;
  out.mode = mode;
  const Rng master(config.seed);
  const auto per_flight =
      static_cast<std::size_t>(config.flight_duration * config.rate) + 1;
  out.samples.reserve(per_flight * n_flights);
  out.poses.reserve(per_flight * n_flights);
  const detail::AnchorCycle cycle{constellation, mode};

  for (int flight = 0; flight < n_flights; ++flight) {
    Rng traj_rng = master.fork(2 * static_cast<std::uint64_t>(flight));
    Rng meas_rng = master.fork(2 * static_cast<std::uint64_t>(flight) + 1);
    const Trajectory traj =
        make_waypoint_trajectory(constellation.bounds(), config.waypoints_per_flight, config.speed,
                                 config.flight_duration, traj_rng);
    const auto steps = static_cast<std::size_t>(config.flight_duration * config.rate);
    for (std::size_t k = 0; k <= steps; ++k) {
      const double t = static_cast<double>(k) / config.rate;
      const TagState pose = trajectory_pose(traj, t);
      const auto [ai, aj] = cycle.pair_for(k);
      SampleDebug debug;
      const RangeMeasurement meas =
          sample_measurement(constellation, pose, mode, ai, aj, bias, noise, meas_rng, &debug);
      TrainingSample sample;
      sample.feature = mode == Mode::Twr
                           ? twr_feature(pose, constellation.position_of(ai))
                           : tdoa_feature(pose, constellation.position_of(ai),
                                          constellation.position_of(aj));
      sample.target_bias = meas.value - debug.true_range;
      out.samples.push_back(sample);
      out.poses.push_back(pose.position);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run log serialization: json-lines (header line + one line per record) plus
// a free-standing summary json.
// ---------------------------------------------------------------------------

inline nlohmann::json summary_to_json(const RunLog& log) {
  const RunSummary& s = log.summary;
  return nlohmann::json{{"trajectory", log.trajectory_id},
                        {"mode", to_string(log.mode)},
                        {"compensation", log.compensation},
                        {"rejection", log.rejection},
                        {"closed_loop", log.closed_loop},
                        {"seed", log.seed},
                        {"estimation_rmse", s.estimation_rmse},
                        {"per_axis_rmse", {s.per_axis_rmse.x(), s.per_axis_rmse.y(), s.per_axis_rmse.z()}},
                        {"tracking_rmse", s.tracking_rmse},
                        {"accepted", s.accepted},
                        {"rejected_dynamics", s.rejected_dynamics},
                        {"rejected_chi2", s.rejected_chi2},
                        {"diverged", s.diverged},
                        {"records", s.record_count}};
}

inline void write_runlog_jsonl(std::ostream& out, const RunLog& log) {
  nlohmann::json header{{"trajectory", log.trajectory_id},
                        {"mode", to_string(log.mode)},
                        {"compensation", log.compensation},
                        {"rejection", log.rejection},
                        {"closed_loop", log.closed_loop},
                        {"seed", log.seed},
                        {"rate", log.measurement_rate},
                        {"burn_in", log.burn_in},
                        {"divergence_threshold", log.divergence_threshold},
                        {"duration", log.duration}};
  out << header.dump() << '\n';
  for (const auto& r : log.records) {
    nlohmann::json j{{"t", r.t},
                     {"mode", to_string(r.mode)},
                     {"i", r.anchor_i},
                     {"j", r.anchor_j},
                     {"raw", r.raw},
                     {"compensated", r.compensated},
                     {"y_tilde", r.y_tilde},
                     {"S", r.innovation_variance},
                     {"reason", to_string(r.reason)},
                     {"est_x", r.est.x()},
                     {"est_y", r.est.y()},
                     {"est_z", r.est.z()},
                     {"truth_x", r.truth.x()},
                     {"truth_y", r.truth.y()},
                     {"truth_z", r.truth.z()},
                     {"cmd_x", r.commanded.x()},
                     {"cmd_y", r.commanded.y()},
                     {"cmd_z", r.commanded.z()},
                     {"outlier", r.truth_outlier}};
    out << j.dump() << '\n';
  }
}

inline RunLog read_runlog_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("run log: empty file");
  RunLog log;
  try {
    const nlohmann::json header = nlohmann::json::parse(line);
    log.trajectory_id = header.at("trajectory").get<std::string>();
    const auto mode = parse_mode(header.at("mode").get<std::string>());
    if (!mode) throw IoError("run log: bad mode");
    log.mode = *mode;
    log.compensation = header.at("compensation").get<bool>();
    log.rejection = header.at("rejection").get<bool>();
    log.closed_loop = header.at("closed_loop").get<bool>();
    log.seed = header.at("seed").get<std::uint64_t>();
    log.measurement_rate = header.at("rate").get<double>();
    log.burn_in = header.at("burn_in").get<double>();
    log.divergence_threshold = header.at("divergence_threshold").get<double>();
    log.duration = header.at("duration").get<double>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const nlohmann::json j = nlohmann::json::parse(line);
      StepRecord r;
      r.t = j.at("t").get<double>();
      const auto rmode = parse_mode(j.at("mode").get<std::string>());
      if (!rmode) throw IoError("run log: bad record mode");
      r.mode = *rmode;
      r.anchor_i = j.at("i").get<int>();
      r.anchor_j = j.at("j").get<int>();
      r.raw = j.at("raw").get<double>();
      r.compensated = j.at("compensated").get<double>();
      r.y_tilde = j.at("y_tilde").get<double>();
      r.innovation_variance = j.at("S").get<double>();
      const std::string reason = j.at("reason").get<std::string>();
      r.reason = reason == "accepted"          ? GateReason::Accepted
                 : reason == "rejected_dynamics" ? GateReason::RejectedDynamics
                                                 : GateReason::RejectedChi2;
      r.est = Vec3(j.at("est_x").get<double>(), j.at("est_y").get<double>(), j.at("est_z").get<double>());
      r.truth = Vec3(j.at("truth_x").get<double>(), j.at("truth_y").get<double>(),
                     j.at("truth_z").get<double>());
      r.commanded =
          Vec3(j.at("cmd_x").get<double>(), j.at("cmd_y").get<double>(), j.at("cmd_z").get<double>());
      r.truth_outlier = j.at("outlier").get<bool>();
      log.records.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("run log: parse failure: ") + e.what());
  }
  log.summary = metrics(log);
  return log;
}

inline void save_runlog(const RunLog& log, const std::string& records_path,
                        const std::string& summary_path) {
  std::ofstream records(records_path);
  if (!records) throw IoError("cannot open run log for writing: " + records_path);
  write_runlog_jsonl(records, log);
  if (!summary_path.empty()) {
    std::ofstream summary(summary_path);
    if (!summary) throw IoError("cannot open summary for writing: " + summary_path);
    summary << summary_to_json(log).dump(2) << '\n';
  }
}

inline RunLog load_runlog(const std::string& records_path) {
  std::ifstream in(records_path);
  if (!in) throw IoError("cannot open run log: " + records_path);
  return read_runlog_jsonl(in);
}

}  // namespace uwbloc
