// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwbloc/sim.hpp"

namespace uwbloc {

/// Aggregated experiment settings: one json document covering the world, the
/// filter, training and dataset generation. Every field has a default;
/// unknown keys are rejected. Command-line flags override file values.
struct ExperimentConfig {
  RunConfig run;
  TrainConfig train;
  DatasetConfig dataset;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& section,
                                std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("config: unknown key '" + (section.empty() ? item.key() : section + "." + item.key()) + "'");
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_vec3(const nlohmann::json& j, const char* key, Vec3& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3)
    throw ConfigError(std::string("config: '") + key + "' must be a 3-array");
  out = Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

inline void parse_trajectory(const nlohmann::json& j, Trajectory& traj, int& waypoint_count) {
  reject_unknown_keys(j, "trajectory",
                      {"kind", "center", "radius", "speed", "duration", "z_amplitude", "z_period",
                       "phase", "waypoints"});
  if (j.contains("kind")) {
    const auto kind = parse_trajectory_kind(j.at("kind").get<std::string>());
    if (!kind) throw ConfigError("config: unknown trajectory kind '" + j.at("kind").get<std::string>() + "'");
    traj.kind = *kind;
    if (traj.kind == TrajectoryKind::CircleVaryingZ) traj.z_amplitude = 0.5;
  }
  read_vec3(j, "center", traj.center);
  read_if(j, "radius", traj.radius);
  read_if(j, "speed", traj.speed);
  read_if(j, "duration", traj.duration);
  read_if(j, "z_amplitude", traj.z_amplitude);
  read_if(j, "z_period", traj.z_period);
  read_if(j, "phase", traj.phase);
  read_if(j, "waypoints", waypoint_count);
}

}  // namespace detail

/// Trajectory waypoint count parsed from the config; the spline itself is
/// built by finalize_trajectory once the final seed is known.
struct ParsedExperiment {
  ExperimentConfig config;
  int trajectory_waypoints = 12;
};

inline ParsedExperiment parse_experiment_config(const nlohmann::json& j) {
  ParsedExperiment parsed;
  ExperimentConfig& cfg = parsed.config;
  detail::reject_unknown_keys(
      j, "", {"constellation", "trajectory", "bias", "noise", "gate", "train", "run", "dataset"});

  if (j.contains("constellation")) {
    const auto& c = j.at("constellation");
    detail::reject_unknown_keys(c, "constellation", {"file", "anchors", "bounds"});
    if (c.contains("file"))
      cfg.run.constellation = AnchorConstellation::from_json_file(c.at("file").get<std::string>());
    else
      cfg.run.constellation = AnchorConstellation::from_json(c);
  }

  if (j.contains("trajectory"))
    detail::parse_trajectory(j.at("trajectory"), cfg.run.trajectory, parsed.trajectory_waypoints);

  if (j.contains("bias")) {
    const auto& b = j.at("bias");
    detail::reject_unknown_keys(
        b, "bias", {"constant_offset", "amplitude_az", "phase_az", "amplitude_el", "range_gain"});
    detail::read_if(b, "constant_offset", cfg.run.bias.constant_offset);
    detail::read_if(b, "amplitude_az", cfg.run.bias.amplitude_az);
    detail::read_if(b, "phase_az", cfg.run.bias.phase_az);
    detail::read_if(b, "amplitude_el", cfg.run.bias.amplitude_el);
    detail::read_if(b, "range_gain", cfg.run.bias.range_gain);
    cfg.run.bias.validate();
  }

  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    detail::reject_unknown_keys(n, "noise",
                                {"sigma_twr", "sigma_tdoa", "outlier_rate", "outlier_scale",
                                 "ground_boost", "ground_outlier_rate", "ground_scale_factor",
                                 "ground_height", "seed"});
    detail::read_if(n, "sigma_twr", cfg.run.noise.sigma_twr);
    detail::read_if(n, "sigma_tdoa", cfg.run.noise.sigma_tdoa);
    detail::read_if(n, "outlier_rate", cfg.run.noise.outlier_rate);
    detail::read_if(n, "outlier_scale", cfg.run.noise.outlier_scale);
    detail::read_if(n, "ground_boost", cfg.run.noise.ground_boost);
    detail::read_if(n, "ground_outlier_rate", cfg.run.noise.ground_outlier_rate);
    detail::read_if(n, "ground_scale_factor", cfg.run.noise.ground_scale_factor);
    detail::read_if(n, "ground_height", cfg.run.noise.ground_height);
    detail::read_if(n, "seed", cfg.run.noise.seed);
    cfg.run.noise.validate();
  }

  if (j.contains("gate")) {
    const auto& g = j.at("gate");
    detail::reject_unknown_keys(
        g, "gate", {"a_max", "chi2_threshold", "r_twr", "r_tdoa", "dynamics_horizon"});
    detail::read_if(g, "a_max", cfg.run.gate.a_max);
    detail::read_if(g, "chi2_threshold", cfg.run.gate.chi2_threshold);
    detail::read_if(g, "r_twr", cfg.run.gate.r_twr);
    detail::read_if(g, "r_tdoa", cfg.run.gate.r_tdoa);
    detail::read_if(g, "dynamics_horizon", cfg.run.gate.dynamics_horizon);
    cfg.run.gate.validate();
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(
        t, "train", {"learning_rate", "batch_size", "epochs", "xi", "split", "seed"});
    detail::read_if(t, "learning_rate", cfg.train.learning_rate);
    detail::read_if(t, "batch_size", cfg.train.batch_size);
    detail::read_if(t, "epochs", cfg.train.epochs);
    detail::read_if(t, "xi", cfg.train.xi_threshold);
    detail::read_if(t, "split", cfg.train.split_fraction);
    detail::read_if(t, "seed", cfg.train.seed);
    cfg.train.validate();
  }

  if (j.contains("run")) {
    const auto& r = j.at("run");
    detail::reject_unknown_keys(
        r, "run",
        {"mode", "compensation", "rejection", "rate", "seed", "process_noise", "burn_in",
         "divergence_threshold", "init_offset", "init_position_var", "init_velocity_var",
         "controller", "start_on_ground", "ground_z", "ground_dwell", "perfect_estimation"});
    if (r.contains("mode")) {
      const auto mode = parse_mode(r.at("mode").get<std::string>());
      if (!mode) throw ConfigError("config: unknown mode '" + r.at("mode").get<std::string>() + "'");
      cfg.run.mode = *mode;
    }
    detail::read_if(r, "compensation", cfg.run.compensation);
    detail::read_if(r, "rejection", cfg.run.rejection);
    detail::read_if(r, "rate", cfg.run.measurement_rate);
    if (r.contains("seed")) {
      cfg.run.seed = r.at("seed").get<std::uint64_t>();
      cfg.run.noise.seed = cfg.run.seed;
    }
    detail::read_if(r, "process_noise", cfg.run.process_noise);
    detail::read_if(r, "burn_in", cfg.run.burn_in);
    detail::read_if(r, "divergence_threshold", cfg.run.divergence_threshold);
    detail::read_vec3(r, "init_offset", cfg.run.init_offset);
    detail::read_if(r, "init_position_var", cfg.run.init_position_var);
    detail::read_if(r, "init_velocity_var", cfg.run.init_velocity_var);
    if (r.contains("controller")) {
      const auto& c = r.at("controller");
      detail::reject_unknown_keys(c, "run.controller", {"gain", "saturation"});
      detail::read_if(c, "gain", cfg.run.controller.gain);
      detail::read_if(c, "saturation", cfg.run.controller.saturation);
    }
    detail::read_if(r, "start_on_ground", cfg.run.start_on_ground);
    detail::read_if(r, "ground_z", cfg.run.ground_z);
    detail::read_if(r, "ground_dwell", cfg.run.ground_dwell);
    detail::read_if(r, "perfect_estimation", cfg.run.perfect_estimation);
  }

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::reject_unknown_keys(
        d, "dataset",
        {"flights", "flight_duration", "rate", "speed", "waypoints_per_flight", "seed"});
    detail::read_if(d, "flights", cfg.dataset.flights);
    detail::read_if(d, "flight_duration", cfg.dataset.flight_duration);
    detail::read_if(d, "rate", cfg.dataset.rate);
    detail::read_if(d, "speed", cfg.dataset.speed);
    detail::read_if(d, "waypoints_per_flight", cfg.dataset.waypoints_per_flight);
    detail::read_if(d, "seed", cfg.dataset.seed);
  }
  return parsed;
}

inline ParsedExperiment load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed config json (" + path + "): " + e.what());
  }
  return parse_experiment_config(j);
}

/// Build the waypoint spline for generic trajectories once flag overrides
/// have settled the seed.
inline void finalize_trajectory(ParsedExperiment& parsed) {
  Trajectory& traj = parsed.config.run.trajectory;
  if (traj.kind == TrajectoryKind::GenericWaypoints && traj.waypoints.empty()) {
    Rng rng = Rng(parsed.config.run.seed).fork(0xfeed);
    traj = make_waypoint_trajectory(parsed.config.run.constellation.bounds(),
                                    parsed.trajectory_waypoints, traj.speed, traj.duration, rng);
  }
}

}  // namespace uwbloc
