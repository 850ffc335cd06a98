// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "uwbloc/config.hpp"
#include "uwbloc/sim.hpp"

using namespace uwbloc;

namespace {

RunConfig base_config(Mode mode) {
  RunConfig cfg;
  cfg.mode = mode;
  cfg.trajectory.duration = 20.0;
  return cfg;
}

}  // namespace

TEST_CASE("circle trajectory kinematics") {
  Trajectory traj;  // defaults: planar circle, r=2, speed 0.375
  const TagState at0 = trajectory_pose(traj, 0.0);
  CHECK(at0.position == Vec3(5.5, 4.0, 1.5));  // center + (r, 0, 0)
  CHECK(at0.velocity.norm() == doctest::Approx(0.375).epsilon(1e-12));

  const double period = 2.0 * kPi * traj.radius / traj.speed;
  traj.duration = 2.0 * period;
  const TagState a = trajectory_pose(traj, 1.0);
  const TagState b = trajectory_pose(traj, 1.0 + period);
  CHECK((a.position - b.position).norm() <= 1e-9);

  CHECK_THROWS_AS(trajectory_pose(traj, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(trajectory_pose(traj, traj.duration + 0.1), std::invalid_argument);
}

TEST_CASE("analytic velocity matches finite differences") {
  Rng rng(3);
  const auto arena_box = AnchorConstellation::default_arena().bounds();
  std::vector<Trajectory> trajs;
  Trajectory planar;
  trajs.push_back(planar);
  Trajectory varying;
  varying.kind = TrajectoryKind::CircleVaryingZ;
  varying.z_amplitude = 0.8;
  trajs.push_back(varying);
  Rng wp_rng(10);
  trajs.push_back(make_waypoint_trajectory(arena_box, 8, 0.6, 60.0, wp_rng));

  const double h = 1e-4;
  for (const auto& traj : trajs) {
    for (int i = 0; i < 50; ++i) {
      const double t = rng.uniform(h, traj.duration - h);
      const TagState mid = trajectory_pose(traj, t);
      const Vec3 fd =
          (trajectory_pose(traj, t + h).position - trajectory_pose(traj, t - h).position) /
          (2.0 * h);
      CHECK((fd - mid.velocity).norm() <= 1e-3);
    }
  }
}

TEST_CASE("trajectory attitude stays inside the tilt envelope") {
  Trajectory traj;
  traj.kind = TrajectoryKind::CircleVaryingZ;
  traj.z_amplitude = 0.8;
  const double tilt_cap = 15.0 * kPi / 180.0 + 1e-12;
  for (int i = 0; i <= 200; ++i) {
    const TagState s = trajectory_pose(traj, traj.duration * i / 200.0);
    CHECK(std::abs(s.attitude.x()) <= tilt_cap);
    CHECK(std::abs(s.attitude.y()) <= tilt_cap);
    // yaw tracks the velocity heading on the planar component
    const double heading = std::atan2(s.velocity.y(), s.velocity.x());
    CHECK(std::abs(wrap_angle(s.attitude.z() - heading)) <= 1e-9);
  }
}

TEST_CASE("trajectories outside the arena margin are rejected") {
  const auto arena = AnchorConstellation::default_arena();
  Trajectory big;
  big.radius = 4.0;  // x spans [-0.5, 7.5] around center x=3.5
  CHECK_THROWS_AS(validate_trajectory(big, arena.bounds()), ConfigError);

  Trajectory ok;
  CHECK_NOTHROW(validate_trajectory(ok, arena.bounds()));
}

TEST_CASE("waypoint trajectories stay inside the margin") {
  const auto box = AnchorConstellation::default_arena().bounds();
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng rng(seed);
    const Trajectory traj = make_waypoint_trajectory(box, 10, 0.75, 90.0, rng);
    for (int i = 0; i <= 5000; ++i) {
      const TagState s = trajectory_pose(traj, traj.duration * i / 5000.0);
      CHECK(box.contains(s.position, 0.2 - 1e-9));
    }
  }
}

TEST_CASE("noiseless zero-bias estimation tracks to a centimeter") {
  RunConfig cfg = base_config(Mode::Twr);
  cfg.bias = BiasFieldParams::zero();
  cfg.noise.sigma_twr = 1e-12;
  cfg.noise.sigma_tdoa = 1e-12;
  cfg.noise.outlier_rate = 0.0;
  cfg.rejection = false;
  const RunLog log = run_estimation(cfg);
  CHECK(log.summary.estimation_rmse <= 0.01);
  CHECK_FALSE(log.summary.diverged);

  // record count = duration x rate (+1 for the t=0 sample)
  const auto expected = static_cast<std::size_t>(cfg.trajectory.duration * cfg.measurement_rate);
  CHECK(log.records.size() >= expected);
  CHECK(log.records.size() <= expected + 1);
}

TEST_CASE("runs are reproducible byte for byte") {
  RunConfig cfg = base_config(Mode::Tdoa);
  cfg.trajectory.duration = 5.0;
  auto render = [&cfg] {
    const RunLog log = run_estimation(cfg);
    std::stringstream ss;
    write_runlog_jsonl(ss, log);
    return ss.str();
  };
  const std::string a = render();
  const std::string b = render();
  CHECK(a == b);

  cfg.noise.seed += 1;
  CHECK(render() != a);
}

TEST_CASE("metrics recompute matches an independent two-pass oracle") {
  RunConfig cfg = base_config(Mode::Twr);
  cfg.trajectory.duration = 8.0;
  const RunLog log = run_estimation(cfg);

  // independent recomputation, reversed accumulation order
  std::vector<double> e2;
  for (const auto& r : log.records)
    if (r.t + 1e-12 >= log.burn_in) e2.push_back((r.est - r.truth).squaredNorm());
  double acc = 0.0;
  for (auto it = e2.rbegin(); it != e2.rend(); ++it) acc += *it;
  const double rmse = std::sqrt(acc / static_cast<double>(e2.size()));
  CHECK(log.summary.estimation_rmse == doctest::Approx(rmse).epsilon(1e-12));

  const RunSummary recomputed = metrics(log);
  CHECK(recomputed.estimation_rmse == doctest::Approx(log.summary.estimation_rmse).epsilon(1e-12));
  CHECK(recomputed.accepted == log.summary.accepted);
  CHECK(recomputed.rejected_dynamics == log.summary.rejected_dynamics);
  CHECK(recomputed.rejected_chi2 == log.summary.rejected_chi2);
}

TEST_CASE("metrics on a constant-offset synthetic log") {
  RunLog log;
  log.burn_in = 0.0;
  log.closed_loop = false;
  for (int i = 0; i < 100; ++i) {
    StepRecord r;
    r.t = 0.01 * i;
    r.truth = Vec3(1, 2, 3);
    r.est = r.truth + Vec3(0.1, 0, 0);
    r.commanded = r.truth;
    log.records.push_back(r);
  }
  const RunSummary s = metrics(log);
  CHECK(s.estimation_rmse == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s.per_axis_rmse.x() == doctest::Approx(0.1));
  CHECK(s.per_axis_rmse.y() == doctest::Approx(0.0));

  for (auto& r : log.records) r.est = r.truth;
  CHECK(metrics(log).estimation_rmse == 0.0);

  RunLog empty;
  CHECK_THROWS_AS(metrics(empty), std::invalid_argument);
}

TEST_CASE("jsonl round trip preserves records") {
  RunConfig cfg = base_config(Mode::Tdoa);
  cfg.trajectory.duration = 3.0;
  const RunLog log = run_estimation(cfg);
  std::stringstream ss;
  write_runlog_jsonl(ss, log);
  const RunLog back = read_runlog_jsonl(ss);
  REQUIRE(back.records.size() == log.records.size());
  CHECK(back.trajectory_id == log.trajectory_id);
  CHECK(back.summary.estimation_rmse ==
        doctest::Approx(log.summary.estimation_rmse).epsilon(1e-12));
  for (std::size_t i = 0; i < log.records.size(); i += 97) {
    CHECK(back.records[i].raw == log.records[i].raw);
    CHECK(back.records[i].y_tilde == log.records[i].y_tilde);
    CHECK(back.records[i].reason == log.records[i].reason);
    CHECK(back.records[i].truth_outlier == log.records[i].truth_outlier);
  }
}

TEST_CASE("closed loop with perfect estimation tracks the circle") {
  RunConfig cfg = base_config(Mode::Twr);
  cfg.trajectory.duration = 30.0;
  cfg.perfect_estimation = true;
  cfg.burn_in = 5.0;  // takeoff transient
  cfg.controller.gain = 1.0;
  cfg.controller.saturation = 1.0;
  const RunLog log = run_closed_loop(cfg);
  CHECK(log.summary.tracking_rmse <= 0.05);
  CHECK(log.closed_loop);

  // record count covers the armed dwell plus the trajectory
  const auto expected = static_cast<std::size_t>(
      (cfg.ground_dwell + cfg.trajectory.duration) * cfg.measurement_rate);
  CHECK(log.records.size() >= expected);
  CHECK(log.records.size() <= expected + 1);

  // the kinematic plant respects the saturation between steps
  const double dt = 1.0 / cfg.measurement_rate;
  for (std::size_t i = 1; i < log.records.size(); ++i) {
    const double step = (log.records[i].truth - log.records[i - 1].truth).norm();
    CHECK(step <= cfg.controller.saturation * dt + 1e-9);
  }
}

TEST_CASE("rejection beats raw fusion under outliers") {
  double raw_mean = 0.0, gated_mean = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    RunConfig cfg = base_config(Mode::Tdoa);
    cfg.bias = BiasFieldParams::zero();
    cfg.noise.seed = seed;
    cfg.rejection = false;
    raw_mean += run_estimation(cfg).summary.estimation_rmse;
    cfg.rejection = true;
    gated_mean += run_estimation(cfg).summary.estimation_rmse;
  }
  CHECK(gated_mean < raw_mean);
}

namespace {

// quickly-trained bias model, good enough for orderings (not for fidelity)
const MlpModel& coarse_tdoa_model() {
  static const TrainResult result = [] {
    const auto arena = AnchorConstellation::default_arena();
    DatasetConfig dcfg;
    dcfg.flights = 5;
    dcfg.flight_duration = 60.0;
    NoiseConfig noise;
    BiasFieldParams bias;
    const Dataset data = generate_dataset(dcfg, arena, bias, noise, Mode::Tdoa, dcfg.flights);
    TrainConfig tcfg;
    tcfg.epochs = 60;
    return train(data.samples, tcfg);
  }();
  return result.model;
}

}  // namespace

TEST_CASE("ablation ordering: raw worse than gated worse than compensated") {
  const MlpModel& model = coarse_tdoa_model();
  double raw = 0.0, rej = 0.0, comp = 0.0;
  for (int s = 0; s < 10; ++s) {
    RunConfig cfg;  // default 60 s planar circle, default world
    cfg.mode = Mode::Tdoa;
    cfg.noise.seed = 500 + s;
    cfg.rejection = false;
    cfg.compensation = false;
    raw += run_estimation(cfg).summary.estimation_rmse;
    cfg.rejection = true;
    rej += run_estimation(cfg).summary.estimation_rmse;
    cfg.compensation = true;
    comp += run_estimation(cfg, &model).summary.estimation_rmse;
  }
  CHECK(raw > rej);
  CHECK(rej > comp);
}

TEST_CASE("closed-loop tracking improves with compensation") {
  const MlpModel& model = coarse_tdoa_model();
  double with = 0.0, without = 0.0;
  for (int s = 0; s < 10; ++s) {
    RunConfig cfg;
    cfg.mode = Mode::Tdoa;
    cfg.rejection = true;
    cfg.noise.seed = 700 + s;
    cfg.trajectory.duration = 30.0;
    cfg.burn_in = 5.0;  // skip the takeoff transient
    cfg.compensation = false;
    without += run_closed_loop(cfg).summary.tracking_rmse;
    cfg.compensation = true;
    with += run_closed_loop(cfg, &model).summary.tracking_rmse;
  }
  CHECK(with < without);
}

TEST_CASE("config errors in runs") {
  RunConfig cfg = base_config(Mode::Twr);
  cfg.compensation = true;
  CHECK_THROWS_AS(run_estimation(cfg, nullptr), ConfigError);

  MlpModel tdoa_model = MlpModel::init(Mode::Tdoa, {9, 8, 1}, 1);
  CHECK_THROWS_AS(run_estimation(cfg, &tdoa_model), ConfigError);

  cfg = base_config(Mode::Tdoa);
  std::vector<Anchor> few = {{0, Vec3(0, 0, 0)}, {1, Vec3(7, 0, 0)}, {2, Vec3(0, 8, 0)},
                             {3, Vec3(7, 8, 0)}};
  cfg.constellation = AnchorConstellation(few, AnchorConstellation::default_arena().bounds());
  CHECK_THROWS_AS(run_estimation(cfg), ConfigError);  // tdoa wants 5 anchors
}

TEST_CASE("dataset generation counts and clean-world targets") {
  const auto arena = AnchorConstellation::default_arena();
  DatasetConfig cfg;
  cfg.flights = 1;
  cfg.flight_duration = 60.0;
  cfg.rate = 50.0;
  NoiseConfig noise;
  BiasFieldParams bias;
  const Dataset d = generate_dataset(cfg, arena, bias, noise, Mode::Twr, 1);
  CHECK(d.samples.size() >= 3000);
  CHECK(d.samples.size() <= 3001);

  NoiseConfig clean;
  clean.sigma_twr = 1e-15;
  clean.sigma_tdoa = 1e-15;
  clean.outlier_rate = 0.0;
  const Dataset zero = generate_dataset(cfg, arena, BiasFieldParams::zero(), clean, Mode::Twr, 1);
  for (const auto& s : zero.samples) CHECK(std::abs(s.target_bias) <= 1e-12);
}

TEST_CASE("dataset generation is deterministic and mode-consistent") {
  const auto arena = AnchorConstellation::default_arena();
  DatasetConfig cfg;
  cfg.flights = 2;
  cfg.flight_duration = 10.0;
  NoiseConfig noise;
  BiasFieldParams bias;
  const Dataset a = generate_dataset(cfg, arena, bias, noise, Mode::Tdoa, 2);
  const Dataset b = generate_dataset(cfg, arena, bias, noise, Mode::Tdoa, 2);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); i += 53) {
    CHECK(a.samples[i].target_bias == b.samples[i].target_bias);
    CHECK(a.samples[i].feature == b.samples[i].feature);
    CHECK(a.samples[i].feature.mode == Mode::Tdoa);
  }
}

TEST_CASE("default dataset covers at least 80 percent of the arena voxels") {
  const auto arena = AnchorConstellation::default_arena();
  DatasetConfig cfg;  // 20 flights, 120 s, 50 Hz
  NoiseConfig noise;
  BiasFieldParams bias;
  const Dataset d = generate_dataset(cfg, arena, bias, noise, Mode::Twr, cfg.flights);
  CHECK(d.samples.size() >= 100000);

  const double voxel = 0.5;
  const Vec3 extent = arena.bounds().extent();
  const int nx = static_cast<int>(std::ceil(extent.x() / voxel));
  const int ny = static_cast<int>(std::ceil(extent.y() / voxel));
  const int nz = static_cast<int>(std::ceil(extent.z() / voxel));
  std::set<int> occupied;
  for (const auto& p : d.poses) {
    const int ix = std::min(nx - 1, static_cast<int>((p.x() - arena.bounds().min.x()) / voxel));
    const int iy = std::min(ny - 1, static_cast<int>((p.y() - arena.bounds().min.y()) / voxel));
    const int iz = std::min(nz - 1, static_cast<int>((p.z() - arena.bounds().min.z()) / voxel));
    occupied.insert((ix * ny + iy) * nz + iz);
  }
  const double coverage =
      static_cast<double>(occupied.size()) / static_cast<double>(nx * ny * nz);
  CHECK(coverage >= 0.80);

  // the attitude envelope is spanned too: every 30-degree yaw bin is visited
  std::set<int> yaw_bins;
  for (const auto& s : d.samples) {
    const double yaw = s.feature.data[5];
    yaw_bins.insert(static_cast<int>((yaw + kPi) / (kPi / 6.0)));
  }
  CHECK(yaw_bins.size() >= 12);
}

TEST_CASE("experiment config parsing with defaults and overrides") {
  const auto parsed = parse_experiment_config(nlohmann::json::parse(R"({
    "trajectory": {"kind": "circle_varying_z", "radius": 1.5},
    "noise": {"sigma_twr": 0.03, "outlier_rate": 0.1},
    "gate": {"a_max": 8.0},
    "train": {"epochs": 10},
    "run": {"mode": "tdoa", "compensation": false, "seed": 42}
  })"));
  const RunConfig& run = parsed.config.run;
  CHECK(run.mode == Mode::Tdoa);
  CHECK(run.trajectory.kind == TrajectoryKind::CircleVaryingZ);
  CHECK(run.trajectory.z_amplitude == 0.5);  // implied default for the varying-z circle
  CHECK(run.trajectory.radius == 1.5);
  CHECK(run.trajectory.speed == 0.375);  // untouched default
  CHECK(run.noise.sigma_twr == 0.03);
  CHECK(run.noise.sigma_tdoa == 0.10);
  CHECK(run.gate.a_max == 8.0);
  CHECK(run.seed == 42);
  CHECK(run.noise.seed == 42);
  CHECK(parsed.config.train.epochs == 10);
  CHECK(parsed.config.train.xi_threshold == 0.7);
  CHECK(parsed.config.train.split_fraction == 0.9);

  CHECK_THROWS_AS(parse_experiment_config(nlohmann::json::parse(R"({"gates": {}})")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(nlohmann::json::parse(R"({"gate": {"amax": 1}})")),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(nlohmann::json::parse(R"({"noise": {"outlier_rate": 0.9}})")),
      ConfigError);
}

TEST_CASE("generic waypoint run config finalizes a spline") {
  ParsedExperiment parsed = parse_experiment_config(nlohmann::json::parse(R"({
    "trajectory": {"kind": "generic_waypoints", "speed": 0.5, "duration": 10.0, "waypoints": 6},
    "run": {"seed": 9}
  })"));
  finalize_trajectory(parsed);
  CHECK(parsed.config.run.trajectory.waypoints.size() == 6);
  const RunLog log = run_estimation(parsed.config.run);
  CHECK(log.records.size() >= 2000);
}
