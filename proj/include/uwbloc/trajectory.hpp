// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "uwbloc/geometry.hpp"
#include "uwbloc/rng.hpp"
#include "uwbloc/types.hpp"

namespace uwbloc {

enum class TrajectoryKind { CircleXy, CircleVaryingZ, GenericWaypoints };

inline const char* to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::CircleXy: return "circle_xy";
    case TrajectoryKind::CircleVaryingZ: return "circle_varying_z";
    default: return "generic_waypoints";
  }
}

inline std::optional<TrajectoryKind> parse_trajectory_kind(std::string_view s) {
  if (s == "circle_xy") return TrajectoryKind::CircleXy;
  if (s == "circle_varying_z") return TrajectoryKind::CircleVaryingZ;
  if (s == "generic_waypoints") return TrajectoryKind::GenericWaypoints;
  return std::nullopt;
}

/// Reference flight path. Circles are analytic; generic waypoint paths are
/// closed Catmull-Rom loops through seeded random waypoints.
struct Trajectory {
  TrajectoryKind kind = TrajectoryKind::CircleXy;
  Vec3 center{3.5, 4.0, 1.5};
  double radius = 2.0;
  double speed = 0.375;
  double duration = 60.0;
  double z_amplitude = 0.0;  // used by circle_varying_z
  double z_period = 30.0;    // s
  double phase = 0.0;

  // generic_waypoints internals (built by make_waypoint_trajectory)
  std::vector<Vec3> waypoints;
  std::vector<double> knot_times;  // cumulative, size = waypoints + 1 (closed loop)

  /// Compact path identity used to refuse cross-trajectory comparisons.
  std::string id() const {
    std::string s = to_string(kind);
    s += "/r" + format_double(radius) + "/s" + format_double(speed) + "/d" + format_double(duration);
    if (kind == TrajectoryKind::CircleVaryingZ)
      s += "/za" + format_double(z_amplitude) + "/zp" + format_double(z_period);
    if (kind == TrajectoryKind::GenericWaypoints) s += "/w" + std::to_string(waypoints.size());
    return s;
  }
};

namespace detail {

constexpr double kGravity = 9.81;
constexpr double kMaxTiltRad = 15.0 * kPi / 180.0;

/// Roll/pitch proxies from the body-frame acceleration of a coordinated turn,
/// clamped to a 15 degree envelope; yaw follows the velocity heading.
inline Vec3 attitude_from_motion(const Vec3& velocity, const Vec3& accel, double fallback_yaw) {
  double yaw = fallback_yaw;
  if (velocity.head<2>().norm() > 1e-6) yaw = std::atan2(velocity.y(), velocity.x());
  const double a_along = std::cos(yaw) * accel.x() + std::sin(yaw) * accel.y();
  const double a_lat = -std::sin(yaw) * accel.x() + std::cos(yaw) * accel.y();
  const double roll = std::clamp(std::atan2(a_lat, kGravity), -kMaxTiltRad, kMaxTiltRad);
  const double pitch = std::clamp(std::atan2(-a_along, kGravity), -kMaxTiltRad, kMaxTiltRad);
  return {roll, pitch, wrap_angle(yaw)};
}

struct PathPoint {
  Vec3 position;
  Vec3 velocity;
  Vec3 accel;
};

inline PathPoint circle_point(const Trajectory& traj, double t) {
  const double omega = traj.speed / traj.radius;
  const double theta = traj.phase + omega * t;
  PathPoint p;
  p.position = traj.center + Vec3(traj.radius * std::cos(theta), traj.radius * std::sin(theta), 0.0);
  p.velocity = Vec3(-traj.radius * omega * std::sin(theta), traj.radius * omega * std::cos(theta), 0.0);
  p.accel = Vec3(-traj.radius * omega * omega * std::cos(theta),
                 -traj.radius * omega * omega * std::sin(theta), 0.0);
  if (traj.kind == TrajectoryKind::CircleVaryingZ && traj.z_amplitude != 0.0) {
    const double wz = 2.0 * kPi / traj.z_period;
    p.position.z() += traj.z_amplitude * std::sin(wz * t);
    p.velocity.z() = traj.z_amplitude * wz * std::cos(wz * t);
    p.accel.z() = -traj.z_amplitude * wz * wz * std::sin(wz * t);
  }
  return p;
}

/// Closed-loop Catmull-Rom evaluation. Waypoint i owns the segment
/// [knot_times[i], knot_times[i+1]] toward waypoint i+1 (mod n).
inline PathPoint waypoint_point(const Trajectory& traj, double t) {
  const auto n = traj.waypoints.size();
  const double total = traj.knot_times.back();
  double s = std::fmod(t, total);
  if (s < 0.0) s += total;
  std::size_t seg = 0;
  while (seg + 1 < traj.knot_times.size() && traj.knot_times[seg + 1] <= s) ++seg;
  if (seg >= n) seg = n - 1;

  const double t0 = traj.knot_times[seg];
  const double dt = traj.knot_times[seg + 1] - t0;
  const double u = (s - t0) / dt;

  const Vec3& p1 = traj.waypoints[seg];
  const Vec3& p2 = traj.waypoints[(seg + 1) % n];
  const Vec3& p0 = traj.waypoints[(seg + n - 1) % n];
  const Vec3& p3 = traj.waypoints[(seg + 2) % n];
  // tension 0.5 keeps the loop taut so it rarely overshoots the waypoint hull
  const Vec3 m1 = 0.25 * (p2 - p0);
  const Vec3 m2 = 0.25 * (p3 - p1);

  const double u2 = u * u;
  const double u3 = u2 * u;
  PathPoint out;
  out.position = (2 * u3 - 3 * u2 + 1) * p1 + (u3 - 2 * u2 + u) * m1 + (-2 * u3 + 3 * u2) * p2 +
                 (u3 - u2) * m2;
  const Vec3 dpdu = (6 * u2 - 6 * u) * p1 + (3 * u2 - 4 * u + 1) * m1 + (-6 * u2 + 6 * u) * p2 +
                    (3 * u2 - 2 * u) * m2;
  const Vec3 d2pdu2 = (12 * u - 6) * p1 + (6 * u - 4) * m1 + (-12 * u + 6) * p2 + (6 * u - 2) * m2;
  out.velocity = dpdu / dt;
  out.accel = d2pdu2 / (dt * dt);
  return out;
}

}  // namespace detail

/// Pose on the analytic path at time t (0 <= t <= duration). Velocity is the
/// analytic derivative; attitude is derived from the path motion.
inline TagState trajectory_pose(const Trajectory& traj, double t) {
  if (t < 0.0 || t > traj.duration)
    throw std::invalid_argument("trajectory_pose: t out of [0, duration]");
  detail::PathPoint p;
  if (traj.kind == TrajectoryKind::GenericWaypoints) {
    if (traj.waypoints.size() < 4 || traj.knot_times.size() != traj.waypoints.size() + 1)
      throw ConfigError("waypoint trajectory not initialized");
    p = detail::waypoint_point(traj, t);
  } else {
    p = detail::circle_point(traj, t);
  }
  TagState state;
  state.position = p.position;
  state.velocity = p.velocity;
  state.attitude = detail::attitude_from_motion(p.velocity, p.accel, traj.phase);
  state.time = t;
  return state;
}

inline void validate_trajectory(const Trajectory& traj, const Box& arena, double margin = 0.2) {
  if (!(traj.speed > 0.0)) throw ConfigError("trajectory speed must be > 0");
  if (!(traj.duration > 0.0)) throw ConfigError("trajectory duration must be > 0");
  const int probes = 512;
  for (int i = 0; i <= probes; ++i) {
    const double t = traj.duration * static_cast<double>(i) / probes;
    const TagState s = trajectory_pose(traj, t);
    if (!arena.contains(s.position, margin))
      throw ConfigError("trajectory leaves the arena margin at t=" + format_double(t));
  }
}

/// Seeded random closed waypoint loop covering the arena interior, including
/// the band near the walls (roughly a third of the waypoints are pushed
/// toward a face so the flyable volume gets swept, not just the core).
/// Waypoint sets whose spline overshoots the margin are redrawn.
inline Trajectory make_waypoint_trajectory(const Box& arena, int n_waypoints, double speed,
                                           double duration, Rng& rng, double margin = 0.2) {
  if (n_waypoints < 4) throw ConfigError("waypoint trajectory needs at least 4 waypoints");
  const double slack = margin + 0.05;
  Trajectory traj;
  traj.kind = TrajectoryKind::GenericWaypoints;
  traj.speed = speed;
  traj.duration = duration;
  for (int attempt = 0; attempt < 64; ++attempt) {
    traj.waypoints.clear();
    traj.knot_times.clear();
    for (int i = 0; i < n_waypoints; ++i) {
      Vec3 w;
      for (int axis = 0; axis < 3; ++axis)
        w(axis) = rng.uniform(arena.min(axis) + slack, arena.max(axis) - slack);
      if (rng.bernoulli(0.35)) {
        const auto axis = static_cast<int>(rng.uniform_index(3));
        const double band = rng.uniform(0.0, 0.25);
        w(axis) = rng.bernoulli(0.5) ? arena.min(axis) + slack + band
                                     : arena.max(axis) - slack - band;
      }
      traj.waypoints.push_back(w);
    }
    traj.knot_times.push_back(0.0);
    for (int i = 0; i < n_waypoints; ++i) {
      const Vec3& a = traj.waypoints[i];
      const Vec3& b = traj.waypoints[(i + 1) % n_waypoints];
      const double seg = std::max((b - a).norm(), 0.05) / speed;
      traj.knot_times.push_back(traj.knot_times.back() + seg);
    }
    try {
      validate_trajectory(traj, arena, margin);
      return traj;
    } catch (const ConfigError&) {
      continue;  // redraw
    }
  }
  throw ConfigError("could not fit a waypoint trajectory inside the arena");
}

}  // namespace uwbloc
