// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <charconv>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace uwbloc {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// UWB ranging flavor carried by measurements, features and models.
enum class Mode { Twr, Tdoa };

inline const char* to_string(Mode mode) { return mode == Mode::Twr ? "twr" : "tdoa"; }

inline std::optional<Mode> parse_mode(std::string_view s) {
  if (s == "twr" || s == "TWR") return Mode::Twr;
  if (s == "tdoa" || s == "TDoA" || s == "TDOA") return Mode::Tdoa;
  return std::nullopt;
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tag coincident with an anchor, zero-length bearing vector, etc.
class DegenerateGeometryError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration (bad values, unknown keys, mode mismatch).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File I/O and file format failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training aborted (too few samples, non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

constexpr double kPi = 3.14159265358979323846;

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);  // (-pi, pi], except -pi maps to itself
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

inline Vec3 wrap_attitude(const Vec3& att) {
  return {wrap_angle(att.x()), wrap_angle(att.y()), wrap_angle(att.z())};
}

inline bool is_finite(const Vec3& v) {
  return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

/// Shortest decimal representation that round-trips the exact double.
/// Used for every number we write to CSV so that identical runs produce
/// byte-identical files.
inline std::string format_double(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double out = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("not a number: '" + std::string(s) + "'");
  }
  return out;
}

}  // namespace uwbloc
