// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uwbloc/types.hpp"

namespace uwbloc {

/// True or estimated tag pose. Attitude is (roll, pitch, yaw) in radians,
/// wrapped to (-pi, pi].
struct TagState {
  Vec3 position{Vec3::Zero()};
  Vec3 velocity{Vec3::Zero()};
  Vec3 attitude{Vec3::Zero()};
  double time = 0.0;
};

struct Anchor {
  int id = 0;
  Vec3 position{Vec3::Zero()};
};

/// Axis-aligned arena bounds.
struct Box {
  Vec3 min{Vec3::Zero()};
  Vec3 max{Vec3::Zero()};

  bool contains(const Vec3& p, double margin = 0.0) const {
    return (p.array() >= min.array() + margin).all() && (p.array() <= max.array() - margin).all();
  }
  Vec3 extent() const { return max - min; }
  double diagonal() const { return extent().norm(); }
};

/// Positions of the fixed UWB anchors plus the arena they enclose.
class AnchorConstellation {
 public:
  AnchorConstellation(std::vector<Anchor> anchors, Box bounds)
      : anchors_(std::move(anchors)), bounds_(bounds) {
    validate();
  }

  /// 7m x 8m x 3m arena with one anchor per vertex, ids 0..7. The id walk
  /// visits the vertices floor,floor,ceiling,ceiling,... so that the TDoA
  /// cycle (which pairs neighbouring ids) gets both vertical baselines for z
  /// observability and long same-layer diagonals.
  static AnchorConstellation default_arena() {
    const Box box{Vec3(0.0, 0.0, 0.0), Vec3(7.0, 8.0, 3.0)};
    const double x1 = box.max.x(), y1 = box.max.y(), z1 = box.max.z();
    std::vector<Anchor> anchors{{0, Vec3(0, 0, 0)},  {1, Vec3(x1, y1, 0)},
                                {2, Vec3(x1, 0, z1)}, {3, Vec3(0, y1, z1)},
                                {4, Vec3(x1, 0, 0)}, {5, Vec3(0, y1, 0)},
                                {6, Vec3(x1, y1, z1)}, {7, Vec3(0, 0, z1)}};
    return AnchorConstellation(std::move(anchors), box);
  }

  static AnchorConstellation from_json(const nlohmann::json& j);
  static AnchorConstellation from_json_file(const std::string& path);

  const std::vector<Anchor>& anchors() const { return anchors_; }
  const Box& bounds() const { return bounds_; }
  std::size_t size() const { return anchors_.size(); }

  const Anchor& anchor_at(std::size_t index) const { return anchors_.at(index); }

  const Vec3& position_of(int id) const {
    for (const auto& a : anchors_)
      if (a.id == id) return a.position;
    throw ConfigError("unknown anchor id " + std::to_string(id));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["anchors"] = nlohmann::json::array();
    for (const auto& a : anchors_) {
      j["anchors"].push_back({{"id", a.id}, {"pos", {a.position.x(), a.position.y(), a.position.z()}}});
    }
    j["bounds"] = {{bounds_.min.x(), bounds_.min.y(), bounds_.min.z()},
                   {bounds_.max.x(), bounds_.max.y(), bounds_.max.z()}};
    return j;
  }

 private:
  void validate() const {
    if (anchors_.size() < 2) throw ConfigError("constellation needs at least 2 anchors");
    for (std::size_t i = 0; i < anchors_.size(); ++i) {
      if (!is_finite(anchors_[i].position)) throw ConfigError("anchor position not finite");
      for (std::size_t k = i + 1; k < anchors_.size(); ++k) {
        if (anchors_[i].id == anchors_[k].id)
          throw ConfigError("duplicate anchor id " + std::to_string(anchors_[i].id));
        if ((anchors_[i].position - anchors_[k].position).norm() <= 0.01)
          throw ConfigError("anchors " + std::to_string(anchors_[i].id) + " and " +
                            std::to_string(anchors_[k].id) + " are closer than 1 cm");
      }
    }
    if (!((bounds_.min.array() < bounds_.max.array()).all()))
      throw ConfigError("arena bounds must satisfy min < max per axis");
  }

  std::vector<Anchor> anchors_;
  Box bounds_;
};

inline AnchorConstellation AnchorConstellation::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("anchors") || !j.contains("bounds"))
    throw IoError("constellation json needs 'anchors' and 'bounds'");
  std::vector<Anchor> anchors;
  for (const auto& a : j.at("anchors")) {
    Anchor anchor;
    anchor.id = a.at("id").get<int>();
    const auto& pos = a.at("pos");
    if (!pos.is_array() || pos.size() != 3) throw IoError("anchor 'pos' must be a 3-array");
    anchor.position = Vec3(pos[0].get<double>(), pos[1].get<double>(), pos[2].get<double>());
    anchors.push_back(anchor);
  }
  const auto& b = j.at("bounds");
  if (!b.is_array() || b.size() != 2 || b[0].size() != 3 || b[1].size() != 3)
    throw IoError("'bounds' must be [[xmin,ymin,zmin],[xmax,ymax,zmax]]");
  Box box{Vec3(b[0][0].get<double>(), b[0][1].get<double>(), b[0][2].get<double>()),
          Vec3(b[1][0].get<double>(), b[1][1].get<double>(), b[1][2].get<double>())};
  return AnchorConstellation(std::move(anchors), box);
}

inline AnchorConstellation AnchorConstellation::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open constellation file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed constellation json (" + path + "): " + e.what());
  }
  return from_json(j);
}

/// Input to the bias estimator. TWR mode packs [dp_i; attitude] (length 6),
/// TDoA mode packs [dp_i; dp_j; attitude] (length 9).
struct FeatureVector {
  Mode mode = Mode::Twr;
  std::array<double, 9> data{};

  int length() const { return mode == Mode::Twr ? 6 : 9; }

  Eigen::Map<const Eigen::VectorXd> view() const {
    return Eigen::Map<const Eigen::VectorXd>(data.data(), length());
  }

  bool finite() const {
    for (int i = 0; i < length(); ++i)
      if (!std::isfinite(data[i])) return false;
    return true;
  }

  friend bool operator==(const FeatureVector& a, const FeatureVector& b) {
    if (a.mode != b.mode) return false;
    for (int i = 0; i < a.length(); ++i)
      if (a.data[i] != b.data[i]) return false;
    return true;
  }
};

/// Anchor position relative to the tag, dp = p_anchor - p_tag.
inline Vec3 relative_position(const TagState& tag, const Vec3& anchor_position) {
  return anchor_position - tag.position;
}

/// Bearing of dp in the tag's yaw-rotated frame (alpha, in (-pi, pi]) and
/// elevation above the horizontal plane (beta, in [-pi/2, pi/2]). Roll and
/// pitch do not enter the bearing. Vertical dp gets alpha = 0 by convention.
inline std::pair<double, double> azimuth_elevation(const Vec3& delta_p, const Vec3& attitude) {
  const double norm = delta_p.norm();
  if (norm <= 0.0) throw DegenerateGeometryError("azimuth_elevation: zero-length delta_p");
  const double yaw = attitude.z();
  const double bx = std::cos(yaw) * delta_p.x() + std::sin(yaw) * delta_p.y();
  const double by = -std::sin(yaw) * delta_p.x() + std::cos(yaw) * delta_p.y();
  double alpha = 0.0;
  if (bx != 0.0 || by != 0.0) alpha = wrap_angle(std::atan2(by, bx));
  const double beta = std::asin(std::clamp(delta_p.z() / norm, -1.0, 1.0));
  return {alpha, beta};
}

inline FeatureVector twr_feature(const TagState& tag, const Vec3& anchor_position) {
  FeatureVector f;
  f.mode = Mode::Twr;
  const Vec3 dp = relative_position(tag, anchor_position);
  f.data = {dp.x(), dp.y(), dp.z(), tag.attitude.x(), tag.attitude.y(), tag.attitude.z(), 0.0, 0.0, 0.0};
  return f;
}

inline FeatureVector tdoa_feature(const TagState& tag, const Vec3& anchor_i, const Vec3& anchor_j) {
  FeatureVector f;
  f.mode = Mode::Tdoa;
  const Vec3 dpi = relative_position(tag, anchor_i);
  const Vec3 dpj = relative_position(tag, anchor_j);
  f.data = {dpi.x(), dpi.y(), dpi.z(), dpj.x(), dpj.y(), dpj.z(),
            tag.attitude.x(), tag.attitude.y(), tag.attitude.z()};
  return f;
}

}  // namespace uwbloc
