#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace slotdrive::geo {

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::sqrt(x * x + y * y); }
  Vec2 unit() const {
    const double n = norm();
    return n > 1e-12 ? Vec2{x / n, y / n} : Vec2{1.0, 0.0};
  }
  Vec2 perp() const { return {-y, x}; }  // 90° CCW
  Vec2 rotated(double a) const {
    const double c = std::cos(a), s = std::sin(a);
    return {c * x - s * y, s * x + c * y};
  }
};

inline double wrap_angle(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a < -M_PI) a += 2.0 * M_PI;
  return a;
}

// Pose in the world frame; yaw is CCW from +x.
struct Pose2 {
  Vec2 p;
  double yaw = 0.0;

  Vec2 forward() const { return {std::cos(yaw), std::sin(yaw)}; }
  Vec2 right() const { return {std::sin(yaw), -std::cos(yaw)}; }
  // World point -> this pose's local frame (x right, y forward).
  Vec2 to_local(Vec2 w) const {
    const Vec2 d = w - p;
    return {d.dot(right()), d.dot(forward())};
  }
  Vec2 to_world(Vec2 l) const { return p + right() * l.x + forward() * l.y; }
};

// Oriented rectangle (vehicle footprint): center pose, full length along the
// heading, full width across it.
struct Obb {
  Pose2 pose;
  double length = 0.0, width = 0.0;

  std::vector<Vec2> corners() const {
    const Vec2 f = pose.forward() * (length * 0.5);
    const Vec2 r = pose.right() * (width * 0.5);
    return {pose.p + f + r, pose.p + f - r, pose.p - f - r, pose.p - f + r};
  }
  bool contains(Vec2 w) const {
    const Vec2 l = pose.to_local(w);
    return std::abs(l.x) <= width * 0.5 && std::abs(l.y) <= length * 0.5;
  }
};

bool obb_overlap(const Obb& a, const Obb& b);

// Piecewise-linear path with cached cumulative arclength.
struct Polyline {
  std::vector<Vec2> pts;
  std::vector<double> cum;  // cum[i] = arclength at pts[i]

  void rebuild();
  double length() const { return cum.empty() ? 0.0 : cum.back(); }
  // Point / tangent yaw at arclength s (clamped to [0, length]).
  Vec2 point_at(double s) const;
  double yaw_at(double s) const;
  // Arclength of the closest point to w, plus its lateral distance.
  double project(Vec2 w, double* lateral = nullptr) const;
  // Signed curvature magnitude estimate at arclength s over a lookahead span.
  double curvature_at(double s, double span = 4.0) const;
};

// Distance from point to segment [a,b].
double point_segment_dist(Vec2 p, Vec2 a, Vec2 b);

}  // namespace slotdrive::geo
