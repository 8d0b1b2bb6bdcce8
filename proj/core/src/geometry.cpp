#include "slotdrive/geometry.hpp"

#include <algorithm>

namespace slotdrive::geo {

bool obb_overlap(const Obb& a, const Obb& b) {
  // Separating-axis test over the 4 face normals of the two rectangles.
  const auto ca = a.corners();
  const auto cb = b.corners();
  const Vec2 axes[4] = {a.pose.forward(), a.pose.right(), b.pose.forward(),
                        b.pose.right()};
  for (const Vec2& ax : axes) {
    double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
    for (const Vec2& c : ca) {
      const double v = c.dot(ax);
      amin = std::min(amin, v);
      amax = std::max(amax, v);
    }
    for (const Vec2& c : cb) {
      const double v = c.dot(ax);
      bmin = std::min(bmin, v);
      bmax = std::max(bmax, v);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

void Polyline::rebuild() {
  cum.resize(pts.size());
  if (pts.empty()) return;
  cum[0] = 0.0;
  for (size_t i = 1; i < pts.size(); ++i)
    cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
}

Vec2 Polyline::point_at(double s) const {
  if (pts.empty()) return {};
  if (s <= 0.0) return pts.front();
  if (s >= length()) return pts.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), s);
  const size_t i = static_cast<size_t>(it - cum.begin());
  const double seg = cum[i] - cum[i - 1];
  const double t = seg > 1e-12 ? (s - cum[i - 1]) / seg : 0.0;
  return pts[i - 1] + (pts[i] - pts[i - 1]) * t;
}

double Polyline::yaw_at(double s) const {
  if (pts.size() < 2) return 0.0;
  s = std::clamp(s, 0.0, length());
  size_t i = static_cast<size_t>(std::upper_bound(cum.begin(), cum.end(), s) -
                                 cum.begin());
  i = std::min(std::max<size_t>(i, 1), pts.size() - 1);
  const Vec2 d = pts[i] - pts[i - 1];
  return std::atan2(d.y, d.x);
}

double Polyline::project(Vec2 w, double* lateral) const {
  double best_d2 = 1e300, best_s = 0.0, best_side = 0.0;
  for (size_t i = 1; i < pts.size(); ++i) {
    const Vec2 a = pts[i - 1], b = pts[i];
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    const double t = len2 > 1e-12 ? std::clamp((w - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    const Vec2 q = a + ab * t;
    const double d2 = (w - q).dot(w - q);
    if (d2 < best_d2) {
      best_d2 = d2;
      best_s = cum[i - 1] + std::sqrt(len2) * t;
      best_side = ab.cross(w - q) >= 0.0 ? 1.0 : -1.0;
    }
  }
  if (lateral) *lateral = best_side * std::sqrt(best_d2);
  return best_s;
}

double Polyline::curvature_at(double s, double span) const {
  const double a = yaw_at(std::max(0.0, s - span * 0.5));
  const double b = yaw_at(std::min(length(), s + span * 0.5));
  return std::abs(wrap_angle(b - a)) / std::max(span, 1e-6);
}

double point_segment_dist(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  const double t = len2 > 1e-12 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  const Vec2 q = a + ab * t;
  return (p - q).norm();
}

}  // namespace slotdrive::geo
