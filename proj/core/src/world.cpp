#include "slotdrive/world.hpp"

#include <algorithm>

#include "slotdrive/common.hpp"

namespace slotdrive::world {

using geo::Polyline;
using geo::Pose2;
using geo::Vec2;
using geo::wrap_angle;

namespace {

constexpr double kMaxWheelAngle = 0.6;  // rad
constexpr double kStopLineSetback = 6.0;
constexpr double kCrossHalfLen = 28.0;

void append_straight(std::vector<Vec2>& pts, double& yaw, double len) {
  const Vec2 dir{std::cos(yaw), std::sin(yaw)};
  const Vec2 start = pts.back();
  const int n = std::max(2, static_cast<int>(len / 0.5));
  for (int i = 1; i <= n; ++i) pts.push_back(start + dir * (len * i / n));
}

void append_arc(std::vector<Vec2>& pts, double& yaw, double radius, double angle) {
  // angle > 0 turns left (CCW).
  const Vec2 start = pts.back();
  const double side = angle >= 0 ? 1.0 : -1.0;
  const Vec2 center = start + Vec2{std::cos(yaw + side * M_PI_2),
                                   std::sin(yaw + side * M_PI_2)} * radius;
  const double a0 = std::atan2(start.y - center.y, start.x - center.x);
  const int n = std::max(4, static_cast<int>(std::abs(angle) * radius / 0.5));
  for (int i = 1; i <= n; ++i) {
    const double a = a0 + angle * i / n;
    pts.push_back(center + Vec2{std::cos(a), std::sin(a)} * radius);
  }
  yaw = wrap_angle(yaw + angle);
}

Polyline offset_left(const Polyline& base, double off) {
  Polyline out;
  out.pts.reserve(base.pts.size());
  for (size_t i = 0; i < base.pts.size(); ++i) {
    const size_t a = i > 0 ? i - 1 : 0;
    const size_t b = i + 1 < base.pts.size() ? i + 1 : i;
    const Vec2 tan = (base.pts[b] - base.pts[a]).unit();
    out.pts.push_back(base.pts[i] + tan.perp() * off);
  }
  out.rebuild();
  return out;
}

// Closest-point arclength restricted to a window around the current progress,
// so self-approaching routes cannot snap progress to a far-away leg.
double local_progress(const Polyline& line, Vec2 p, double around,
                      double back = 4.0, double fwd = 10.0, double* lat = nullptr) {
  double best_d2 = 1e300, best_s = around;
  for (size_t i = 1; i < line.pts.size(); ++i) {
    if (line.cum[i] < around - back || line.cum[i - 1] > around + fwd) continue;
    const Vec2 a = line.pts[i - 1], b = line.pts[i];
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    const double t = len2 > 1e-12 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    const Vec2 q = a + ab * t;
    const double d2 = (p - q).dot(p - q);
    if (d2 < best_d2) {
      best_d2 = d2;
      best_s = line.cum[i - 1] + std::sqrt(len2) * t;
    }
  }
  if (lat) *lat = std::sqrt(best_d2);
  return best_s;
}

bool lane_red(const WorldState& ws, const Lane& lane, int light_idx, double at_t) {
  const bool ego_red = ws.lights[static_cast<size_t>(light_idx)].ego_red(at_t);
  return lane.ego_phase ? ego_red : !ego_red;
}

// Red now, or red at any sampled instant until the vehicle would reach the
// stop line. Lights flip instantly, so drivers brake for an imminent flip
// instead of getting trapped inside the junction.
bool lane_red_on_arrival(const WorldState& ws, const Lane& lane, int light_idx,
                         double dist, double v) {
  const double horizon = dist / std::max(v, 0.8) + 0.8;
  for (double dtau = 0.0; dtau <= horizon; dtau += 0.25)
    if (lane_red(ws, lane, light_idx, ws.t + dtau)) return true;
  return false;
}

// Target speed for a scripted vehicle (or the expert) from cruise, curvature,
// stop lines, and the nearest leader on the same corridor.
double scripted_target_speed(const WorldState& ws, const Lane& lane, double s,
                             double v_cruise, double self_len, bool is_ego) {
  double vt = v_cruise;
  const double kappa = lane.line.curvature_at(s + 3.0);
  vt = std::min(vt, std::sqrt(2.2 / std::max(kappa, 1e-4)));

  for (const auto& [li, stop_s] : lane.stops) {
    if (s >= stop_s) continue;
    const double d = stop_s - s;
    if (d >= 14.0) continue;
    if (!lane_red_on_arrival(ws, lane, li, d, vt)) continue;
    vt = std::min(vt, std::max(0.0, 0.65 * (d - 1.2)));
  }

  // Leader: nearest active vehicle ahead on this lane.
  for (const auto& veh : ws.vehicles) {
    if (!veh.active) continue;
    double s_other, len_other;
    if (&ws.lanes[static_cast<size_t>(veh.lane)] == &lane) {
      s_other = veh.s;
      len_other = veh.length;
    } else {
      continue;
    }
    const double gap = (s_other - s) - 0.5 * (len_other + self_len);
    if (s_other > s && gap < 22.0)
      vt = std::min(vt, std::max(0.0, 0.8 * (gap - 2.2)));
  }
  // Vehicles on other lanes that sit on this corridor (e.g. crossing traffic
  // mid-junction) and the ego itself.
  const auto corridor_guard = [&](Vec2 pos, double other_len) {
    double lat = 0.0;
    const double s_other = local_progress(lane.line, pos, s + 8.0, 10.0, 16.0, &lat);
    if (lat > 1.7 || s_other <= s) return;
    const double gap = (s_other - s) - 0.5 * (other_len + self_len);
    if (gap < 18.0) vt = std::min(vt, std::max(0.0, 0.8 * (gap - 2.2)));
  };
  if (!is_ego) corridor_guard(ws.ego.p, ws.ego_len);
  for (const auto& veh : ws.vehicles) {
    if (!veh.active || &ws.lanes[static_cast<size_t>(veh.lane)] == &lane) continue;
    if ((veh.pose.p - lane.line.point_at(std::min(s + 10.0, lane.line.length())))
            .norm() > 24.0)
      continue;
    corridor_guard(veh.pose.p, veh.length);
  }
  return vt;
}

}  // namespace

WorldState make_world(const WorldConfig& cfg) {
  WorldState ws;
  ws.cfg = cfg;
  Rng route_rng(cfg.seed, "world/route");
  Rng traffic_rng(cfg.seed, "world/traffic");
  Rng light_rng(cfg.seed, "world/lights");

  // Ego route centerline.
  std::vector<Vec2> pts{{0.0, 0.0}};
  double yaw = M_PI_2;
  std::vector<double> joint_s;
  const int n_seg = cfg.min_segments +
                    static_cast<int>(route_rng.below(cfg.max_segments - cfg.min_segments + 1));
  for (int i = 0; i < n_seg; ++i) {
    if (i == 0 || route_rng.uniform() < 0.45) {
      append_straight(pts, yaw, route_rng.uniform(i == 0 ? 24.0 : 18.0, 36.0));
    } else {
      const double r = route_rng.uniform(16.0, 30.0);
      const double a = route_rng.uniform(0.5, 1.2) * (route_rng.bernoulli(0.5) ? 1 : -1);
      append_arc(pts, yaw, r, a);
    }
    if (i + 1 < n_seg) {
      Polyline tmp;
      tmp.pts = pts;
      tmp.rebuild();
      joint_s.push_back(tmp.length());
    }
  }

  Lane ego_lane;
  ego_lane.line.pts = std::move(pts);
  ego_lane.line.rebuild();
  ego_lane.width = cfg.lane_width;
  ws.lanes.push_back(std::move(ego_lane));

  Lane left_lane;
  left_lane.line = offset_left(ws.lanes[0].line, cfg.lane_width);
  left_lane.width = cfg.lane_width;
  ws.lanes.push_back(std::move(left_lane));

  // Intersections with traffic lights at interior joints.
  double last_x = -1e9;
  for (double sj : joint_s) {
    if (!light_rng.bernoulli(cfg.intersection_prob)) continue;
    if (sj - last_x < 30.0 || sj < 18.0 || sj > ws.lanes[0].line.length() - 12.0)
      continue;
    last_x = sj;
    const Vec2 q = ws.lanes[0].line.point_at(sj);
    const double ryaw = ws.lanes[0].line.yaw_at(sj);
    const Vec2 f{std::cos(ryaw), std::sin(ryaw)};
    const Vec2 c = f.perp();  // cross-road direction (left of route)

    TrafficLight tl;
    tl.center = q;
    tl.route_s = sj;
    tl.stop_s = sj - kStopLineSetback;
    tl.period = 16.0;
    tl.red_len = light_rng.uniform(5.0, 7.0);
    tl.red_from = light_rng.uniform(0.0, tl.period);
    const int li = static_cast<int>(ws.lights.size());
    ws.lights.push_back(tl);
    ws.light_crossed.push_back(0);

    ws.lanes[0].stops.emplace_back(li, tl.stop_s);
    {
      // Matching stop line on the left lane (different arclength after offset).
      const Vec2 stop_pt = ws.lanes[0].line.point_at(tl.stop_s);
      const double s_left = ws.lanes[1].line.project(stop_pt);
      ws.lanes[1].stops.emplace_back(li, s_left);
    }

    // Two opposite-direction crossing lanes, offset so they do not overlap.
    for (int dir = 0; dir < 2; ++dir) {
      Lane cl;
      cl.width = cfg.lane_width;
      cl.ego_phase = false;
      const Vec2 off = f * (dir == 0 ? -1.75 : 1.75);
      const Vec2 d = dir == 0 ? c : c * -1.0;
      const Vec2 a = q + off - d * kCrossHalfLen;
      const int n = static_cast<int>(2 * kCrossHalfLen / 0.5);
      for (int i = 0; i <= n; ++i)
        cl.line.pts.push_back(a + d * (2 * kCrossHalfLen * i / n));
      cl.line.rebuild();
      cl.stops.emplace_back(li, kCrossHalfLen - 6.5);
      ws.lanes.push_back(std::move(cl));
    }
  }

  // Traffic.
  const int lo = std::max(1, cfg.max_vehicles / 2);
  const int n_veh =
      cfg.max_vehicles <= 0
          ? 0
          : lo + static_cast<int>(traffic_rng.below(cfg.max_vehicles - lo + 1));
  int next_id = WorldState::kEgoId + 1;
  for (int i = 0; i < n_veh; ++i) {
    Vehicle v;
    v.id = next_id;
    const double pick = traffic_rng.uniform();
    size_t lane_idx;
    if (ws.lanes.size() > 2 && pick < 0.38) {
      lane_idx = 2 + static_cast<size_t>(traffic_rng.below(
                         static_cast<int64_t>(ws.lanes.size()) - 2));
    } else {
      lane_idx = pick < 0.70 ? 1 : 0;
    }
    const Lane& lane = ws.lanes[lane_idx];
    const double margin = 6.0;
    double s = 0.0;
    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
      const double frm = lane_idx == 0 ? 12.0 : margin;
      const double to = lane.line.length() - margin;
      if (to <= frm) break;
      s = traffic_rng.uniform(frm, to);
      placed = true;
      for (const auto& other : ws.vehicles)
        if (other.lane == static_cast<int>(lane_idx) &&
            std::abs(other.s - s) < cfg.spawn_gap)
          placed = false;
    }
    if (!placed) continue;
    v.lane = static_cast<int>(lane_idx);
    v.s = s;
    v.cruise = traffic_rng.uniform(cfg.cruise_lo, cfg.cruise_hi);
    v.v = v.cruise * 0.8;
    if (traffic_rng.bernoulli(cfg.bike_prob)) {
      v.length = 2.0;
      v.width = 0.9;
    } else {
      v.length = traffic_rng.uniform(4.2, 4.8);
      v.width = traffic_rng.uniform(1.8, 2.1);
    }
    v.pose = {lane.line.point_at(v.s), lane.line.yaw_at(v.s)};
    ws.vehicles.push_back(v);
    ++next_id;
  }

  ws.ego = {ws.lanes[0].line.point_at(1.0), ws.lanes[0].line.yaw_at(1.0)};
  ws.ego_v = 2.0;
  ws.progress_s = 1.0;
  return ws;
}

std::vector<AgentView> WorldState::vehicle_records() const {
  std::vector<AgentView> out;
  out.reserve(vehicles.size() + 1);
  out.push_back({kEgoId, ego, ego_len, ego_wid, ego_v});
  for (const auto& v : vehicles)
    if (v.active) out.push_back({v.id, v.pose, v.length, v.width, v.v});
  return out;
}

void step_world(WorldState& ws, const Control& u) {
  const double dt = ws.cfg.dt / ws.cfg.physics_substeps;
  const double steer = std::clamp(u.steer, -1.0, 1.0);
  const double thr = std::clamp(u.throttle, 0.0, 1.0);
  const double brk = std::clamp(u.brake, 0.0, 1.0);

  for (int sub = 0; sub < ws.cfg.physics_substeps; ++sub) {
    // Ego kinematic bicycle. steer < 0 turns left (CCW, yaw increases).
    const double a = 3.2 * thr - 7.0 * brk - 0.08 * ws.ego_v;
    ws.ego.p = ws.ego.p + ws.ego.forward() * (ws.ego_v * dt);
    ws.ego.yaw = wrap_angle(
        ws.ego.yaw + ws.ego_v / ws.wheelbase * std::tan(-steer * kMaxWheelAngle) * dt);
    ws.ego_v = std::clamp(ws.ego_v + a * dt, 0.0, 8.5);

    for (auto& veh : ws.vehicles) {
      if (!veh.active) continue;
      const Lane& lane = ws.lanes[static_cast<size_t>(veh.lane)];
      const double vt =
          scripted_target_speed(ws, lane, veh.s, veh.cruise, veh.length, false);
      const double acc = std::clamp(1.4 * (vt - veh.v), -6.5, 2.5);
      veh.v = std::max(0.0, veh.v + acc * dt);
      veh.s += veh.v * dt;
      if (veh.s > lane.line.length() - 0.5) {
        veh.active = false;
        continue;
      }
      veh.pose = {lane.line.point_at(veh.s), lane.line.yaw_at(veh.s)};
    }
    ws.t += dt;

    // Route progress (monotone), tracked per substep so stop-line crossings
    // are timed against the light state at the moment of crossing.
    const double before = ws.progress_s;
    double lat = 0.0;
    const double s_now =
        local_progress(ws.lanes[0].line, ws.ego.p, ws.progress_s, 4.0, 10.0, &lat);
    if (s_now > ws.progress_s && lat < 5.0) ws.progress_s = s_now;

    // Red-light infraction: ego crossed a stop line while its light was red.
    for (const auto& [li, stop_s] : ws.lanes[0].stops) {
      auto& latched = ws.light_crossed[static_cast<size_t>(li)];
      if (latched) continue;
      if (before < stop_s && ws.progress_s >= stop_s) {
        latched = 1;
        if (ws.lights[static_cast<size_t>(li)].ego_red(ws.t)) ++ws.red_crossings;
      }
    }
  }

  // Collision (edge-triggered).
  bool hit = false;
  const geo::Obb ebox = ws.ego_box();
  for (const auto& veh : ws.vehicles) {
    if (!veh.active) continue;
    if ((veh.pose.p - ws.ego.p).norm() > 8.0) continue;
    if (geo::obb_overlap(ebox, {veh.pose, veh.length, veh.width})) {
      hit = true;
      break;
    }
  }
  if (!hit)
    for (const auto& ob : ws.obstacles)
      if (geo::obb_overlap(ebox, ob.box)) {
        hit = true;
        break;
      }
  if (hit && !ws.in_collision) ++ws.collisions;
  ws.in_collision = hit;

  ++ws.step;
}

Control expert_policy(const WorldState& ws) {
  const Polyline& route = ws.lanes[0].line;
  const double s = ws.progress_s;

  // Pure pursuit on a speed-dependent lookahead.
  const double ld = std::clamp(1.0 + 1.1 * ws.ego_v, 3.0, 8.0);
  const Vec2 aim = route.point_at(std::min(s + ld, route.length()));
  const Vec2 local = ws.ego.to_local(aim);
  const double alpha = std::atan2(local.x, std::max(local.y, 0.2));
  const double delta = std::atan2(2.0 * ws.wheelbase * std::sin(alpha), ld);
  // Positive alpha = aim to the right = positive wheel angle = steer > 0
  // in the control convention (left is negative).
  const double steer = std::clamp(delta / kMaxWheelAngle, -1.0, 1.0);

  double vt = scripted_target_speed(ws, ws.lanes[0], s, ws.cfg.ego_cruise,
                                    ws.ego_len, true);
  if (s > route.length() - 2.0) vt = 0.0;

  const double a = 1.2 * (vt - ws.ego_v);
  Control u;
  u.steer = steer;
  if (vt < 0.15 && ws.ego_v < 0.4) {
    u.brake = 1.0;
  } else if (a >= 0.0) {
    u.throttle = std::clamp(a / 3.2, 0.0, 1.0);
  } else if (a < -0.3) {
    u.brake = std::clamp(-a / 7.0, 0.0, 1.0);
  }
  return u;
}

bool red_light_ahead(const WorldState& ws, double within) {
  for (const auto& [li, stop_s] : ws.lanes[0].stops) {
    if (ws.progress_s >= stop_s) continue;
    if (stop_s - ws.progress_s > within) continue;
    if (ws.lights[static_cast<size_t>(li)].ego_red(ws.t)) return true;
  }
  return false;
}

geo::Vec2 target_point(const WorldState& ws, double ahead) {
  const Polyline& route = ws.lanes[0].line;
  const Vec2 w = route.point_at(std::min(ws.progress_s + ahead, route.length()));
  return ws.ego.to_local(w);
}

std::array<double, 6> route_vector(const WorldState& ws, int which) {
  SD_CHECK(which == 0 || which == 1, IndexOutOfRange, "route vector index");
  const Polyline& route = ws.lanes[0].line;
  const double s0 = std::min(ws.progress_s + 10.0 * which, route.length());
  const double s1 = std::min(s0 + 10.0, route.length());
  const double seg_len = s1 - s0;
  if (seg_len <= 1e-9) return {0, 0, 0, 0, 0, 0};
  const Vec2 mid = route.point_at(0.5 * (s0 + s1));
  const Vec2 local = ws.ego.to_local(mid);
  const double rel_yaw = wrap_angle(route.yaw_at(0.5 * (s0 + s1)) - ws.ego.yaw);
  return {local.x, local.y, rel_yaw, 0.0, ws.cfg.lane_width, seg_len};
}

int expert_episode_steps(const WorldConfig& cfg, int max_steps) {
  WorldState ws = make_world(cfg);
  for (int i = 0; i < max_steps; ++i) {
    step_world(ws, expert_policy(ws));
    if (ws.progress_frac() >= 0.99) return ws.step;
  }
  return max_steps;
}

}  // namespace slotdrive::world
