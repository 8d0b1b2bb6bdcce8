#pragma once

// Synthetic driving world: a per-episode road network (two same-direction
// lanes plus optional crossings with traffic lights), scripted lane-following
// traffic, and a kinematic-bicycle ego. Control runs at dt=0.5 s (2 fps data
// rate) with finer physics substeps.

#include <array>
#include <cstdint>
#include <vector>

#include "slotdrive/geometry.hpp"
#include "slotdrive/rng.hpp"

namespace slotdrive::world {

struct WorldConfig {
  uint64_t seed = 1;
  int max_vehicles = 8;        // traffic vehicles spawned at t=0
  double bike_prob = 0.35;     // chance a vehicle is bike-sized (2.0 x 0.9 m)
  int min_segments = 3, max_segments = 5;
  double intersection_prob = 0.55;  // chance of a crossing at an interior joint
  double spawn_gap = 9.0;      // min spacing between spawns on a lane, m
  double cruise_lo = 2.5, cruise_hi = 5.5;
  double ego_cruise = 4.8;
  double dt = 0.5;
  int physics_substeps = 5;
  double lane_width = 3.5;
};

struct Control {
  double steer = 0.0;     // [-1,1], negative steers left
  double throttle = 0.0;  // [0,1]
  double brake = 0.0;     // [0,1]
};

struct Vehicle {
  int id = 0;
  double s = 0.0;       // arclength along its lane
  double v = 0.0;
  double cruise = 0.0;
  double length = 4.6, width = 2.0;
  int lane = 0;
  bool active = true;
  geo::Pose2 pose;      // derived from (lane, s) each step
};

struct TrafficLight {
  geo::Vec2 center;     // crossing center on the ego route
  double route_s = 0.0;  // arclength of the crossing along the ego route
  double stop_s = 0.0;   // ego-lane stop line arclength
  double period = 16.0;
  double red_from = 0.0, red_len = 6.0;  // ego-phase red window within period

  bool ego_red(double t) const {
    const double ph = std::fmod(t + period - red_from, period);
    return ph < red_len;
  }
};

struct Lane {
  geo::Polyline line;
  double width = 3.5;
  // Stop lines on this lane: (light index, arclength of the line).
  std::vector<std::pair<int, double>> stops;
  bool ego_phase = true;  // true: goes when the ego light is green
};

struct Obstacle {
  geo::Obb box;
};

// Uniform per-agent view (ego plus scripted traffic) for rendering and logs.
struct AgentView {
  int id = 0;
  geo::Pose2 pose;
  double length = 4.6, width = 2.0;
  double v = 0.0;
};

struct WorldState {
  static constexpr int kEgoId = 1;  // scripted traffic ids start at 2

  WorldConfig cfg;
  std::vector<Lane> lanes;  // lane 0 is the ego route lane
  std::vector<TrafficLight> lights;
  std::vector<Vehicle> vehicles;
  std::vector<Obstacle> obstacles;

  geo::Pose2 ego;
  double ego_v = 0.0;
  double ego_len = 4.6, ego_wid = 2.0;
  double wheelbase = 2.5;

  double t = 0.0;
  int step = 0;
  double progress_s = 0.0;  // running max arclength along the route

  int collisions = 0;
  int red_crossings = 0;
  bool in_collision = false;              // for edge-triggered counting
  std::vector<uint8_t> light_crossed;     // per light, red-crossing latched

  const geo::Polyline& route() const { return lanes[0].line; }
  geo::Obb ego_box() const { return {ego, ego_len, ego_wid}; }
  // All vehicles on stage, ego first; exactly one entry has id == kEgoId.
  std::vector<AgentView> vehicle_records() const;
  double route_length() const { return lanes[0].line.length(); }
  double progress_frac() const {
    return route_length() > 0 ? progress_s / route_length() : 0.0;
  }
};

// Builds a seeded world: route, lanes, lights, traffic. Same seed, same world.
WorldState make_world(const WorldConfig& cfg);

// Advances one control period (cfg.dt) with physics substeps; updates traffic,
// lights, collision and red-light counters, and route progress.
void step_world(WorldState& ws, const Control& u);

// Privileged scripted driver: pure-pursuit steering plus a speed profile that
// respects curvature, leading vehicles, and red lights.
Control expert_policy(const WorldState& ws);

// True when a red light governs the ego lane within `within` meters ahead.
bool red_light_ahead(const WorldState& ws, double within = 18.0);

// Route point `ahead` meters in front of current progress, in the ego frame.
geo::Vec2 target_point(const WorldState& ws, double ahead = 12.0);

// Route descriptor `which` in {0,1}: segment [10*which, 10*(which+1)] m ahead,
// encoded as (x, y, yaw, 0, lane_width, seg_length) in the ego frame.
std::array<double, 6> route_vector(const WorldState& ws, int which);

// Expert steps to completion (or max_steps); used for the 4x timeout rule.
int expert_episode_steps(const WorldConfig& cfg, int max_steps = 400);

}  // namespace slotdrive::world
