#pragma once

// Closed-loop driving: waypoint-following control, anti-deadlock creeping,
// episode rollouts for arbitrary policies and trained agents, driving-score
// aggregation, and the scene-forecast evaluation harness.

#include <functional>
#include <string>
#include <vector>

#include "slotdrive/pipeline.hpp"
#include "slotdrive/world.hpp"

namespace slotdrive::drive {

// ---------------------------------------------------------------------------
// control
// ---------------------------------------------------------------------------

struct ControllerConfig {
  double dt = 0.5;               // control period the waypoints are spaced at
  double wheelbase = 2.5;        // pure-pursuit geometry, m
  double max_wheel_angle = 0.6;  // steering normalization, rad
  double speed_gain = 1.2;       // accel demand per m/s of speed error
  double throttle_accel = 3.2;   // full-throttle acceleration, m/s^2
  double brake_decel = 7.0;      // full-brake deceleration, m/s^2
  double brake_deadband = 0.3;   // small decel demands coast instead
  double stop_speed = 0.5;       // desired speed below this = stopping intent
  // Anti-deadlock creeping.
  int stuck_steps = 40;       // static steps before creeping kicks in
  double stuck_speed = 0.1;   // "static" speed threshold, m/s
  int creep_steps = 15;       // forced-throttle duration
  double creep_throttle = 0.3;
};

// Maps predicted waypoints (2W ego-frame floats, x right / y forward) to a
// control: heading P-controller towards the mean of the first two waypoints,
// speed target from the spacing of consecutive waypoints, full brake when the
// prediction collapses to a stop.
world::Control waypoints_to_control(const std::vector<double>& wp, double cur_v,
                                    const ControllerConfig& cfg);

// Creeping: after `stuck_steps` near-zero-speed steps without a red light,
// force `creep_throttle` for `creep_steps` steps to break deadlocks.
struct CreepState {
  int stuck = 0;
  int creeping = 0;
};
world::Control apply_creep(CreepState& st, world::Control u, double speed,
                           bool red_ahead, const ControllerConfig& cfg);

// ---------------------------------------------------------------------------
// episode rollouts
// ---------------------------------------------------------------------------

struct DriveConfig {
  world::WorldConfig world;       // per-episode seed is overridden
  bev::BevConfig bev;
  ControllerConfig ctrl;
  int max_steps = 400;            // hard cap
  double timeout_mult = 4.0;      // timeout = mult x expert steps
  int blocked_steps = 90;         // steps without progress = blocked
  double target_ahead = 12.0;     // goal-point lookahead, m
  bool creep = true;
  bool use_lm_waypoints = false;  // drive from the quantized-token head
};

struct EpisodeLog {
  uint64_t seed = 0;
  int steps = 0;
  double route_completion = 0;  // percent
  int collisions = 0, red_crossings = 0;
  bool completed = false, blocked = false, timed_out = false;
  double infraction_score = 1.0, driving_score = 0.0;
};

struct DriveSummary {
  double rc = 0, is = 0, ds = 0;  // means over episodes
  std::vector<EpisodeLog> episodes;
};

// A policy maps world state to control (step index for scripted baselines).
using Policy = std::function<world::Control(const world::WorldState&, int step)>;

EpisodeLog run_episode(const DriveConfig& cfg, uint64_t seed, const Policy& policy);
DriveSummary run_routes(const DriveConfig& cfg, const std::vector<uint64_t>& seeds,
                        const Policy& policy);

// Stock baselines.
Policy expert_policy_fn();
Policy zero_policy_fn();
Policy constant_throttle_fn(double throttle);

// Multiplicative infraction score and the per-route driving score.
double infraction_score(int collisions, int red_crossings);
void finalize_scores(EpisodeLog& log);

// ---------------------------------------------------------------------------
// trained-agent driving
// ---------------------------------------------------------------------------

// Wraps a loaded agent as a stateful closed-loop driver: renders the BEV,
// colors it with the per-episode colorizer, tracks slot state across frames,
// assembles the token trajectory, and turns predicted waypoints into control.
class AgentDriver {
 public:
  AgentDriver(const pipe::Agent& agent, const DriveConfig& cfg);

  void reset(uint64_t episode_seed);
  world::Control act(const world::WorldState& ws);

  const std::vector<double>& last_waypoints() const { return last_wp_; }
  cf::Trajectory observe(const world::WorldState& ws);  // input assembly only

 private:
  const pipe::Agent& agent_;
  DriveConfig cfg_;
  std::optional<bev::Colorizer> color_;
  nn::Var<float> slots_;
  bool have_slots_ = false;
  Rng slot_rng_{0};
  CreepState creep_;
  std::vector<double> last_wp_;
};

// Runs the agent over one episode / a seed list.
EpisodeLog drive_agent_episode(const pipe::Agent& agent, const DriveConfig& cfg,
                               uint64_t seed);
DriveSummary drive_agent(const pipe::Agent& agent, const DriveConfig& cfg,
                         const std::vector<uint64_t>& seeds);

// ---------------------------------------------------------------------------
// forecast evaluation
// ---------------------------------------------------------------------------

// Compares the model's scene forecast at horizon f against the Input-Copy
// baseline (current scene carried forward), both decoded to masks by the
// frozen slot decoder and scored against ground-truth instances at t+f.
struct ForecastEval {
  double ari_pred = 0, ari_copy = 0;
  double miou_pred = 0, miou_copy = 0;
  int frames = 0;
};

ForecastEval eval_forecast(const pipe::Agent& agent, const pipe::EpisodeBundle& b,
                           const std::vector<int>& episodes, int max_frames);

}  // namespace slotdrive::drive
