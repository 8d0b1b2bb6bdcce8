#include "slotdrive/driving.hpp"

#include <algorithm>
#include <cmath>

#include "slotdrive/bev.hpp"
#include "slotdrive/metrics.hpp"

namespace slotdrive::drive {

using nn::Tensor;

// ---------------------------------------------------------------------------
// control
// ---------------------------------------------------------------------------

world::Control waypoints_to_control(const std::vector<double>& wp, double cur_v,
                                    const ControllerConfig& cfg) {
  SD_CHECK(wp.size() >= 4 && wp.size() % 2 == 0, ShapeMismatch,
           "waypoint controller needs at least two (x, y) pairs");
  const geo::Vec2 w0{wp[0], wp[1]}, w1{wp[2], wp[3]};
  const geo::Vec2 aim{0.5 * (w0.x + w1.x), 0.5 * (w0.y + w1.y)};

  // Pure pursuit towards the mean of the first two waypoints; the forward
  // guard keeps a behind-ego aim from flipping the angle.
  const double alpha = std::atan2(aim.x, std::max(aim.y, 0.2));
  const double ld = std::max(1.0, std::hypot(aim.x, aim.y));
  const double delta = std::atan2(2.0 * cfg.wheelbase * std::sin(alpha), ld);

  world::Control u;
  u.steer = std::clamp(delta / cfg.max_wheel_angle, -1.0, 1.0);

  // Desired speed from the spacing of consecutive waypoints.
  const double vt = std::hypot(w1.x - w0.x, w1.y - w0.y) / cfg.dt;
  if (vt < cfg.stop_speed && cur_v < 0.5) {
    u.brake = 1.0;  // the prediction collapsed to a stop: hold the car
    return u;
  }
  const double a = cfg.speed_gain * (vt - cur_v);
  if (a >= 0.0)
    u.throttle = std::clamp(a / cfg.throttle_accel, 0.0, 1.0);
  else if (a < -cfg.brake_deadband)
    u.brake = std::clamp(-a / cfg.brake_decel, 0.0, 1.0);
  return u;
}

world::Control apply_creep(CreepState& st, world::Control u, double speed,
                           bool red_ahead, const ControllerConfig& cfg) {
  if (st.creeping > 0) {
    --st.creeping;
    u.throttle = std::max(u.throttle, cfg.creep_throttle);
    u.brake = 0.0;
    return u;
  }
  if (speed < cfg.stuck_speed && !red_ahead) {
    if (++st.stuck >= cfg.stuck_steps) {
      st.stuck = 0;
      st.creeping = cfg.creep_steps;
    }
  } else {
    st.stuck = 0;
  }
  return u;
}

// ---------------------------------------------------------------------------
// episode rollouts
// ---------------------------------------------------------------------------

double infraction_score(int collisions, int red_crossings) {
  return std::pow(0.6, collisions) * std::pow(0.7, red_crossings);
}

void finalize_scores(EpisodeLog& log) {
  log.infraction_score = infraction_score(log.collisions, log.red_crossings);
  log.driving_score = log.route_completion * log.infraction_score;
}

EpisodeLog run_episode(const DriveConfig& cfg, uint64_t seed, const Policy& policy) {
  world::WorldConfig wc = cfg.world;
  wc.seed = seed;
  world::WorldState ws = world::make_world(wc);
  const int expert_steps = world::expert_episode_steps(wc, cfg.max_steps);
  const int limit = std::min<int>(
      cfg.max_steps,
      std::max(1, static_cast<int>(std::lround(cfg.timeout_mult * expert_steps))));

  EpisodeLog log;
  log.seed = seed;
  double best = 0.0;
  int stalled = 0;
  for (int step = 0; step < limit; ++step) {
    const world::Control u = policy(ws, step);
    world::step_world(ws, u);
    ++log.steps;
    if (ws.progress_frac() >= 0.99) {
      log.completed = true;
      break;
    }
    if (ws.progress_s > best + 0.25) {
      best = ws.progress_s;
      stalled = 0;
    } else if (++stalled >= cfg.blocked_steps) {
      log.blocked = true;
      break;
    }
  }
  log.timed_out = !log.completed && !log.blocked && log.steps >= limit;
  log.route_completion =
      log.completed ? 100.0 : std::min(100.0, 100.0 * ws.progress_frac());
  log.collisions = ws.collisions;
  log.red_crossings = ws.red_crossings;
  finalize_scores(log);
  return log;
}

DriveSummary run_routes(const DriveConfig& cfg, const std::vector<uint64_t>& seeds,
                        const Policy& policy) {
  DriveSummary s;
  for (uint64_t seed : seeds) {
    s.episodes.push_back(run_episode(cfg, seed, policy));
    const auto& l = s.episodes.back();
    s.rc += l.route_completion;
    s.is += l.infraction_score;
    s.ds += l.driving_score;
  }
  if (!seeds.empty()) {
    s.rc /= double(seeds.size());
    s.is /= double(seeds.size());
    s.ds /= double(seeds.size());
  }
  return s;
}

Policy expert_policy_fn() {
  return [](const world::WorldState& ws, int) { return world::expert_policy(ws); };
}

Policy zero_policy_fn() {
  return [](const world::WorldState&, int) { return world::Control{}; };
}

Policy constant_throttle_fn(double throttle) {
  return [throttle](const world::WorldState&, int) {
    world::Control u;
    u.throttle = throttle;
    return u;
  };
}

// ---------------------------------------------------------------------------
// trained-agent driving
// ---------------------------------------------------------------------------

AgentDriver::AgentDriver(const pipe::Agent& agent, const DriveConfig& cfg)
    : agent_(agent), cfg_(cfg) {
  SD_CHECK(agent_.model.has_value(), UntrainedModel, "agent has no transformer");
  if (agent_.ccfg.mode == cf::SceneMode::kSlots)
    SD_CHECK(agent_.per.savi.has_value(), MissingPerceptionCheckpoint,
             "slots agent needs its slot-model checkpoint");
  if (agent_.ccfg.mode == cf::SceneMode::kVq)
    SD_CHECK(agent_.per.vq.has_value(), MissingPerceptionCheckpoint,
             "vq agent needs its VQ-VAE checkpoint");
}

void AgentDriver::reset(uint64_t episode_seed) {
  color_.emplace(episode_seed, cfg_.bev.grid);
  slot_rng_ = Rng(episode_seed, "drive-slots");
  have_slots_ = false;
  creep_ = CreepState{};
  last_wp_.clear();
}

cf::Trajectory AgentDriver::observe(const world::WorldState& ws) {
  SD_CHECK(color_.has_value(), RuntimeError, "driver used before reset()");
  const auto& ccfg = agent_.ccfg;
  cf::Trajectory tr;
  const geo::Vec2 goal = world::target_point(ws, cfg_.target_ahead);
  const auto g = agent_.qs.target.quantize2(goal.x, goal.y);
  tr.gx = g[0];
  tr.gy = g[1];
  const bool red = world::red_light_ahead(ws);
  tr.light = agent_.qs.light.quantize(red ? 1.0 : 0.0);
  tr.speed = agent_.qs.speed.quantize(ws.ego_v);

  if (ccfg.mode == cf::SceneMode::kAttributes) {
    tr.scene.assign(static_cast<size_t>(ccfg.scene_count) * ccfg.scene_dim, 0.0);
    auto views = ws.vehicle_records();
    std::sort(views.begin(), views.end(),
              [&](const world::AgentView& a, const world::AgentView& b) {
                const geo::Vec2 la = ws.ego.to_local(a.pose.p);
                const geo::Vec2 lb = ws.ego.to_local(b.pose.p);
                const double da = la.x * la.x + la.y * la.y;
                const double db = lb.x * lb.x + lb.y * lb.y;
                return da != db ? da < db : a.id < b.id;
              });
    for (int k = 0; k < ccfg.scene_count && k < static_cast<int>(views.size());
         ++k) {
      const auto& v = views[static_cast<size_t>(k)];
      const geo::Vec2 local = ws.ego.to_local(v.pose.p);
      const double ry = v.pose.yaw - ws.ego.yaw;
      const double vec[pipe::kAttrDim] = {local.x,       local.y, std::cos(ry),
                                          std::sin(ry), v.v,     v.length,
                                          v.width};
      SD_CHECK(ccfg.scene_dim == pipe::kAttrDim, ConfigError,
               "attribute agent scene_dim");
      for (int j = 0; j < pipe::kAttrDim; ++j)
        tr.scene[static_cast<size_t>(k) * pipe::kAttrDim + size_t(j)] = vec[j];
    }
  } else {
    bev::BevFrame frame = bev::render_bev(ws, cfg_.bev);
    if (agent_.enlarge) bev::enlarge_vehicles(frame, cfg_.bev.enlarge_px());
    if (ccfg.mode == cf::SceneMode::kVq) {
      tr.vq = agent_.per.vq->encode_frame(frame).indices;
    } else {
      const std::vector<float> rgb = color_->colorize(frame);
      Tensor<float> x({1, 3, cfg_.bev.grid, cfg_.bev.grid});
      std::copy(rgb.begin(), rgb.end(), x.ptr());
      const auto& m = *agent_.per.savi;
      auto feats = m.encode(nn::constant(std::move(x)));
      auto prior = have_slots_ ? m.predict_slots(slots_) : m.init_slots(1, slot_rng_);
      slots_ = m.slot_attention(prior, feats);
      have_slots_ = true;
      tr.scene.resize(static_cast<size_t>(slots_->value.numel()));
      for (size_t i = 0; i < tr.scene.size(); ++i)
        tr.scene[i] = double(slots_->value[static_cast<int64_t>(i)]);
    }
  }
  if (ccfg.mode != cf::SceneMode::kVq) {
    tr.r1 = world::route_vector(ws, 0);
    tr.r2 = world::route_vector(ws, 1);
  }
  return tr;
}

world::Control AgentDriver::act(const world::WorldState& ws) {
  const cf::Trajectory tr = observe(ws);
  const auto out = agent_.model->act(tr, cfg_.use_lm_waypoints);
  last_wp_.clear();
  if (cfg_.use_lm_waypoints) {
    for (int i = 0; i < agent_.ccfg.W; ++i) {
      const auto xy = agent_.qs.waypoint.dequantize2(
          out.lm_wp[static_cast<size_t>(2 * i)],
          out.lm_wp[static_cast<size_t>(2 * i + 1)]);
      last_wp_.push_back(xy[0]);
      last_wp_.push_back(xy[1]);
    }
  } else {
    for (const auto& p : out.gru_wp) {
      last_wp_.push_back(p[0]);
      last_wp_.push_back(p[1]);
    }
  }
  world::Control u = waypoints_to_control(last_wp_, ws.ego_v, cfg_.ctrl);
  if (cfg_.creep)
    u = apply_creep(creep_, u, ws.ego_v, world::red_light_ahead(ws), cfg_.ctrl);
  return u;
}

EpisodeLog drive_agent_episode(const pipe::Agent& agent, const DriveConfig& cfg,
                               uint64_t seed) {
  AgentDriver driver(agent, cfg);
  driver.reset(seed);
  return run_episode(cfg, seed, [&driver](const world::WorldState& ws, int) {
    return driver.act(ws);
  });
}

DriveSummary drive_agent(const pipe::Agent& agent, const DriveConfig& cfg,
                         const std::vector<uint64_t>& seeds) {
  DriveSummary s;
  for (uint64_t seed : seeds) {
    s.episodes.push_back(drive_agent_episode(agent, cfg, seed));
    const auto& l = s.episodes.back();
    s.rc += l.route_completion;
    s.is += l.infraction_score;
    s.ds += l.driving_score;
  }
  if (!seeds.empty()) {
    s.rc /= double(seeds.size());
    s.is /= double(seeds.size());
    s.ds /= double(seeds.size());
  }
  return s;
}

// ---------------------------------------------------------------------------
// forecast evaluation
// ---------------------------------------------------------------------------

ForecastEval eval_forecast(const pipe::Agent& agent, const pipe::EpisodeBundle& b,
                           const std::vector<int>& episodes, int max_frames) {
  SD_CHECK(agent.ccfg.mode == cf::SceneMode::kSlots, ModeMismatch,
           "forecast evaluation decodes slot scenes");
  SD_CHECK(agent.per.savi.has_value(), MissingPerceptionCheckpoint,
           "forecast evaluation needs the slot decoder");
  const auto& savi = *agent.per.savi;
  const int K = agent.ccfg.scene_count, d = agent.ccfg.scene_dim;
  const int s = savi.cfg.dec_out_res, S = b.bcfg.grid;
  const int f = agent.ccfg.f;

  auto masks_of = [&](const std::vector<double>& scene) {
    Tensor<float> z({1, K, d});
    for (size_t i = 0; i < scene.size(); ++i)
      z[static_cast<int64_t>(i)] = float(scene[i]);
    auto dec = savi.decode(nn::constant(std::move(z)));
    auto m = savi::slot_masks(dec.weights->value);
    return savi::upsample_mask(m[0], s, S);
  };

  ForecastEval ev;
  for (int ei : episodes) {
    if (ev.frames >= max_frames) break;
    const auto& pe = b.eps[static_cast<size_t>(ei)];
    const pipe::EncodedEpisode enc =
        pipe::encode_episode(agent.per, pe, b.bcfg, b.enlarge);
    const int T = static_cast<int>(pe.ep.steps.size());
    for (int t = 0; t + f < T && ev.frames < max_frames; ++t) {
      const auto gt16 =
          data::instances_for_step(pe.ep.steps[size_t(t + f)], b.bcfg, b.enlarge);
      std::vector<int> gt(gt16.label.begin(), gt16.label.end());
      if (std::all_of(gt.begin(), gt.end(), [](int v) { return v == 0; })) continue;
      cf::Trajectory tr =
          pipe::make_trajectory(pe, enc, t, agent.qs, agent.ccfg, false);
      const std::vector<int> pred = masks_of(agent.model->forecast_scene(tr));
      const std::vector<int> copy = masks_of(enc.scene[static_cast<size_t>(t)]);
      ev.ari_pred += metrics::fg_ari(pred, gt);
      ev.ari_copy += metrics::fg_ari(copy, gt);
      ev.miou_pred += metrics::miou(pred, gt);
      ev.miou_copy += metrics::miou(copy, gt);
      ++ev.frames;
    }
  }
  if (ev.frames > 0) {
    ev.ari_pred /= ev.frames;
    ev.ari_copy /= ev.frames;
    ev.miou_pred /= ev.frames;
    ev.miou_copy /= ev.frames;
  }
  return ev;
}

}  // namespace slotdrive::drive
