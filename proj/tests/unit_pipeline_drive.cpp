// End-to-end pipeline pieces over one tiny generated dataset: bundle loading,
// quantizer fitting, perception encodings, trajectory assembly, a micro
// training run per scene mode, closed-loop control, and scripted rollouts.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"

#include "slotdrive/common.hpp"
#include "slotdrive/dataset.hpp"
#include "slotdrive/driving.hpp"
#include "slotdrive/pipeline.hpp"

using namespace slotdrive;
namespace fs = std::filesystem;

namespace {

struct TinyData {
  std::string root;
  std::string dir;
  data::DatasetConfig cfg;
};

const TinyData& tiny() {
  static TinyData td = [] {
    TinyData t;
    t.root = (fs::temp_directory_path() / "slotdrive_test_pipe").string();
    fs::remove_all(t.root);
    fs::create_directories(t.root);
    t.cfg.root = t.root;
    t.cfg.name = "pd";
    t.cfg.episodes = 12;
    t.cfg.max_steps = 30;
    t.cfg.waypoints = 2;
    t.cfg.seed = 11;
    t.cfg.train_frac = 0.75;  // 9 train / 1 val / 2 test
    t.cfg.val_frac = 0.1;
    t.cfg.world.max_vehicles = 3;
    t.dir = data::generate_dataset(t.cfg);
    return t;
  }();
  return td;
}

const pipe::EpisodeBundle& bundle() {
  static pipe::EpisodeBundle b = pipe::load_bundle(tiny().dir, true, true);
  return b;
}

savi::SaviConfig tiny_savi_cfg() {
  savi::SaviConfig c;
  c.K = 3;
  c.d = 8;
  c.slot_mlp = 16;
  c.iters = 2;
  c.context = 2;
  c.in_res = 96;
  c.enc_filters = {8, 8, 8, 8};
  c.enc_strides = {2, 2, 1, 1};
  c.enc_mlp_dim = 16;
  c.dec_filters = {8, 8, 8, 8};
  c.dec_out_res = 24;
  c.pred_layers = 1;
  c.pred_heads = 4;
  c.pred_mlp = 16;
  c.batch = 2;
  c.steps = 4;
  return c;
}

std::string tiny_savi_ckpt() {
  static std::string path = [] {
    const savi::SaviModel<float> m(tiny_savi_cfg(), 5);
    const std::string p = (fs::path(tiny().root) / "tiny_savi.ckpt").string();
    pipe::save_savi(m, true, 5, p);
    return p;
  }();
  return path;
}

cf::BackboneConfig micro_model(cf::SceneMode mode) {
  cf::BackboneConfig c;
  c.H = 32;
  c.layers = 1;
  c.heads = 2;
  c.mode = mode;
  c.W = 2;
  c.f = 1;
  c.train_steps = 2;
  c.lm_next_discrete = true;
  c.gru_hidden = 16;
  c.batch = 8;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.lr = 3e-4;
  return c;
}

}  // namespace

TEST_CASE("bundle: episodes, splits and colored frames") {
  const auto& b = bundle();
  REQUIRE(b.man.episodes.size() == 12);
  REQUIRE(b.eps.size() == 12);
  CHECK(b.man.waypoints == 2);
  CHECK(b.bcfg.grid == 96);

  const auto train = b.split("train");
  const auto val = b.split("val");
  const auto test = b.split("test");
  CHECK(train.size() == 9);
  CHECK(val.size() == 1);
  CHECK(test.size() == 2);
  std::set<int> all;
  for (const auto* sp : {&train, &val, &test})
    for (int i : *sp) all.insert(i);
  CHECK(all.size() == 12);

  for (const auto& pe : b.eps) {
    CHECK(pe.S == 96);
    REQUIRE(pe.rgb.size() == pe.ep.steps.size());
    for (const auto& img : pe.rgb) CHECK(img.size() == size_t(3) * 96 * 96);
    // keep_frames=true retains the binary channels.
    CHECK(!pe.ep.steps[0].frame.data.empty());
  }

  // Dropping frames and capping episodes.
  const auto lean = pipe::load_bundle(tiny().dir, true, false, 4);
  CHECK(lean.eps.size() == 4);
  CHECK(lean.eps[0].ep.steps[0].frame.data.empty());
  for (int i : lean.split("train")) CHECK(i < 4);
}

TEST_CASE("quantizers: fixed vocabulary fit from the train split") {
  const auto qs = pipe::fit_quantizers_for(bundle(), 3);
  CHECK(qs.speed.k() == 14);
  CHECK(qs.light.k() == 2);
  CHECK(qs.target.k(0) == 16);
  CHECK(qs.target.k(1) == 16);
  CHECK(qs.waypoint.k(0) == 24);
  CHECK(qs.waypoint.k(1) == 24);
}

TEST_CASE("perception: attribute encoding lists nearby vehicles in ego frame") {
  const auto& b = bundle();
  auto per = pipe::load_perception(cf::SceneMode::kAttributes, "", 4);
  CHECK(per.mode == cf::SceneMode::kAttributes);
  CHECK(per.param_bytes().empty());

  const auto enc = pipe::encode_episode(per, b.eps[0], b.bcfg, b.enlarge);
  REQUIRE(enc.scene.size() == b.eps[0].ep.steps.size());
  REQUIRE(enc.ids.size() == enc.scene.size());
  for (size_t t = 0; t < enc.scene.size(); ++t) {
    CHECK(enc.scene[t].size() == size_t(4) * pipe::kAttrDim);
    CHECK(enc.ids[t].size() == 4);
    for (double v : enc.scene[t]) CHECK(std::isfinite(v));
    // Listed ids must come from the step's vehicle records (0 = empty slot).
    std::set<int> known{0};
    for (const auto& vr : b.eps[0].ep.steps[t].vehicles) known.insert(vr.id);
    for (int id : enc.ids[t]) CHECK(known.count(id) == 1);
  }
}

TEST_CASE("perception: slot checkpoint round trip and encoding geometry") {
  auto per = pipe::load_perception(cf::SceneMode::kSlots, tiny_savi_ckpt());
  REQUIRE(per.savi.has_value());
  CHECK(per.savi->cfg.K == 3);
  CHECK(!per.param_bytes().empty());

  const auto& b = bundle();
  const auto enc = pipe::encode_episode(per, b.eps[1], b.bcfg, b.enlarge);
  REQUIRE(enc.scene.size() == b.eps[1].ep.steps.size());
  for (const auto& s : enc.scene) {
    CHECK(s.size() == size_t(3) * 8);
    for (double v : s) CHECK(std::isfinite(v));
  }

  cf::BackboneConfig mc = micro_model(cf::SceneMode::kSlots);
  pipe::fit_model_to_perception(mc, per);
  CHECK(mc.scene_count == 3);
  CHECK(mc.scene_dim == 8);

  bool enl = false;
  auto m2 = pipe::load_savi(tiny_savi_ckpt(), &enl);
  CHECK(enl == true);
  CHECK(m2.cfg.d == 8);

  CHECK_THROWS_AS(pipe::load_perception(cf::SceneMode::kSlots, ""),
                  MissingPerceptionCheckpoint);
  CHECK_THROWS_AS(pipe::load_perception(cf::SceneMode::kSlots, "/nope/x.ckpt"),
                  MissingPerceptionCheckpoint);
}

TEST_CASE("perception: vq checkpoint and grid geometry") {
  vq::VqConfig vc;
  vc.codebook = 16;
  vc.latent_dim = 4;
  vc.enc_filters = {4, 4, 4, 4};
  vc.dec_filters = {4, 4, 4, 4};
  const vq::VqVae<float> vm(vc, 6);
  const std::string p = (fs::path(tiny().root) / "tiny_vq.ckpt").string();
  pipe::save_vqvae(vm, true, 6, p);

  auto per = pipe::load_perception(cf::SceneMode::kVq, p);
  REQUIRE(per.vq.has_value());
  cf::BackboneConfig mc = micro_model(cf::SceneMode::kVq);
  pipe::fit_model_to_perception(mc, per);
  CHECK(mc.scene_count == 36);  // (96/16)^2
  CHECK(mc.vq_codes == 16);

  const auto& b = bundle();
  const auto enc = pipe::encode_episode(per, b.eps[2], b.bcfg, b.enlarge);
  REQUIRE(enc.codes.size() == b.eps[2].ep.steps.size());
  for (const auto& row : enc.codes) {
    CHECK(row.size() == 36);
    for (int v : row) {
      CHECK(v >= 0);
      CHECK(v < 16);
    }
  }
}

TEST_CASE("trajectory assembly: quantized tokens and future targets") {
  const auto& b = bundle();
  const auto qs = pipe::fit_quantizers_for(b, 3);
  auto per = pipe::load_perception(cf::SceneMode::kAttributes, "", 4);
  auto mc = micro_model(cf::SceneMode::kAttributes);
  pipe::fit_model_to_perception(mc, per);
  const auto enc = pipe::encode_episode(per, b.eps[0], b.bcfg, b.enlarge);

  const auto t = pipe::make_trajectory(b.eps[0], enc, 2, qs, mc, true);
  CHECK(t.gx >= 0);
  CHECK(t.gx < 16);
  CHECK(t.gy < 16);
  CHECK((t.light == 0 || t.light == 1));
  CHECK(t.speed < 14);
  CHECK(t.scene.size() == size_t(mc.scene_count) * size_t(mc.scene_dim));
  REQUIRE(t.wp.size() == 4);  // 2W
  for (int id : t.wp) {
    CHECK(id >= 0);
    CHECK(id < 24);
  }
  REQUIRE(t.wp_cont.size() == 4);
  // Quantized waypoints decode back near the continuous ones.
  for (int i = 0; i < 2; ++i) {
    const auto xy = qs.waypoint.dequantize2(t.wp[size_t(2 * i)], t.wp[size_t(2 * i + 1)]);
    CHECK(std::abs(xy[0] - t.wp_cont[size_t(2 * i)]) < 6.0);
    CHECK(std::abs(xy[1] - t.wp_cont[size_t(2 * i + 1)]) < 6.0);
  }
  CHECK(t.scene_future.size() == t.scene.size());
  CHECK(t.r1[4] > 0.0);  // lane width
  CHECK(t.gx_next >= 0);
  CHECK(t.speed_next >= 0);
  CHECK(t.speed_next < 14);
}

TEST_CASE("training: attribute-mode micro run, frozen perception, agent round trip") {
  const auto& b = bundle();
  pipe::CfTrainConfig tc;
  tc.model = micro_model(cf::SceneMode::kAttributes);
  tc.model.scene_count = 4;
  tc.dataset_dir = tiny().dir;
  tc.out_dir = (fs::path(tiny().root) / "cf_attr").string();
  tc.seed = 2;

  const auto res = pipe::train_carformer(tc, &b);
  CHECK(res.steps > 0);
  CHECK(std::isfinite(res.final_train));
  CHECK(std::isfinite(res.best_val));
  CHECK(res.perception_unchanged);
  CHECK(fs::exists(res.best_path));
  CHECK(fs::exists(res.final_path));
  CHECK(fs::exists(res.quantizer_path));

  auto agent = pipe::load_agent(res.best_path);
  CHECK(agent.ccfg.mode == cf::SceneMode::kAttributes);
  CHECK(agent.ccfg.scene_count == 4);
  REQUIRE(agent.model.has_value());
  CHECK(agent.qs.speed.fitted);

  // Deterministic retraining: same config, same artifacts byte for byte.
  pipe::CfTrainConfig tc2 = tc;
  tc2.out_dir = (fs::path(tiny().root) / "cf_attr2").string();
  const auto res2 = pipe::train_carformer(tc2, &b);
  CHECK(res2.final_train == res.final_train);

  // Closed-loop smoke: the agent produces finite bounded controls.
  drive::DriveConfig dc;
  dc.world = tiny().cfg.world;
  dc.max_steps = 40;
  drive::AgentDriver drv(agent, dc);
  drv.reset(77);
  auto ws = world::make_world([&] {
    auto wc = dc.world;
    wc.seed = 77;
    return wc;
  }());
  for (int i = 0; i < 3; ++i) {
    const auto u = drv.act(ws);
    CHECK(std::isfinite(u.steer));
    CHECK(u.steer >= -1.0);
    CHECK(u.steer <= 1.0);
    CHECK(u.throttle >= 0.0);
    CHECK(u.throttle <= 1.0);
    CHECK(u.brake >= 0.0);
    world::step_world(ws, u);
  }
  CHECK(drv.last_waypoints().size() == 4);

  const auto log = drive::drive_agent_episode(agent, dc, 78);
  CHECK(log.steps > 0);
  CHECK(log.route_completion >= 0.0);
  CHECK(log.route_completion <= 100.0);
  CHECK(log.driving_score <= log.route_completion + 1e-9);
}

TEST_CASE("training: slots-mode micro run feeds the forecast evaluator") {
  const auto& b = bundle();
  pipe::CfTrainConfig tc;
  tc.model = micro_model(cf::SceneMode::kSlots);
  tc.model.train_steps = 1;
  tc.model.lm_next_discrete = false;
  tc.model.epochs = 1;
  tc.dataset_dir = tiny().dir;
  tc.out_dir = (fs::path(tiny().root) / "cf_slots").string();
  tc.perception_ckpt = tiny_savi_ckpt();
  tc.seed = 3;

  const auto res = pipe::train_carformer(tc, &b);
  CHECK(res.steps > 0);
  CHECK(res.perception_unchanged);

  auto agent = pipe::load_agent(res.best_path);
  REQUIRE(agent.per.savi.has_value());
  CHECK(agent.ccfg.scene_count == 3);
  CHECK(agent.ccfg.scene_dim == 8);

  const auto ev = drive::eval_forecast(agent, b, b.split("val"), 6);
  CHECK(ev.frames > 0);
  for (double v : {ev.ari_pred, ev.ari_copy, ev.miou_pred, ev.miou_copy}) {
    CHECK(std::isfinite(v));
    CHECK(v >= -0.5);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("control: waypoint following") {
  drive::ControllerConfig cc;

  // Straight, accelerating: waypoints dead ahead spaced ~1.25 m at dt 0.5.
  const std::vector<double> ahead{0.0, 1.25, 0.0, 2.5};
  const auto u1 = drive::waypoints_to_control(ahead, 1.0, cc);
  CHECK(std::abs(u1.steer) < 0.05);
  CHECK(u1.throttle > 0.0);
  CHECK(u1.brake == 0.0);

  // Stop intent: prediction collapses near the origin.
  const std::vector<double> stop{0.0, 0.05, 0.0, 0.08};
  const auto u2 = drive::waypoints_to_control(stop, 3.0, cc);
  CHECK(u2.throttle == 0.0);
  CHECK(u2.brake > 0.5);

  // Waypoints to the right steer right (positive).
  const std::vector<double> right{1.5, 2.0, 3.0, 3.5};
  const auto u3 = drive::waypoints_to_control(right, 2.0, cc);
  CHECK(u3.steer > 0.05);
  // Mirrored to the left.
  const std::vector<double> left{-1.5, 2.0, -3.0, 3.5};
  CHECK(drive::waypoints_to_control(left, 2.0, cc).steer < -0.05);
}

TEST_CASE("control: creeping breaks deadlocks but never under a red light") {
  drive::ControllerConfig cc;
  drive::CreepState st;
  const world::Control coast{0.0, 0.0, 0.0};

  // Stuck without a red: creeping engages after stuck_steps.
  int creeps = 0;
  for (int i = 0; i < cc.stuck_steps + cc.creep_steps + 5; ++i) {
    const auto u = drive::apply_creep(st, coast, 0.0, false, cc);
    if (u.throttle == cc.creep_throttle) ++creeps;
  }
  CHECK(creeps == cc.creep_steps);

  // Under a red light the stuck counter must not trigger creeping.
  drive::CreepState st2;
  for (int i = 0; i < 3 * cc.stuck_steps; ++i) {
    const auto u = drive::apply_creep(st2, coast, 0.0, true, cc);
    CHECK(u.throttle == 0.0);
  }
}

TEST_CASE("scores: multiplicative infractions and driving score") {
  CHECK(drive::infraction_score(0, 0) == 1.0);
  CHECK(drive::infraction_score(1, 0) == doctest::Approx(0.6));
  CHECK(drive::infraction_score(0, 1) == doctest::Approx(0.7));
  CHECK(drive::infraction_score(2, 1) == doctest::Approx(0.6 * 0.6 * 0.7));

  drive::EpisodeLog log;
  log.route_completion = 80.0;
  log.collisions = 1;
  log.red_crossings = 1;
  drive::finalize_scores(log);
  CHECK(log.infraction_score == doctest::Approx(0.42));
  CHECK(log.driving_score == doctest::Approx(80.0 * 0.42));
}

TEST_CASE("rollouts: expert completes an empty route, zero policy goes nowhere") {
  drive::DriveConfig dc;
  dc.world = tiny().cfg.world;
  dc.world.max_vehicles = 0;

  const auto ex = drive::run_episode(dc, 31, drive::expert_policy_fn());
  CHECK(ex.completed);
  CHECK(ex.route_completion >= 95.0);
  CHECK(ex.collisions == 0);
  CHECK(ex.red_crossings == 0);
  CHECK(ex.driving_score == doctest::Approx(ex.route_completion * ex.infraction_score));

  const auto z = drive::run_episode(dc, 31, drive::zero_policy_fn());
  CHECK(z.route_completion <= 5.0);
  CHECK(!z.completed);

  // Episode rollouts are deterministic.
  const auto ex2 = drive::run_episode(dc, 31, drive::expert_policy_fn());
  CHECK(ex2.steps == ex.steps);
  CHECK(ex2.route_completion == ex.route_completion);
  CHECK(ex2.driving_score == ex.driving_score);

  const auto sum = drive::run_routes(dc, {31, 32}, drive::expert_policy_fn());
  REQUIRE(sum.episodes.size() == 2);
  CHECK(sum.rc == doctest::Approx((sum.episodes[0].route_completion +
                                   sum.episodes[1].route_completion) /
                                  2.0));
  CHECK(sum.ds <= sum.rc + 1e-9);
}

TEST_CASE("batching helpers: rgb scaling and box downsample") {
  std::vector<uint8_t> img(3 * 4 * 4, 0);
  img[0] = 255;
  img[1] = 51;
  const auto x = pipe::rgb_batch({&img}, 4);
  REQUIRE(x.dim(0) == 1);
  REQUIRE(x.dim(1) == 3);
  CHECK(x[0] == doctest::Approx(1.0f));
  CHECK(x[1] == doctest::Approx(0.2f));
  CHECK(x[2] == 0.0f);

  nn::Tensor<float> y({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) y[i] = float(i);
  const auto d = pipe::box_downsample(y, 2);
  REQUIRE(d.dim(2) == 2);
  CHECK(d[0] == doctest::Approx((0.f + 1 + 4 + 5) / 4));
  CHECK(d[1] == doctest::Approx((2.f + 3 + 6 + 7) / 4));
  CHECK(d[3] == doctest::Approx((10.f + 11 + 14 + 15) / 4));
}
