// Driving transformer: token layout, block attention masking, losses, and
// greedy decoding. Masking is validated against the definition directly
// (gradients of hidden states w.r.t. masked inputs must vanish identically).

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "doctest.h"

#include "slotdrive/carformer.hpp"
#include "slotdrive/common.hpp"
#include "slotdrive/rng.hpp"
#include "slotdrive/serialize.hpp"

using namespace slotdrive;
using nn::Tensor;
using nn::Var;

namespace {

cf::BackboneConfig small_cfg(cf::SceneMode mode, int steps = 1) {
  cf::BackboneConfig c;
  c.H = 32;
  c.layers = 2;
  c.heads = 2;
  c.mode = mode;
  c.scene_count = 3;
  c.scene_dim = 4;
  c.vq_codes = 10;
  c.W = 2;
  c.f = 4;
  c.train_steps = steps;
  c.gru_hidden = 16;
  c.alpha = 40.0;
  return c;
}

cf::Trajectory rand_traj(const cf::BackboneConfig& c, Rng& rng) {
  cf::Trajectory t;
  t.gx = int(rng.below(cf::Vocab::kGx));
  t.gy = int(rng.below(cf::Vocab::kGy));
  t.light = int(rng.below(2));
  t.speed = int(rng.below(cf::Vocab::kSpeed));
  if (c.mode == cf::SceneMode::kVq) {
    t.vq.resize(size_t(c.scene_count));
    t.vq_future.resize(size_t(c.scene_count));
    for (auto& v : t.vq) v = int(rng.below(c.vq_codes));
    for (auto& v : t.vq_future) v = int(rng.below(c.vq_codes));
  } else {
    t.scene.resize(size_t(c.scene_count) * size_t(c.scene_dim));
    t.scene_future.resize(t.scene.size());
    for (auto& v : t.scene) v = rng.normal() * 0.5;
    for (auto& v : t.scene_future) v = rng.normal() * 0.5;
    for (auto& v : t.r1) v = rng.normal() * 0.3;
    for (auto& v : t.r2) v = rng.normal() * 0.3;
    for (auto& v : t.r1_future) v = rng.normal() * 0.3;
    for (auto& v : t.r2_future) v = rng.normal() * 0.3;
  }
  t.wp.resize(size_t(2 * c.W));
  t.wp_cont.resize(size_t(2 * c.W));
  for (auto& v : t.wp) v = int(rng.below(cf::Vocab::kWx));
  for (auto& v : t.wp_cont) v = rng.normal() * 2.0;
  return t;
}

}  // namespace

TEST_CASE("layout: step pattern sizes") {
  auto c30 = small_cfg(cf::SceneMode::kSlots);
  c30.scene_count = 30;
  c30.W = 4;
  const auto L30 = cf::build_layout(c30, 1);
  CHECK(L30.size() == 44);  // 4 + 30 + 2 + 8
  CHECK(L30.step_len == 44);
  CHECK(L30.scene_tokens == 30);
  CHECK(L30.route_tokens == 2);
  CHECK(L30.wp_tokens == 8);
  CHECK(L30.scene_begin(0) == 4);
  CHECK(L30.scene_end(0) == 36);
  CHECK(L30.wp_begin(0) == 36);
  CHECK(L30.pre_wp(0) == 35);

  auto c7 = c30;
  c7.scene_count = 7;
  const auto L7 = cf::build_layout(c7, 3);
  CHECK(L7.step_len == 21);  // 4 + 7 + 2 + 8
  CHECK(L7.size() == 63);
  CHECK(L7.base(2) == 42);
  CHECK(L7.wp_begin(1) == 21 + 13);

  auto cv = small_cfg(cf::SceneMode::kVq);
  cv.scene_count = 4;
  const auto Lv = cf::build_layout(cv, 1);
  CHECK(Lv.route_tokens == 0);
  CHECK(Lv.step_len == 4 + 4 + 0 + 2 * cv.W);
}

TEST_CASE("layout: block ids mark exactly the scene block of each step") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  const auto L = cf::build_layout(c, 2);
  for (int s = 0; s < 2; ++s) {
    for (int p = L.base(s); p < L.base(s) + L.step_len; ++p) {
      const auto& tok = L.tokens[size_t(p)];
      const bool in_block = p >= L.scene_begin(s) && p < L.wp_begin(s);
      if (in_block)
        CHECK(tok.block == s);
      else
        CHECK(tok.block == -1);
    }
  }
}

TEST_CASE("masks: block mask = causal plus within-block, causal mask is triangular") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  const auto L = cf::build_layout(c, 2);
  const auto bm = cf::block_mask(L);
  const auto cm = cf::causal_mask(L.size());
  const int64_t T = L.size();
  REQUIRE(bm.dim(0) == T);
  REQUIRE(cm.numel() == T * T);

  int widened = 0;
  for (int64_t i = 0; i < T; ++i)
    for (int64_t j = 0; j < T; ++j) {
      CHECK(cm[i * T + j] == (j <= i ? 1 : 0));
      const int bi = L.tokens[size_t(i)].block, bj = L.tokens[size_t(j)].block;
      const bool want = j <= i || (bi >= 0 && bi == bj);
      CHECK(bm[i * T + j] == (want ? 1 : 0));
      if (want && j > i) ++widened;
    }
  CHECK(widened > 0);  // the block actually adds forward edges

  // A layout with no blocks collapses to the causal mask bit for bit.
  cf::TokenLayout flat = L;
  for (auto& tok : flat.tokens) tok.block = -1;
  const auto fm = cf::block_mask(flat);
  CHECK(fm.data == cm.data);
}

TEST_CASE("masks: non-contiguous block ids are rejected") {
  cf::TokenLayout L;
  L.tokens = {{cf::Attr::kGx, 0}, {cf::Attr::kGy, -1}, {cf::Attr::kLight, 0}};
  L.step_len = 3;
  CHECK_THROWS_AS(cf::block_mask(L), OverlappingBlocks);
}

TEST_CASE("masks: tiling repeats one mask per head") {
  const auto cm = cf::causal_mask(5);
  const auto tiled = cf::tile_mask(cm, 3);
  REQUIRE(tiled->rank() == 3);
  CHECK(tiled->dim(0) == 3);
  CHECK(tiled->dim(1) == 5);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 25; ++i) CHECK((*tiled)[c * 25 + i] == cm[i]);
}

TEST_CASE("backbone: masked-out inputs get exactly zero gradient; allowed ones flow") {
  auto c = small_cfg(cf::SceneMode::kSlots, 2);
  cf::CarFormer<double> m(c, 17);
  const auto& L = m.train_layout;
  const int64_t T = L.size();
  Rng rng(18, "t");
  cf::Trajectory t0 = rand_traj(c, rng), t1 = rand_traj(c, rng);
  const std::vector<std::vector<const cf::Trajectory*>> batch{{&t0, &t1}};
  const auto bm = cf::block_mask(L);

  for (int64_t i = 0; i < T; ++i) {
    auto x = m.embed(batch, L);
    auto h = m.backbone(x, cf::tile_mask(bm, c.heads));
    Tensor<double> seed(h->value.shape, 0.0);
    Rng sr(100 + uint64_t(i), "seed");
    for (int64_t k = 0; k < c.H; ++k) seed[i * c.H + k] = sr.normal();
    nn::backward(h, &seed);
    REQUIRE(x->grad.numel() == x->value.numel());
    for (int64_t j = 0; j < T; ++j) {
      double g = 0.0;
      for (int64_t k = 0; k < c.H; ++k) g += std::abs(x->grad[j * c.H + k]);
      if (bm[i * T + j] == 0) {
        CHECK(g == 0.0);  // soundness: not even rounding dust
      } else if (j == i) {
        CHECK(g > 0.0);
      }
    }
  }
}

TEST_CASE("backbone: within-block later tokens influence earlier hidden states") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  cf::CarFormer<double> m(c, 19);
  const auto& L = m.train_layout;
  const int64_t T = L.size();
  Rng rng(20, "x");
  Tensor<double> x0({1, T, c.H});
  for (auto& v : x0.data) v = rng.normal() * 0.3;
  const auto mask = cf::tile_mask(cf::block_mask(L), c.heads);
  auto h0 = m.backbone(nn::constant(x0), mask);

  const int i = L.scene_begin(0);      // first scene token
  const int j = L.scene_end(0) + 1;    // second route token, same block
  REQUIRE(L.tokens[size_t(i)].block == L.tokens[size_t(j)].block);
  Tensor<double> x1 = x0;
  for (int64_t k = 0; k < c.H; ++k) x1[int64_t(j) * c.H + k] += 1e-3;
  auto h1 = m.backbone(nn::constant(x1), mask);

  double delta = 0.0;
  for (int64_t k = 0; k < c.H; ++k)
    delta = std::max(delta,
                     std::abs(h1->value[int64_t(i) * c.H + k] -
                              h0->value[int64_t(i) * c.H + k]));
  CHECK(delta > 1e-8);

  // Outside the block the perturbation must stay invisible to the past.
  double past = 0.0;
  for (int64_t k = 0; k < c.H; ++k)
    past = std::max(past, std::abs(h1->value[0 * c.H + k] - h0->value[0 * c.H + k]));
  CHECK(past == 0.0);
}

TEST_CASE("backbone: removing blocks reproduces the causal forward bitwise") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  cf::CarFormer<double> m(c, 21);
  const auto& L = m.train_layout;
  Rng rng(22, "x");
  Tensor<double> x({1, int64_t(L.size()), c.H});
  for (auto& v : x.data) v = rng.normal() * 0.3;

  cf::TokenLayout flat = L;
  for (auto& tok : flat.tokens) tok.block = -1;
  auto ha = m.backbone(nn::constant(x), cf::tile_mask(cf::block_mask(flat), c.heads));
  auto hb = m.backbone(nn::constant(x), cf::tile_mask(cf::causal_mask(L.size()), c.heads));
  for (int64_t k = 0; k < ha->value.numel(); ++k)
    CHECK(ha->value[k] == hb->value[k]);
}

TEST_CASE("losses: reported total composes from the parts, and matches the graph") {
  for (auto mode : {cf::SceneMode::kSlots, cf::SceneMode::kVq}) {
    auto c = small_cfg(mode, 2);
    c.lm_next_discrete = true;
    c.alpha = 40.0;
    cf::CarFormer<double> m(c, 23);
    Rng rng(24, "l");
    cf::Trajectory a0 = rand_traj(c, rng), a1 = rand_traj(c, rng);
    cf::Trajectory b0 = rand_traj(c, rng), b1 = rand_traj(c, rng);
    const auto out = m.losses({{&a0, &a1}, {&b0, &b1}});

    CHECK(out.parts.l_wp == out.parts.l_gru + out.parts.l_lm);
    CHECK(out.parts.total ==
          out.parts.l_wp + c.alpha * out.parts.l_forecast + out.parts.l_next);
    CHECK(out.loss->value[0] == out.parts.total);  // graph value == reported sum
    CHECK(out.parts.l_gru > 0.0);
    CHECK(out.parts.l_lm > 0.0);
    CHECK(out.parts.l_forecast > 0.0);
    CHECK(out.parts.l_next > 0.0);
  }
}

TEST_CASE("losses: zeroed LM head scores ln(span) per discrete target") {
  auto c = small_cfg(cf::SceneMode::kSlots, 2);
  c.lm_next_discrete = true;
  cf::CarFormer<double> m(c, 25);
  m.lm.W->value = Tensor<double>(m.lm.W->value.shape, 0.0);
  m.lm.b->value = Tensor<double>(m.lm.b->value.shape, 0.0);

  Rng rng(26, "z");
  cf::Trajectory t0 = rand_traj(c, rng), t1 = rand_traj(c, rng);
  const auto out = m.losses({{&t0, &t1}});

  // Waypoint LM: 2W spans of 24 per step, summed over both steps.
  const double want_lm = 2 * (2.0 * c.W) * std::log(24.0);
  CHECK(out.parts.l_lm == doctest::Approx(want_lm).epsilon(1e-9));
  // Next-step openings: one (16,16,2,14) span group for the second step.
  const double want_next =
      std::log(16.0) + std::log(16.0) + std::log(2.0) + std::log(14.0);
  CHECK(out.parts.l_next == doctest::Approx(want_next).epsilon(1e-9));
}

TEST_CASE("losses: analytic gradients match central differences") {
  auto c = small_cfg(cf::SceneMode::kSlots, 2);
  c.lm_next_discrete = true;
  cf::CarFormer<double> m(c, 27);
  Rng rng(28, "g");
  cf::Trajectory a0 = rand_traj(c, rng), a1 = rand_traj(c, rng);
  cf::Trajectory b0 = rand_traj(c, rng), b1 = rand_traj(c, rng);
  const std::vector<std::vector<const cf::Trajectory*>> batch{{&a0, &a1}, {&b0, &b1}};

  auto reg = m.registry();
  auto params = reg.vars();
  nn::zero_grad(params);
  auto out = m.losses(batch);
  nn::backward(out.loss);

  const double h = 1e-6;
  Rng pick(29, "pick");
  double worst = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    auto& p = params[size_t(pick.below(int64_t(params.size())))];
    const int64_t at = pick.below(p->value.numel());
    const double keep = p->value[at];
    p->value[at] = keep + h;
    const double lp = m.losses(batch).parts.total;
    p->value[at] = keep - h;
    const double lmn = m.losses(batch).parts.total;
    p->value[at] = keep;
    const double fd = (lp - lmn) / (2 * h);
    const double an = p->grad.numel() > 0 ? p->grad[at] : 0.0;
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    worst = std::max(worst, rel);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("embed: ids outside an attribute vocabulary are rejected") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  cf::CarFormer<double> m(c, 30);
  Rng rng(31, "v");
  cf::Trajectory t = rand_traj(c, rng);
  t.wp[0] = 24;
  CHECK_THROWS_AS(m.losses({{&t}}), VocabOverflow);

  auto cv = small_cfg(cf::SceneMode::kVq);
  cf::CarFormer<double> mv(cv, 30);
  cf::Trajectory tv = rand_traj(cv, rng);
  tv.vq[1] = cv.vq_codes;
  CHECK_THROWS_AS(mv.losses({{&tv}}), VocabOverflow);
}

TEST_CASE("greedy_pick stays inside the attribute span") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  cf::CarFormer<double> m(c, 32);
  Tensor<double> row({1, int64_t(cf::Vocab::kTotal)}, 0.0);
  row[cf::Vocab::kWyOff + 23] = 100.0;  // huge logit in the other span
  row[cf::Vocab::kWxOff + 12] = 1.0;
  CHECK(m.greedy_pick(row, cf::Attr::kWx) == 12);
  CHECK(m.greedy_pick(row, cf::Attr::kWy) == 23);
}

TEST_CASE("act: GRU waypoints and optional greedy LM ids") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  cf::CarFormer<double> m(c, 33);
  Rng rng(34, "a");
  const auto t = rand_traj(c, rng);

  const auto quiet = m.act(t, false);
  REQUIRE(quiet.gru_wp.size() == size_t(c.W));
  CHECK(quiet.lm_wp.empty());
  for (const auto& wp : quiet.gru_wp) {
    CHECK(std::isfinite(wp[0]));
    CHECK(std::isfinite(wp[1]));
  }

  const auto full = m.act(t, true);
  REQUIRE(full.lm_wp.size() == size_t(2 * c.W));
  for (int id : full.lm_wp) {
    CHECK(id >= 0);
    CHECK(id < 24);
  }
  // The GRU head is deterministic.
  CHECK(full.gru_wp[0][0] == quiet.gru_wp[0][0]);
  CHECK(full.gru_wp[size_t(c.W) - 1][1] == quiet.gru_wp[size_t(c.W) - 1][1]);
}

TEST_CASE("forecast_scene: continuous modes only, one vector per scene token") {
  auto c = small_cfg(cf::SceneMode::kSlots);
  cf::CarFormer<double> m(c, 35);
  Rng rng(36, "f");
  const auto t = rand_traj(c, rng);
  const auto z = m.forecast_scene(t);
  REQUIRE(z.size() == size_t(c.scene_count) * size_t(c.scene_dim));
  for (double v : z) CHECK(std::isfinite(v));

  auto cv = small_cfg(cf::SceneMode::kVq);
  cf::CarFormer<double> mv(cv, 35);
  const auto tv = rand_traj(cv, rng);
  CHECK_THROWS_AS(mv.forecast_scene(tv), ModeMismatch);
}

TEST_CASE("rollout: appends whole steps, deterministically") {
  auto c = small_cfg(cf::SceneMode::kSlots, 2);
  c.f = 1;
  c.lm_next_discrete = true;
  cf::CarFormer<double> m(c, 37);
  Rng rng(38, "r");
  const auto t0 = rand_traj(c, rng);

  const int prefix = 4 + c.scene_count + 2;
  const int per_step = 4 + c.scene_count + 2 + 2 * c.W;
  const auto empty = m.rollout(t0, 0);
  CHECK(int(empty.size()) == prefix);

  const auto r3 = m.rollout(t0, 3);
  REQUIRE(int(r3.size()) == prefix + 3 * per_step);

  // Appended structure: 2W waypoints, 4 discrete openings, K scenes, 2 routes.
  for (int s = 0; s < 3; ++s) {
    size_t at = size_t(prefix + s * per_step);
    for (int j = 0; j < 2 * c.W; ++j, ++at) {
      CHECK(r3[at].attr == (j % 2 == 0 ? cf::Attr::kWx : cf::Attr::kWy));
      CHECK(r3[at].id >= 0);
      CHECK(r3[at].id < 24);
    }
    const std::array<cf::Attr, 4> open{cf::Attr::kGx, cf::Attr::kGy,
                                       cf::Attr::kLight, cf::Attr::kSpeed};
    for (int j = 0; j < 4; ++j, ++at) CHECK(r3[at].attr == open[size_t(j)]);
    for (int k = 0; k < c.scene_count; ++k, ++at) {
      CHECK(r3[at].attr == cf::Attr::kScene);
      CHECK(r3[at].vec.size() == size_t(c.scene_dim));
    }
    for (int k = 0; k < 2; ++k, ++at) {
      CHECK(r3[at].attr == cf::Attr::kRoute);
      CHECK(r3[at].vec.size() == 6);
    }
  }

  const auto again = m.rollout(t0, 3);
  REQUIRE(again.size() == r3.size());
  for (size_t i = 0; i < r3.size(); ++i) {
    CHECK(again[i].id == r3[i].id);
    CHECK(again[i].attr == r3[i].attr);
    CHECK(again[i].vec == r3[i].vec);
  }
}

TEST_CASE("rollout: refuses wrong modes and wrong training setups") {
  Rng rng(39, "e");

  auto cv = small_cfg(cf::SceneMode::kVq, 2);
  cv.f = 1;
  cv.lm_next_discrete = true;
  cf::CarFormer<double> mv(cv, 40);
  CHECK_THROWS_AS(mv.rollout(rand_traj(cv, rng), 1), ModeMismatch);

  auto cf4 = small_cfg(cf::SceneMode::kSlots, 2);
  cf4.f = 4;
  cf4.lm_next_discrete = true;
  cf::CarFormer<double> mf(cf4, 40);
  CHECK_THROWS_AS(mf.rollout(rand_traj(cf4, rng), 1), RolloutModeUnavailable);

  auto cn = small_cfg(cf::SceneMode::kSlots, 2);
  cn.f = 1;
  cn.lm_next_discrete = false;
  cf::CarFormer<double> mn(cn, 40);
  CHECK_THROWS_AS(mn.rollout(rand_traj(cn, rng), 1), RolloutModeUnavailable);
}

TEST_CASE("checkpoint: losses survive a parameter round trip") {
  auto c = small_cfg(cf::SceneMode::kSlots, 2);
  c.lm_next_discrete = true;
  cf::CarFormer<double> m1(c, 41);
  Rng rng(42, "c");
  cf::Trajectory t0 = rand_traj(c, rng), t1 = rand_traj(c, rng);
  const std::vector<std::vector<const cf::Trajectory*>> batch{{&t0, &t1}};
  const double before = m1.losses(batch).parts.total;

  ser::Checkpoint ck;
  ck.config = c.to_json();
  auto r1 = m1.registry();
  ser::add_params(ck, r1, "model.");
  const auto path =
      (std::filesystem::temp_directory_path() / "slotdrive_test_cf.ckpt").string();
  ser::save_checkpoint(ck, path);

  const auto loaded = ser::load_checkpoint(path);
  const auto c2 = cf::BackboneConfig::from_json(loaded.config);
  CHECK(c2.train_steps == c.train_steps);
  CHECK(c2.lm_next_discrete == c.lm_next_discrete);
  cf::CarFormer<double> m2(c2, 999);  // different init, then overwritten
  auto r2 = m2.registry();
  ser::load_params(loaded, r2, "model.");
  CHECK(m2.losses(batch).parts.total == before);
  std::filesystem::remove(path);
}

TEST_CASE("config: JSON round trip keeps the mode and switches") {
  for (auto mode :
       {cf::SceneMode::kSlots, cf::SceneMode::kAttributes, cf::SceneMode::kVq}) {
    auto c = small_cfg(mode, 2);
    c.block_attention = false;
    c.lm_next_discrete = true;
    c.alpha = 7.5;
    const auto back = cf::BackboneConfig::from_json(c.to_json());
    CHECK(back.mode == mode);
    CHECK(back.block_attention == false);
    CHECK(back.lm_next_discrete == true);
    CHECK(back.alpha == doctest::Approx(7.5));
    CHECK(back.scene_count == c.scene_count);
    CHECK(back.train_steps == 2);
  }
}
