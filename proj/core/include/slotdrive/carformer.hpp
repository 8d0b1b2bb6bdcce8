#pragma once

// Autoregressive driving transformer over hybrid token sequences. One timestep
// is laid out as {goal_x, goal_y, light, speed, scene block, waypoints}:
// discrete attributes are embedded via per-attribute tables, continuous scene
// vectors (slots / object attributes / route descriptors) via small MLPs, and
// attention is causal except inside the scene block, which is fully
// bidirectional ("block attention"). Heads: a GRU that regresses W continuous
// waypoints, a masked LM head over a unioned discrete vocabulary, and a
// forecasting head that predicts the scene representation f steps ahead.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "slotdrive/autograd.hpp"
#include "slotdrive/layers.hpp"
#include "slotdrive/rng.hpp"

namespace slotdrive::cf {

using slotdrive::Rng;
using nn::Tensor;
using nn::Var;

// ---------------------------------------------------------------------------
// vocabulary and token layout
// ---------------------------------------------------------------------------

// Union vocabulary for the LM head; per-attribute spans, no leakage between
// them (the softmax is restricted to one span per position).
struct Vocab {
  static constexpr int kGx = 16, kGy = 16, kLight = 2, kSpeed = 14, kWx = 24,
                       kWy = 24;
  static constexpr int kGxOff = 0;
  static constexpr int kGyOff = kGxOff + kGx;      // 16
  static constexpr int kLightOff = kGyOff + kGy;   // 32
  static constexpr int kSpeedOff = kLightOff + kLight;  // 34
  static constexpr int kWxOff = kSpeedOff + kSpeed;     // 48
  static constexpr int kWyOff = kWxOff + kWx;           // 72
  static constexpr int kTotal = kWyOff + kWy;           // 96
};

enum class SceneMode { kSlots, kAttributes, kVq };

enum class Attr : uint8_t {
  kGx, kGy, kLight, kSpeed,
  kScene,  // continuous slot / object vector
  kRoute,  // continuous 6-dim route descriptor
  kVq,     // discrete scene code
  kWx, kWy,
};

inline bool attr_discrete(Attr a) {
  return a != Attr::kScene && a != Attr::kRoute;
}

// Union-vocab span for a discrete attribute (kVq has its own table; no span).
template <typename T>
nn::VocabSpan<T> attr_span(Attr a) {
  switch (a) {
    case Attr::kGx: return {Vocab::kGxOff, Vocab::kGx};
    case Attr::kGy: return {Vocab::kGyOff, Vocab::kGy};
    case Attr::kLight: return {Vocab::kLightOff, Vocab::kLight};
    case Attr::kSpeed: return {Vocab::kSpeedOff, Vocab::kSpeed};
    case Attr::kWx: return {Vocab::kWxOff, Vocab::kWx};
    case Attr::kWy: return {Vocab::kWyOff, Vocab::kWy};
    default: SD_CHECK(false, ModeMismatch, "attribute has no union-vocab span");
  }
  return {};
}

struct TokenInfo {
  Attr attr;
  int block = -1;  // block id, or -1 for causal-only tokens
};

// Fixed per-model token layout: `steps` repetitions of one step pattern.
struct TokenLayout {
  std::vector<TokenInfo> tokens;
  int step_len = 0;
  int steps = 1;
  int scene_tokens = 0;  // scene vectors (or VQ codes) per step
  int route_tokens = 0;  // 0 or 2
  int wp_tokens = 0;     // 2W

  int size() const { return static_cast<int>(tokens.size()); }
  // Position helpers (step-local structure), step s in [0, steps).
  int base(int s) const { return s * step_len; }
  int scene_begin(int s) const { return base(s) + 4; }
  int scene_end(int s) const { return scene_begin(s) + scene_tokens; }
  int route_begin(int s) const { return scene_end(s); }
  int wp_begin(int s) const { return route_begin(s) + route_tokens; }
  // Last token before the waypoint run (end of the scene block).
  int pre_wp(int s) const { return wp_begin(s) - 1; }
};

struct BackboneConfig {
  int H = 192;
  int layers = 4;
  int heads = 4;
  int mlp() const { return 4 * H; }
  SceneMode mode = SceneMode::kSlots;
  int scene_count = 7;   // K slots | max objects | G*G codes
  int scene_dim = 64;    // slot dim d (slots) | 6 (attributes) | unused (vq)
  int vq_codes = 512;    // C (vq mode)
  int W = 4;             // waypoints
  int f = 4;             // forecast horizon (timesteps)
  int train_steps = 1;   // timesteps per training sequence (2 for rollout models)
  bool block_attention = true;
  bool lm_next_discrete = false;  // next-step discrete loss (rollout models)
  double alpha = 40.0;   // forecast loss weight
  int gru_hidden = 64;
  // Optimizer settings.
  int batch = 64;
  int epochs = 30;
  double lr = 5e-5;
  double weight_decay = 1e-4;
  double clip = 1.0;
  int warmup_epochs = 5;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

// Layout for `steps` timesteps of the configured mode. Each step's scene block
// (scene vectors plus route descriptors; VQ codes in vq mode) gets a distinct
// block id when block attention is on.
TokenLayout build_layout(const BackboneConfig& cfg, int steps);

// allowed[i][j] = (j <= i) OR (i and j share a block id). (T,T), 1 = allowed.
// Throws OverlappingBlocks if a block id's positions are not contiguous.
Tensor<uint8_t> block_mask(const TokenLayout& layout);

// Plain lower-triangular mask of the same length (the no-blocks baseline).
Tensor<uint8_t> causal_mask(int len);

// Tile a (T,T) mask to (copies, T, T) for batched multi-head attention.
std::shared_ptr<Tensor<uint8_t>> tile_mask(const Tensor<uint8_t>& m, int64_t copies);

// ---------------------------------------------------------------------------
// assembled step data
// ---------------------------------------------------------------------------

// One quantized timestep with training targets. Continuous rows are row-major.
struct Trajectory {
  // Token content (local ids within each attribute's own vocabulary).
  int gx = 0, gy = 0, light = 0, speed = 0;
  std::vector<double> scene;       // scene_count*scene_dim (slots/attributes)
  std::vector<int> vq;             // scene_count codes (vq mode)
  std::array<double, 6> r1{}, r2{};
  std::vector<int> wp;             // 2W ids, alternating x and y, each < 24
  // Targets.
  std::vector<double> wp_cont;     // 2W continuous coords (x1,y1,x2,y2,...)
  std::vector<double> scene_future;  // scene at t+f (slots/attributes mode)
  std::vector<uint8_t> scene_future_valid;  // per scene vector (attributes)
  std::vector<int> vq_future;      // codes at t+f (vq mode)
  std::array<double, 6> r1_future{}, r2_future{};
  // Next-step discrete targets (rollout-capable training), -1 = absent.
  int gx_next = -1, gy_next = -1, light_next = -1, speed_next = -1;
};

// One decoded token of a rollout: either a discrete id or a continuous vector.
struct TokenValue {
  Attr attr;
  int id = -1;
  std::vector<double> vec;
};

struct LossBreakdown {
  double l_gru = 0, l_lm = 0, l_wp = 0, l_forecast = 0, l_next = 0, total = 0;
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename T>
struct CarFormer {
  BackboneConfig cfg;
  TokenLayout train_layout;  // cfg.train_steps steps

  // Per-attribute embedding tables.
  Var<T> emb_gx, emb_gy, emb_light, emb_speed, emb_wx, emb_wy;
  Var<T> emb_vq;                   // (C,H), vq mode
  nn::Mlp2<T> proj_scene;          // scene_dim -> H (slots/attributes)
  nn::Mlp2<T> proj_route;          // 6 -> H
  Var<T> pos_tok;                  // (step_len, H) within-step positions
  Var<T> pos_step;                 // (train_steps, H) step index (saturating)
  std::vector<nn::TransformerBlock<T>> blocks;
  nn::LayerNormLayer<T> ln_f;
  nn::LinearLayer<T> lm;           // H -> union vocab
  nn::LinearLayer<T> gru_init;     // H -> gru_hidden
  Var<T> gru_light;                // (2, gru_hidden) light-flag contribution
  nn::GruCell<T> gru;              // input 2 (current waypoint), hidden gru_hidden
  nn::LinearLayer<T> gru_out;      // gru_hidden -> 2 (delta)
  nn::LinearLayer<T> fore;         // H -> scene_dim | H -> C (vq)
  nn::LinearLayer<T> fore_route;   // H -> 6

  CarFormer(const BackboneConfig& c, uint64_t seed)
      : cfg(c), train_layout(build_layout(c, c.train_steps)) {
    Rng rng(seed, "carformer/init");
    const double es = 0.02;
    auto table = [&](int rows) {
      return nn::param(nn::randn_tensor<T>({rows, cfg.H}, rng, es));
    };
    emb_gx = table(Vocab::kGx);
    emb_gy = table(Vocab::kGy);
    emb_light = table(Vocab::kLight);
    emb_speed = table(Vocab::kSpeed);
    emb_wx = table(Vocab::kWx);
    emb_wy = table(Vocab::kWy);
    if (cfg.mode == SceneMode::kVq) emb_vq = table(cfg.vq_codes);
    if (cfg.mode != SceneMode::kVq) {
      proj_scene = nn::Mlp2<T>(cfg.scene_dim, cfg.H, cfg.H, rng, true, es);
      proj_route = nn::Mlp2<T>(6, cfg.H, cfg.H, rng, true, es);
    }
    pos_tok = table(train_layout.step_len);
    pos_step = table(cfg.train_steps);
    blocks.reserve(static_cast<size_t>(cfg.layers));
    for (int i = 0; i < cfg.layers; ++i)
      blocks.emplace_back(cfg.H, cfg.heads, cfg.mlp(), rng, es);
    ln_f = nn::LayerNormLayer<T>(cfg.H);
    lm = nn::LinearLayer<T>(cfg.H, Vocab::kTotal, rng, true, es);
    gru_init = nn::LinearLayer<T>(cfg.H, cfg.gru_hidden, rng, true, es);
    gru_light = nn::param(nn::randn_tensor<T>({2, cfg.gru_hidden}, rng, es));
    gru = nn::GruCell<T>(2, cfg.gru_hidden, rng);
    gru_out = nn::LinearLayer<T>(cfg.gru_hidden, 2, rng, true, es);
    const int fore_out = cfg.mode == SceneMode::kVq ? cfg.vq_codes : cfg.scene_dim;
    fore = nn::LinearLayer<T>(cfg.H, fore_out, rng, true, es);
    fore_route = nn::LinearLayer<T>(cfg.H, 6, rng, true, es);
  }

  // Embed a batch of samples, each a sequence of layout.steps trajectories.
  // Returns (B, T, H) with positional encodings added.
  Var<T> embed(const std::vector<std::vector<const Trajectory*>>& samples,
               const TokenLayout& layout) const {
    const int64_t B = static_cast<int64_t>(samples.size());
    SD_CHECK(B > 0, ShapeMismatch, "empty batch");
    for (const auto& s : samples)
      SD_SHAPE(static_cast<int>(s.size()) == layout.steps,
               "sample has " << s.size() << " steps, layout " << layout.steps);
    const int64_t H = cfg.H, T_ = layout.size();

    std::vector<Var<T>> pieces;  // token-major (B rows per token position)
    auto gather_ids = [&](Var<T> tbl, auto&& get, int vocab) {
      std::vector<int64_t> ids(static_cast<size_t>(B));
      for (int64_t b = 0; b < B; ++b) {
        const int v = get(b);
        SD_CHECK(v >= 0 && v < vocab, VocabOverflow, "id " << v << " of " << vocab);
        ids[static_cast<size_t>(b)] = v;
      }
      pieces.push_back(nn::gather_rows(tbl, std::move(ids)));
    };

    for (int s = 0; s < layout.steps; ++s) {
      auto step = [&](int64_t b) -> const Trajectory& {
        return *samples[static_cast<size_t>(b)][static_cast<size_t>(s)];
      };
      gather_ids(emb_gx, [&](int64_t b) { return step(b).gx; }, Vocab::kGx);
      gather_ids(emb_gy, [&](int64_t b) { return step(b).gy; }, Vocab::kGy);
      gather_ids(emb_light, [&](int64_t b) { return step(b).light; }, Vocab::kLight);
      gather_ids(emb_speed, [&](int64_t b) { return step(b).speed; }, Vocab::kSpeed);

      if (cfg.mode == SceneMode::kVq) {
        std::vector<int64_t> ids;
        ids.reserve(static_cast<size_t>(layout.scene_tokens * B));
        for (int k = 0; k < layout.scene_tokens; ++k)
          for (int64_t b = 0; b < B; ++b) {
            const auto& v = step(b).vq;
            SD_SHAPE(static_cast<int>(v.size()) == layout.scene_tokens,
                     "vq token count " << v.size());
            SD_CHECK(v[static_cast<size_t>(k)] >= 0 &&
                         v[static_cast<size_t>(k)] < cfg.vq_codes,
                     VocabOverflow, "vq code " << v[static_cast<size_t>(k)]);
            ids.push_back(v[static_cast<size_t>(k)]);
          }
        pieces.push_back(nn::gather_rows(emb_vq, std::move(ids)));
      } else {
        Tensor<T> sc({int64_t(layout.scene_tokens) * B, cfg.scene_dim});
        for (int k = 0; k < layout.scene_tokens; ++k)
          for (int64_t b = 0; b < B; ++b) {
            const auto& v = step(b).scene;
            SD_SHAPE(static_cast<int>(v.size()) ==
                         layout.scene_tokens * cfg.scene_dim,
                     "scene size " << v.size());
            for (int j = 0; j < cfg.scene_dim; ++j)
              sc[(int64_t(k) * B + b) * cfg.scene_dim + j] =
                  T(v[static_cast<size_t>(k * cfg.scene_dim + j)]);
          }
        pieces.push_back(proj_scene.forward(nn::constant(std::move(sc))));
        Tensor<T> rt({2 * B, 6});
        for (int64_t b = 0; b < B; ++b)
          for (int j = 0; j < 6; ++j) {
            rt[b * 6 + j] = T(step(b).r1[static_cast<size_t>(j)]);
            rt[(B + b) * 6 + j] = T(step(b).r2[static_cast<size_t>(j)]);
          }
        pieces.push_back(proj_route.forward(nn::constant(std::move(rt))));
      }

      for (int j = 0; j < layout.wp_tokens; ++j)
        gather_ids(j % 2 == 0 ? emb_wx : emb_wy,
                   [&](int64_t b) {
                     const auto& w = step(b).wp;
                     SD_SHAPE(static_cast<int>(w.size()) == layout.wp_tokens,
                              "wp token count " << w.size());
                     return w[static_cast<size_t>(j)];
                   },
                   Vocab::kWx);
    }

    auto seq = nn::concat_dim0(pieces);  // (T*B, H) token-major
    std::vector<int64_t> perm(static_cast<size_t>(B * T_));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < T_; ++t)
        perm[static_cast<size_t>(b * T_ + t)] = t * B + b;
    auto x = nn::reshape(nn::gather_rows(seq, std::move(perm)), {B, T_, H});

    std::vector<int64_t> tok_ids(static_cast<size_t>(T_)),
        step_ids(static_cast<size_t>(T_));
    for (int64_t t = 0; t < T_; ++t) {
      tok_ids[static_cast<size_t>(t)] = t % layout.step_len;
      step_ids[static_cast<size_t>(t)] =
          std::min<int64_t>(t / layout.step_len, cfg.train_steps - 1);
    }
    x = nn::add(x, nn::gather_rows(pos_tok, std::move(tok_ids)));
    x = nn::add(x, nn::gather_rows(pos_step, std::move(step_ids)));
    return x;
  }

  // Transformer stack over embedded tokens; (B,T,H) -> (B,T,H) hidden states.
  Var<T> backbone(Var<T> x, std::shared_ptr<Tensor<uint8_t>> mask) const {
    const int64_t B = x->value.dim(0), T_ = x->value.dim(1);
    SD_SHAPE(mask && mask->rank() == 3 && mask->dim(0) == B * cfg.heads &&
                 mask->dim(1) == T_ && mask->dim(2) == T_,
             "attention mask shape");
    for (const auto& blk : blocks) x = blk.forward(x, mask);
    return ln_f.forward(x);
  }

  // GRU head: W accumulated 2-D deltas from the hidden state at the last
  // scene-block token, with the light flag folded in. h_rows (B,H),
  // light ids in {0,1}. Returns (W*B, 2) token-major (waypoint-major) coords.
  Var<T> gru_waypoints(Var<T> h_rows, const std::vector<int64_t>& light) const {
    const int64_t B = h_rows->value.dim(0);
    auto h = nn::add(gru_init.forward(h_rows),
                     nn::gather_rows(gru_light, light));
    Var<T> cur = nn::constant(Tensor<T>({B, 2}, T(0)));
    std::vector<Var<T>> outs;
    for (int i = 0; i < cfg.W; ++i) {
      h = gru.forward(cur, h);
      cur = nn::add(cur, gru_out.forward(h));
      outs.push_back(cur);
    }
    return nn::concat_dim0(outs);
  }

  // Masked LM logits for the given hidden rows; one union-vocab row each.
  Var<T> lm_logits(Var<T> h_rows) const { return lm.forward(h_rows); }

  // Greedy pick within an attribute's span from one logits row (values only).
  int greedy_pick(const Tensor<T>& logits_row, Attr a) const {
    const auto sp = attr_span<T>(a);
    int64_t best = sp.off;
    for (int64_t c = sp.off; c < sp.off + sp.len; ++c)
      if (logits_row[c] > logits_row[best]) best = c;
    return static_cast<int>(best - sp.off);  // local id
  }

  nn::ParamRegistry<T> registry() const {
    nn::ParamRegistry<T> r;
    r.add("emb.gx", emb_gx);
    r.add("emb.gy", emb_gy);
    r.add("emb.light", emb_light);
    r.add("emb.speed", emb_speed);
    r.add("emb.wx", emb_wx);
    r.add("emb.wy", emb_wy);
    if (emb_vq) r.add("emb.vq", emb_vq);
    if (cfg.mode != SceneMode::kVq) {
      proj_scene.reg(r, "proj.scene");
      proj_route.reg(r, "proj.route");
    }
    r.add("pos.tok", pos_tok);
    r.add("pos.step", pos_step);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].reg(r, "blk" + std::to_string(i));
    ln_f.reg(r, "ln_f");
    lm.reg(r, "lm");
    gru_init.reg(r, "gru.init");
    r.add("gru.light", gru_light);
    gru.reg(r, "gru.cell");
    gru_out.reg(r, "gru.out");
    fore.reg(r, "fore");
    fore_route.reg(r, "fore.route");
    return r;
  }

  // -------------------------------------------------------------------------
  // training losses
  // -------------------------------------------------------------------------

  struct TrainOut {
    Var<T> loss;  // batch-mean total, for backward
    LossBreakdown parts;
  };

  // Teacher-forced losses over a batch of layout-shaped samples.
  TrainOut losses(const std::vector<std::vector<const Trajectory*>>& samples) const {
    const TokenLayout& L = train_layout;
    const int64_t B = static_cast<int64_t>(samples.size());
    const int64_t T_ = L.size();
    auto x = embed(samples, L);
    auto mask = tile_mask(cfg.block_attention ? block_mask(L) : causal_mask(L.size()),
                          B * cfg.heads);
    auto h = backbone(x, mask);
    auto h2 = nn::reshape(h, {B * T_, cfg.H});

    auto rows_at = [&](const std::vector<int>& positions) {
      std::vector<int64_t> ids;
      ids.reserve(positions.size() * static_cast<size_t>(B));
      for (int p : positions)
        for (int64_t b = 0; b < B; ++b) ids.push_back(b * T_ + p);
      return nn::gather_rows(h2, std::move(ids));
    };

    // GRU loss: per step, from the pre-waypoint hidden state.
    Var<T> l_gru;
    for (int s = 0; s < L.steps; ++s) {
      std::vector<int64_t> light(static_cast<size_t>(B));
      for (int64_t b = 0; b < B; ++b)
        light[static_cast<size_t>(b)] =
            samples[static_cast<size_t>(b)][static_cast<size_t>(s)]->light;
      auto pred = gru_waypoints(rows_at({L.pre_wp(s)}), light);  // (W*B,2)
      Tensor<T> tgt({int64_t(cfg.W) * B, 2});
      for (int i = 0; i < cfg.W; ++i)
        for (int64_t b = 0; b < B; ++b) {
          const auto& wc = samples[static_cast<size_t>(b)][static_cast<size_t>(s)]->wp_cont;
          SD_SHAPE(static_cast<int>(wc.size()) == 2 * cfg.W, "wp_cont size");
          tgt[(int64_t(i) * B + b) * 2 + 0] = T(wc[static_cast<size_t>(2 * i)]);
          tgt[(int64_t(i) * B + b) * 2 + 1] = T(wc[static_cast<size_t>(2 * i + 1)]);
        }
      auto l = nn::l1_sum(pred, tgt);
      l_gru = l_gru ? nn::add(l_gru, l) : l;
    }

    // LM loss over waypoint tokens (next-token, teacher-forced).
    std::vector<int> lm_pos;
    std::vector<int64_t> lm_tgt;
    std::vector<nn::VocabSpan<T>> lm_spans;
    for (int s = 0; s < L.steps; ++s)
      for (int j = 0; j < L.wp_tokens; ++j) {
        lm_pos.push_back(L.pre_wp(s) + j);  // hidden predicting token at +1
        const Attr a = j % 2 == 0 ? Attr::kWx : Attr::kWy;
        const auto sp = attr_span<T>(a);
        for (int64_t b = 0; b < B; ++b) {
          const int local =
              samples[static_cast<size_t>(b)][static_cast<size_t>(s)]
                  ->wp[static_cast<size_t>(j)];
          lm_tgt.push_back(sp.off + local);
          lm_spans.push_back(sp);
        }
      }
    // One gather covers all rows; positions are expanded per batch row inside
    // rows_at, so targets/spans above are laid out the same way.
    auto l_lm = nn::cross_entropy_sum(lm_logits(rows_at(lm_pos)),
                                      std::move(lm_tgt), std::move(lm_spans));

    // Next-step discrete loss (rollout-capable models): the 4 tokens opening
    // step s+1 are predicted from the hiddens immediately preceding them.
    Var<T> l_next;
    if (cfg.lm_next_discrete && L.steps > 1) {
      std::vector<int> pos;
      std::vector<int64_t> tgt;
      std::vector<nn::VocabSpan<T>> spans;
      const std::array<Attr, 4> open{Attr::kGx, Attr::kGy, Attr::kLight,
                                     Attr::kSpeed};
      for (int s = 1; s < L.steps; ++s)
        for (int j = 0; j < 4; ++j) {
          pos.push_back(L.base(s) - 1 + j);
          const auto sp = attr_span<T>(open[static_cast<size_t>(j)]);
          for (int64_t b = 0; b < B; ++b) {
            const auto& tr =
                *samples[static_cast<size_t>(b)][static_cast<size_t>(s)];
            const int local = j == 0   ? tr.gx
                              : j == 1 ? tr.gy
                              : j == 2 ? tr.light
                                       : tr.speed;
            tgt.push_back(sp.off + local);
            spans.push_back(sp);
          }
        }
      l_next = nn::cross_entropy_sum(lm_logits(rows_at(pos)), std::move(tgt),
                                     std::move(spans));
    }

    // Forecast loss at scene positions, per step.
    Var<T> l_fore;
    for (int s = 0; s < L.steps; ++s) {
      std::vector<int> pos;
      for (int p = L.scene_begin(s); p < L.scene_end(s); ++p) pos.push_back(p);
      auto f_rows = fore.forward(rows_at(pos));  // (scene*B, out)
      if (cfg.mode == SceneMode::kVq) {
        std::vector<int64_t> tgt;
        tgt.reserve(pos.size() * static_cast<size_t>(B));
        for (int k = 0; k < L.scene_tokens; ++k)
          for (int64_t b = 0; b < B; ++b) {
            const auto& v =
                samples[static_cast<size_t>(b)][static_cast<size_t>(s)]->vq_future;
            SD_SHAPE(static_cast<int>(v.size()) == L.scene_tokens,
                     "vq_future size " << v.size());
            tgt.push_back(v[static_cast<size_t>(k)]);
          }
        auto l = nn::cross_entropy_sum(f_rows, std::move(tgt));
        l_fore = l_fore ? nn::add(l_fore, l) : l;
      } else {
        Tensor<T> tgt({int64_t(L.scene_tokens) * B, cfg.scene_dim});
        Tensor<T> msk({int64_t(L.scene_tokens) * B, cfg.scene_dim});
        for (int k = 0; k < L.scene_tokens; ++k)
          for (int64_t b = 0; b < B; ++b) {
            const auto& tr =
                *samples[static_cast<size_t>(b)][static_cast<size_t>(s)];
            SD_SHAPE(static_cast<int>(tr.scene_future.size()) ==
                         L.scene_tokens * cfg.scene_dim,
                     "scene_future size " << tr.scene_future.size());
            const bool ok = tr.scene_future_valid.empty() ||
                            tr.scene_future_valid[static_cast<size_t>(k)] != 0;
            for (int j = 0; j < cfg.scene_dim; ++j) {
              const int64_t at = (int64_t(k) * B + b) * cfg.scene_dim + j;
              tgt[at] = T(tr.scene_future[static_cast<size_t>(k * cfg.scene_dim + j)]);
              msk[at] = ok ? T(1) : T(0);
            }
          }
        auto l = nn::scale(nn::mse_sum_masked(f_rows, tgt, msk),
                           T(1) / T(cfg.scene_dim));
        l_fore = l_fore ? nn::add(l_fore, l) : l;
        // Route forecast (rollout-capable models only).
        if (cfg.lm_next_discrete) {
          auto r_rows = fore_route.forward(
              rows_at({L.route_begin(s), L.route_begin(s) + 1}));  // (2B,6)
          Tensor<T> rt({2 * B, 6});
          for (int64_t b = 0; b < B; ++b) {
            const auto& tr =
                *samples[static_cast<size_t>(b)][static_cast<size_t>(s)];
            for (int j = 0; j < 6; ++j) {
              rt[b * 6 + j] = T(tr.r1_future[static_cast<size_t>(j)]);
              rt[(B + b) * 6 + j] = T(tr.r2_future[static_cast<size_t>(j)]);
            }
          }
          auto lr = nn::scale(nn::mse_sum(r_rows, rt), T(1) / T(6));
          l_fore = nn::add(l_fore, lr);
        }
      }
    }

    // Batch-mean reduction; total = l_wp + alpha * l_forecast (+ l_next).
    const T invB = T(1) / T(B);
    l_gru = nn::scale(l_gru, invB);
    l_lm = nn::scale(l_lm, invB);
    l_fore = nn::scale(l_fore, invB);
    if (l_next) l_next = nn::scale(l_next, invB);
    auto l_wp = nn::add(l_gru, l_lm);
    auto total = nn::add(l_wp, nn::scale(l_fore, T(cfg.alpha)));
    if (l_next) total = nn::add(total, l_next);

    TrainOut out;
    out.loss = total;
    out.parts.l_gru = double(l_gru->value[0]);
    out.parts.l_lm = double(l_lm->value[0]);
    out.parts.l_wp = out.parts.l_gru + out.parts.l_lm;
    out.parts.l_forecast = double(l_fore->value[0]);
    out.parts.l_next = l_next ? double(l_next->value[0]) : 0.0;
    out.parts.total =
        out.parts.l_wp + cfg.alpha * out.parts.l_forecast + out.parts.l_next;
    return out;
  }

  // -------------------------------------------------------------------------
  // inference
  // -------------------------------------------------------------------------

  // Waypoints for one assembled step (eval path): returns W (x,y) pairs from
  // the GRU head, plus greedy LM waypoint ids if wanted.
  struct ActOut {
    std::vector<std::array<double, 2>> gru_wp;  // W pairs
    std::vector<int> lm_wp;                     // 2W local ids (greedy)
  };

  ActOut act(const Trajectory& t, bool want_lm) const {
    TokenLayout L1 = build_layout(cfg, 1);
    // The prefix up to the end of the scene block is all that is attended to
    // for the first prediction; run the full single-step layout with the
    // waypoint tokens present only when decoding them autoregressively.
    const int prefix = L1.wp_begin(0);
    std::vector<TokenValue> vals = prefix_values(t);
    ActOut out;
    // GRU head from the prefix hidden.
    auto h = forward_values(vals);
    auto h2 = nn::reshape(h, {int64_t(vals.size()), cfg.H});
    auto hrow = nn::gather_rows(h2, {int64_t(prefix - 1)});
    auto wp = gru_waypoints(hrow, {t.light});  // (W,2)
    out.gru_wp.resize(static_cast<size_t>(cfg.W));
    for (int i = 0; i < cfg.W; ++i)
      out.gru_wp[static_cast<size_t>(i)] = {double(wp->value[2 * i]),
                                            double(wp->value[2 * i + 1])};
    if (want_lm) {
      for (int j = 0; j < 2 * cfg.W; ++j) {
        auto hh = forward_values(vals);
        auto last = nn::gather_rows(
            nn::reshape(hh, {int64_t(vals.size()), cfg.H}),
            {int64_t(vals.size()) - 1});
        auto logits = lm_logits(last);
        const Attr a = j % 2 == 0 ? Attr::kWx : Attr::kWy;
        const int local = greedy_pick(logits->value, a);
        out.lm_wp.push_back(local);
        vals.push_back(TokenValue{a, local, {}});
      }
    }
    return out;
  }

  // Scene forecast for one assembled step: the forecasting head read at the
  // step's scene rows, predicting the scene block at t+f. Continuous scene
  // modes only; returns scene_count*scene_dim doubles.
  std::vector<double> forecast_scene(const Trajectory& t) const {
    SD_CHECK(cfg.mode != SceneMode::kVq, ModeMismatch,
             "continuous scene forecast needs the slots or attributes mode");
    std::vector<TokenValue> vals = prefix_values(t);
    auto h = forward_values(vals);
    auto h2 = nn::reshape(h, {int64_t(vals.size()), cfg.H});
    std::vector<int64_t> rows(static_cast<size_t>(cfg.scene_count));
    for (int k = 0; k < cfg.scene_count; ++k)
      rows[static_cast<size_t>(k)] = 4 + k;
    auto z = fore.forward(nn::gather_rows(h2, std::move(rows)));
    std::vector<double> out(static_cast<size_t>(cfg.scene_count) *
                            static_cast<size_t>(cfg.scene_dim));
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = double(z->value[static_cast<int64_t>(i)]);
    return out;
  }

  // Autoregressive rollout: start from the step prefix (goal, light, speed,
  // scene block; no waypoint tokens) and append n full steps, each decoded as
  // 2W waypoint ids + next (gx, gy, light, speed) ids via the LM head, then
  // the next scene block (scene vectors + routes) in one shot via the
  // forecasting heads. Requires a model trained with f=1 and the next-step
  // discrete loss. Deterministic (greedy).
  std::vector<TokenValue> rollout(const Trajectory& t0, int n) const {
    SD_CHECK(cfg.mode == SceneMode::kSlots, ModeMismatch,
             "rollout requires the slots scene mode");
    SD_CHECK(cfg.f == 1 && cfg.lm_next_discrete, RolloutModeUnavailable,
             "rollout requires a model trained with f=1 and next-step loss");
    std::vector<TokenValue> vals = prefix_values(t0);
    for (int step = 0; step < n; ++step) {
      // Waypoints, then the next step's discrete opening, token by token.
      const std::array<Attr, 4> open{Attr::kGx, Attr::kGy, Attr::kLight,
                                     Attr::kSpeed};
      for (int j = 0; j < 2 * cfg.W + 4; ++j) {
        const Attr a = j < 2 * cfg.W
                           ? (j % 2 == 0 ? Attr::kWx : Attr::kWy)
                           : open[static_cast<size_t>(j - 2 * cfg.W)];
        auto h = forward_values(vals);
        auto last = nn::gather_rows(
            nn::reshape(h, {int64_t(vals.size()), cfg.H}),
            {int64_t(vals.size()) - 1});
        const int local = greedy_pick(lm_logits(last)->value, a);
        vals.push_back(TokenValue{a, local, {}});
      }
      // Scene block of the next step in one shot from the forecasting heads,
      // read at the previous step's scene positions.
      auto h = forward_values(vals);
      auto h2 = nn::reshape(h, {int64_t(vals.size()), cfg.H});
      // The previous step's scene block sits right before the 2W+4 tokens
      // just decoded: K scene vectors then the two routes.
      const int prev_scene =
          static_cast<int>(vals.size()) - (2 * cfg.W + 4) - (cfg.scene_count + 2);
      std::vector<int64_t> scene_rows(static_cast<size_t>(cfg.scene_count));
      for (int k = 0; k < cfg.scene_count; ++k)
        scene_rows[static_cast<size_t>(k)] = prev_scene + k;
      auto z = fore.forward(nn::gather_rows(h2, std::move(scene_rows)));
      for (int k = 0; k < cfg.scene_count; ++k) {
        TokenValue tv{Attr::kScene, -1, std::vector<double>(
                                            static_cast<size_t>(cfg.scene_dim))};
        for (int j = 0; j < cfg.scene_dim; ++j)
          tv.vec[static_cast<size_t>(j)] = double(z->value[k * cfg.scene_dim + j]);
        vals.push_back(std::move(tv));
      }
      auto r = fore_route.forward(nn::gather_rows(
          h2, {int64_t(prev_scene + cfg.scene_count),
               int64_t(prev_scene + cfg.scene_count + 1)}));
      for (int k = 0; k < 2; ++k) {
        TokenValue tv{Attr::kRoute, -1, std::vector<double>(6)};
        for (int j = 0; j < 6; ++j)
          tv.vec[static_cast<size_t>(j)] = double(r->value[k * 6 + j]);
        vals.push_back(std::move(tv));
      }
    }
    return vals;
  }

  // Step prefix (no waypoint tokens) as token values.
  std::vector<TokenValue> prefix_values(const Trajectory& t) const {
    std::vector<TokenValue> vals;
    vals.push_back({Attr::kGx, t.gx, {}});
    vals.push_back({Attr::kGy, t.gy, {}});
    vals.push_back({Attr::kLight, t.light, {}});
    vals.push_back({Attr::kSpeed, t.speed, {}});
    if (cfg.mode == SceneMode::kVq) {
      SD_SHAPE(static_cast<int>(t.vq.size()) == cfg.scene_count, "vq size");
      for (int v : t.vq) vals.push_back({Attr::kVq, v, {}});
    } else {
      SD_SHAPE(static_cast<int>(t.scene.size()) == cfg.scene_count * cfg.scene_dim,
               "scene size");
      for (int k = 0; k < cfg.scene_count; ++k) {
        TokenValue tv{Attr::kScene, -1, {}};
        tv.vec.assign(t.scene.begin() + k * cfg.scene_dim,
                      t.scene.begin() + (k + 1) * cfg.scene_dim);
        vals.push_back(std::move(tv));
      }
      vals.push_back({Attr::kRoute, -1, {t.r1.begin(), t.r1.end()}});
      vals.push_back({Attr::kRoute, -1, {t.r2.begin(), t.r2.end()}});
    }
    return vals;
  }

  // Forward a value-level sequence (batch 1). Builds the layout-aligned
  // positional ids and block mask for the current (possibly partial) step
  // structure, embeds each token, and runs the backbone. Returns (1,T,H).
  Var<T> forward_values(const std::vector<TokenValue>& vals) const {
    const int64_t T_ = static_cast<int64_t>(vals.size());
    const int L = train_layout.step_len;
    std::vector<Var<T>> pieces;
    pieces.reserve(static_cast<size_t>(T_));
    std::vector<double> scene_buf, route_buf;
    for (const auto& v : vals) {
      switch (v.attr) {
        case Attr::kGx: pieces.push_back(nn::gather_rows(emb_gx, {v.id})); break;
        case Attr::kGy: pieces.push_back(nn::gather_rows(emb_gy, {v.id})); break;
        case Attr::kLight:
          pieces.push_back(nn::gather_rows(emb_light, {v.id}));
          break;
        case Attr::kSpeed:
          pieces.push_back(nn::gather_rows(emb_speed, {v.id}));
          break;
        case Attr::kWx: pieces.push_back(nn::gather_rows(emb_wx, {v.id})); break;
        case Attr::kWy: pieces.push_back(nn::gather_rows(emb_wy, {v.id})); break;
        case Attr::kVq: pieces.push_back(nn::gather_rows(emb_vq, {v.id})); break;
        case Attr::kScene: {
          Tensor<T> x({1, cfg.scene_dim});
          SD_SHAPE(static_cast<int>(v.vec.size()) == cfg.scene_dim, "scene dim");
          for (int j = 0; j < cfg.scene_dim; ++j) x[j] = T(v.vec[static_cast<size_t>(j)]);
          pieces.push_back(proj_scene.forward(nn::constant(std::move(x))));
          break;
        }
        case Attr::kRoute: {
          Tensor<T> x({1, 6});
          SD_SHAPE(v.vec.size() == 6, "route dim");
          for (int j = 0; j < 6; ++j) x[j] = T(v.vec[static_cast<size_t>(j)]);
          pieces.push_back(proj_route.forward(nn::constant(std::move(x))));
          break;
        }
      }
    }
    auto x = nn::reshape(nn::concat_dim0(pieces), {int64_t(1), T_, cfg.H});
    std::vector<int64_t> tok_ids(static_cast<size_t>(T_)),
        step_ids(static_cast<size_t>(T_));
    std::vector<int> block(static_cast<size_t>(T_), -1);
    for (int64_t t = 0; t < T_; ++t) {
      tok_ids[static_cast<size_t>(t)] = t % L;
      step_ids[static_cast<size_t>(t)] =
          std::min<int64_t>(t / L, cfg.train_steps - 1);
      if (cfg.block_attention) {
        const int64_t off = t % L;
        if (off >= 4 && off < 4 + train_layout.scene_tokens + train_layout.route_tokens)
          block[static_cast<size_t>(t)] = static_cast<int>(t / L);
      }
    }
    x = nn::add(x, nn::gather_rows(pos_tok, std::move(tok_ids)));
    x = nn::add(x, nn::gather_rows(pos_step, std::move(step_ids)));
    Tensor<uint8_t> m({T_, T_});
    for (int64_t i = 0; i < T_; ++i)
      for (int64_t j = 0; j < T_; ++j)
        m[i * T_ + j] =
            (j <= i || (block[static_cast<size_t>(i)] >= 0 &&
                        block[static_cast<size_t>(i)] == block[static_cast<size_t>(j)]))
                ? 1
                : 0;
    return backbone(x, tile_mask(m, cfg.heads));
  }
};

}  // namespace slotdrive::cf
