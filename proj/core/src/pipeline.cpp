#include "slotdrive/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "slotdrive/metrics.hpp"
#include "slotdrive/optim.hpp"
#include "slotdrive/serialize.hpp"

namespace slotdrive::pipe {

namespace fs = std::filesystem;
using nn::Tensor;

// ---------------------------------------------------------------------------
// episode preparation
// ---------------------------------------------------------------------------

PreppedEpisode prep_episode(data::EpisodeData ep, const bev::BevConfig& cfg,
                            bool enlarge, bool keep_frames) {
  PreppedEpisode out;
  out.S = cfg.grid;
  bev::Colorizer col(ep.seed, cfg.grid);
  out.rgb.reserve(ep.steps.size());
  for (auto& rec : ep.steps) {
    SD_CHECK(rec.frame.S == cfg.grid, ShapeMismatch,
             "episode frame side " << rec.frame.S << " != config grid " << cfg.grid);
    if (enlarge) bev::enlarge_vehicles(rec.frame, cfg.enlarge_px());
    const std::vector<float> rgbf = col.colorize(rec.frame);
    std::vector<uint8_t> bytes(rgbf.size());
    for (size_t i = 0; i < rgbf.size(); ++i)
      bytes[i] = static_cast<uint8_t>(std::lround(255.0f * rgbf[i]));
    out.rgb.push_back(std::move(bytes));
    if (!keep_frames) {
      rec.frame.data.clear();
      rec.frame.data.shrink_to_fit();
    }
  }
  out.ep = std::move(ep);
  return out;
}

EpisodeBundle load_bundle(const std::string& dataset_dir, bool enlarge,
                          bool keep_frames, int max_episodes) {
  EpisodeBundle b;
  b.dataset_dir = dataset_dir;
  b.man = data::load_manifest(dataset_dir);
  b.bcfg.grid = b.man.grid;
  b.bcfg.ppm = b.man.ppm;
  b.enlarge = enlarge;
  int n = static_cast<int>(b.man.episodes.size());
  if (max_episodes > 0 && max_episodes < n) {
    // Keep the split proportions while shrinking: cap each region.
    const double scale = double(max_episodes) / double(n);
    data::Manifest m2 = b.man;
    m2.train_end = std::max(1, static_cast<int>(std::lround(b.man.train_end * scale)));
    m2.val_end = std::max(m2.train_end + 1,
                          static_cast<int>(std::lround(b.man.val_end * scale)));
    m2.val_end = std::min(m2.val_end, max_episodes);
    m2.episodes.clear();
    // train region, then val region, then whatever test budget remains
    for (int i = 0; i < m2.train_end; ++i) m2.episodes.push_back(b.man.episodes[size_t(i)]);
    for (int i = b.man.train_end; i < b.man.train_end + (m2.val_end - m2.train_end); ++i)
      m2.episodes.push_back(b.man.episodes[size_t(i)]);
    for (int i = b.man.val_end;
         i < static_cast<int>(b.man.episodes.size()) &&
         static_cast<int>(m2.episodes.size()) < max_episodes;
         ++i)
      m2.episodes.push_back(b.man.episodes[size_t(i)]);
    b.man = std::move(m2);
    n = static_cast<int>(b.man.episodes.size());
  }
  b.eps.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Indices into the (possibly re-based) manifest refer to its episode list.
    data::EpisodeData ep = data::load_episode(dataset_dir, b.man, i);
    b.eps.push_back(prep_episode(std::move(ep), b.bcfg, enlarge, keep_frames));
  }
  return b;
}

Tensor<float> rgb_batch(const std::vector<const std::vector<uint8_t>*>& frames,
                        int S) {
  const int64_t B = static_cast<int64_t>(frames.size());
  const int64_t P = static_cast<int64_t>(3) * S * S;
  Tensor<float> out({B, 3, S, S});
  for (int64_t b = 0; b < B; ++b) {
    const auto& src = *frames[static_cast<size_t>(b)];
    SD_CHECK(static_cast<int64_t>(src.size()) == P, ShapeMismatch,
             "rgb frame byte count");
    float* dst = out.ptr() + b * P;
    for (int64_t i = 0; i < P; ++i) dst[i] = float(src[static_cast<size_t>(i)]) / 255.0f;
  }
  return out;
}

Tensor<float> box_downsample(const Tensor<float>& x, int factor) {
  SD_CHECK(factor >= 1, ConfigError, "box_downsample factor");
  if (factor == 1) return x;
  const int64_t B = x.dim(0), C = x.dim(1), S = x.dim(2);
  SD_CHECK(x.dim(3) == S && S % factor == 0, ShapeMismatch, "box_downsample shape");
  const int64_t s = S / factor;
  Tensor<float> out({B, C, s, s});
  const double inv = 1.0 / (double(factor) * factor);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const float* src = x.ptr() + bc * S * S;
    float* dst = out.ptr() + bc * s * s;
    for (int64_t i = 0; i < s; ++i)
      for (int64_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (int di = 0; di < factor; ++di)
          for (int dj = 0; dj < factor; ++dj)
            acc += src[(i * factor + di) * S + (j * factor + dj)];
        dst[i * s + j] = float(acc * inv);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// attribute quantizers
// ---------------------------------------------------------------------------

quant::QuantizerSet fit_quantizers_for(const EpisodeBundle& b, uint64_t seed) {
  quant::AttributeSamples s;
  for (int i : b.split("train")) {
    for (const auto& rec : b.eps[static_cast<size_t>(i)].ep.steps) {
      s.speeds.push_back(rec.ego_v);
      s.lights.push_back(double(rec.light));
      s.targets.push_back({rec.target_x, rec.target_y});
      for (size_t w = 0; w + 1 < rec.waypoints.size(); w += 2)
        s.waypoints.push_back({rec.waypoints[w], rec.waypoints[w + 1]});
    }
  }
  return quant::fit_driving_quantizers(s, seed);
}

// ---------------------------------------------------------------------------
// slot-model training
// ---------------------------------------------------------------------------

void save_savi(const savi::SaviModel<float>& m, bool enlarge, uint64_t seed,
               const std::string& path) {
  ser::Checkpoint ck;
  ck.config["kind"] = "savi";
  ck.config["model"] = m.cfg.to_json();
  ck.config["enlarge"] = enlarge;
  ck.config["seed"] = seed;
  ser::add_params(ck, m.registry());
  ser::save_checkpoint(ck, path);
}

savi::SaviModel<float> load_savi(const std::string& path, bool* enlarge) {
  ser::Checkpoint ck = ser::load_checkpoint(path);
  SD_CHECK(ck.config.value("kind", "") == "savi", ConfigError,
           "checkpoint at '" << path << "' is not a slot-model checkpoint");
  savi::SaviModel<float> m(savi::SaviConfig::from_json(ck.config.at("model")),
                           ck.config.value("seed", uint64_t{0}));
  auto reg = m.registry();
  ser::load_params(ck, reg);
  if (enlarge) *enlarge = ck.config.value("enlarge", true);
  return m;
}

double savi_val_ari(const savi::SaviModel<float>& m, const EpisodeBundle& b,
                    const std::vector<int>& episodes, uint64_t seed,
                    int max_frames) {
  const int S = b.bcfg.grid;
  const int s = m.cfg.dec_out_res;
  double sum = 0.0;
  int count = 0;
  for (int ei : episodes) {
    if (count >= max_frames) break;
    const auto& pe = b.eps[static_cast<size_t>(ei)];
    std::vector<Tensor<float>> frames;
    frames.reserve(pe.rgb.size());
    for (const auto& f : pe.rgb) frames.push_back(rgb_batch({&f}, S));
    Rng rng(seed ^ pe.ep.seed, "val-slots");
    auto out = m.forward(frames, rng, /*want_decodes=*/true);
    for (size_t t = 0; t < frames.size() && count < max_frames; ++t) {
      const auto gt16 =
          data::instances_for_step(pe.ep.steps[t], b.bcfg, b.enlarge);
      std::vector<int> gt(gt16.label.begin(), gt16.label.end());
      if (std::all_of(gt.begin(), gt.end(), [](int v) { return v == 0; }))
        continue;  // agreement over foreground is vacuous without foreground
      auto masks = savi::slot_masks(out.decodes[t].weights->value);
      std::vector<int> pred = savi::upsample_mask(masks[0], s, S);
      sum += metrics::fg_ari(pred, gt);
      ++count;
    }
  }
  return count > 0 ? sum / count : 0.0;
}

SaviTrainResult train_savi(const SaviTrainConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  EpisodeBundle b = load_bundle(cfg.dataset_dir, cfg.enlarge, /*keep_frames=*/false,
                                cfg.max_episodes);
  const auto train = b.split("train");
  const auto val = b.split("val");
  const int S = b.bcfg.grid;
  const auto& mc = cfg.model;
  SD_CHECK(mc.in_res == S, ConfigError,
           "model expects side " << mc.in_res << ", dataset has " << S);
  const int down = S / mc.dec_out_res;
  SD_CHECK(down * mc.dec_out_res == S, ConfigError, "decoder side must divide grid");

  // Training windows: (episode, start) pairs with `context` frames available.
  std::vector<std::pair<int, int>> windows;
  for (int ei : train) {
    const int T = static_cast<int>(b.eps[static_cast<size_t>(ei)].ep.steps.size());
    for (int t0 = 0; t0 + mc.context <= T; ++t0) windows.push_back({ei, t0});
  }
  SD_CHECK(!windows.empty(), InsufficientData, "no training windows");

  savi::SaviModel<float> model(mc, cfg.seed);
  auto reg = model.registry();
  auto params = reg.vars();
  nn::Adam<float> opt(params, mc.lr);
  Rng order(cfg.seed, "order");
  Rng slots_rng(cfg.seed, "slots");

  SaviTrainResult res;
  res.best_path = (fs::path(cfg.out_dir) / "savi_best.ckpt").string();
  res.final_path = (fs::path(cfg.out_dir) / "savi_final.ckpt").string();
  res.best_val_ari = -1.0;

  const int64_t P = int64_t(3) * mc.dec_out_res * mc.dec_out_res;
  for (int step = 0; step < mc.steps; ++step) {
    std::vector<const std::vector<uint8_t>*> batch_frames[8];
    SD_CHECK(mc.context <= 8, ConfigError, "context too long");
    for (int k = 0; k < mc.batch; ++k) {
      const auto& [ei, t0] = windows[static_cast<size_t>(
          order.below(static_cast<int64_t>(windows.size())))];
      for (int t = 0; t < mc.context; ++t)
        batch_frames[t].push_back(&b.eps[static_cast<size_t>(ei)].rgb[size_t(t0 + t)]);
    }
    std::vector<Tensor<float>> frames;
    std::vector<Tensor<float>> targets;
    for (int t = 0; t < mc.context; ++t) {
      frames.push_back(rgb_batch(batch_frames[t], S));
      targets.push_back(box_downsample(frames.back(), down));
    }
    auto out = model.forward(frames, slots_rng, /*want_decodes=*/true);
    nn::Var<float> loss;
    for (int t = 0; t < mc.context; ++t) {
      auto l = nn::mse_sum(out.decodes[size_t(t)].recon, targets[size_t(t)]);
      loss = (t == 0) ? l : nn::add(loss, l);
    }
    loss = nn::scale(loss, float(1.0 / (double(mc.context) * mc.batch * P)));
    nn::backward(loss);
    const double lv = loss->value[0];
    SD_CHECK(std::isfinite(lv), DivergenceError,
             "non-finite reconstruction loss at step " << step);
    const double gnorm = nn::clip_grad_norm(params, mc.clip);
    opt.set_lr(nn::lr_at(step, mc.steps, mc.warmup(), mc.lr));
    opt.step();
    nn::zero_grad(params);
    res.final_loss = lv;
    res.steps = step + 1;
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == mc.steps))
      std::printf("[savi] step %d loss %.5f lr %.2e gnorm %.3f\n", step, lv,
                  opt.lr(), gnorm);
    if (cfg.eval_every > 0 && !val.empty() &&
        ((step + 1) % cfg.eval_every == 0 || step + 1 == mc.steps)) {
      const double ari = savi_val_ari(model, b, val, cfg.seed, cfg.eval_frames);
      std::printf("[savi] step %d val fg-ARI %.4f\n", step + 1, ari);
      if (ari > res.best_val_ari) {
        res.best_val_ari = ari;
        save_savi(model, cfg.enlarge, cfg.seed, res.best_path);
      }
      res.final_val_ari = ari;
    }
  }
  if (!val.empty() && (cfg.eval_every <= 0 || res.best_val_ari < 0)) {
    res.final_val_ari = savi_val_ari(model, b, val, cfg.seed, cfg.eval_frames);
    res.best_val_ari = res.final_val_ari;
    save_savi(model, cfg.enlarge, cfg.seed, res.best_path);
  }
  save_savi(model, cfg.enlarge, cfg.seed, res.final_path);
  if (res.best_val_ari < 0) {
    res.best_val_ari = 0;
    save_savi(model, cfg.enlarge, cfg.seed, res.best_path);
  }
  return res;
}

// ---------------------------------------------------------------------------
// VQ-VAE training
// ---------------------------------------------------------------------------

void save_vqvae(const vq::VqVae<float>& m, bool enlarge, uint64_t seed,
                const std::string& path) {
  ser::Checkpoint ck;
  ck.config["kind"] = "vqvae";
  ck.config["model"] = m.cfg.to_json();
  ck.config["enlarge"] = enlarge;
  ck.config["seed"] = seed;
  ser::add_params(ck, m.registry());
  ser::save_checkpoint(ck, path);
}

vq::VqVae<float> load_vqvae(const std::string& path, bool* enlarge) {
  ser::Checkpoint ck = ser::load_checkpoint(path);
  SD_CHECK(ck.config.value("kind", "") == "vqvae", ConfigError,
           "checkpoint at '" << path << "' is not a VQ-VAE checkpoint");
  vq::VqVae<float> m(vq::VqConfig::from_json(ck.config.at("model")),
                     ck.config.value("seed", uint64_t{0}));
  auto reg = m.registry();
  ser::load_params(ck, reg);
  if (enlarge) *enlarge = ck.config.value("enlarge", true);
  return m;
}

namespace {

Tensor<float> frame_batch(const std::vector<const bev::BevFrame*>& frames) {
  SD_CHECK(!frames.empty(), InsufficientData, "empty frame batch");
  const int S = frames[0]->S, C = frames[0]->C;
  Tensor<float> out({static_cast<int64_t>(frames.size()), C, S, S});
  const int64_t P = int64_t(C) * S * S;
  for (size_t i = 0; i < frames.size(); ++i) {
    SD_CHECK(static_cast<int64_t>(frames[i]->data.size()) == P, ShapeMismatch,
             "frame size mismatch in batch");
    float* dst = out.ptr() + static_cast<int64_t>(i) * P;
    for (int64_t j = 0; j < P; ++j) dst[j] = float(frames[i]->data[size_t(j)]);
  }
  return out;
}

}  // namespace

VqTrainResult train_vqvae(const VqTrainConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  EpisodeBundle b = load_bundle(cfg.dataset_dir, cfg.enlarge, /*keep_frames=*/true,
                                cfg.max_episodes);
  const auto train = b.split("train");
  const auto val = b.split("val");
  const auto& mc = cfg.model;
  SD_CHECK(mc.in_res == b.bcfg.grid, ConfigError, "VQ input side mismatch");

  std::vector<std::pair<int, int>> pool;
  for (int ei : train) {
    const int T = static_cast<int>(b.eps[static_cast<size_t>(ei)].ep.steps.size());
    for (int t = 0; t < T; ++t) pool.push_back({ei, t});
  }
  SD_CHECK(!pool.empty(), InsufficientData, "no training frames");

  vq::VqVae<float> model(mc, cfg.seed);
  auto reg = model.registry();
  auto params = reg.vars();
  nn::Adam<float> opt(params, mc.lr);
  Rng order(cfg.seed, "order");

  VqTrainResult res;
  res.path = (fs::path(cfg.out_dir) / "vqvae_final.ckpt").string();
  for (int step = 0; step < mc.steps; ++step) {
    std::vector<const bev::BevFrame*> batch;
    for (int k = 0; k < mc.batch; ++k) {
      const auto& [ei, t] =
          pool[static_cast<size_t>(order.below(static_cast<int64_t>(pool.size())))];
      batch.push_back(&b.eps[static_cast<size_t>(ei)].ep.steps[size_t(t)].frame);
    }
    auto out = model.forward_train(frame_batch(batch));
    nn::backward(out.loss);
    const double lv = out.loss->value[0];
    SD_CHECK(std::isfinite(lv), DivergenceError,
             "non-finite VQ loss at step " << step);
    const double gnorm = nn::clip_grad_norm(params, mc.clip);
    opt.set_lr(nn::lr_at(step, mc.steps, mc.steps / mc.warmup_frac_den, mc.lr));
    opt.step();
    nn::zero_grad(params);
    res.final_loss = lv;
    res.steps = step + 1;
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == mc.steps))
      std::printf("[vq] step %d loss %.5f lr %.2e gnorm %.3f\n", step, lv, opt.lr(),
                  gnorm);
  }

  // Round-trip probe on held-out frames: per-channel IoU + codebook usage.
  double iou_sum = 0.0;
  int iou_n = 0;
  std::vector<uint8_t> used(static_cast<size_t>(mc.codebook), 0);
  int probed = 0;
  for (int ei : val) {
    for (const auto& rec : b.eps[static_cast<size_t>(ei)].ep.steps) {
      if (probed >= cfg.eval_frames) break;
      auto tok = model.encode_frame(rec.frame);
      for (int c : tok.indices) used[static_cast<size_t>(c)] = 1;
      Tensor<float> logits = model.decode_tokens(tok);
      const int S = rec.frame.S;
      for (int c = 0; c < rec.frame.C; ++c) {
        int64_t inter = 0, uni = 0;
        const uint8_t* gt = rec.frame.channel(c);
        const float* lg = logits.ptr() + int64_t(c) * S * S;
        for (int64_t p = 0; p < int64_t(S) * S; ++p) {
          const bool a = lg[p] > 0.0f, g = gt[p] != 0;
          inter += (a && g);
          uni += (a || g);
        }
        iou_sum += uni > 0 ? double(inter) / double(uni) : 1.0;
        ++iou_n;
      }
      ++probed;
    }
    if (probed >= cfg.eval_frames) break;
  }
  res.val_iou = iou_n > 0 ? iou_sum / iou_n : 0.0;
  res.codebook_use =
      double(std::count(used.begin(), used.end(), uint8_t{1})) / double(mc.codebook);
  std::printf("[vq] val round-trip IoU %.4f codebook use %.3f\n", res.val_iou,
              res.codebook_use);
  save_vqvae(model, cfg.enlarge, cfg.seed, res.path);
  return res;
}

// ---------------------------------------------------------------------------
// frozen perception + episode encoding
// ---------------------------------------------------------------------------

std::vector<uint8_t> Perception::param_bytes() const {
  std::vector<uint8_t> out;
  auto grab = [&out](const auto& reg) {
    for (const auto& [name, p] : reg.named) {
      const size_t off = out.size();
      out.resize(off + p->value.data.size() * sizeof(float));
      std::memcpy(out.data() + off, p->value.data.data(),
                  p->value.data.size() * sizeof(float));
    }
  };
  if (savi) grab(savi->registry());
  if (vq) grab(vq->registry());
  return out;
}

Perception load_perception(cf::SceneMode mode, const std::string& ckpt_path,
                           int attr_slots) {
  Perception per;
  per.mode = mode;
  if (mode == cf::SceneMode::kAttributes) {
    per.attr_slots = attr_slots;
    return per;
  }
  SD_CHECK(!ckpt_path.empty() && fs::exists(ckpt_path), MissingPerceptionCheckpoint,
           "perception checkpoint '" << ckpt_path << "' not found");
  if (mode == cf::SceneMode::kSlots) {
    per.savi.emplace(load_savi(ckpt_path));
  } else {
    per.vq.emplace(load_vqvae(ckpt_path));
  }
  return per;
}

void fit_model_to_perception(cf::BackboneConfig& mc, const Perception& per) {
  switch (per.mode) {
    case cf::SceneMode::kSlots:
      mc.scene_count = per.savi->cfg.K;
      mc.scene_dim = per.savi->cfg.d;
      break;
    case cf::SceneMode::kAttributes:
      mc.scene_dim = kAttrDim;
      break;
    case cf::SceneMode::kVq:
      mc.scene_count = per.vq->cfg.grid() * per.vq->cfg.grid();
      mc.vq_codes = per.vq->cfg.codebook;
      break;
  }
  mc.mode = per.mode;
}

namespace {

std::vector<double> attr_vector(const data::StepRecord& rec,
                                const data::VehicleRecord& v) {
  const geo::Pose2 ego = rec.ego_pose();
  const geo::Vec2 local = ego.to_local({v.x, v.y});
  const double ry = v.yaw - rec.ego_yaw;
  return {local.x, local.y, std::cos(ry), std::sin(ry), v.v, v.length, v.width};
}

}  // namespace

EncodedEpisode encode_episode(const Perception& per, const PreppedEpisode& pe,
                              const bev::BevConfig& bcfg, bool enlarge) {
  (void)bcfg;
  (void)enlarge;
  EncodedEpisode out;
  const size_t T = pe.ep.steps.size();
  if (per.mode == cf::SceneMode::kSlots) {
    const auto& m = *per.savi;
    std::vector<Tensor<float>> frames;
    frames.reserve(T);
    for (const auto& f : pe.rgb) frames.push_back(rgb_batch({&f}, pe.S));
    Rng rng(pe.ep.seed, "encode-slots");
    auto fwd = m.forward(frames, rng, /*want_decodes=*/false);
    out.scene.reserve(T);
    for (const auto& s : fwd.slots) {
      std::vector<double> vec(static_cast<size_t>(s->value.numel()));
      for (size_t i = 0; i < vec.size(); ++i) vec[i] = double(s->value[int64_t(i)]);
      out.scene.push_back(std::move(vec));
    }
  } else if (per.mode == cf::SceneMode::kAttributes) {
    const int K = per.attr_slots;
    SD_CHECK(K > 0, ConfigError, "attribute mode needs a positive slot count");
    out.scene.reserve(T);
    out.ids.reserve(T);
    for (const auto& rec : pe.ep.steps) {
      std::vector<const data::VehicleRecord*> vs;
      for (const auto& v : rec.vehicles) vs.push_back(&v);
      std::sort(vs.begin(), vs.end(),
                [&](const data::VehicleRecord* a, const data::VehicleRecord* c) {
                  const geo::Pose2 ego = rec.ego_pose();
                  const geo::Vec2 la = ego.to_local({a->x, a->y});
                  const geo::Vec2 lc = ego.to_local({c->x, c->y});
                  const double da = la.x * la.x + la.y * la.y;
                  const double dc = lc.x * lc.x + lc.y * lc.y;
                  return da != dc ? da < dc : a->id < c->id;
                });
      std::vector<double> vec(static_cast<size_t>(K) * kAttrDim, 0.0);
      std::vector<int> ids(static_cast<size_t>(K), -1);
      for (int k = 0; k < K && k < static_cast<int>(vs.size()); ++k) {
        const auto av = attr_vector(rec, *vs[static_cast<size_t>(k)]);
        std::copy(av.begin(), av.end(), vec.begin() + size_t(k) * kAttrDim);
        ids[static_cast<size_t>(k)] = vs[static_cast<size_t>(k)]->id;
      }
      out.scene.push_back(std::move(vec));
      out.ids.push_back(std::move(ids));
    }
  } else {
    const auto& m = *per.vq;
    out.codes.reserve(T);
    for (const auto& rec : pe.ep.steps) {
      SD_CHECK(!rec.frame.data.empty(), ConfigError,
               "VQ encoding needs binary frames kept in the bundle");
      out.codes.push_back(m.encode_frame(rec.frame).indices);
    }
  }
  return out;
}

std::vector<EncodedEpisode> encode_all(const Perception& per,
                                       const EpisodeBundle& b) {
  std::vector<EncodedEpisode> out;
  out.reserve(b.eps.size());
  for (const auto& pe : b.eps)
    out.push_back(encode_episode(per, pe, b.bcfg, b.enlarge));
  return out;
}

// ---------------------------------------------------------------------------
// trajectory assembly
// ---------------------------------------------------------------------------

cf::Trajectory make_trajectory(const PreppedEpisode& pe, const EncodedEpisode& enc,
                               int t, const quant::QuantizerSet& qs,
                               const cf::BackboneConfig& ccfg, bool want_future) {
  const auto& steps = pe.ep.steps;
  SD_CHECK(t >= 0 && t < static_cast<int>(steps.size()), IndexOutOfRange,
           "trajectory step " << t);
  const auto& rec = steps[static_cast<size_t>(t)];
  cf::Trajectory tr;
  const auto g = qs.target.quantize2(rec.target_x, rec.target_y);
  tr.gx = g[0];
  tr.gy = g[1];
  tr.light = qs.light.quantize(double(rec.light));
  tr.speed = qs.speed.quantize(rec.ego_v);

  if (ccfg.mode == cf::SceneMode::kVq) {
    tr.vq = enc.codes[static_cast<size_t>(t)];
    SD_CHECK(static_cast<int>(tr.vq.size()) == ccfg.scene_count, ShapeMismatch,
             "vq code count " << tr.vq.size() << " != scene_count "
                              << ccfg.scene_count);
  } else {
    tr.scene = enc.scene[static_cast<size_t>(t)];
    SD_CHECK(static_cast<int>(tr.scene.size()) ==
                 ccfg.scene_count * ccfg.scene_dim,
             ShapeMismatch, "scene vector size");
    tr.r1 = rec.route1;
    tr.r2 = rec.route2;
  }

  if (!rec.waypoints.empty()) {
    SD_CHECK(static_cast<int>(rec.waypoints.size()) == 2 * ccfg.W, ShapeMismatch,
             "waypoint count");
    tr.wp_cont = rec.waypoints;
    tr.wp.resize(static_cast<size_t>(2 * ccfg.W));
    for (int i = 0; i < ccfg.W; ++i) {
      const auto w = qs.waypoint.quantize2(rec.waypoints[size_t(2 * i)],
                                           rec.waypoints[size_t(2 * i + 1)]);
      tr.wp[size_t(2 * i)] = w[0];
      tr.wp[size_t(2 * i + 1)] = w[1];
    }
  }

  if (want_future) {
    const int tf = t + ccfg.f;
    SD_CHECK(tf < static_cast<int>(steps.size()), IndexOutOfRange,
             "future step " << tf << " beyond episode");
    const auto& frec = steps[static_cast<size_t>(tf)];
    if (ccfg.mode == cf::SceneMode::kVq) {
      tr.vq_future = enc.codes[static_cast<size_t>(tf)];
    } else if (ccfg.mode == cf::SceneMode::kSlots) {
      tr.scene_future = enc.scene[static_cast<size_t>(tf)];
    } else {
      // Attribute vectors are only supervised for objects present both now
      // and at the horizon; slots map to objects by id.
      tr.scene_future.assign(static_cast<size_t>(ccfg.scene_count) * ccfg.scene_dim,
                             0.0);
      tr.scene_future_valid.assign(static_cast<size_t>(ccfg.scene_count), 0);
      const auto& now_ids = enc.ids[static_cast<size_t>(t)];
      const auto& fut_ids = enc.ids[static_cast<size_t>(tf)];
      for (int k = 0; k < ccfg.scene_count; ++k) {
        const int id = now_ids[static_cast<size_t>(k)];
        if (id < 0) continue;
        for (size_t j = 0; j < fut_ids.size(); ++j) {
          if (fut_ids[j] != id) continue;
          const auto& src = enc.scene[static_cast<size_t>(tf)];
          std::copy(src.begin() + ptrdiff_t(j * kAttrDim),
                    src.begin() + ptrdiff_t((j + 1) * kAttrDim),
                    tr.scene_future.begin() + ptrdiff_t(size_t(k) * kAttrDim));
          tr.scene_future_valid[static_cast<size_t>(k)] = 1;
          break;
        }
      }
    }
    tr.r1_future = frec.route1;
    tr.r2_future = frec.route2;
    if (t + 1 < static_cast<int>(steps.size())) {
      const auto& nrec = steps[static_cast<size_t>(t + 1)];
      const auto ng = qs.target.quantize2(nrec.target_x, nrec.target_y);
      tr.gx_next = ng[0];
      tr.gy_next = ng[1];
      tr.light_next = qs.light.quantize(double(nrec.light));
      tr.speed_next = qs.speed.quantize(nrec.ego_v);
    }
  }
  return tr;
}

// ---------------------------------------------------------------------------
// driving-transformer training
// ---------------------------------------------------------------------------

namespace {

struct WindowPool {
  // All trajectories indexed [episode][t]; only populated entries are built.
  std::vector<std::vector<cf::Trajectory>> traj;
  std::vector<std::pair<int, int>> windows;  // (episode index, start step)
};

WindowPool build_pool(const EpisodeBundle& b, const std::vector<EncodedEpisode>& enc,
                      const std::vector<int>& episodes,
                      const quant::QuantizerSet& qs,
                      const cf::BackboneConfig& mc) {
  WindowPool p;
  p.traj.resize(b.eps.size());
  const int S = mc.train_steps, W = mc.W;
  for (int ei : episodes) {
    const auto& pe = b.eps[static_cast<size_t>(ei)];
    const int T = static_cast<int>(pe.ep.steps.size());
    std::vector<uint8_t> need(static_cast<size_t>(T), 0);
    for (int t0 = 0; t0 + S - 1 + mc.f < T; ++t0) {
      bool ok = true;
      for (int s = 0; s < S && ok; ++s)
        ok = static_cast<int>(pe.ep.steps[size_t(t0 + s)].waypoints.size()) == 2 * W;
      if (!ok) continue;
      p.windows.push_back({ei, t0});
      for (int s = 0; s < S; ++s) need[size_t(t0 + s)] = 1;
    }
    auto& tv = p.traj[static_cast<size_t>(ei)];
    tv.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t)
      if (need[static_cast<size_t>(t)])
        tv[static_cast<size_t>(t)] =
            make_trajectory(pe, enc[static_cast<size_t>(ei)], t, qs, mc, true);
  }
  return p;
}

template <typename F>
double pooled_loss(const WindowPool& p, const std::vector<size_t>& idx,
                   int train_steps, int batch, F&& run) {
  // Runs `run` over consecutive batches; returns the window-weighted mean of
  // the per-batch total losses it reports.
  double acc = 0.0;
  size_t n = 0;
  for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(batch)) {
    const size_t take = std::min(static_cast<size_t>(batch), idx.size() - at);
    std::vector<std::vector<const cf::Trajectory*>> samples;
    samples.reserve(take);
    for (size_t i = 0; i < take; ++i) {
      const auto& [ei, t0] = p.windows[idx[at + i]];
      std::vector<const cf::Trajectory*> w;
      for (int s = 0; s < train_steps; ++s)
        w.push_back(&p.traj[static_cast<size_t>(ei)][size_t(t0 + s)]);
      samples.push_back(std::move(w));
    }
    acc += run(samples) * double(take);
    n += take;
  }
  return n > 0 ? acc / double(n) : 0.0;
}

}  // namespace

CfTrainResult train_carformer(const CfTrainConfig& cfg, const EpisodeBundle* bundle,
                              const std::vector<EncodedEpisode>* enc_in) {
  fs::create_directories(cfg.out_dir);
  const auto& mc = cfg.model;
  std::optional<EpisodeBundle> own;
  if (!bundle) {
    own = load_bundle(cfg.dataset_dir, cfg.enlarge,
                      /*keep_frames=*/mc.mode == cf::SceneMode::kVq,
                      cfg.max_episodes);
    bundle = &*own;
  }
  const EpisodeBundle& b = *bundle;
  SD_CHECK(b.enlarge == cfg.enlarge, ConfigError,
           "bundle enlargement does not match the training config");

  Perception per = load_perception(mc.mode, cfg.perception_ckpt, mc.scene_count);
  const std::vector<uint8_t> frozen = per.param_bytes();

  CfTrainResult res;
  quant::QuantizerSet qs;
  if (cfg.quantizer_path.empty()) {
    qs = fit_quantizers_for(b, cfg.seed);
    res.quantizer_path = (fs::path(cfg.out_dir) / "quantizers.txt").string();
    quant::save_quantizers(qs, res.quantizer_path);
  } else {
    qs = quant::load_quantizers(cfg.quantizer_path);
    res.quantizer_path = cfg.quantizer_path;
  }

  std::optional<std::vector<EncodedEpisode>> enc_own;
  if (!enc_in) {
    enc_own = encode_all(per, b);
    enc_in = &*enc_own;
  }
  SD_CHECK(enc_in->size() == b.eps.size(), ShapeMismatch,
           "encoded episode count mismatch");

  WindowPool train_pool = build_pool(b, *enc_in, b.split("train"), qs, mc);
  WindowPool val_pool = build_pool(b, *enc_in, b.split("val"), qs, mc);
  SD_CHECK(!train_pool.windows.empty(), InsufficientData, "no training windows");

  cf::CarFormer<float> model(mc, cfg.seed);
  auto reg = model.registry();
  auto params = reg.vars();
  nn::Adam<float> opt(params, mc.lr, mc.weight_decay);
  Rng order(cfg.seed, "order");

  const int64_t spe =
      (static_cast<int64_t>(train_pool.windows.size()) + mc.batch - 1) / mc.batch;
  const int64_t total = spe * mc.epochs;
  const int64_t warmup = spe * mc.warmup_epochs;

  const std::string ck_best = (fs::path(cfg.out_dir) / "carformer_best.ckpt").string();
  const std::string ck_final =
      (fs::path(cfg.out_dir) / "carformer_final.ckpt").string();
  auto save = [&](const std::string& path) {
    ser::Checkpoint ck;
    ck.config["kind"] = "carformer";
    ck.config["model"] = mc.to_json();
    ck.config["enlarge"] = cfg.enlarge;
    ck.config["seed"] = cfg.seed;
    ck.config["perception_ckpt"] = cfg.perception_ckpt;
    ck.config["quantizers"] = quant::quantizers_to_text(qs);
    ser::add_params(ck, model.registry());
    ser::save_checkpoint(ck, path);
  };

  std::vector<size_t> idx(train_pool.windows.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<size_t> vidx(val_pool.windows.size());
  for (size_t i = 0; i < vidx.size(); ++i) vidx[i] = i;

  res.best_val = 1e300;
  int64_t step = 0;
  for (int epoch = 0; epoch < mc.epochs; ++epoch) {
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<size_t>(order.below(int64_t(i)))]);
    double epoch_loss = pooled_loss(
        train_pool, idx, mc.train_steps, mc.batch, [&](const auto& samples) {
          auto out = model.losses(samples);
          nn::backward(out.loss);
          SD_CHECK(std::isfinite(out.parts.total), DivergenceError,
                   "non-finite loss at step " << step);
          const double gnorm = nn::clip_grad_norm(params, mc.clip);
          opt.set_lr(nn::lr_at(step, total, warmup, mc.lr));
          opt.step();
          nn::zero_grad(params);
          if (cfg.log_every > 0 && step % cfg.log_every == 0)
            std::printf(
                "[carformer] step %lld l_gru %.4f l_lm %.4f l_forecast %.4f "
                "total %.4f lr %.3e gnorm %.2f\n",
                static_cast<long long>(step), out.parts.l_gru, out.parts.l_lm,
                out.parts.l_forecast, out.parts.total, opt.lr(), gnorm);
          ++step;
          return out.parts.total;
        });
    res.final_train = epoch_loss;
    if (!val_pool.windows.empty()) {
      const double v = pooled_loss(
          val_pool, vidx, mc.train_steps, mc.batch,
          [&](const auto& samples) { return model.losses(samples).parts.total; });
      res.final_val = v;
      std::printf("[carformer] epoch %d train %.4f val %.4f\n", epoch, epoch_loss, v);
      if (v < res.best_val) {
        res.best_val = v;
        save(ck_best);
      }
    } else {
      std::printf("[carformer] epoch %d train %.4f\n", epoch, epoch_loss);
    }
  }
  if (val_pool.windows.empty()) {
    res.best_val = res.final_val = res.final_train;
    save(ck_best);
  }
  save(ck_final);
  res.best_path = ck_best;
  res.final_path = ck_final;
  res.steps = static_cast<int>(step);
  res.perception_unchanged = per.param_bytes() == frozen;
  SD_CHECK(res.perception_unchanged, RuntimeError,
           "frozen perception weights changed during training");
  return res;
}

Agent load_agent(const std::string& carformer_ckpt,
                 const std::string& perception_ckpt) {
  ser::Checkpoint ck = ser::load_checkpoint(carformer_ckpt);
  SD_CHECK(ck.config.value("kind", "") == "carformer", ConfigError,
           "checkpoint at '" << carformer_ckpt
                             << "' is not a driving-transformer checkpoint");
  Agent a;
  a.ccfg = cf::BackboneConfig::from_json(ck.config.at("model"));
  a.enlarge = ck.config.value("enlarge", true);
  a.qs = quant::quantizers_from_text(ck.config.at("quantizers").get<std::string>());
  a.model.emplace(a.ccfg, ck.config.value("seed", uint64_t{0}));
  auto reg = a.model->registry();
  ser::load_params(ck, reg);
  const std::string per_path = !perception_ckpt.empty()
                                   ? perception_ckpt
                                   : ck.config.value("perception_ckpt", "");
  a.per = load_perception(a.ccfg.mode, per_path, a.ccfg.scene_count);
  return a;
}

}  // namespace slotdrive::pipe
