#pragma once

// Scene-level VQ-VAE baseline: a strided conv encoder maps an 8-channel binary
// BEV frame to a (S/16)x(S/16) grid of codebook indices; a mirrored decoder
// reconstructs per-channel logits. Training uses straight-through estimation
// with codebook + commitment losses and per-pixel-per-channel BCE.

#include <array>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "slotdrive/autograd.hpp"
#include "slotdrive/bev.hpp"
#include "slotdrive/layers.hpp"
#include "slotdrive/rng.hpp"

namespace slotdrive::vq {

using slotdrive::Rng;
using nn::Tensor;
using nn::Var;

struct VqConfig {
  int in_ch = bev::kNumChannels;
  int in_res = 96;
  int codebook = 512;    // C
  int latent_dim = 64;
  double beta = 0.25;    // commitment weight
  std::array<int, 4> enc_filters{32, 64, 64, 64};
  std::array<int, 4> dec_filters{64, 64, 32, 16};
  // Optimizer settings.
  int batch = 16;
  int steps = 800;
  double lr = 3e-4;
  double clip = 1.0;
  int warmup_frac_den = 20;

  int grid() const { return in_res / 16; }  // four stride-2 stages

  nlohmann::json to_json() const;
  static VqConfig from_json(const nlohmann::json& j);
};

// Row-major grid of codebook indices for one frame.
struct SceneTokens {
  int G = 0;
  std::vector<int> indices;  // G*G values in [0, C)

  int at(int r, int c) const { return indices[static_cast<size_t>(r) * G + c]; }
};

template <typename T>
struct VqVae {
  VqConfig cfg;

  std::array<nn::Conv2dLayer<T>, 4> enc;  // k4 s2 p1 each: res/16
  nn::Conv2dLayer<T> enc_out;             // 1x1 -> latent_dim
  Var<T> codebook;                        // (C, latent_dim)
  nn::Conv2dLayer<T> dec_in;              // 1x1 latent_dim -> dec_filters[0]
  std::array<nn::Conv2dLayer<T>, 4> dec;  // each after a 2x upsample
  nn::Conv2dLayer<T> dec_out;             // 3x3 -> in_ch logits

  explicit VqVae(const VqConfig& c, uint64_t seed) : cfg(c) {
    Rng rng(seed, "vq/init");
    int ch = cfg.in_ch;
    for (int i = 0; i < 4; ++i) {
      enc[static_cast<size_t>(i)] = nn::Conv2dLayer<T>(
          ch, cfg.enc_filters[static_cast<size_t>(i)], 4, 2, 1, rng);
      ch = cfg.enc_filters[static_cast<size_t>(i)];
    }
    enc_out = nn::Conv2dLayer<T>(ch, cfg.latent_dim, 1, 1, 0, rng);
    codebook =
        nn::param(nn::uniform_tensor<T>({cfg.codebook, cfg.latent_dim}, rng,
                                        T(-1) / cfg.codebook, T(1) / cfg.codebook));
    dec_in = nn::Conv2dLayer<T>(cfg.latent_dim, cfg.dec_filters[0], 1, 1, 0, rng);
    ch = cfg.dec_filters[0];
    for (int i = 0; i < 4; ++i) {
      dec[static_cast<size_t>(i)] = nn::Conv2dLayer<T>(
          ch, cfg.dec_filters[static_cast<size_t>(i)], 3, 1, 1, rng);
      ch = cfg.dec_filters[static_cast<size_t>(i)];
    }
    dec_out = nn::Conv2dLayer<T>(ch, cfg.in_ch, 3, 1, 1, rng);
  }

  // (B, in_ch, S, S) float frames -> (B*G*G, latent_dim) encoder latents.
  Var<T> encode_latents(Var<T> x) const {
    for (int i = 0; i < 4; ++i)
      x = nn::relu(enc[static_cast<size_t>(i)].forward(x));
    x = enc_out.forward(x);  // (B, D, G, G)
    const int64_t B = x->value.dim(0), D = x->value.dim(1);
    const int64_t P = x->value.dim(2) * x->value.dim(3);
    x = nn::reshape(x, {B, D, P});
    x = nn::transpose_12(x);  // (B, P, D) row-major over the grid
    return nn::reshape(x, {B * P, D});
  }

  // Nearest codebook row per latent (values only).
  std::vector<int64_t> nearest_codes(const Tensor<T>& latents) const {
    const int64_t n = latents.dim(0), D = latents.dim(1);
    const int64_t C = codebook->value.dim(0);
    std::vector<int64_t> ids(static_cast<size_t>(n));
    const T* cb = codebook->value.ptr();
    for (int64_t i = 0; i < n; ++i) {
      const T* z = latents.ptr() + i * D;
      double best = std::numeric_limits<double>::infinity();
      int64_t arg = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T* e = cb + c * D;
        double d2 = 0;
        for (int64_t k = 0; k < D; ++k) {
          const double df = double(z[k]) - double(e[k]);
          d2 += df * df;
        }
        if (d2 < best) {
          best = d2;
          arg = c;
        }
      }
      ids[static_cast<size_t>(i)] = arg;
    }
    return ids;
  }

  // (B*G*G, D) quantized latents -> (B, in_ch, S, S) logits.
  Var<T> decode_latents(Var<T> q, int64_t B) const {
    const int G = cfg.grid();
    auto x = nn::reshape(q, {B, int64_t(G) * G, cfg.latent_dim});
    x = nn::transpose_12(x);  // (B, D, G*G)
    x = nn::reshape(x, {B, cfg.latent_dim, G, G});
    x = nn::relu(dec_in.forward(x));
    for (int i = 0; i < 4; ++i) {
      x = nn::upsample2x(x);
      x = nn::relu(dec[static_cast<size_t>(i)].forward(x));
    }
    return dec_out.forward(x);  // (B, in_ch, S, S) logits
  }

  struct TrainOut {
    Var<T> loss;        // bce + vq + beta*commit, per-sample sums
    double bce = 0, vq = 0, commit = 0;
    std::vector<int64_t> codes;
  };

  // One training forward: frames (B, in_ch, S, S) in {0,1}.
  TrainOut forward_train(const Tensor<T>& frames) const {
    const int64_t B = frames.dim(0);
    auto z = encode_latents(nn::constant(frames));
    auto codes = nearest_codes(z->value);
    auto q = nn::gather_rows(codebook, codes);
    // Straight-through: value is q, gradient flows to the encoder output.
    auto st = nn::add(z, nn::constant([&] {
      Tensor<T> d(q->value.shape);
      for (int64_t i = 0; i < d.numel(); ++i) d[i] = q->value[i] - z->value[i];
      return d;
    }()));
    auto logits = decode_latents(st, B);
    auto bce = nn::bce_logits_sum(logits, frames);
    auto vq_l = nn::mse_sum(q, z->value);        // pulls codebook toward encoder
    auto commit = nn::mse_sum(z, q->value);      // pulls encoder toward codebook
    TrainOut out;
    out.bce = double(bce->value[0]);
    out.vq = double(vq_l->value[0]);
    out.commit = double(commit->value[0]);
    out.loss = nn::scale(
        nn::add(bce, nn::add(vq_l, nn::scale(commit, T(cfg.beta)))), T(1) / B);
    out.codes = std::move(codes);
    return out;
  }

  // Trained-model interface over a single binary frame.
  SceneTokens encode_frame(const bev::BevFrame& f) const {
    SD_CHECK(f.S == cfg.in_res && f.C == cfg.in_ch, ShapeMismatch,
             "frame " << f.S << "x" << f.C << " vs config " << cfg.in_res
                      << "x" << cfg.in_ch);
    Tensor<T> x({1, cfg.in_ch, cfg.in_res, cfg.in_res});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = T(f.data[static_cast<size_t>(i)]);
    auto z = encode_latents(nn::constant(x));
    auto ids = nearest_codes(z->value);
    SceneTokens t;
    t.G = cfg.grid();
    t.indices.assign(ids.begin(), ids.end());
    return t;
  }

  // Tokens -> per-channel logits (in_ch, S, S); threshold at 0 for binary maps.
  Tensor<T> decode_tokens(const SceneTokens& t) const {
    SD_CHECK(t.G == cfg.grid() &&
                 t.indices.size() == static_cast<size_t>(t.G) * t.G,
             ShapeMismatch, "token grid " << t.G);
    std::vector<int64_t> ids;
    ids.reserve(t.indices.size());
    for (int v : t.indices) {
      SD_CHECK(v >= 0 && v < cfg.codebook, IndexOutOfRange,
               "code " << v << " of " << cfg.codebook);
      ids.push_back(v);
    }
    auto q = nn::gather_rows(codebook, ids);
    auto logits = decode_latents(q, 1);
    Tensor<T> out({cfg.in_ch, cfg.in_res, cfg.in_res});
    std::copy_n(logits->value.ptr(), out.numel(), out.ptr());
    return out;
  }

  nn::ParamRegistry<T> registry() const {
    nn::ParamRegistry<T> r;
    for (int i = 0; i < 4; ++i)
      enc[static_cast<size_t>(i)].reg(r, "enc.conv" + std::to_string(i));
    enc_out.reg(r, "enc.out");
    r.add("codebook", codebook);
    dec_in.reg(r, "dec.in");
    for (int i = 0; i < 4; ++i)
      dec[static_cast<size_t>(i)].reg(r, "dec.conv" + std::to_string(i));
    dec_out.reg(r, "dec.out");
    return r;
  }
};

}  // namespace slotdrive::vq
