#pragma once

// SAVi-style slot-attention video model over colored BEV frames: CNN encoder
// with positional embedding, iterative slot attention, a transformer slot
// predictor for the temporal chain, and a per-slot spatial-broadcast decoder
// whose alpha masks are softmax-normalized across slots at every pixel.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "slotdrive/autograd.hpp"
#include "slotdrive/layers.hpp"
#include "slotdrive/rng.hpp"

namespace slotdrive::savi {

using slotdrive::Rng;
using nn::Shape;
using nn::Tensor;
using nn::Var;

struct SaviConfig {
  int K = 7;             // number of slots
  int d = 128;           // slot dimensionality
  int slot_mlp = 256;    // residual MLP hidden width
  int iters = 2;         // slot-attention iterations per frame
  int context = 2;       // frames per training sequence
  int in_res = 96;       // input image side
  int in_ch = 3;         // colored BEV
  std::array<int, 4> enc_filters{64, 64, 64, 64};
  std::array<int, 4> enc_strides{1, 1, 1, 1};
  int enc_kernel = 5;
  int enc_mlp_dim = 256;
  std::array<int, 4> dec_filters{64, 64, 64, 64};
  int dec_out_res = 96;  // decoder output side; upsampled 3x2 from out/8
  int pred_layers = 2;
  int pred_heads = 4;
  int pred_mlp = 512;
  // Optimizer settings (all presets keep the same clip and warmup ratio).
  int batch = 64;
  int steps = 8000;
  double lr = 1e-4;
  double clip = 0.05;
  int warmup_frac_den = 20;  // warmup = steps / den

  int feat_res() const {
    int r = in_res;
    for (int s : enc_strides) r /= s;
    return r;
  }
  int dec_init_res() const { return dec_out_res / 8; }  // strides (2,2,2,1)
  int warmup() const { return steps / warmup_frac_den; }

  nlohmann::json to_json() const;
  static SaviConfig from_json(const nlohmann::json& j);
};

// Full-width single-stride encoder, wide decoder.
SaviConfig savi_base(int K);
// Strided encoder, narrow decoder ("light" variant; used with many slots).
SaviConfig savi_light(int K);
// Small-footprint preset for CPU training runs: strided encoder down to a
// 24x24 feature grid, half-resolution decode, narrower channels.
SaviConfig savi_desk(int K);

template <typename T>
struct SaviModel {
  SaviConfig cfg;

  // Encoder.
  std::array<nn::Conv2dLayer<T>, 4> enc;
  nn::SoftPositionEmbed<T> enc_pos;
  nn::LayerNormLayer<T> enc_ln;
  nn::Mlp2<T> enc_mlp;

  // Slot attention.
  Var<T> slot_mu, slot_logsig;  // (d,) learned init distribution
  nn::LayerNormLayer<T> sa_ln_in, sa_ln_slots, sa_ln_mlp;
  nn::LinearLayer<T> sa_q, sa_k, sa_v;
  nn::GruCell<T> sa_gru;
  nn::Mlp2<T> sa_mlp;

  // Predictor (permutation-equivariant: no positional encoding over slots).
  std::vector<nn::TransformerBlock<T>> pred;

  // Decoder.
  nn::SoftPositionEmbed<T> dec_pos;
  std::array<nn::Conv2dLayer<T>, 4> dec;
  nn::Conv2dLayer<T> dec_rgb, dec_alpha;

  SaviModel(const SaviConfig& c, uint64_t seed) : cfg(c) {
    Rng rng(seed, "savi/init");
    const int kk = cfg.enc_kernel;
    int ch = cfg.in_ch;
    for (int i = 0; i < 4; ++i) {
      enc[static_cast<size_t>(i)] = nn::Conv2dLayer<T>(
          ch, cfg.enc_filters[static_cast<size_t>(i)], kk,
          cfg.enc_strides[static_cast<size_t>(i)], kk / 2, rng);
      ch = cfg.enc_filters[static_cast<size_t>(i)];
    }
    const int fr = cfg.feat_res();
    enc_pos = nn::SoftPositionEmbed<T>(fr, fr, ch, rng);
    enc_ln = nn::LayerNormLayer<T>(ch);
    enc_mlp = nn::Mlp2<T>(ch, cfg.enc_mlp_dim, cfg.d, rng);

    slot_mu = nn::param(nn::randn_tensor<T>({cfg.d}, rng, 1.0));
    slot_logsig = nn::param(Tensor<T>({cfg.d}, T(-1)));
    sa_ln_in = nn::LayerNormLayer<T>(cfg.d);
    sa_ln_slots = nn::LayerNormLayer<T>(cfg.d);
    sa_ln_mlp = nn::LayerNormLayer<T>(cfg.d);
    sa_q = nn::LinearLayer<T>(cfg.d, cfg.d, rng);
    sa_k = nn::LinearLayer<T>(cfg.d, cfg.d, rng);
    sa_v = nn::LinearLayer<T>(cfg.d, cfg.d, rng);
    sa_gru = nn::GruCell<T>(cfg.d, cfg.d, rng);
    sa_mlp = nn::Mlp2<T>(cfg.d, cfg.slot_mlp, cfg.d, rng);

    pred.reserve(static_cast<size_t>(cfg.pred_layers));
    for (int i = 0; i < cfg.pred_layers; ++i)
      pred.emplace_back(cfg.d, cfg.pred_heads, cfg.pred_mlp, rng);

    const int ir = cfg.dec_init_res();
    dec_pos = nn::SoftPositionEmbed<T>(ir, ir, cfg.d, rng);
    ch = cfg.d;
    for (int i = 0; i < 4; ++i) {
      dec[static_cast<size_t>(i)] = nn::Conv2dLayer<T>(
          ch, cfg.dec_filters[static_cast<size_t>(i)], 5, 1, 2, rng);
      ch = cfg.dec_filters[static_cast<size_t>(i)];
    }
    dec_rgb = nn::Conv2dLayer<T>(ch, 3, 3, 1, 1, rng);
    dec_alpha = nn::Conv2dLayer<T>(ch, 1, 3, 1, 1, rng);
  }

  // (B,3,S,S) -> (B, N, d) feature tokens with positions, N = feat_res^2.
  Var<T> encode(Var<T> x) const {
    for (int i = 0; i < 4; ++i) {
      x = enc[static_cast<size_t>(i)].forward(x);
      if (i + 1 < 4) x = nn::relu(x);
    }
    const int64_t B = x->value.dim(0), C = x->value.dim(1);
    const int64_t P = x->value.dim(2) * x->value.dim(3);
    x = nn::reshape(x, {B, C, P});
    x = nn::transpose_12(x);                 // (B,P,C)
    x = nn::add(x, enc_pos.forward());       // + (P,C)
    x = enc_ln.forward(x);
    return enc_mlp.forward(x);               // (B,P,d)
  }

  // Learned Gaussian, shared across slots: slots = mu + exp(logsig) * eps.
  Var<T> init_slots(int64_t B, Rng& rng) const {
    Tensor<T> eps({B * cfg.K, cfg.d});
    for (auto& v : eps.data) v = T(rng.normal());
    std::vector<int64_t> zeros(static_cast<size_t>(B * cfg.K), 0);
    auto sig = nn::gather_rows(nn::exp_op(nn::reshape(slot_logsig, {1, cfg.d})),
                               zeros);
    auto s = nn::add(nn::mul(nn::constant(std::move(eps)), sig), slot_mu);
    return nn::reshape(s, {B, cfg.K, cfg.d});
  }

  // One corrector call: the configured number of attention iterations.
  // slots (B,K,d), feats (B,N,d) -> (B,K,d).
  Var<T> slot_attention(Var<T> slots, Var<T> feats) const {
    const int64_t B = slots->value.dim(0), K = slots->value.dim(1);
    const int64_t N = feats->value.dim(1);
    auto in_n = sa_ln_in.forward(feats);
    auto k = sa_k.forward(in_n);  // (B,N,d)
    auto v = sa_v.forward(in_n);
    const T scl = T(1.0 / std::sqrt(double(cfg.d)));
    for (int it = 0; it < cfg.iters; ++it) {
      auto prev = slots;
      auto q = sa_q.forward(sa_ln_slots.forward(slots));     // (B,K,d)
      auto logits = nn::scale(nn::bmm_nt(q, k), scl);        // (B,K,N)
      auto attn = nn::softmax_dim1(logits);                  // over slots
      auto w = nn::normalize_lastdim(attn, T(1e-8));         // readout weights
      auto updates = nn::bmm_nn(w, v);                       // (B,K,d)
      auto h = sa_gru.forward(nn::reshape(updates, {B * K, cfg.d}),
                              nn::reshape(prev, {B * K, cfg.d}));
      slots = nn::reshape(h, {B, K, cfg.d});
      slots = nn::add(slots, sa_mlp.forward(sa_ln_mlp.forward(slots)));
    }
    return slots;
  }

  // Next-frame slot initialization; slot order is preserved.
  Var<T> predict_slots(Var<T> slots) const {
    for (const auto& blk : pred) slots = blk.forward(slots);
    return slots;
  }

  struct Decode {
    Var<T> recon;    // (B, 3, S', S')
    Var<T> weights;  // (B, K, P') alpha softmax over slots, sums to 1 per pixel
    Var<T> rgb;      // (B*K, 3, P') per-slot reconstructions
  };

  // Spatial-broadcast decode of every slot plus softmax-over-slots blending.
  Decode decode(Var<T> slots) const {
    const int64_t B = slots->value.dim(0), K = slots->value.dim(1);
    const int ir = cfg.dec_init_res();
    auto x = nn::reshape(slots, {B * K, cfg.d});
    x = nn::spatial_broadcast(x, int64_t(ir) * ir);          // (BK,d,ir*ir)
    x = nn::add(x, nn::transpose_12(dec_pos.forward()));     // + (d,ir*ir)
    x = nn::reshape(x, {B * K, cfg.d, ir, ir});
    for (int i = 0; i < 4; ++i) {
      if (i < 3) x = nn::upsample2x(x);
      x = nn::relu(dec[static_cast<size_t>(i)].forward(x));
    }
    auto rgb = nn::sigmoid(dec_rgb.forward(x));              // (BK,3,S',S')
    auto alpha = dec_alpha.forward(x);                       // (BK,1,S',S')
    const int64_t P = int64_t(cfg.dec_out_res) * cfg.dec_out_res;
    auto wts = nn::softmax_dim1(nn::reshape(alpha, {B, K, P}));
    auto rgb_flat = nn::reshape(rgb, {B * K, 3, P});
    auto weighted = nn::mul_channel_bcast(rgb_flat, nn::reshape(wts, {B * K, 1, P}));
    auto summed = nn::sum_dim1(nn::reshape(weighted, {B, K, 3 * P}));
    Decode out;
    out.recon = nn::reshape(summed, {B, 3, cfg.dec_out_res, cfg.dec_out_res});
    out.weights = wts;
    out.rgb = rgb_flat;
    return out;
  }

  // Temporal chain: correct on frame 0, then predict -> correct per frame.
  struct SeqOut {
    std::vector<Var<T>> slots;     // per frame (B,K,d)
    std::vector<Decode> decodes;   // per frame (empty unless requested)
  };

  SeqOut forward(const std::vector<Tensor<T>>& frames, Rng& rng,
                 bool want_decodes) const {
    SeqOut out;
    Var<T> slots;
    for (size_t t = 0; t < frames.size(); ++t) {
      auto feats = encode(nn::constant(frames[t]));
      if (t == 0) {
        slots = init_slots(frames[t].dim(0), rng);
      } else {
        slots = predict_slots(slots);
      }
      slots = slot_attention(slots, feats);
      out.slots.push_back(slots);
      if (want_decodes) out.decodes.push_back(decode(slots));
    }
    return out;
  }

  nn::ParamRegistry<T> registry() const {
    nn::ParamRegistry<T> r;
    for (int i = 0; i < 4; ++i)
      enc[static_cast<size_t>(i)].reg(r, "enc.conv" + std::to_string(i));
    enc_pos.reg(r, "enc.pos");
    enc_ln.reg(r, "enc.ln");
    enc_mlp.reg(r, "enc.mlp");
    r.add("sa.mu", slot_mu);
    r.add("sa.logsig", slot_logsig);
    sa_ln_in.reg(r, "sa.ln_in");
    sa_ln_slots.reg(r, "sa.ln_slots");
    sa_ln_mlp.reg(r, "sa.ln_mlp");
    sa_q.reg(r, "sa.q");
    sa_k.reg(r, "sa.k");
    sa_v.reg(r, "sa.v");
    sa_gru.reg(r, "sa.gru");
    sa_mlp.reg(r, "sa.mlp");
    for (size_t i = 0; i < pred.size(); ++i)
      pred[i].reg(r, "pred.blk" + std::to_string(i));
    dec_pos.reg(r, "dec.pos");
    for (int i = 0; i < 4; ++i)
      dec[static_cast<size_t>(i)].reg(r, "dec.conv" + std::to_string(i));
    dec_rgb.reg(r, "dec.rgb");
    dec_alpha.reg(r, "dec.alpha");
    return r;
  }

  int64_t decoder_param_count() const {
    nn::ParamRegistry<T> r = registry();
    int64_t n = 0;
    for (const auto& [name, p] : r.named)
      if (name.rfind("dec.", 0) == 0) n += p->value.numel();
    return n;
  }
};

// Per-pixel argmax over slot weights (values only): (B,K,P) -> B masks of P
// ints in [1, K] (labels are 1-based so 0 stays "background" elsewhere).
template <typename T>
std::vector<std::vector<int>> slot_masks(const Tensor<T>& weights) {
  const int64_t B = weights.dim(0), K = weights.dim(1), P = weights.dim(2);
  std::vector<std::vector<int>> out(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    auto& m = out[static_cast<size_t>(b)];
    m.resize(static_cast<size_t>(P));
    for (int64_t p = 0; p < P; ++p) {
      int best = 0;
      T bw = weights[(b * K + 0) * P + p];
      for (int64_t k = 1; k < K; ++k) {
        const T w = weights[(b * K + k) * P + p];
        if (w > bw) {
          bw = w;
          best = static_cast<int>(k);
        }
      }
      m[static_cast<size_t>(p)] = best + 1;
    }
  }
  return out;
}

// Nearest-neighbor upsample of an integer mask from res r to res R (R % r == 0).
std::vector<int> upsample_mask(const std::vector<int>& mask, int r, int R);

}  // namespace slotdrive::savi
