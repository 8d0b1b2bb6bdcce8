// Slot-attention perception model and the VQ scene baseline. The attention
// normalization checks re-run the corrector loop op by op (every piece of the
// model is public) so the per-iteration softmax weights can be inspected.

#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"

#include "slotdrive/autograd.hpp"
#include "slotdrive/bev.hpp"
#include "slotdrive/common.hpp"
#include "slotdrive/rng.hpp"
#include "slotdrive/savi.hpp"
#include "slotdrive/vqvae.hpp"

using namespace slotdrive;
using nn::Tensor;
using nn::Var;

namespace {

savi::SaviConfig tiny_savi(int K) {
  savi::SaviConfig c;
  c.K = K;
  c.d = 16;
  c.slot_mlp = 32;
  c.iters = 2;
  c.context = 2;
  c.in_res = 16;
  c.in_ch = 3;
  c.enc_filters = {8, 8, 8, 8};
  c.enc_strides = {2, 2, 1, 1};  // 4x4 feature grid
  c.enc_kernel = 5;
  c.enc_mlp_dim = 16;
  c.dec_filters = {8, 8, 8, 8};
  c.dec_out_res = 8;
  c.pred_layers = 2;
  c.pred_heads = 4;
  c.pred_mlp = 32;
  return c;
}

template <typename T>
Tensor<T> rand_frames(int64_t B, int ch, int res, Rng& rng) {
  Tensor<T> x({B, ch, res, res});
  for (auto& v : x.data) v = T(rng.uniform());
  return x;
}

// Reorder dimension 1 of (B, K, rest): out[b,k,:] = in[b,perm[k],:].
template <typename T>
Tensor<T> permute_k(const Tensor<T>& t, const std::vector<int64_t>& perm) {
  const int64_t B = t.dim(0), K = t.dim(1);
  const int64_t rest = t.numel() / (B * K);
  Tensor<T> out(t.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t k = 0; k < K; ++k)
      for (int64_t r = 0; r < rest; ++r)
        out[(b * K + k) * rest + r] = t[(b * K + perm[size_t(k)]) * rest + r];
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST_CASE("slot attention: weights normalize over slots at every iteration") {
  for (uint64_t seed : {11ull, 12ull, 13ull}) {
    savi::SaviModel<float> m(tiny_savi(5), seed);
    Rng rng(seed, "t");
    const int64_t B = 2, K = m.cfg.K, d = m.cfg.d;
    auto x = rand_frames<float>(B, 3, m.cfg.in_res, rng);
    auto feats = m.encode(nn::constant(x));
    const int64_t N = feats->value.dim(1);
    auto slots = nn::constant(m.init_slots(B, rng)->value);

    // Mirror of the corrector loop, keeping each iteration's attention map.
    auto in_n = m.sa_ln_in.forward(feats);
    auto kk = m.sa_k.forward(in_n);
    auto vv = m.sa_v.forward(in_n);
    const float scl = float(1.0 / std::sqrt(double(d)));
    Var<float> cur = slots;
    for (int it = 0; it < m.cfg.iters; ++it) {
      auto prev = cur;
      auto q = m.sa_q.forward(m.sa_ln_slots.forward(cur));
      auto logits = nn::scale(nn::bmm_nt(q, kk), scl);
      auto attn = nn::softmax_dim1(logits);  // (B,K,N)

      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
          double s = 0.0;
          for (int64_t k = 0; k < K; ++k) s += double(attn->value[(b * K + k) * N + n]);
          CHECK(std::abs(s - 1.0) < 1e-5);
        }

      auto w = nn::normalize_lastdim(attn, 1e-8f);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t k = 0; k < K; ++k) {
          double s = 0.0;
          for (int64_t n = 0; n < N; ++n) s += double(w->value[(b * K + k) * N + n]);
          CHECK(std::abs(s - 1.0) < 1e-5);  // readout weights per slot
        }

      auto updates = nn::bmm_nn(w, vv);
      auto h = m.sa_gru.forward(nn::reshape(updates, {B * K, d}),
                                nn::reshape(prev, {B * K, d}));
      cur = nn::reshape(h, {B, K, d});
      cur = nn::add(cur, m.sa_mlp.forward(m.sa_ln_mlp.forward(cur)));
    }

    // The mirror must be the real computation, not a lookalike.
    auto lib = m.slot_attention(slots, feats);
    CHECK(max_abs_diff(lib->value, cur->value) == 0.0);

    // Decoder alpha blending normalizes over slots at every output pixel.
    auto dec = m.decode(lib);
    const int64_t P = dec.weights->value.dim(2);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < P; ++p) {
        double s = 0.0;
        for (int64_t k = 0; k < K; ++k) s += double(dec.weights->value[(b * K + k) * P + p]);
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
  }
}

TEST_CASE("slot attention: a single slot takes all the weight") {
  savi::SaviModel<float> m(tiny_savi(1), 3);
  Rng rng(3, "t");
  auto x = rand_frames<float>(1, 3, m.cfg.in_res, rng);
  auto feats = m.encode(nn::constant(x));
  auto slots = m.init_slots(1, rng);

  auto q = m.sa_q.forward(m.sa_ln_slots.forward(slots));
  auto attn = nn::softmax_dim1(
      nn::scale(nn::bmm_nt(q, m.sa_k.forward(m.sa_ln_in.forward(feats))),
                float(1.0 / std::sqrt(double(m.cfg.d)))));
  for (int64_t i = 0; i < attn->value.numel(); ++i)
    CHECK(double(attn->value[i]) == doctest::Approx(1.0).epsilon(1e-12));

  auto dec = m.decode(m.slot_attention(slots, feats));
  for (int64_t i = 0; i < dec.weights->value.numel(); ++i)
    CHECK(double(dec.weights->value[i]) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("slot attention: corrector, predictor and decoder are permutation-equivariant") {
  for (uint64_t seed : {21ull, 22ull}) {
    savi::SaviModel<float> m(tiny_savi(5), seed);
    Rng rng(seed, "p");
    const int64_t B = 2;
    auto x = rand_frames<float>(B, 3, m.cfg.in_res, rng);
    auto feats = m.encode(nn::constant(x));
    auto s0 = nn::constant(m.init_slots(B, rng)->value);
    const std::vector<int64_t> perm{2, 0, 4, 1, 3};
    auto sp = nn::constant(permute_k(s0->value, perm));

    auto a0 = m.slot_attention(s0, feats);
    auto a1 = m.slot_attention(sp, feats);
    CHECK(max_abs_diff(a1->value, permute_k(a0->value, perm)) < 1e-5);

    auto p0 = m.predict_slots(s0);
    auto p1 = m.predict_slots(sp);
    CHECK(max_abs_diff(p1->value, permute_k(p0->value, perm)) < 1e-5);

    auto d0 = m.decode(a0);
    auto d1 = m.decode(nn::constant(permute_k(a0->value, perm)));
    CHECK(max_abs_diff(d1.recon->value, d0.recon->value) < 1e-5);
    CHECK(max_abs_diff(d1.weights->value, permute_k(d0.weights->value, perm)) < 1e-5);
  }
}

TEST_CASE("savi: deterministic init and forward under a fixed seed") {
  savi::SaviModel<float> m(tiny_savi(4), 8);
  Rng ra(5, "s"), rb(5, "s");
  auto ia = m.init_slots(2, ra);
  auto ib = m.init_slots(2, rb);
  CHECK(max_abs_diff(ia->value, ib->value) == 0.0);

  Rng rx(6, "d");
  auto f0 = rand_frames<float>(2, 3, m.cfg.in_res, rx);
  auto f1 = rand_frames<float>(2, 3, m.cfg.in_res, rx);
  Rng r1(7, "f"), r2(7, "f");
  auto o1 = m.forward({f0, f1}, r1, true);
  auto o2 = m.forward({f0, f1}, r2, true);
  REQUIRE(o1.slots.size() == 2);
  CHECK(max_abs_diff(o1.slots[1]->value, o2.slots[1]->value) == 0.0);
  CHECK(max_abs_diff(o1.decodes[1].recon->value, o2.decodes[1].recon->value) == 0.0);

  // Different init rng -> different slots (the learned noise actually acts).
  Rng r3(8, "f");
  auto o3 = m.forward({f0, f1}, r3, false);
  CHECK(max_abs_diff(o1.slots[0]->value, o3.slots[0]->value) > 0.0);
}

TEST_CASE("savi: many-slot light preset has a smaller decoder than the base preset") {
  savi::SaviModel<float> base(savi::savi_base(7), 1);
  savi::SaviModel<float> light(savi::savi_light(30), 1);
  CHECK(light.decoder_param_count() < base.decoder_param_count());
}

TEST_CASE("savi: desk preset geometry") {
  const auto c = savi::savi_desk(7);
  CHECK(c.in_res == 96);
  CHECK(c.feat_res() == 24);
  CHECK(c.dec_out_res % 8 == 0);
  CHECK(c.dec_init_res() * 8 == c.dec_out_res);
}

TEST_CASE("savi: config JSON round trip") {
  auto c = savi::savi_light(14);
  c.steps = 1234;
  c.lr = 5e-4;
  const auto j = c.to_json();
  const auto back = savi::SaviConfig::from_json(j);
  CHECK(back.K == c.K);
  CHECK(back.d == c.d);
  CHECK(back.enc_strides == c.enc_strides);
  CHECK(back.dec_filters == c.dec_filters);
  CHECK(back.dec_out_res == c.dec_out_res);
  CHECK(back.steps == 1234);
  CHECK(back.lr == doctest::Approx(5e-4));
}

TEST_CASE("slot_masks: per-pixel argmax with 1-based labels") {
  Tensor<float> w({1, 3, 4});
  // pixel: 0    1    2    3
  const float vals[3][4] = {{0.7f, 0.1f, 0.2f, 0.4f},
                            {0.2f, 0.8f, 0.3f, 0.4f},
                            {0.1f, 0.1f, 0.5f, 0.2f}};
  for (int k = 0; k < 3; ++k)
    for (int p = 0; p < 4; ++p) w[int64_t(k) * 4 + p] = vals[k][p];
  const auto masks = savi::slot_masks(w);
  REQUIRE(masks.size() == 1);
  CHECK(masks[0] == std::vector<int>{1, 2, 3, 1});  // pixel 3 ties -> lower slot
}

TEST_CASE("upsample_mask: nearest-neighbor block structure") {
  const std::vector<int> m{1, 2, 3, 4};  // 2x2
  const auto up = savi::upsample_mask(m, 2, 4);
  REQUIRE(up.size() == 16);
  const std::vector<int> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(up == want);
}

// ---------------------------------------------------------------------------
// VQ-VAE scene baseline
// ---------------------------------------------------------------------------

namespace {

vq::VqConfig tiny_vq() {
  vq::VqConfig c;
  c.in_res = 32;
  c.codebook = 8;
  c.latent_dim = 4;
  c.enc_filters = {4, 4, 4, 4};
  c.dec_filters = {4, 4, 4, 4};
  return c;
}

bev::BevFrame random_frame(int S, Rng& rng) {
  bev::BevFrame f(S, bev::kNumChannels);
  for (auto& v : f.data) v = rng.bernoulli(0.2) ? 1 : 0;
  return f;
}

}  // namespace

TEST_CASE("vqvae: frame encoding is a deterministic row-major code grid") {
  vq::VqVae<float> m(tiny_vq(), 4);
  Rng rng(9, "vq");
  const auto f = random_frame(32, rng);
  const auto t = m.encode_frame(f);
  CHECK(t.G == 2);
  REQUIRE(t.indices.size() == 4);
  for (int v : t.indices) {
    CHECK(v >= 0);
    CHECK(v < m.cfg.codebook);
  }
  for (int r = 0; r < t.G; ++r)
    for (int c = 0; c < t.G; ++c) CHECK(t.at(r, c) == t.indices[size_t(r) * t.G + c]);

  const auto t2 = m.encode_frame(f);
  CHECK(t2.indices == t.indices);

  bev::BevFrame wrong(16, bev::kNumChannels);
  CHECK_THROWS_AS(m.encode_frame(wrong), ShapeMismatch);
}

TEST_CASE("vqvae: nearest codes recover exact codebook rows") {
  vq::VqVae<float> m(tiny_vq(), 4);
  const int64_t D = m.cfg.latent_dim;
  Tensor<float> latents({3, D});
  const std::vector<int64_t> want{5, 0, 7};
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t k = 0; k < D; ++k)
      latents[i * D + k] = m.codebook->value[want[size_t(i)] * D + k];
  CHECK(m.nearest_codes(latents) == want);
}

TEST_CASE("vqvae: token decode shape and validation") {
  vq::VqVae<float> m(tiny_vq(), 4);
  vq::SceneTokens t;
  t.G = 2;
  t.indices = {0, 3, 7, 1};
  const auto logits = m.decode_tokens(t);
  REQUIRE(logits.dim(0) == bev::kNumChannels);
  REQUIRE(logits.dim(1) == 32);
  REQUIRE(logits.dim(2) == 32);
  for (int64_t i = 0; i < logits.numel(); ++i) CHECK(std::isfinite(double(logits[i])));

  vq::SceneTokens bad = t;
  bad.indices[2] = 8;  // out of the codebook
  CHECK_THROWS_AS(m.decode_tokens(bad), IndexOutOfRange);
  vq::SceneTokens badg = t;
  badg.G = 3;
  CHECK_THROWS_AS(m.decode_tokens(badg), ShapeMismatch);
}

TEST_CASE("vqvae: training forward reaches the encoder through straight-through") {
  vq::VqVae<float> m(tiny_vq(), 4);
  Rng rng(10, "vqt");
  Tensor<float> frames({2, bev::kNumChannels, 32, 32});
  for (auto& v : frames.data) v = rng.bernoulli(0.2) ? 1.0f : 0.0f;

  const auto out = m.forward_train(frames);
  CHECK(std::isfinite(double(out.loss->value[0])));
  CHECK(out.loss->value[0] > 0.0f);
  CHECK(out.codes.size() == 2u * 2 * 2);
  CHECK(out.bce > 0.0);

  nn::backward(out.loss);
  REQUIRE(m.codebook->grad.numel() > 0);
  REQUIRE(m.enc[0].W->grad.numel() > 0);
  double cb = 0, ec = 0;
  for (int64_t i = 0; i < m.codebook->grad.numel(); ++i)
    cb += std::abs(double(m.codebook->grad[i]));
  for (int64_t i = 0; i < m.enc[0].W->grad.numel(); ++i)
    ec += std::abs(double(m.enc[0].W->grad[i]));
  CHECK(cb > 0.0);
  CHECK(ec > 0.0);
}

TEST_CASE("vqvae: config JSON round trip") {
  auto c = tiny_vq();
  c.steps = 77;
  c.beta = 0.5;
  const auto back = vq::VqConfig::from_json(c.to_json());
  CHECK(back.in_res == 32);
  CHECK(back.codebook == 8);
  CHECK(back.latent_dim == 4);
  CHECK(back.enc_filters == c.enc_filters);
  CHECK(back.steps == 77);
  CHECK(back.beta == doctest::Approx(0.5));
}
