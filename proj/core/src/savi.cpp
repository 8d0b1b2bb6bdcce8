#include "slotdrive/savi.hpp"

#include "slotdrive/common.hpp"

namespace slotdrive::savi {

nlohmann::json SaviConfig::to_json() const {
  return {
      {"K", K},
      {"d", d},
      {"slot_mlp", slot_mlp},
      {"iters", iters},
      {"context", context},
      {"in_res", in_res},
      {"in_ch", in_ch},
      {"enc_filters", enc_filters},
      {"enc_strides", enc_strides},
      {"enc_kernel", enc_kernel},
      {"enc_mlp_dim", enc_mlp_dim},
      {"dec_filters", dec_filters},
      {"dec_out_res", dec_out_res},
      {"pred_layers", pred_layers},
      {"pred_heads", pred_heads},
      {"pred_mlp", pred_mlp},
      {"batch", batch},
      {"steps", steps},
      {"lr", lr},
      {"clip", clip},
      {"warmup_frac_den", warmup_frac_den},
  };
}

SaviConfig SaviConfig::from_json(const nlohmann::json& j) {
  SaviConfig c;
  c.K = j.at("K");
  c.d = j.at("d");
  c.slot_mlp = j.at("slot_mlp");
  c.iters = j.at("iters");
  c.context = j.at("context");
  c.in_res = j.at("in_res");
  c.in_ch = j.at("in_ch");
  c.enc_filters = j.at("enc_filters");
  c.enc_strides = j.at("enc_strides");
  c.enc_kernel = j.at("enc_kernel");
  c.enc_mlp_dim = j.at("enc_mlp_dim");
  c.dec_filters = j.at("dec_filters");
  c.dec_out_res = j.at("dec_out_res");
  c.pred_layers = j.at("pred_layers");
  c.pred_heads = j.at("pred_heads");
  c.pred_mlp = j.at("pred_mlp");
  c.batch = j.at("batch");
  c.steps = j.at("steps");
  c.lr = j.at("lr");
  c.clip = j.at("clip");
  c.warmup_frac_den = j.at("warmup_frac_den");
  return c;
}

SaviConfig savi_base(int K) {
  SaviConfig c;
  c.K = K;
  return c;
}

SaviConfig savi_light(int K) {
  SaviConfig c;
  c.K = K;
  c.enc_strides = {2, 1, 1, 1};
  c.enc_mlp_dim = 128;
  c.dec_filters = {64, 32, 16, 8};
  return c;
}

SaviConfig savi_desk(int K) {
  SaviConfig c;
  c.K = K;
  c.d = 64;
  c.slot_mlp = 128;
  c.enc_filters = {32, 32, 32, 32};
  c.enc_strides = {2, 2, 1, 1};
  c.enc_mlp_dim = 128;
  c.dec_filters = {48, 24, 12, 8};
  c.dec_out_res = 24;
  c.pred_mlp = 256;
  c.batch = 16;
  c.steps = 1500;
  c.lr = 3e-4;
  return c;
}

std::vector<int> upsample_mask(const std::vector<int>& mask, int r, int R) {
  SD_CHECK(r > 0 && R % r == 0, ConfigError, "mask upsample " << r << " -> " << R);
  SD_CHECK(mask.size() == static_cast<size_t>(r) * static_cast<size_t>(r),
           ShapeMismatch, "mask size");
  if (R == r) return mask;
  const int f = R / r;
  std::vector<int> out(static_cast<size_t>(R) * static_cast<size_t>(R));
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < R; ++j)
      out[static_cast<size_t>(i) * R + j] =
          mask[static_cast<size_t>(i / f) * r + static_cast<size_t>(j / f)];
  return out;
}

}  // namespace slotdrive::savi
