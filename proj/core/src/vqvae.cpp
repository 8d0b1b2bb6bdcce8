#include "slotdrive/vqvae.hpp"

namespace slotdrive::vq {

nlohmann::json VqConfig::to_json() const {
  return {{"in_ch", in_ch},
          {"in_res", in_res},
          {"codebook", codebook},
          {"latent_dim", latent_dim},
          {"beta", beta},
          {"enc_filters", enc_filters},
          {"dec_filters", dec_filters},
          {"batch", batch},
          {"steps", steps},
          {"lr", lr},
          {"clip", clip},
          {"warmup_frac_den", warmup_frac_den}};
}

VqConfig VqConfig::from_json(const nlohmann::json& j) {
  VqConfig c;
  c.in_ch = j.at("in_ch");
  c.in_res = j.at("in_res");
  c.codebook = j.at("codebook");
  c.latent_dim = j.at("latent_dim");
  c.beta = j.at("beta");
  c.enc_filters = j.at("enc_filters");
  c.dec_filters = j.at("dec_filters");
  c.batch = j.at("batch");
  c.steps = j.at("steps");
  c.lr = j.at("lr");
  c.clip = j.at("clip");
  c.warmup_frac_den = j.at("warmup_frac_den");
  return c;
}

}  // namespace slotdrive::vq
