#include "slotdrive/carformer.hpp"

#include <map>

namespace slotdrive::cf {

namespace {
std::string mode_str(SceneMode m) {
  switch (m) {
    case SceneMode::kSlots: return "slots";
    case SceneMode::kAttributes: return "attributes";
    case SceneMode::kVq: return "vqvae";
  }
  return "slots";
}

SceneMode mode_from(const std::string& s) {
  if (s == "slots") return SceneMode::kSlots;
  if (s == "attributes") return SceneMode::kAttributes;
  if (s == "vqvae") return SceneMode::kVq;
  SD_CHECK(false, ConfigError, "unknown scene mode '" << s << "'");
  return SceneMode::kSlots;
}
}  // namespace

nlohmann::json BackboneConfig::to_json() const {
  return {{"H", H},
          {"layers", layers},
          {"heads", heads},
          {"mode", mode_str(mode)},
          {"scene_count", scene_count},
          {"scene_dim", scene_dim},
          {"vq_codes", vq_codes},
          {"W", W},
          {"f", f},
          {"train_steps", train_steps},
          {"block_attention", block_attention},
          {"lm_next_discrete", lm_next_discrete},
          {"alpha", alpha},
          {"gru_hidden", gru_hidden},
          {"batch", batch},
          {"epochs", epochs},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"clip", clip},
          {"warmup_epochs", warmup_epochs}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.H = j.at("H");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.mode = mode_from(j.at("mode"));
  c.scene_count = j.at("scene_count");
  c.scene_dim = j.at("scene_dim");
  c.vq_codes = j.at("vq_codes");
  c.W = j.at("W");
  c.f = j.at("f");
  c.train_steps = j.at("train_steps");
  c.block_attention = j.at("block_attention");
  c.lm_next_discrete = j.at("lm_next_discrete");
  c.alpha = j.at("alpha");
  c.gru_hidden = j.at("gru_hidden");
  c.batch = j.at("batch");
  c.epochs = j.at("epochs");
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.clip = j.at("clip");
  c.warmup_epochs = j.at("warmup_epochs");
  SD_CHECK(c.H % c.heads == 0, ConfigError, "H must be divisible by heads");
  return c;
}

TokenLayout build_layout(const BackboneConfig& cfg, int steps) {
  SD_CHECK(steps >= 1, ConfigError, "layout needs at least one step");
  SD_CHECK(cfg.H % cfg.heads == 0, ConfigError, "H must be divisible by heads");
  TokenLayout L;
  L.steps = steps;
  L.scene_tokens = cfg.scene_count;
  L.route_tokens = cfg.mode == SceneMode::kVq ? 0 : 2;
  L.wp_tokens = 2 * cfg.W;
  L.step_len = 4 + L.scene_tokens + L.route_tokens + L.wp_tokens;
  L.tokens.reserve(static_cast<size_t>(L.step_len) * steps);
  for (int s = 0; s < steps; ++s) {
    const int blk = cfg.block_attention ? s : -1;
    L.tokens.push_back({Attr::kGx, -1});
    L.tokens.push_back({Attr::kGy, -1});
    L.tokens.push_back({Attr::kLight, -1});
    L.tokens.push_back({Attr::kSpeed, -1});
    for (int k = 0; k < L.scene_tokens; ++k)
      L.tokens.push_back({cfg.mode == SceneMode::kVq ? Attr::kVq : Attr::kScene, blk});
    for (int k = 0; k < L.route_tokens; ++k)
      L.tokens.push_back({Attr::kRoute, blk});
    for (int j = 0; j < L.wp_tokens; ++j)
      L.tokens.push_back({j % 2 == 0 ? Attr::kWx : Attr::kWy, -1});
  }
  return L;
}

Tensor<uint8_t> block_mask(const TokenLayout& layout) {
  const int64_t T = layout.size();
  // Validate that each block id occupies one contiguous run.
  std::map<int, std::pair<int64_t, int64_t>> span;  // id -> [first, last]
  for (int64_t i = 0; i < T; ++i) {
    const int b = layout.tokens[static_cast<size_t>(i)].block;
    if (b < 0) continue;
    auto it = span.find(b);
    if (it == span.end()) {
      span[b] = {i, i};
    } else {
      SD_CHECK(i == it->second.second + 1, OverlappingBlocks,
               "block " << b << " is not contiguous at position " << i);
      it->second.second = i;
    }
  }
  Tensor<uint8_t> m({T, T});
  for (int64_t i = 0; i < T; ++i) {
    const int bi = layout.tokens[static_cast<size_t>(i)].block;
    for (int64_t j = 0; j < T; ++j) {
      const int bj = layout.tokens[static_cast<size_t>(j)].block;
      m[i * T + j] = (j <= i || (bi >= 0 && bi == bj)) ? 1 : 0;
    }
  }
  return m;
}

Tensor<uint8_t> causal_mask(int len) {
  const int64_t T = len;
  Tensor<uint8_t> m({T, T});
  for (int64_t i = 0; i < T; ++i)
    for (int64_t j = 0; j < T; ++j) m[i * T + j] = j <= i ? 1 : 0;
  return m;
}

std::shared_ptr<Tensor<uint8_t>> tile_mask(const Tensor<uint8_t>& m,
                                           int64_t copies) {
  SD_SHAPE(m.rank() == 2 && m.dim(0) == m.dim(1), "mask must be square");
  const int64_t T = m.dim(0);
  auto out = std::make_shared<Tensor<uint8_t>>(nn::Shape{copies, T, T});
  for (int64_t c = 0; c < copies; ++c)
    std::copy_n(m.ptr(), T * T, out->ptr() + c * T * T);
  return out;
}

}  // namespace slotdrive::cf
