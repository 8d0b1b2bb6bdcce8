#pragma once

// Training pipelines that tie the pieces together: dataset preparation
// (enlargement + temporally-consistent coloring), perception training (slot
// model, VQ-VAE), attribute quantizer fitting, perception-encoded episode
// caches, trajectory assembly, and the driving-transformer trainer.
//
// Everything here is deterministic given its config (seeds included), and all
// artifacts travel as "SDC1" checkpoints plus plain-text quantizer files.

#include <optional>
#include <string>
#include <vector>

#include "slotdrive/carformer.hpp"
#include "slotdrive/dataset.hpp"
#include "slotdrive/kmeans.hpp"
#include "slotdrive/savi.hpp"
#include "slotdrive/vqvae.hpp"

namespace slotdrive::pipe {

// Attribute-mode scene vectors: per object, ego-frame
// (x, y, cos yaw, sin yaw, speed, length, width).
inline constexpr int kAttrDim = 7;

// ---------------------------------------------------------------------------
// episode preparation
// ---------------------------------------------------------------------------

// A loaded episode with load-time transforms applied: optional vehicle
// enlargement on the binary frames and temporally-consistent RGB coloring.
struct PreppedEpisode {
  data::EpisodeData ep;                   // records; frames dropped unless kept
  std::vector<std::vector<uint8_t>> rgb;  // per step, 3*S*S bytes in [0,255]
  int S = 0;
};

// Applies enlargement (in place) and coloring. With `keep_frames` false the
// binary channels are released after coloring to keep episode sets small;
// instance ground truth is re-rendered from the vehicle records instead.
PreppedEpisode prep_episode(data::EpisodeData ep, const bev::BevConfig& cfg,
                            bool enlarge, bool keep_frames);

// Dataset + a consistent view of its episodes, shareable across trainers.
struct EpisodeBundle {
  std::string dataset_dir;
  data::Manifest man;
  bev::BevConfig bcfg;
  bool enlarge = true;
  std::vector<PreppedEpisode> eps;  // manifest order

  std::vector<int> split(const std::string& name) const {
    return data::split_indices(man, name);
  }
};

EpisodeBundle load_bundle(const std::string& dataset_dir, bool enlarge,
                          bool keep_frames, int max_episodes = -1);

// (B,3,S,S) float batch from colored byte frames, scaled to [0,1].
nn::Tensor<float> rgb_batch(const std::vector<const std::vector<uint8_t>*>& frames,
                            int S);

// Box-average downsample (B,C,S,S) -> (B,C,S/f,S/f).
nn::Tensor<float> box_downsample(const nn::Tensor<float>& x, int factor);

// ---------------------------------------------------------------------------
// attribute quantizers
// ---------------------------------------------------------------------------

// Collects speed/light/target/waypoint samples from the train split only and
// fits the fixed vocabulary family (14 / 2 / 16 per dim / 24 per dim).
quant::QuantizerSet fit_quantizers_for(const EpisodeBundle& b, uint64_t seed);

// ---------------------------------------------------------------------------
// slot-model training
// ---------------------------------------------------------------------------

struct SaviTrainConfig {
  savi::SaviConfig model;
  std::string dataset_dir;
  std::string out_dir;
  uint64_t seed = 1;
  bool enlarge = true;
  int log_every = 50;
  int eval_every = 250;   // steps between val fg-ARI probes (0 = final only)
  int eval_frames = 160;  // frames per probe
  int max_episodes = -1;  // cap loaded episodes (speed knob; -1 = all)
};

struct SaviTrainResult {
  double final_loss = 0;
  double best_val_ari = 0;
  double final_val_ari = 0;
  std::string best_path, final_path;
  int steps = 0;
};

SaviTrainResult train_savi(const SaviTrainConfig& cfg);

void save_savi(const savi::SaviModel<float>& m, bool enlarge, uint64_t seed,
               const std::string& path);
savi::SaviModel<float> load_savi(const std::string& path, bool* enlarge = nullptr);

// Mean fg-ARI of upsampled slot masks against enlarged ground-truth instances
// over up to `max_frames` frames of the given episodes (sequential forward,
// per-episode rng streams derived from `seed`).
double savi_val_ari(const savi::SaviModel<float>& m, const EpisodeBundle& b,
                    const std::vector<int>& episodes, uint64_t seed,
                    int max_frames);

// ---------------------------------------------------------------------------
// VQ-VAE training
// ---------------------------------------------------------------------------

struct VqTrainConfig {
  vq::VqConfig model;
  std::string dataset_dir;
  std::string out_dir;
  uint64_t seed = 1;
  bool enlarge = true;
  int log_every = 50;
  int eval_frames = 96;
  int max_episodes = -1;
};

struct VqTrainResult {
  double final_loss = 0;
  double val_iou = 0;        // mean per-channel IoU of round-tripped frames
  double codebook_use = 0;   // fraction of codes hit on the val probe
  std::string path;
  int steps = 0;
};

VqTrainResult train_vqvae(const VqTrainConfig& cfg);

void save_vqvae(const vq::VqVae<float>& m, bool enlarge, uint64_t seed,
                const std::string& path);
vq::VqVae<float> load_vqvae(const std::string& path, bool* enlarge = nullptr);

// ---------------------------------------------------------------------------
// frozen perception + episode encoding
// ---------------------------------------------------------------------------

struct Perception {
  cf::SceneMode mode = cf::SceneMode::kSlots;
  std::optional<savi::SaviModel<float>> savi;
  std::optional<vq::VqVae<float>> vq;
  int attr_slots = 0;  // K for attribute mode

  // Serialized parameter bytes (empty for attribute mode); used to assert the
  // perception weights stay frozen through downstream training.
  std::vector<uint8_t> param_bytes() const;
};

// Loads the checkpoint for slot / vq modes (throws MissingPerceptionCheckpoint
// when the path is empty or unreadable); attribute mode takes no checkpoint.
Perception load_perception(cf::SceneMode mode, const std::string& ckpt_path,
                           int attr_slots = 0);

// Aligns the scene-token geometry of a backbone config with the loaded
// perception: slot count and width for slot models, the attribute width, or
// the VQ grid size and codebook.
void fit_model_to_perception(cf::BackboneConfig& mc, const Perception& per);

// Per-step scene encodings of one episode under frozen perception.
struct EncodedEpisode {
  std::vector<std::vector<double>> scene;  // per step, K*d (slots/attributes)
  std::vector<std::vector<int>> codes;     // per step, G*G (vq mode)
  std::vector<std::vector<int>> ids;       // per step, K vehicle ids (attributes)
};

EncodedEpisode encode_episode(const Perception& per, const PreppedEpisode& pe,
                              const bev::BevConfig& bcfg, bool enlarge);

std::vector<EncodedEpisode> encode_all(const Perception& per,
                                       const EpisodeBundle& b);

// ---------------------------------------------------------------------------
// trajectory assembly
// ---------------------------------------------------------------------------

// Builds the token-ready trajectory for step `t` of an episode: quantized
// goal/light/speed, scene block, route descriptors, quantized + continuous
// waypoint targets, and (with `want_future`) the t+f scene/route forecast
// targets and t+1 discrete targets.
cf::Trajectory make_trajectory(const PreppedEpisode& pe, const EncodedEpisode& enc,
                               int t, const quant::QuantizerSet& qs,
                               const cf::BackboneConfig& ccfg, bool want_future);

// ---------------------------------------------------------------------------
// driving-transformer training
// ---------------------------------------------------------------------------

struct CfTrainConfig {
  cf::BackboneConfig model;
  std::string dataset_dir;
  std::string out_dir;
  std::string perception_ckpt;  // slot/vq checkpoint ("" for attribute mode)
  std::string quantizer_path;   // "" = fit from the train split and save
  uint64_t seed = 1;
  bool enlarge = true;
  int log_every = 20;
  int max_episodes = -1;
};

struct CfTrainResult {
  double best_val = 0, final_val = 0, final_train = 0;
  std::string best_path, final_path, quantizer_path;
  int steps = 0;
  bool perception_unchanged = true;  // frozen-weights byte check
};

// Shared heavy inputs may be passed in to amortize across runs; when null they
// are computed from the config. `enc` must match `bundle` order.
CfTrainResult train_carformer(const CfTrainConfig& cfg,
                              const EpisodeBundle* bundle = nullptr,
                              const std::vector<EncodedEpisode>* enc = nullptr);

// A driving-ready agent: transformer + quantizers + frozen perception.
struct Agent {
  cf::BackboneConfig ccfg;
  std::optional<cf::CarFormer<float>> model;
  quant::QuantizerSet qs;
  Perception per;
  bool enlarge = true;
};

// Loads the transformer checkpoint (which embeds its quantizers and remembers
// its perception checkpoint path; `perception_ckpt` overrides when non-empty).
Agent load_agent(const std::string& carformer_ckpt,
                 const std::string& perception_ckpt = "");

}  // namespace slotdrive::pipe
