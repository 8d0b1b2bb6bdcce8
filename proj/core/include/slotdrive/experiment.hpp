#pragma once

// Experiment orchestration: run directories with config echoes, config-hash
// artifact caching, multi-seed ablation studies over the main design axes,
// and human- plus machine-readable reports.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "slotdrive/driving.hpp"
#include "slotdrive/pipeline.hpp"

namespace slotdrive::exp {

// Creates the directory (parents included) and writes <dir>/config.json.
// Returns the directory path.
std::string init_run_dir(const std::string& dir, const nlohmann::json& config);

// Stable 64-bit FNV-1a hash of the compact JSON dump; keys artifact caches.
uint64_t config_hash(const nlohmann::json& j);

struct MeanStd {
  double mean = 0, stddev = 0;  // population standard deviation
};
MeanStd mean_std(const std::vector<double>& xs);

// ---------------------------------------------------------------------------
// ablation axes
// ---------------------------------------------------------------------------

enum class Axis {
  kSlotCount,       // slot vocabulary size (7 / 14 / 30)
  kEnlargement,     // small-vehicle enlargement on vs off
  kBlockAttention,  // scene-block attention mask on vs off
  kForecasting,     // forecast loss weight 40 vs 0
  kActionHead,      // recurrent waypoint head vs quantized-token head
  kCreeping,        // anti-deadlock creeping on vs off
};

Axis axis_from(const std::string& name);  // throws ConfigError on unknown
std::string axis_name(Axis a);
std::vector<Axis> all_axes();

// One trainable/evaluable cell of a study.
struct Variant {
  std::string name;
  cf::BackboneConfig model;
  bool enlarge = true;
  std::string perception_ckpt;  // slot checkpoint the variant encodes with
  bool drive_creep = true;
  bool drive_lm_head = false;

  nlohmann::json train_key() const;  // identity of the trained artifact
};

struct StudyConfig {
  std::string dataset_dir;
  std::string work_dir;  // cached checkpoints + reports live here
  std::vector<uint64_t> train_seeds = {1, 2, 3};
  std::vector<uint64_t> route_seeds = {901, 902, 903, 904, 905, 906};
  cf::BackboneConfig base;   // shared transformer defaults (slots mode)
  drive::DriveConfig drive;  // shared closed-loop settings
  // Slot checkpoints for the variants that need them; empty = variant skipped
  // (slot-count 14 is optional, the rest are required by their axis).
  std::string savi_k7, savi_k7_raw, savi_k14, savi_k30;
  int forecast_frames = 120;  // frames for forecast metrics
  int max_episodes = -1;      // training-dataset cap
};

struct SeedOutcome {
  uint64_t seed = 0;
  double rc = 0, is = 0, ds = 0;
  double forecast_ari = 0, copy_ari = 0;  // filled when forecast eval runs
  std::string ckpt;
};

struct VariantResult {
  Variant variant;
  std::vector<SeedOutcome> seeds;
  MeanStd rc, is, ds, forecast_ari;
};

struct AblationReport {
  Axis axis = Axis::kSlotCount;
  std::vector<VariantResult> variants;
};

std::vector<Variant> variants_for(Axis axis, const StudyConfig& sc);

// Trains (or reuses a cached checkpoint for) each seed, then evaluates
// closed-loop driving; optionally adds forecast-vs-copy metrics.
VariantResult run_variant(const Variant& v, const StudyConfig& sc,
                          bool want_forecast);

AblationReport run_ablation(Axis axis, const StudyConfig& sc);

std::string report_text(const AblationReport& r);
nlohmann::json report_json(const AblationReport& r);

}  // namespace slotdrive::exp
