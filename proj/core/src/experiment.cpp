#include "slotdrive/experiment.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace slotdrive::exp {

namespace fs = std::filesystem;

std::string init_run_dir(const std::string& dir, const nlohmann::json& config) {
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "config.json");
  SD_CHECK(out.good(), IoError, "cannot write config echo in '" << dir << "'");
  out << config.dump(2) << "\n";
  return dir;
}

uint64_t config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= double(xs.size());
  double acc = 0;
  for (double x : xs) acc += (x - m.mean) * (x - m.mean);
  m.stddev = std::sqrt(acc / double(xs.size()));
  return m;
}

// ---------------------------------------------------------------------------
// axes and variants
// ---------------------------------------------------------------------------

std::string axis_name(Axis a) {
  switch (a) {
    case Axis::kSlotCount: return "slot-count";
    case Axis::kEnlargement: return "enlargement";
    case Axis::kBlockAttention: return "block-attention";
    case Axis::kForecasting: return "forecasting";
    case Axis::kActionHead: return "action-head";
    case Axis::kCreeping: return "creeping";
  }
  return "?";
}

Axis axis_from(const std::string& name) {
  for (Axis a : all_axes())
    if (axis_name(a) == name) return a;
  SD_CHECK(false, ConfigError, "unknown ablation axis '" << name << "'");
  return Axis::kSlotCount;
}

std::vector<Axis> all_axes() {
  return {Axis::kSlotCount,   Axis::kEnlargement, Axis::kBlockAttention,
          Axis::kForecasting, Axis::kActionHead,  Axis::kCreeping};
}

nlohmann::json Variant::train_key() const {
  // Only what changes the trained artifact: drive-time switches excluded.
  return {{"model", model.to_json()},
          {"enlarge", enlarge},
          {"perception", perception_ckpt}};
}

std::vector<Variant> variants_for(Axis axis, const StudyConfig& sc) {
  auto base = [&](const std::string& name) {
    Variant v;
    v.name = name;
    v.model = sc.base;
    v.enlarge = true;
    v.perception_ckpt = sc.savi_k7;
    return v;
  };
  std::vector<Variant> out;
  switch (axis) {
    case Axis::kSlotCount: {
      auto v7 = base("slots-7");
      out.push_back(v7);
      if (!sc.savi_k14.empty()) {
        auto v14 = base("slots-14");
        v14.model.scene_count = 14;
        v14.perception_ckpt = sc.savi_k14;
        out.push_back(v14);
      }
      auto v30 = base("slots-30");
      v30.model.scene_count = 30;
      v30.perception_ckpt = sc.savi_k30;
      out.push_back(v30);
      break;
    }
    case Axis::kEnlargement: {
      auto raw = base("raw-vehicles");
      raw.enlarge = false;
      raw.perception_ckpt = sc.savi_k7_raw;
      out.push_back(raw);
      out.push_back(base("enlarged-vehicles"));
      break;
    }
    case Axis::kBlockAttention: {
      auto off = base("causal-only");
      off.model.block_attention = false;
      out.push_back(off);
      out.push_back(base("block-attention"));
      break;
    }
    case Axis::kForecasting: {
      auto off = base("no-forecast");
      off.model.alpha = 0.0;
      out.push_back(off);
      out.push_back(base("forecast-40"));
      break;
    }
    case Axis::kActionHead: {
      auto lm = base("quantized-head");
      lm.drive_lm_head = true;
      out.push_back(lm);
      out.push_back(base("recurrent-head"));
      break;
    }
    case Axis::kCreeping: {
      auto off = base("no-creep");
      off.drive_creep = false;
      out.push_back(off);
      out.push_back(base("creeping"));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// running
// ---------------------------------------------------------------------------

VariantResult run_variant(const Variant& v_in, const StudyConfig& sc,
                          bool want_forecast) {
  // Shared heavy inputs for all seeds of this variant, materialized only when
  // a seed actually trains (or the forecast eval needs frames) so fully cached
  // variants skip the dataset load and the perception encoding pass.
  const bool keep_frames = v_in.model.mode == cf::SceneMode::kVq;
  std::optional<pipe::EpisodeBundle> bundle;
  std::optional<std::vector<pipe::EncodedEpisode>> enc;
  pipe::Perception per = pipe::load_perception(v_in.model.mode, v_in.perception_ckpt,
                                               v_in.model.scene_count);
  const auto ensure_bundle = [&] {
    if (!bundle)
      bundle = pipe::load_bundle(sc.dataset_dir, v_in.enlarge, keep_frames,
                                 sc.max_episodes);
  };
  Variant v = v_in;
  pipe::fit_model_to_perception(v.model, per);
  VariantResult res;
  res.variant = v;

  std::vector<double> rcs, iss, dss, fars;
  for (uint64_t seed : sc.train_seeds) {
    nlohmann::json key = v.train_key();
    key["seed"] = seed;
    key["dataset"] = sc.dataset_dir;
    key["max_episodes"] = sc.max_episodes;
    char tag[32];
    std::snprintf(tag, sizeof tag, "%016" PRIx64, config_hash(key));
    const fs::path out_dir = fs::path(sc.work_dir) / "cache" / tag;
    const std::string final_ckpt = (out_dir / "carformer_final.ckpt").string();
    const std::string best_ckpt = (out_dir / "carformer_best.ckpt").string();
    if (!fs::exists(best_ckpt)) {
      init_run_dir(out_dir.string(), key);
      pipe::CfTrainConfig tc;
      tc.model = v.model;
      tc.dataset_dir = sc.dataset_dir;
      tc.out_dir = out_dir.string();
      tc.perception_ckpt = v.perception_ckpt;
      tc.seed = seed;
      tc.enlarge = v.enlarge;
      tc.max_episodes = sc.max_episodes;
      std::printf("[ablate] training %s seed %llu -> %s\n", v.name.c_str(),
                  static_cast<unsigned long long>(seed), tag);
      ensure_bundle();
      if (!enc) enc = pipe::encode_all(per, *bundle);
      pipe::train_carformer(tc, &*bundle, &*enc);
    } else {
      std::printf("[ablate] reusing %s seed %llu (%s)\n", v.name.c_str(),
                  static_cast<unsigned long long>(seed), tag);
    }

    pipe::Agent agent = pipe::load_agent(best_ckpt, v.perception_ckpt);
    drive::DriveConfig dc = sc.drive;
    dc.creep = v.drive_creep;
    dc.use_lm_waypoints = v.drive_lm_head;
    const drive::DriveSummary sum = drive::drive_agent(agent, dc, sc.route_seeds);

    SeedOutcome o;
    o.seed = seed;
    o.rc = sum.rc;
    o.is = sum.is;
    o.ds = sum.ds;
    o.ckpt = best_ckpt;
    if (want_forecast && v.model.mode == cf::SceneMode::kSlots) {
      ensure_bundle();
      const auto fe = drive::eval_forecast(agent, *bundle, bundle->split("val"),
                                           sc.forecast_frames);
      o.forecast_ari = fe.ari_pred;
      o.copy_ari = fe.ari_copy;
      fars.push_back(fe.ari_pred);
    }
    rcs.push_back(o.rc);
    iss.push_back(o.is);
    dss.push_back(o.ds);
    res.seeds.push_back(o);
    std::printf("[ablate] %s seed %llu: RC %.1f IS %.3f DS %.1f\n", v.name.c_str(),
                static_cast<unsigned long long>(seed), o.rc, o.is, o.ds);
  }
  res.rc = mean_std(rcs);
  res.is = mean_std(iss);
  res.ds = mean_std(dss);
  res.forecast_ari = mean_std(fars);
  return res;
}

AblationReport run_ablation(Axis axis, const StudyConfig& sc) {
  AblationReport rep;
  rep.axis = axis;
  const bool want_forecast = axis == Axis::kForecasting;
  for (const Variant& v : variants_for(axis, sc))
    rep.variants.push_back(run_variant(v, sc, want_forecast));
  return rep;
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

std::string report_text(const AblationReport& r) {
  char line[256];
  std::string out = "ablation axis: " + axis_name(r.axis) + "\n";
  std::snprintf(line, sizeof line, "%-20s %-16s %-16s %-16s %s\n", "variant",
                "DS", "RC", "IS", "seeds");
  out += line;
  for (const auto& v : r.variants) {
    std::snprintf(line, sizeof line,
                  "%-20s %6.1f +- %-6.1f %6.1f +- %-6.1f %6.3f +- %-6.3f %zu\n",
                  v.variant.name.c_str(), v.ds.mean, v.ds.stddev, v.rc.mean,
                  v.rc.stddev, v.is.mean, v.is.stddev, v.seeds.size());
    out += line;
    if (r.axis == Axis::kForecasting && !v.seeds.empty() &&
        v.variant.model.mode == cf::SceneMode::kSlots) {
      std::snprintf(line, sizeof line,
                    "%-20s   forecast ARI %.3f +- %.3f\n", "",
                    v.forecast_ari.mean, v.forecast_ari.stddev);
      out += line;
    }
  }
  return out;
}

nlohmann::json report_json(const AblationReport& r) {
  nlohmann::json j;
  j["axis"] = axis_name(r.axis);
  j["variants"] = nlohmann::json::array();
  for (const auto& v : r.variants) {
    nlohmann::json jv;
    jv["name"] = v.variant.name;
    jv["model"] = v.variant.model.to_json();
    jv["enlarge"] = v.variant.enlarge;
    jv["drive_creep"] = v.variant.drive_creep;
    jv["drive_lm_head"] = v.variant.drive_lm_head;
    jv["ds"] = {{"mean", v.ds.mean}, {"std", v.ds.stddev}};
    jv["rc"] = {{"mean", v.rc.mean}, {"std", v.rc.stddev}};
    jv["is"] = {{"mean", v.is.mean}, {"std", v.is.stddev}};
    if (!v.seeds.empty() && v.seeds.front().forecast_ari > 0)
      jv["forecast_ari"] = {{"mean", v.forecast_ari.mean},
                            {"std", v.forecast_ari.stddev}};
    jv["seeds"] = nlohmann::json::array();
    for (const auto& s : v.seeds) {
      jv["seeds"].push_back({{"seed", s.seed},
                             {"rc", s.rc},
                             {"is", s.is},
                             {"ds", s.ds},
                             {"forecast_ari", s.forecast_ari},
                             {"copy_ari", s.copy_ari},
                             {"ckpt", s.ckpt}});
    }
    j["variants"].push_back(std::move(jv));
  }
  return j;
}

}  // namespace slotdrive::exp
