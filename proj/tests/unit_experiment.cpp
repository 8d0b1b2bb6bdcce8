// Experiment orchestration plumbing: hashing, run directories, ablation
// variant construction, and report rendering. No training happens here.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "slotdrive/common.hpp"
#include "slotdrive/experiment.hpp"

using namespace slotdrive;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

exp::StudyConfig fake_study() {
  exp::StudyConfig sc;
  sc.dataset_dir = "/data/none";
  sc.work_dir = "/tmp/none";
  sc.base.mode = cf::SceneMode::kSlots;
  sc.base.alpha = 40.0;
  sc.savi_k7 = "k7.ckpt";
  sc.savi_k7_raw = "k7raw.ckpt";
  sc.savi_k14 = "";  // optional cell, skipped
  sc.savi_k30 = "k30.ckpt";
  return sc;
}

const exp::Variant* find_variant(const std::vector<exp::Variant>& vs,
                                 const std::string& name) {
  for (const auto& v : vs)
    if (v.name == name) return &v;
  return nullptr;
}

}  // namespace

TEST_CASE("config_hash: stable, order-insensitive, content-sensitive") {
  json a = {{"lr", 1e-4}, {"steps", 100}};
  json b;
  b["steps"] = 100;
  b["lr"] = 1e-4;
  CHECK(exp::config_hash(a) == exp::config_hash(a));
  CHECK(exp::config_hash(a) == exp::config_hash(b));  // key order irrelevant

  json c = a;
  c["steps"] = 101;
  CHECK(exp::config_hash(a) != exp::config_hash(c));
}

TEST_CASE("mean_std: population statistics") {
  const auto ms = exp::mean_std({2.0, 4.0, 6.0});
  CHECK(ms.mean == doctest::Approx(4.0));
  CHECK(ms.stddev == doctest::Approx(std::sqrt(8.0 / 3.0)));

  const auto one = exp::mean_std({5.0});
  CHECK(one.mean == 5.0);
  CHECK(one.stddev == 0.0);
}

TEST_CASE("axes: names round trip") {
  const auto axes = exp::all_axes();
  CHECK(axes.size() == 6);
  std::set<std::string> names;
  for (auto a : axes) {
    const auto n = exp::axis_name(a);
    CHECK(exp::axis_from(n) == a);
    names.insert(n);
  }
  CHECK(names.size() == 6);
  CHECK_THROWS_AS(exp::axis_from("not-an-axis"), ConfigError);
}

TEST_CASE("variants: slot-count cells follow the available checkpoints") {
  auto sc = fake_study();
  auto vs = exp::variants_for(exp::Axis::kSlotCount, sc);
  REQUIRE(vs.size() == 2);  // 14-slot checkpoint missing -> skipped
  const auto* v7 = find_variant(vs, "slots-7");
  const auto* v30 = find_variant(vs, "slots-30");
  REQUIRE(v7 != nullptr);
  REQUIRE(v30 != nullptr);
  CHECK(v7->perception_ckpt == "k7.ckpt");
  CHECK(v30->perception_ckpt == "k30.ckpt");
  CHECK(v7->enlarge);
  CHECK(v30->enlarge);

  sc.savi_k14 = "k14.ckpt";
  vs = exp::variants_for(exp::Axis::kSlotCount, sc);
  CHECK(vs.size() == 3);
  CHECK(find_variant(vs, "slots-14") != nullptr);
}

TEST_CASE("variants: enlargement pairs raw against enlarged perception") {
  const auto vs = exp::variants_for(exp::Axis::kEnlargement, fake_study());
  REQUIRE(vs.size() == 2);
  const auto* raw = find_variant(vs, "raw-vehicles");
  const auto* enl = find_variant(vs, "enlarged-vehicles");
  REQUIRE(raw != nullptr);
  REQUIRE(enl != nullptr);
  CHECK(!raw->enlarge);
  CHECK(raw->perception_ckpt == "k7raw.ckpt");
  CHECK(enl->enlarge);
  CHECK(enl->perception_ckpt == "k7.ckpt");
  CHECK(raw->train_key() != enl->train_key());
}

TEST_CASE("variants: model-switch axes flip exactly one training knob") {
  const auto sc = fake_study();

  const auto att = exp::variants_for(exp::Axis::kBlockAttention, sc);
  REQUIRE(att.size() == 2);
  CHECK(find_variant(att, "causal-only")->model.block_attention == false);
  CHECK(find_variant(att, "block-attention")->model.block_attention == true);

  const auto fc = exp::variants_for(exp::Axis::kForecasting, sc);
  REQUIRE(fc.size() == 2);
  CHECK(find_variant(fc, "no-forecast")->model.alpha == 0.0);
  CHECK(find_variant(fc, "forecast-40")->model.alpha == doctest::Approx(40.0));
  CHECK(find_variant(fc, "no-forecast")->train_key() !=
        find_variant(fc, "forecast-40")->train_key());
}

TEST_CASE("variants: drive-time axes share one trained artifact") {
  const auto sc = fake_study();

  const auto head = exp::variants_for(exp::Axis::kActionHead, sc);
  REQUIRE(head.size() == 2);
  const auto* lm = find_variant(head, "quantized-head");
  const auto* gru = find_variant(head, "recurrent-head");
  REQUIRE(lm != nullptr);
  REQUIRE(gru != nullptr);
  CHECK(lm->drive_lm_head);
  CHECK(!gru->drive_lm_head);
  CHECK(lm->train_key() == gru->train_key());  // same checkpoint, two heads

  const auto creep = exp::variants_for(exp::Axis::kCreeping, sc);
  REQUIRE(creep.size() == 2);
  const auto* off = find_variant(creep, "no-creep");
  const auto* on = find_variant(creep, "creeping");
  REQUIRE(off != nullptr);
  REQUIRE(on != nullptr);
  CHECK(!off->drive_creep);
  CHECK(on->drive_creep);
  CHECK(off->train_key() == on->train_key());
}

TEST_CASE("init_run_dir: creates the tree and echoes the config") {
  const auto dir =
      (fs::temp_directory_path() / "slotdrive_test_run" / "nested" / "r1").string();
  fs::remove_all(fs::temp_directory_path() / "slotdrive_test_run");
  const json cfg = {{"purpose", "test"}, {"n", 3}};
  const auto out = exp::init_run_dir(dir, cfg);
  CHECK(out == dir);
  std::ifstream in(dir + "/config.json");
  REQUIRE(in.good());
  json echoed;
  in >> echoed;
  CHECK(echoed == cfg);
  fs::remove_all(fs::temp_directory_path() / "slotdrive_test_run");
}

TEST_CASE("reports: text and JSON carry every variant") {
  exp::AblationReport r;
  r.axis = exp::Axis::kForecasting;
  for (const char* name : {"no-forecast", "forecast-40"}) {
    exp::VariantResult vr;
    vr.variant.name = name;
    for (uint64_t s : {1ull, 2ull}) {
      exp::SeedOutcome o;
      o.seed = s;
      o.rc = 80.0 + double(s);
      o.is = 0.9;
      o.ds = o.rc * o.is;
      vr.seeds.push_back(o);
    }
    std::vector<double> rcs, iss, dss;
    for (const auto& o : vr.seeds) {
      rcs.push_back(o.rc);
      iss.push_back(o.is);
      dss.push_back(o.ds);
    }
    vr.rc = exp::mean_std(rcs);
    vr.is = exp::mean_std(iss);
    vr.ds = exp::mean_std(dss);
    r.variants.push_back(std::move(vr));
  }

  const auto text = exp::report_text(r);
  CHECK(text.find("no-forecast") != std::string::npos);
  CHECK(text.find("forecast-40") != std::string::npos);

  const auto j = exp::report_json(r);
  REQUIRE(j.contains("variants"));
  CHECK(j["variants"].size() == 2);
  CHECK(j["axis"] == exp::axis_name(exp::Axis::kForecasting));
}
