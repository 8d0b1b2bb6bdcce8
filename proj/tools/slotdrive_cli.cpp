// slotdrive — command-line front end for the whole pipeline:
// dataset generation, quantizer fitting, perception training (slot model and
// VQ-VAE), driving-transformer training, closed-loop and forecast evaluation,
// autoregressive rollout, and multi-seed ablation studies.
//
// Exit codes: 0 success, 2 configuration/usage errors, 1 runtime failures.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "slotdrive/dataset.hpp"
#include "slotdrive/driving.hpp"
#include "slotdrive/experiment.hpp"
#include "slotdrive/pipeline.hpp"

namespace sd = slotdrive;
using nlohmann::json;

namespace {

sd::cf::SceneMode parse_mode(const std::string& s) {
  if (s == "slots") return sd::cf::SceneMode::kSlots;
  if (s == "attributes") return sd::cf::SceneMode::kAttributes;
  if (s == "vqvae" || s == "vq") return sd::cf::SceneMode::kVq;
  SD_CHECK(false, sd::ConfigError,
           "unknown scene mode '" << s << "' (slots | attributes | vqvae)");
  return sd::cf::SceneMode::kSlots;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  SD_CHECK(in.good(), sd::IoError, "cannot read " << path);
  json j;
  in >> j;
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  SD_CHECK(out.good(), sd::IoError, "cannot write " << path);
  out << text;
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<uint64_t> out;
  std::string item;
  std::istringstream ss(csv);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  SD_CHECK(!out.empty(), sd::ConfigError, "empty seed list '" << csv << "'");
  return out;
}

std::vector<uint64_t> route_seeds(uint64_t base, int n) {
  std::vector<uint64_t> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = base + uint64_t(i);
  return out;
}

json drive_report(const sd::drive::DriveSummary& s) {
  json eps = json::array();
  for (const auto& e : s.episodes) {
    eps.push_back({{"seed", e.seed},
                   {"steps", e.steps},
                   {"route_completion", e.route_completion},
                   {"collisions", e.collisions},
                   {"red_crossings", e.red_crossings},
                   {"completed", e.completed},
                   {"blocked", e.blocked},
                   {"timed_out", e.timed_out},
                   {"infraction_score", e.infraction_score},
                   {"driving_score", e.driving_score}});
  }
  return {{"rc", s.rc}, {"is", s.is}, {"ds", s.ds}, {"episodes", eps}};
}

// ---------------------------------------------------------------------------
// subcommand bodies (each returns the process exit code)
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out = "data";
  std::string name = "toy";
  int episodes = 240;
  int steps = 40;
  int waypoints = 4;
  uint64_t seed = 7;
  int vehicles = 8;
  double train_frac = 0.94, val_frac = 0.03;
};

int run_gen_data(const GenDataArgs& a) {
  sd::data::DatasetConfig cfg;
  cfg.root = a.out;
  cfg.name = a.name;
  cfg.episodes = a.episodes;
  cfg.max_steps = a.steps;
  cfg.waypoints = a.waypoints;
  cfg.seed = a.seed;
  cfg.train_frac = a.train_frac;
  cfg.val_frac = a.val_frac;
  cfg.world.max_vehicles = a.vehicles;
  std::string dir = sd::data::generate_dataset(cfg);
  auto man = sd::data::load_manifest(dir);
  std::printf("wrote %zu episodes to %s (train %d, val %d, test %zu)\n",
              man.episodes.size(), dir.c_str(), man.train_end,
              man.val_end - man.train_end, man.episodes.size() - size_t(man.val_end));
  return 0;
}

struct QuantArgs {
  std::string data, out = "quantizers.txt";
  uint64_t seed = 1;
  bool no_enlarge = false;
  int max_episodes = -1;
};

int run_fit_quantizers(const QuantArgs& a) {
  auto bundle = sd::pipe::load_bundle(a.data, !a.no_enlarge, false, a.max_episodes);
  auto qs = sd::pipe::fit_quantizers_for(bundle, a.seed);
  sd::quant::save_quantizers(qs, a.out);
  std::printf("fitted quantizers on %zu train episodes -> %s\n",
              bundle.split("train").size(), a.out.c_str());
  return 0;
}

struct SaviArgs {
  std::string data, out = "runs/savi";
  std::string preset = "desk";
  std::string config;  // JSON file overriding the preset
  int slots = 7;
  uint64_t seed = 1;
  int steps = -1, batch = -1;
  double lr = -1;
  bool no_enlarge = false;
  int eval_every = 250, eval_frames = 160, max_episodes = -1;
};

int run_train_savi(const SaviArgs& a) {
  sd::pipe::SaviTrainConfig tc;
  if (!a.config.empty()) {
    tc.model = sd::savi::SaviConfig::from_json(load_json_file(a.config));
  } else if (a.preset == "desk") {
    tc.model = sd::savi::savi_desk(a.slots);
  } else if (a.preset == "light") {
    tc.model = sd::savi::savi_light(a.slots);
  } else if (a.preset == "base") {
    tc.model = sd::savi::savi_base(a.slots);
  } else {
    SD_CHECK(false, sd::ConfigError,
             "unknown preset '" << a.preset << "' (desk | light | base)");
  }
  if (a.steps > 0) tc.model.steps = a.steps;
  if (a.batch > 0) tc.model.batch = a.batch;
  if (a.lr > 0) tc.model.lr = a.lr;
  tc.dataset_dir = a.data;
  tc.out_dir = a.out;
  tc.seed = a.seed;
  tc.enlarge = !a.no_enlarge;
  tc.eval_every = a.eval_every;
  tc.eval_frames = a.eval_frames;
  tc.max_episodes = a.max_episodes;
  auto r = sd::pipe::train_savi(tc);
  std::printf("done: final loss %.5f, best val fg-ARI %.4f, final val fg-ARI %.4f\n",
              r.final_loss, r.best_val_ari, r.final_val_ari);
  std::printf("best checkpoint: %s\nfinal checkpoint: %s\n", r.best_path.c_str(),
              r.final_path.c_str());
  return 0;
}

struct VqArgs {
  std::string data, out = "runs/vqvae";
  std::string config;
  int codebook = -1;
  uint64_t seed = 1;
  int steps = -1, batch = -1;
  double lr = -1;
  bool no_enlarge = false;
  int max_episodes = -1;
};

int run_train_vqvae(const VqArgs& a) {
  sd::pipe::VqTrainConfig tc;
  if (!a.config.empty()) tc.model = sd::vq::VqConfig::from_json(load_json_file(a.config));
  if (a.codebook > 0) tc.model.codebook = a.codebook;
  if (a.steps > 0) tc.model.steps = a.steps;
  if (a.batch > 0) tc.model.batch = a.batch;
  if (a.lr > 0) tc.model.lr = a.lr;
  tc.dataset_dir = a.data;
  tc.out_dir = a.out;
  tc.seed = a.seed;
  tc.enlarge = !a.no_enlarge;
  tc.max_episodes = a.max_episodes;
  auto r = sd::pipe::train_vqvae(tc);
  std::printf("done: final loss %.5f, round-trip IoU %.4f, codebook use %.3f\n",
              r.final_loss, r.val_iou, r.codebook_use);
  std::printf("checkpoint: %s\n", r.path.c_str());
  return 0;
}

struct CfArgs {
  std::string data, out = "runs/carformer";
  std::string perception;  // slot / vq checkpoint
  std::string mode = "slots";
  std::string quantizers;  // "" = fit from the train split
  std::string config;      // JSON backbone config
  int attr_slots = 7;
  uint64_t seed = 1;
  int epochs = -1, batch = -1;
  double lr = -1, alpha = -1;
  int forecast = -1, train_steps = -1;
  bool no_block = false, lm_next = false, no_enlarge = false;
  int max_episodes = -1;
};

int run_train_carformer(const CfArgs& a) {
  sd::pipe::CfTrainConfig tc;
  if (!a.config.empty())
    tc.model = sd::cf::BackboneConfig::from_json(load_json_file(a.config));
  tc.model.mode = parse_mode(a.mode);
  if (a.epochs > 0) tc.model.epochs = a.epochs;
  if (a.batch > 0) tc.model.batch = a.batch;
  if (a.lr > 0) tc.model.lr = a.lr;
  if (a.alpha >= 0) tc.model.alpha = a.alpha;
  if (a.forecast > 0) tc.model.f = a.forecast;
  if (a.train_steps > 0) tc.model.train_steps = a.train_steps;
  if (a.no_block) tc.model.block_attention = false;
  if (a.lm_next) tc.model.lm_next_discrete = true;
  // Scene-token geometry comes from the perception checkpoint, not flags.
  auto per = sd::pipe::load_perception(tc.model.mode, a.perception, a.attr_slots);
  sd::pipe::fit_model_to_perception(tc.model, per);
  tc.dataset_dir = a.data;
  tc.out_dir = a.out;
  tc.perception_ckpt = a.perception;
  tc.quantizer_path = a.quantizers;
  tc.seed = a.seed;
  tc.enlarge = !a.no_enlarge;
  tc.max_episodes = a.max_episodes;
  auto r = sd::pipe::train_carformer(tc);
  std::printf("done: best val %.5f, final val %.5f, final train %.5f, steps %d\n",
              r.best_val, r.final_val, r.final_train, r.steps);
  std::printf("perception frozen: %s\n", r.perception_unchanged ? "yes" : "NO");
  std::printf("best checkpoint: %s\nfinal checkpoint: %s\n", r.best_path.c_str(),
              r.final_path.c_str());
  return 0;
}

struct DriveArgs {
  std::string agent;        // carformer checkpoint
  std::string perception;   // optional override
  std::string policy;       // expert | zero | throttle (instead of --agent)
  double throttle = 0.4;
  uint64_t seed_base = 901;
  int routes = 6;
  std::string seeds_csv;    // explicit list overrides base+count
  std::string out;          // JSON report path
  int vehicles = 8;
  int max_steps = 400;
  bool no_creep = false, lm_waypoints = false;
};

int run_eval_drive(const DriveArgs& a) {
  SD_CHECK(a.agent.empty() != a.policy.empty(), sd::ConfigError,
           "pass exactly one of --agent or --policy");
  sd::drive::DriveConfig dc;
  dc.world.max_vehicles = a.vehicles;
  dc.max_steps = a.max_steps;
  dc.creep = !a.no_creep;
  dc.use_lm_waypoints = a.lm_waypoints;
  std::vector<uint64_t> seeds = a.seeds_csv.empty()
                                    ? route_seeds(a.seed_base, a.routes)
                                    : parse_seed_list(a.seeds_csv);
  sd::drive::DriveSummary sum;
  if (!a.policy.empty()) {
    sd::drive::Policy p;
    if (a.policy == "expert") p = sd::drive::expert_policy_fn();
    else if (a.policy == "zero") p = sd::drive::zero_policy_fn();
    else if (a.policy == "throttle") p = sd::drive::constant_throttle_fn(a.throttle);
    else SD_CHECK(false, sd::ConfigError,
                  "unknown policy '" << a.policy << "' (expert | zero | throttle)");
    sum = sd::drive::run_routes(dc, seeds, p);
  } else {
    auto agent = sd::pipe::load_agent(a.agent, a.perception);
    sum = sd::drive::drive_agent(agent, dc, seeds);
  }
  for (const auto& e : sum.episodes) {
    std::printf("route %llu: RC %.1f IS %.2f DS %.1f (%d steps%s%s%s)\n",
                static_cast<unsigned long long>(e.seed), e.route_completion,
                e.infraction_score, e.driving_score, e.steps,
                e.completed ? ", completed" : "", e.blocked ? ", blocked" : "",
                e.timed_out ? ", timed out" : "");
  }
  std::printf("mean over %zu routes: RC %.1f IS %.3f DS %.1f\n",
              sum.episodes.size(), sum.rc, sum.is, sum.ds);
  if (!a.out.empty()) write_text(a.out, drive_report(sum).dump(2) + "\n");
  return 0;
}

struct ForecastArgs {
  std::string agent, perception, data;
  std::string split = "val";
  int frames = 160;
  bool no_enlarge = false;
  int max_episodes = -1;
};

int run_eval_forecast(const ForecastArgs& a) {
  auto agent = sd::pipe::load_agent(a.agent, a.perception);
  auto bundle = sd::pipe::load_bundle(a.data, agent.enlarge && !a.no_enlarge, false,
                                      a.max_episodes);
  auto eps = bundle.split(a.split);
  SD_CHECK(!eps.empty(), sd::ConfigError, "split '" << a.split << "' is empty");
  auto r = sd::drive::eval_forecast(agent, bundle, eps, a.frames);
  std::printf("forecast over %d frames (horizon from the checkpoint):\n", r.frames);
  std::printf("  model     : fg-ARI %.4f  mIoU %.4f\n", r.ari_pred, r.miou_pred);
  std::printf("  input-copy: fg-ARI %.4f  mIoU %.4f\n", r.ari_copy, r.miou_copy);
  std::printf("  delta     : fg-ARI %+.4f  mIoU %+.4f\n", r.ari_pred - r.ari_copy,
              r.miou_pred - r.miou_copy);
  return 0;
}

struct RolloutArgs {
  std::string agent, perception, data;
  int episode = 0, step = 0, horizon = 3;
  std::string out;
  bool no_enlarge = false;
};

int run_rollout(const RolloutArgs& a) {
  auto agent = sd::pipe::load_agent(a.agent, a.perception);
  SD_CHECK(agent.model.has_value(), sd::RuntimeError, "agent has no model");
  auto bundle = sd::pipe::load_bundle(a.data, agent.enlarge && !a.no_enlarge, false,
                                      a.episode + 1);
  SD_CHECK(a.episode >= 0 && a.episode < int(bundle.eps.size()), sd::IndexOutOfRange,
           "episode " << a.episode << " out of range");
  const auto& pe = bundle.eps[static_cast<size_t>(a.episode)];
  auto enc = sd::pipe::encode_episode(agent.per, pe, bundle.bcfg, bundle.enlarge);
  auto t0 = sd::pipe::make_trajectory(pe, enc, a.step, agent.qs, agent.ccfg, false);
  auto toks = agent.model->rollout(t0, a.horizon);
  const auto& c = agent.ccfg;
  int per_step = 4 + c.scene_count + 2 + 2 * c.W;
  std::printf("rolled out %d steps: %zu generated tokens (%d per step)\n",
              a.horizon, toks.size(), per_step);
  json rep;
  rep["horizon"] = a.horizon;
  rep["tokens_per_step"] = per_step;
  json steps = json::array();
  size_t i = 0;
  for (int n = 0; n < a.horizon; ++n) {
    json st;
    st["goal"] = {toks[i].id, toks[i + 1].id};
    st["light"] = toks[i + 2].id;
    st["speed"] = toks[i + 3].id;
    i += 4;
    json scene = json::array();
    for (int k = 0; k < c.scene_count; ++k) scene.push_back(toks[i++].vec);
    st["scene"] = scene;
    st["route"] = {toks[i].vec, toks[i + 1].vec};
    i += 2;
    json wp = json::array();
    for (int w = 0; w < 2 * c.W; ++w) wp.push_back(toks[i++].id);
    st["waypoint_tokens"] = wp;
    steps.push_back(st);
    double g[2] = {agent.qs.target.dequantize(st["goal"][0].get<int>(), 0),
                   agent.qs.target.dequantize(st["goal"][1].get<int>(), 1)};
    std::printf("  step %d: goal (%.1f, %.1f) light %d speed %.2f m/s\n", n + 1,
                g[0], g[1], st["light"].get<int>(),
                agent.qs.speed.dequantize(st["speed"].get<int>(), 0));
  }
  rep["steps"] = steps;
  if (!a.out.empty()) write_text(a.out, rep.dump(2) + "\n");
  return 0;
}

struct AblateArgs {
  std::string axis = "all";
  std::string data, work = "runs/ablations";
  std::string savi_k7, savi_k7_raw, savi_k14, savi_k30;
  std::string train_seeds = "1,2,3";
  std::string route_seeds_csv;
  uint64_t route_base = 901;
  int routes = 6;
  int forecast_frames = 120;
  int max_episodes = -1;
  int epochs = -1, batch = -1;
};

int run_ablate(const AblateArgs& a) {
  sd::exp::StudyConfig sc;
  sc.dataset_dir = a.data;
  sc.work_dir = a.work;
  sc.train_seeds = parse_seed_list(a.train_seeds);
  sc.route_seeds = a.route_seeds_csv.empty() ? route_seeds(a.route_base, a.routes)
                                             : parse_seed_list(a.route_seeds_csv);
  sc.savi_k7 = a.savi_k7;
  sc.savi_k7_raw = a.savi_k7_raw;
  sc.savi_k14 = a.savi_k14;
  sc.savi_k30 = a.savi_k30;
  sc.forecast_frames = a.forecast_frames;
  sc.max_episodes = a.max_episodes;
  if (a.epochs > 0) sc.base.epochs = a.epochs;
  if (a.batch > 0) sc.base.batch = a.batch;
  std::vector<sd::exp::Axis> axes =
      a.axis == "all" ? sd::exp::all_axes()
                      : std::vector<sd::exp::Axis>{sd::exp::axis_from(a.axis)};
  for (auto axis : axes) {
    auto rep = sd::exp::run_ablation(axis, sc);
    std::string text = sd::exp::report_text(rep);
    std::fputs(text.c_str(), stdout);
    std::string stem = sc.work_dir + "/report-" + sd::exp::axis_name(axis);
    write_text(stem + ".txt", text);
    write_text(stem + ".json", sd::exp::report_json(rep).dump(2) + "\n");
    std::printf("wrote %s.{txt,json}\n", stem.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slot-structured driving world models on a synthetic BEV town"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* c_gd = app.add_subcommand("gen-data", "generate an expert-driven dataset");
  c_gd->add_option("--out", gd.out, "parent directory for the dataset");
  c_gd->add_option("--name", gd.name, "dataset directory name");
  c_gd->add_option("--episodes", gd.episodes, "episode count");
  c_gd->add_option("--steps", gd.steps, "max steps per episode");
  c_gd->add_option("--waypoints", gd.waypoints, "future waypoints per step (W)");
  c_gd->add_option("--seed", gd.seed, "master seed");
  c_gd->add_option("--vehicles", gd.vehicles, "max traffic vehicles");
  c_gd->add_option("--train-frac", gd.train_frac, "train split fraction");
  c_gd->add_option("--val-frac", gd.val_frac, "val split fraction");

  QuantArgs qa;
  auto* c_q = app.add_subcommand("fit-quantizers",
                                 "fit attribute quantizers on the train split");
  c_q->add_option("--data", qa.data, "dataset directory")->required();
  c_q->add_option("--out", qa.out, "output quantizer file");
  c_q->add_option("--seed", qa.seed, "k-means seed");
  c_q->add_flag("--no-enlarge", qa.no_enlarge, "skip small-vehicle enlargement");
  c_q->add_option("--max-episodes", qa.max_episodes, "episode cap (-1 = all)");

  SaviArgs sa;
  auto* c_s = app.add_subcommand("train-savi", "train the slot-attention video model");
  c_s->add_option("--data", sa.data, "dataset directory")->required();
  c_s->add_option("--out", sa.out, "run directory");
  c_s->add_option("--preset", sa.preset, "desk | light | base");
  c_s->add_option("--config", sa.config, "JSON model config (overrides preset)");
  c_s->add_option("--slots", sa.slots, "slot count K");
  c_s->add_option("--seed", sa.seed, "training seed");
  c_s->add_option("--steps", sa.steps, "training steps");
  c_s->add_option("--batch", sa.batch, "batch size");
  c_s->add_option("--lr", sa.lr, "learning rate");
  c_s->add_flag("--no-enlarge", sa.no_enlarge, "skip small-vehicle enlargement");
  c_s->add_option("--eval-every", sa.eval_every, "steps between val probes");
  c_s->add_option("--eval-frames", sa.eval_frames, "frames per val probe");
  c_s->add_option("--max-episodes", sa.max_episodes, "episode cap (-1 = all)");

  VqArgs va;
  auto* c_v = app.add_subcommand("train-vqvae", "train the scene VQ-VAE baseline");
  c_v->add_option("--data", va.data, "dataset directory")->required();
  c_v->add_option("--out", va.out, "run directory");
  c_v->add_option("--config", va.config, "JSON model config");
  c_v->add_option("--codebook", va.codebook, "codebook size C");
  c_v->add_option("--seed", va.seed, "training seed");
  c_v->add_option("--steps", va.steps, "training steps");
  c_v->add_option("--batch", va.batch, "batch size");
  c_v->add_option("--lr", va.lr, "learning rate");
  c_v->add_flag("--no-enlarge", va.no_enlarge, "skip small-vehicle enlargement");
  c_v->add_option("--max-episodes", va.max_episodes, "episode cap (-1 = all)");

  CfArgs ca;
  auto* c_c = app.add_subcommand("train-carformer", "train the driving transformer");
  c_c->add_option("--data", ca.data, "dataset directory")->required();
  c_c->add_option("--out", ca.out, "run directory");
  c_c->add_option("--perception", ca.perception,
                  "frozen perception checkpoint (slots/vqvae modes)");
  c_c->add_option("--mode", ca.mode, "slots | attributes | vqvae");
  c_c->add_option("--quantizers", ca.quantizers,
                  "quantizer file ('' = fit from the train split)");
  c_c->add_option("--config", ca.config, "JSON backbone config");
  c_c->add_option("--attr-slots", ca.attr_slots, "object count (attributes mode)");
  c_c->add_option("--seed", ca.seed, "training seed");
  c_c->add_option("--epochs", ca.epochs, "training epochs");
  c_c->add_option("--batch", ca.batch, "batch size");
  c_c->add_option("--lr", ca.lr, "learning rate");
  c_c->add_option("--alpha", ca.alpha, "forecast loss weight");
  c_c->add_option("--forecast", ca.forecast, "forecast horizon f (timesteps)");
  c_c->add_option("--train-steps", ca.train_steps, "timesteps per training window");
  c_c->add_flag("--no-block-attention", ca.no_block, "plain causal attention");
  c_c->add_flag("--lm-next", ca.lm_next, "add the next-step discrete loss");
  c_c->add_flag("--no-enlarge", ca.no_enlarge, "skip small-vehicle enlargement");
  c_c->add_option("--max-episodes", ca.max_episodes, "episode cap (-1 = all)");

  DriveArgs da;
  auto* c_d = app.add_subcommand("eval-drive", "closed-loop driving evaluation");
  c_d->add_option("--agent", da.agent, "driving-transformer checkpoint");
  c_d->add_option("--perception", da.perception, "perception checkpoint override");
  c_d->add_option("--policy", da.policy, "scripted baseline: expert | zero | throttle");
  c_d->add_option("--throttle", da.throttle, "throttle for --policy throttle");
  c_d->add_option("--route-base", da.seed_base, "first route seed");
  c_d->add_option("--routes", da.routes, "route count");
  c_d->add_option("--route-seeds", da.seeds_csv, "explicit route seeds (csv)");
  c_d->add_option("--out", da.out, "JSON report path");
  c_d->add_option("--vehicles", da.vehicles, "max traffic vehicles");
  c_d->add_option("--max-steps", da.max_steps, "hard step cap per route");
  c_d->add_flag("--no-creep", da.no_creep, "disable anti-deadlock creeping");
  c_d->add_flag("--lm-waypoints", da.lm_waypoints,
                "drive from the quantized-token waypoint head");

  ForecastArgs fa;
  auto* c_f = app.add_subcommand("eval-forecast",
                                 "scene-forecast metrics vs the input-copy baseline");
  c_f->add_option("--agent", fa.agent, "driving-transformer checkpoint")->required();
  c_f->add_option("--perception", fa.perception, "perception checkpoint override");
  c_f->add_option("--data", fa.data, "dataset directory")->required();
  c_f->add_option("--split", fa.split, "train | val | test");
  c_f->add_option("--frames", fa.frames, "max frames to score");
  c_f->add_flag("--no-enlarge", fa.no_enlarge, "skip small-vehicle enlargement");
  c_f->add_option("--max-episodes", fa.max_episodes, "episode cap (-1 = all)");

  RolloutArgs ra;
  auto* c_r = app.add_subcommand("rollout", "autoregressive future rollout");
  c_r->add_option("--agent", ra.agent, "driving-transformer checkpoint")->required();
  c_r->add_option("--perception", ra.perception, "perception checkpoint override");
  c_r->add_option("--data", ra.data, "dataset directory")->required();
  c_r->add_option("--episode", ra.episode, "episode index");
  c_r->add_option("--step", ra.step, "start step within the episode");
  c_r->add_option("--horizon", ra.horizon, "steps to roll out");
  c_r->add_option("--out", ra.out, "JSON token dump path");
  c_r->add_flag("--no-enlarge", ra.no_enlarge, "skip small-vehicle enlargement");

  AblateArgs aa;
  auto* c_a = app.add_subcommand("ablate", "multi-seed ablation study");
  c_a->add_option("--axis", aa.axis,
                  "slot-count | enlargement | block-attention | forecasting | "
                  "action-head | creeping | all");
  c_a->add_option("--data", aa.data, "dataset directory")->required();
  c_a->add_option("--work", aa.work, "work directory (cache + reports)");
  c_a->add_option("--savi-k7", aa.savi_k7, "7-slot perception checkpoint");
  c_a->add_option("--savi-k7-raw", aa.savi_k7_raw,
                  "7-slot checkpoint trained without enlargement");
  c_a->add_option("--savi-k14", aa.savi_k14, "14-slot checkpoint (optional)");
  c_a->add_option("--savi-k30", aa.savi_k30, "30-slot perception checkpoint");
  c_a->add_option("--train-seeds", aa.train_seeds, "training seeds (csv)");
  c_a->add_option("--route-base", aa.route_base, "first route seed");
  c_a->add_option("--routes", aa.routes, "route count");
  c_a->add_option("--route-seeds", aa.route_seeds_csv, "explicit route seeds (csv)");
  c_a->add_option("--forecast-frames", aa.forecast_frames,
                  "frames for forecast metrics");
  c_a->add_option("--max-episodes", aa.max_episodes, "episode cap (-1 = all)");
  c_a->add_option("--epochs", aa.epochs, "override training epochs");
  c_a->add_option("--batch", aa.batch, "override batch size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version succeed; usage errors are config errors
  }

  try {
    if (*c_gd) return run_gen_data(gd);
    if (*c_q) return run_fit_quantizers(qa);
    if (*c_s) return run_train_savi(sa);
    if (*c_v) return run_train_vqvae(va);
    if (*c_c) return run_train_carformer(ca);
    if (*c_d) return run_eval_drive(da);
    if (*c_f) return run_eval_forecast(fa);
    if (*c_r) return run_rollout(ra);
    if (*c_a) return run_ablate(aa);
  } catch (const sd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
