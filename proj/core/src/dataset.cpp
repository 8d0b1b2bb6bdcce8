#include "slotdrive/dataset.hpp"

#include <cinttypes>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "slotdrive/common.hpp"

namespace slotdrive::data {

namespace fs = std::filesystem;

namespace {

std::string ep_dir_name(int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ep_%05d", idx);
  return buf;
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  SD_CHECK(os.good(), IoError, "cannot write " << p.string());
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
}

void write_bytes(const fs::path& p, const std::vector<uint8_t>& bytes) {
  std::ofstream os(p, std::ios::binary);
  SD_CHECK(os.good(), IoError, "cannot write " << p.string());
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

std::vector<uint8_t> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary | std::ios::ate);
  SD_CHECK(is.good(), IoError, "cannot read " << p.string());
  const auto n = is.tellg();
  is.seekg(0);
  std::vector<uint8_t> out(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(out.data()), n);
  return out;
}

void appendf(std::string& s, const char* fmt, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  s += buf;
}

struct EpisodeTrace {
  std::vector<StepRecord> steps;
  std::vector<geo::Pose2> ego_poses;
};

EpisodeTrace run_expert_episode(const world::WorldConfig& wcfg,
                                const bev::BevConfig& bcfg, int max_steps) {
  EpisodeTrace tr;
  world::WorldState ws = world::make_world(wcfg);
  for (int t = 0; t < max_steps; ++t) {
    StepRecord rec;
    rec.frame = bev::render_bev(ws, bcfg);
    rec.ego_x = ws.ego.p.x;
    rec.ego_y = ws.ego.p.y;
    rec.ego_yaw = ws.ego.yaw;
    rec.ego_v = ws.ego_v;
    rec.light = world::red_light_ahead(ws) ? 1 : 0;
    const geo::Vec2 tp = world::target_point(ws);
    rec.target_x = tp.x;
    rec.target_y = tp.y;
    rec.route1 = world::route_vector(ws, 0);
    rec.route2 = world::route_vector(ws, 1);
    for (const auto& v : ws.vehicle_records()) {
      const geo::Vec2 local = ws.ego.to_local(v.pose.p);
      if (std::abs(local.x) > 13.0 || local.y < -8.0 || local.y > 18.0) continue;
      rec.vehicles.push_back(
          {v.id, v.pose.p.x, v.pose.p.y, v.pose.yaw, v.length, v.width, v.v});
    }
    tr.ego_poses.push_back(ws.ego);
    tr.steps.push_back(std::move(rec));
    world::step_world(ws, world::expert_policy(ws));
    if (ws.progress_frac() >= 0.99) break;
  }
  return tr;
}

}  // namespace

std::string generate_dataset(const DatasetConfig& cfg) {
  const fs::path dir = fs::path(cfg.root) / cfg.name;
  fs::create_directories(dir);

  std::string manifest;
  appendf(manifest, "slotdrive-dataset v1\n");
  appendf(manifest, "name %s\n", cfg.name.c_str());
  appendf(manifest, "grid %d\n", cfg.bev.grid);
  appendf(manifest, "ppm %.6f\n", cfg.bev.ppm);
  appendf(manifest, "channels %d\n", bev::kNumChannels);
  appendf(manifest, "fps %.6f\n", 1.0 / cfg.world.dt);
  appendf(manifest, "waypoints %d\n", cfg.waypoints);
  appendf(manifest, "episodes %d\n", cfg.episodes);
  const int train_end = static_cast<int>(cfg.episodes * cfg.train_frac);
  const int val_end =
      std::min(cfg.episodes,
               train_end + std::max(1, static_cast<int>(cfg.episodes * cfg.val_frac)));
  appendf(manifest, "splits train 0 %d val %d %d test %d %d\n", train_end, train_end,
          val_end, val_end, cfg.episodes);

  const int W = cfg.waypoints;
  for (int e = 0; e < cfg.episodes; ++e) {
    world::WorldConfig wcfg = cfg.world;
    wcfg.seed = splitmix64(cfg.seed ^ (0x5eedULL + static_cast<uint64_t>(e)));
    EpisodeTrace tr = run_expert_episode(wcfg, cfg.bev, cfg.max_steps);

    const int T = static_cast<int>(tr.steps.size());
    for (int t = 0; t < T; ++t) {
      if (t + W >= T) continue;  // waypoints must all exist
      auto& rec = tr.steps[static_cast<size_t>(t)];
      rec.waypoints.reserve(static_cast<size_t>(2 * W));
      for (int i = 1; i <= W; ++i) {
        const geo::Vec2 local = tr.ego_poses[static_cast<size_t>(t)].to_local(
            tr.ego_poses[static_cast<size_t>(t + i)].p);
        rec.waypoints.push_back(local.x);
        rec.waypoints.push_back(local.y);
      }
    }

    const fs::path ep_path = dir / ep_dir_name(e);
    fs::create_directories(ep_path);
    std::string meta;
    appendf(meta, "episode %s\n", ep_dir_name(e).c_str());
    appendf(meta, "seed %" PRIu64 "\n", wcfg.seed);
    appendf(meta, "steps %d\n", T);
    for (int t = 0; t < T; ++t) {
      const auto& rec = tr.steps[static_cast<size_t>(t)];
      appendf(meta, "step %d\n", t);
      appendf(meta, "ego %.6f %.6f %.6f %.6f\n", rec.ego_x, rec.ego_y, rec.ego_yaw,
              rec.ego_v);
      appendf(meta, "light %d\n", rec.light);
      appendf(meta, "target %.6f %.6f\n", rec.target_x, rec.target_y);
      appendf(meta, "route1 %.6f %.6f %.6f %.6f %.6f %.6f\n", rec.route1[0],
              rec.route1[1], rec.route1[2], rec.route1[3], rec.route1[4],
              rec.route1[5]);
      appendf(meta, "route2 %.6f %.6f %.6f %.6f %.6f %.6f\n", rec.route2[0],
              rec.route2[1], rec.route2[2], rec.route2[3], rec.route2[4],
              rec.route2[5]);
      appendf(meta, "wp %d", static_cast<int>(rec.waypoints.size()));
      for (double w : rec.waypoints) appendf(meta, " %.6f", w);
      appendf(meta, "\n");
      for (const auto& v : rec.vehicles)
        appendf(meta, "veh %d %.6f %.6f %.6f %.6f %.6f %.6f\n", v.id, v.x, v.y,
                v.yaw, v.length, v.width, v.v);
      appendf(meta, "endstep\n");

      char fname[32];
      std::snprintf(fname, sizeof(fname), "bev_%05d.bin", t);
      write_bytes(ep_path / fname, bev::pack_frame(rec.frame));
    }
    write_file(ep_path / "meta.txt", meta);
    appendf(manifest, "episode %d %s steps %d seed %" PRIu64 "\n", e,
            ep_dir_name(e).c_str(), T, wcfg.seed);
  }
  write_file(dir / "manifest.txt", manifest);
  return dir.string();
}

Manifest load_manifest(const std::string& dataset_dir) {
  std::ifstream is(fs::path(dataset_dir) / "manifest.txt");
  SD_CHECK(is.good(), IoError, "no manifest in " << dataset_dir);
  Manifest m;
  std::string line;
  SD_CHECK(std::getline(is, line) && line.rfind("slotdrive-dataset v1", 0) == 0,
           IoError, "bad manifest header");
  int declared_eps = 0;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "name") ls >> m.name;
    else if (key == "grid") ls >> m.grid;
    else if (key == "ppm") ls >> m.ppm;
    else if (key == "channels") ls >> m.channels;
    else if (key == "fps") ls >> m.fps;
    else if (key == "waypoints") ls >> m.waypoints;
    else if (key == "episodes") ls >> declared_eps;
    else if (key == "splits") {
      std::string tag;
      int a, b;
      while (ls >> tag >> a >> b) {
        if (tag == "train") m.train_end = b;
        else if (tag == "val") m.val_end = b;
      }
    } else if (key == "episode") {
      int idx;
      Manifest::Ep ep;
      std::string steps_kw, seed_kw;
      ls >> idx >> ep.dir >> steps_kw >> ep.steps >> seed_kw >> ep.seed;
      m.episodes.push_back(ep);
    }
  }
  SD_CHECK(static_cast<int>(m.episodes.size()) == declared_eps, IoError,
           "manifest episode count mismatch");
  return m;
}

EpisodeData load_episode(const std::string& dataset_dir, const Manifest& m, int idx) {
  SD_CHECK(idx >= 0 && idx < static_cast<int>(m.episodes.size()), IndexOutOfRange,
           "episode " << idx);
  const auto& ep = m.episodes[static_cast<size_t>(idx)];
  const fs::path dir = fs::path(dataset_dir) / ep.dir;

  EpisodeData out;
  out.dir = dir.string();
  out.seed = ep.seed;

  std::ifstream is(dir / "meta.txt");
  SD_CHECK(is.good(), IoError, "no meta.txt in " << dir.string());
  std::string line;
  StepRecord cur;
  bool in_step = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "step") {
      cur = StepRecord{};
      in_step = true;
    } else if (key == "ego") {
      ls >> cur.ego_x >> cur.ego_y >> cur.ego_yaw >> cur.ego_v;
    } else if (key == "light") {
      ls >> cur.light;
    } else if (key == "target") {
      ls >> cur.target_x >> cur.target_y;
    } else if (key == "route1") {
      for (auto& v : cur.route1) ls >> v;
    } else if (key == "route2") {
      for (auto& v : cur.route2) ls >> v;
    } else if (key == "wp") {
      int n = 0;
      ls >> n;
      cur.waypoints.resize(static_cast<size_t>(n));
      for (auto& v : cur.waypoints) ls >> v;
    } else if (key == "veh") {
      VehicleRecord v;
      ls >> v.id >> v.x >> v.y >> v.yaw >> v.length >> v.width >> v.v;
      cur.vehicles.push_back(v);
    } else if (key == "endstep" && in_step) {
      out.steps.push_back(std::move(cur));
      in_step = false;
    }
  }
  SD_CHECK(static_cast<int>(out.steps.size()) == ep.steps, IoError,
           "meta step count mismatch in " << dir.string());

  for (int t = 0; t < ep.steps; ++t) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "bev_%05d.bin", t);
    const auto bytes = read_bytes(dir / fname);
    out.steps[static_cast<size_t>(t)].frame = bev::unpack_frame(bytes.data(), bytes.size());
  }
  return out;
}

std::vector<int> split_indices(const Manifest& m, const std::string& split) {
  const int n = static_cast<int>(m.episodes.size());
  int lo = 0, hi = n;
  if (split == "train") {
    hi = m.train_end;
  } else if (split == "val") {
    lo = m.train_end;
    hi = m.val_end;
  } else if (split == "test") {
    lo = m.val_end;
  } else {
    SD_CHECK(false, ConfigError, "unknown split '" << split << "'");
  }
  std::vector<int> out;
  for (int i = lo; i < hi; ++i) out.push_back(i);
  return out;
}

bev::InstanceMasks instances_for_step(const StepRecord& rec, const bev::BevConfig& cfg,
                                      bool enlarge) {
  std::vector<bev::InstanceInput> vehicles;
  vehicles.reserve(rec.vehicles.size());
  for (const auto& v : rec.vehicles)
    vehicles.push_back({v.id, {{{v.x, v.y}, v.yaw}, v.length, v.width}});
  return bev::render_instances_at(rec.ego_pose(), vehicles, cfg, enlarge);
}

}  // namespace slotdrive::data
