#pragma once

// Dataset layout on disk:
//   <root>/<name>/manifest.txt
//   <root>/<name>/ep_00000/meta.txt          (plain-text per-step metadata)
//   <root>/<name>/ep_00000/bev_00000.bin     (packed binary BEV, one per step)
// Frames are stored raw (pre-enlargement); enlargement and coloring are
// deterministic load-time transforms so ablations can toggle them.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "slotdrive/bev.hpp"
#include "slotdrive/world.hpp"

namespace slotdrive::data {

struct VehicleRecord {
  int id = 0;
  double x = 0, y = 0, yaw = 0;  // world frame
  double length = 0, width = 0;
  double v = 0;
};

struct StepRecord {
  bev::BevFrame frame;  // raw binary channels
  double ego_x = 0, ego_y = 0, ego_yaw = 0, ego_v = 0;
  int light = 0;  // 1 if a red light governs the ego lane ahead
  double target_x = 0, target_y = 0;              // ego frame
  std::array<double, 6> route1{}, route2{};       // ego frame descriptors
  std::vector<double> waypoints;                  // 2W ego-frame floats, or empty
  std::vector<VehicleRecord> vehicles;            // in view, world frame

  geo::Pose2 ego_pose() const { return {{ego_x, ego_y}, ego_yaw}; }
};

struct EpisodeData {
  std::string dir;
  uint64_t seed = 0;
  std::vector<StepRecord> steps;
};

struct DatasetConfig {
  std::string root;          // parent directory
  std::string name = "toy";
  int episodes = 240;
  int max_steps = 40;
  int waypoints = 4;  // W
  uint64_t seed = 7;
  double train_frac = 0.94, val_frac = 0.03;
  world::WorldConfig world;  // per-episode seed is derived from `seed`
  bev::BevConfig bev;
};

struct Manifest {
  std::string name;
  int version = 1;
  int grid = 96, channels = 8;
  double ppm = 5.0, fps = 2.0;
  int waypoints = 4;
  struct Ep {
    std::string dir;
    int steps = 0;
    uint64_t seed = 0;
  };
  std::vector<Ep> episodes;
  int train_end = 0, val_end = 0;  // [0,train_end) train, [train_end,val_end) val
};

// Runs the expert over seeded worlds and writes the dataset. Byte-identical
// for identical configs. Returns the dataset directory.
std::string generate_dataset(const DatasetConfig& cfg);

Manifest load_manifest(const std::string& dataset_dir);
EpisodeData load_episode(const std::string& dataset_dir, const Manifest& m, int idx);

// Episode indices of a named split: "train" | "val" | "test".
std::vector<int> split_indices(const Manifest& m, const std::string& split);

// Ground-truth instance masks for a loaded step (same footprint logic as the
// live renderer).
bev::InstanceMasks instances_for_step(const StepRecord& rec, const bev::BevConfig& cfg,
                                      bool enlarge);

}  // namespace slotdrive::data
