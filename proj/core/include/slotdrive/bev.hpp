#pragma once

// Ego-centric binary BEV rendering and its post-processing: connected
// components, small-vehicle enlargement, and temporally-consistent coloring
// of vehicle regions for the object-centric perception model.

#include <array>
#include <cstdint>
#include <vector>

#include "slotdrive/rng.hpp"
#include "slotdrive/world.hpp"

namespace slotdrive::bev {

enum Channel : int {
  kRoad = 0,
  kMarking = 1,
  kVehicle = 2,
  kRedTrigger = 3,
  kGreenTrigger = 4,
  kRoute = 5,
  kObstacle = 6,
  kReserved = 7,
  kNumChannels = 8,
};

struct BevConfig {
  int grid = 96;          // S, pixels per side
  double ppm = 5.0;       // pixels per meter
  int anchor_row = 72;    // ego position, 3/4 down the grid, facing up
  int anchor_col = 48;
  double min_vehicle_area_m2 = 8.0;  // enlargement threshold
  int enlarge_px() const {
    return static_cast<int>(std::lround(min_vehicle_area_m2 * ppm * ppm));
  }
};

// Binary channels, channel-major (C,S,S), values in {0,1}.
struct BevFrame {
  int S = 0;
  int C = kNumChannels;
  std::vector<uint8_t> data;

  BevFrame() = default;
  BevFrame(int S_, int C_) : S(S_), C(C_), data(static_cast<size_t>(C_) * S_ * S_, 0) {}
  uint8_t& at(int c, int r, int col) {
    return data[(static_cast<size_t>(c) * S + r) * S + col];
  }
  uint8_t at(int c, int r, int col) const {
    return data[(static_cast<size_t>(c) * S + r) * S + col];
  }
  const uint8_t* channel(int c) const { return data.data() + static_cast<size_t>(c) * S * S; }
  uint8_t* channel(int c) { return data.data() + static_cast<size_t>(c) * S * S; }
};

// Ground-truth vehicle instances: 0 = background, otherwise vehicle id.
struct InstanceMasks {
  int S = 0;
  std::vector<uint16_t> label;

  uint16_t at(int r, int c) const { return label[static_cast<size_t>(r) * S + c]; }
};

// Pixel (r,c) center -> ego-frame meters (x right, y forward).
geo::Vec2 pixel_to_ego(const BevConfig& cfg, int r, int c);

BevFrame render_bev(const world::WorldState& ws, const BevConfig& cfg);

// Per-vehicle ground-truth masks, rendered with the same footprints as the
// vehicle channel; with `enlarge` each instance is dilated to the area
// threshold like the channel content.
InstanceMasks render_instances(const world::WorldState& ws, const BevConfig& cfg,
                               bool enlarge);

struct InstanceInput {
  int id = 0;
  geo::Obb box;  // world frame
};
InstanceMasks render_instances_at(const geo::Pose2& ego,
                                  const std::vector<InstanceInput>& vehicles,
                                  const BevConfig& cfg, bool enlarge);

// 8-connected components of a binary S x S grid. Output labels are 1..n in
// scan order; returns n.
int connected_components(const uint8_t* grid, int S, std::vector<int32_t>& labels);

// Iteratively dilates (3x3) every connected component of the vehicle channel
// whose pixel count is below the area threshold until it reaches it (or stops
// growing). Mutates only the vehicle channel.
void enlarge_vehicles(BevFrame& frame, int min_px);

// 14 saturated palette colors; background grays live outside the palette.
extern const std::array<std::array<float, 3>, 14> kPalette;

// Turns binary frames into an RGB image [0,1] (3,S,S): background is a
// grayscale composite of the non-vehicle channels, vehicle components get
// palette colors. A component inherits the color of the previous-frame
// component that covers >50% of its area; otherwise it draws a fresh color.
class Colorizer {
 public:
  Colorizer(uint64_t episode_seed, int S)
      : rng_(episode_seed, "colorize"), S_(S), prev_labels_(), prev_colors_() {}

  // frame must already be enlarged if enlargement is enabled.
  std::vector<float> colorize(const BevFrame& frame);

  void reset() {
    prev_labels_.clear();
    prev_colors_.clear();
  }

 private:
  Rng rng_;
  int S_;
  std::vector<int32_t> prev_labels_;
  std::vector<int> prev_colors_;  // component label -> palette index (1-based labels)
};

// Bit-packed serialization of one frame: 8-byte header ('B','E','V','1',
// uint16 S, uint8 C, 0) + C*S*S/8 payload bits in channel-major order.
std::vector<uint8_t> pack_frame(const BevFrame& frame);
BevFrame unpack_frame(const uint8_t* bytes, size_t len);

}  // namespace slotdrive::bev
