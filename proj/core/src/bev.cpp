#include "slotdrive/bev.hpp"

#include <algorithm>
#include <cstring>

#include "slotdrive/common.hpp"

namespace slotdrive::bev {

using geo::Vec2;

geo::Vec2 pixel_to_ego(const BevConfig& cfg, int r, int c) {
  return {(c - cfg.anchor_col + 0.5) / cfg.ppm, (cfg.anchor_row - r + 0.5) / cfg.ppm};
}

namespace {

struct PixelWindow {
  int r0, r1, c0, c1;  // half-open
  bool empty() const { return r0 >= r1 || c0 >= c1; }
};

PixelWindow window_for(const BevConfig& cfg, double x0, double y0, double x1,
                       double y1) {
  // Ego-frame bbox (meters) -> pixel rows/cols, clipped to the grid.
  const int c0 = static_cast<int>(std::floor(cfg.anchor_col + x0 * cfg.ppm)) - 1;
  const int c1 = static_cast<int>(std::ceil(cfg.anchor_col + x1 * cfg.ppm)) + 1;
  const int r0 = static_cast<int>(std::floor(cfg.anchor_row - y1 * cfg.ppm)) - 1;
  const int r1 = static_cast<int>(std::ceil(cfg.anchor_row - y0 * cfg.ppm)) + 1;
  return {std::max(0, r0), std::min(cfg.grid, r1), std::max(0, c0),
          std::min(cfg.grid, c1)};
}

// Thick segment (capsule) in ego coordinates; optionally draws an edge band
// |dist - (halfw - 0.1)| <= 0.15 into a second channel (lane markings).
void draw_capsule(uint8_t* chan, uint8_t* edge_chan, const BevConfig& cfg, Vec2 a,
                  Vec2 b, double halfw) {
  const double pad = halfw + 0.2;
  const PixelWindow w =
      window_for(cfg, std::min(a.x, b.x) - pad, std::min(a.y, b.y) - pad,
                 std::max(a.x, b.x) + pad, std::max(a.y, b.y) + pad);
  if (w.empty()) return;
  const int S = cfg.grid;
  for (int r = w.r0; r < w.r1; ++r)
    for (int c = w.c0; c < w.c1; ++c) {
      const Vec2 p = pixel_to_ego(cfg, r, c);
      const double d = geo::point_segment_dist(p, a, b);
      if (d <= halfw) chan[r * S + c] = 1;
      if (edge_chan && std::abs(d - (halfw - 0.1)) <= 0.15)
        edge_chan[r * S + c] = 1;
    }
}

// Convex quad (vehicle/trigger footprint) given corners in ego coordinates.
void draw_quad(uint8_t* chan, const BevConfig& cfg, const std::array<Vec2, 4>& q) {
  double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
  for (const Vec2& v : q) {
    x0 = std::min(x0, v.x);
    y0 = std::min(y0, v.y);
    x1 = std::max(x1, v.x);
    y1 = std::max(y1, v.y);
  }
  const PixelWindow w = window_for(cfg, x0, y0, x1, y1);
  if (w.empty()) return;
  const int S = cfg.grid;
  for (int r = w.r0; r < w.r1; ++r)
    for (int c = w.c0; c < w.c1; ++c) {
      const Vec2 p = pixel_to_ego(cfg, r, c);
      bool inside = true;
      for (int i = 0; i < 4 && inside; ++i) {
        const Vec2 e = q[(i + 1) % 4] - q[i];
        if (e.cross(p - q[i]) < 0.0) inside = false;
      }
      if (inside) chan[r * S + c] = 1;
    }
}

std::array<Vec2, 4> obb_corners_ego(const world::WorldState& ws, const geo::Obb& box) {
  // corners() walks CCW and to_local preserves orientation (det +1), so the
  // quad stays CCW as the cross-product inside test expects.
  const auto wc = box.corners();
  return {ws.ego.to_local(wc[0]), ws.ego.to_local(wc[1]), ws.ego.to_local(wc[2]),
          ws.ego.to_local(wc[3])};
}

bool quad_in_view(const std::array<Vec2, 4>& q, const BevConfig& cfg) {
  const double xmax = (cfg.grid - cfg.anchor_col) / cfg.ppm + 1.0;
  const double xmin = -cfg.anchor_col / cfg.ppm - 1.0;
  const double ymax = cfg.anchor_row / cfg.ppm + 1.0;
  const double ymin = -(cfg.grid - cfg.anchor_row) / cfg.ppm - 1.0;
  double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
  for (const Vec2& v : q) {
    x0 = std::min(x0, v.x);
    y0 = std::min(y0, v.y);
    x1 = std::max(x1, v.x);
    y1 = std::max(y1, v.y);
  }
  return x1 >= xmin && x0 <= xmax && y1 >= ymin && y0 <= ymax;
}

// Grow `mask` (S x S bytes, frontier = set pixels) by 3x3 dilation until its
// pixel count reaches min_px, it stops changing, or the iteration cap hits.
int dilate_to_area(std::vector<uint8_t>& mask, int S, int count, int min_px) {
  std::vector<int> frontier;
  frontier.reserve(static_cast<size_t>(count) * 2);
  for (int i = 0; i < S * S; ++i)
    if (mask[static_cast<size_t>(i)]) frontier.push_back(i);
  for (int iter = 0; iter < 40 && count < min_px && !frontier.empty(); ++iter) {
    std::vector<int> added;
    for (int idx : frontier) {
      const int r = idx / S, c = idx % S;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= S || cc < 0 || cc >= S) continue;
          uint8_t& m = mask[static_cast<size_t>(rr) * S + cc];
          if (!m) {
            m = 1;
            added.push_back(rr * S + cc);
          }
        }
    }
    count += static_cast<int>(added.size());
    frontier = std::move(added);
  }
  return count;
}

}  // namespace

BevFrame render_bev(const world::WorldState& ws, const BevConfig& cfg) {
  BevFrame f(cfg.grid, kNumChannels);
  uint8_t* road = f.channel(kRoad);
  uint8_t* marking = f.channel(kMarking);

  // Roads and lane markings.
  for (const auto& lane : ws.lanes) {
    const auto& pts = lane.line.pts;
    for (size_t i = 1; i < pts.size(); ++i) {
      const Vec2 a = ws.ego.to_local(pts[i - 1]);
      const Vec2 b = ws.ego.to_local(pts[i]);
      const double lo_x = std::min(a.x, b.x), hi_x = std::max(a.x, b.x);
      const double lo_y = std::min(a.y, b.y), hi_y = std::max(a.y, b.y);
      if (hi_x < -12.0 || lo_x > 12.0 || hi_y < -8.0 || lo_y > 17.0) continue;
      draw_capsule(road, marking, cfg, a, b, lane.width * 0.5);
    }
  }

  // Route corridor ahead of current progress.
  {
    uint8_t* route = f.channel(kRoute);
    const auto& line = ws.lanes[0].line;
    const double s0 = ws.progress_s;
    const double s1 = std::min(line.length(), s0 + 25.0);
    Vec2 prev = ws.ego.to_local(line.point_at(s0));
    for (double s = s0 + 1.0; s <= s1 + 1e-9; s += 1.0) {
      const Vec2 cur = ws.ego.to_local(line.point_at(std::min(s, s1)));
      draw_capsule(route, nullptr, cfg, prev, cur, 1.0);
      prev = cur;
    }
  }

  // Vehicles (ego included; it sits at the anchor facing up).
  {
    uint8_t* veh = f.channel(kVehicle);
    for (const auto& v : ws.vehicle_records()) {
      const auto q = obb_corners_ego(ws, {v.pose, v.length, v.width});
      if (quad_in_view(q, cfg)) draw_quad(veh, cfg, q);
    }
  }

  // Light trigger boxes on the ego road, shown while approaching.
  for (const auto& [li, stop_s] : ws.lanes[0].stops) {
    if (ws.progress_s >= stop_s || stop_s - ws.progress_s > 20.0) continue;
    const auto& tl = ws.lights[static_cast<size_t>(li)];
    const auto& line = ws.lanes[0].line;
    const double yaw = line.yaw_at(stop_s);
    const Vec2 fdir{std::cos(yaw), std::sin(yaw)};
    // Box spans both same-direction lanes (centered between them).
    geo::Obb box{{line.point_at(stop_s + 1.0) + fdir.perp() * 1.75, yaw}, 2.0, 7.2};
    const auto q = obb_corners_ego(ws, box);
    if (!quad_in_view(q, cfg)) continue;
    draw_quad(f.channel(tl.ego_red(ws.t) ? kRedTrigger : kGreenTrigger), cfg, q);
  }

  // Static obstacles.
  {
    uint8_t* obs = f.channel(kObstacle);
    for (const auto& ob : ws.obstacles) {
      const auto q = obb_corners_ego(ws, ob.box);
      if (quad_in_view(q, cfg)) draw_quad(obs, cfg, q);
    }
  }
  return f;
}

InstanceMasks render_instances_at(const geo::Pose2& ego,
                                  const std::vector<InstanceInput>& vehicles,
                                  const BevConfig& cfg, bool enlarge) {
  const int S = cfg.grid;
  InstanceMasks out;
  out.S = S;
  out.label.assign(static_cast<size_t>(S) * S, 0);
  std::vector<uint8_t> scratch;
  for (const auto& v : vehicles) {
    const auto wc = v.box.corners();
    const std::array<Vec2, 4> q = {ego.to_local(wc[0]), ego.to_local(wc[1]),
                                   ego.to_local(wc[2]), ego.to_local(wc[3])};
    if (!quad_in_view(q, cfg)) continue;
    scratch.assign(static_cast<size_t>(S) * S, 0);
    draw_quad(scratch.data(), cfg, q);
    int count = 0;
    for (uint8_t m : scratch) count += m;
    if (count == 0) continue;
    if (enlarge && count < cfg.enlarge_px())
      dilate_to_area(scratch, S, count, cfg.enlarge_px());
    for (int i = 0; i < S * S; ++i)
      if (scratch[static_cast<size_t>(i)])
        out.label[static_cast<size_t>(i)] = static_cast<uint16_t>(v.id);
  }
  return out;
}

InstanceMasks render_instances(const world::WorldState& ws, const BevConfig& cfg,
                               bool enlarge) {
  std::vector<InstanceInput> vehicles;
  for (const auto& v : ws.vehicle_records())
    vehicles.push_back({v.id, {v.pose, v.length, v.width}});
  return render_instances_at(ws.ego, vehicles, cfg, enlarge);
}

int connected_components(const uint8_t* grid, int S, std::vector<int32_t>& labels) {
  labels.assign(static_cast<size_t>(S) * S, 0);
  int next = 0;
  std::vector<int> stack;
  for (int start = 0; start < S * S; ++start) {
    if (!grid[start] || labels[static_cast<size_t>(start)]) continue;
    ++next;
    labels[static_cast<size_t>(start)] = next;
    stack.assign(1, start);
    while (!stack.empty()) {
      const int idx = stack.back();
      stack.pop_back();
      const int r = idx / S, c = idx % S;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= S || cc < 0 || cc >= S) continue;
          const int j = rr * S + cc;
          if (grid[j] && !labels[static_cast<size_t>(j)]) {
            labels[static_cast<size_t>(j)] = next;
            stack.push_back(j);
          }
        }
    }
  }
  return next;
}

void enlarge_vehicles(BevFrame& frame, int min_px) {
  const int S = frame.S;
  uint8_t* veh = frame.channel(kVehicle);
  std::vector<int32_t> labels;
  const int n = connected_components(veh, S, labels);
  if (n == 0) return;
  std::vector<int> area(static_cast<size_t>(n) + 1, 0);
  for (int i = 0; i < S * S; ++i) ++area[static_cast<size_t>(labels[static_cast<size_t>(i)])];
  area[0] = 0;
  std::vector<uint8_t> mask;
  for (int comp = 1; comp <= n; ++comp) {
    if (area[static_cast<size_t>(comp)] >= min_px) continue;
    mask.assign(static_cast<size_t>(S) * S, 0);
    for (int i = 0; i < S * S; ++i)
      if (labels[static_cast<size_t>(i)] == comp) mask[static_cast<size_t>(i)] = 1;
    dilate_to_area(mask, S, area[static_cast<size_t>(comp)], min_px);
    for (int i = 0; i < S * S; ++i)
      if (mask[static_cast<size_t>(i)]) veh[i] = 1;
  }
}

const std::array<std::array<float, 3>, 14> kPalette = {{
    {0.90f, 0.10f, 0.10f},  // red
    {0.10f, 0.60f, 0.95f},  // sky blue
    {0.10f, 0.80f, 0.20f},  // green
    {0.95f, 0.75f, 0.10f},  // yellow
    {0.80f, 0.10f, 0.80f},  // magenta
    {0.10f, 0.85f, 0.85f},  // cyan
    {0.95f, 0.45f, 0.10f},  // orange
    {0.55f, 0.10f, 0.95f},  // purple
    {0.95f, 0.10f, 0.50f},  // pink
    {0.50f, 0.80f, 0.10f},  // lime
    {0.10f, 0.30f, 0.85f},  // royal blue
    {0.70f, 0.50f, 0.20f},  // brown
    {0.95f, 0.60f, 0.60f},  // salmon
    {0.60f, 0.95f, 0.70f},  // mint
}};

std::vector<float> Colorizer::colorize(const BevFrame& frame) {
  const int S = frame.S;
  SD_SHAPE(S == S_, "colorizer grid size");
  std::vector<int32_t> labels;
  const int n = connected_components(frame.channel(kVehicle), S, labels);

  // Component areas and overlap with previous-frame components.
  std::vector<int> area(static_cast<size_t>(n) + 1, 0);
  for (int i = 0; i < S * S; ++i) ++area[static_cast<size_t>(labels[static_cast<size_t>(i)])];
  area[0] = 0;
  const int prev_n = static_cast<int>(prev_colors_.size());
  std::vector<int> overlap(static_cast<size_t>(n + 1) * (prev_n + 1), 0);
  if (prev_n > 0 && !prev_labels_.empty()) {
    for (int i = 0; i < S * S; ++i) {
      const int l = labels[static_cast<size_t>(i)];
      const int p = prev_labels_[static_cast<size_t>(i)];
      if (l > 0 && p > 0)
        ++overlap[static_cast<size_t>(l) * (prev_n + 1) + p];
    }
  }

  std::vector<int> colors(static_cast<size_t>(n) + 1, 0);
  for (int comp = 1; comp <= n; ++comp) {
    int best_prev = 0, best_cnt = 0;
    for (int p = 1; p <= prev_n; ++p) {
      const int cnt = overlap[static_cast<size_t>(comp) * (prev_n + 1) + p];
      if (cnt > best_cnt) {
        best_cnt = cnt;
        best_prev = p;
      }
    }
    if (best_prev > 0 && 2 * best_cnt > area[static_cast<size_t>(comp)]) {
      colors[static_cast<size_t>(comp)] = prev_colors_[static_cast<size_t>(best_prev - 1)];
    } else {
      colors[static_cast<size_t>(comp)] = static_cast<int>(rng_.below(14));
    }
  }

  // Background: grayscale composite of the non-vehicle channels.
  std::vector<float> rgb(static_cast<size_t>(3) * S * S);
  const uint8_t* road = frame.channel(kRoad);
  const uint8_t* marking = frame.channel(kMarking);
  const uint8_t* red_t = frame.channel(kRedTrigger);
  const uint8_t* green_t = frame.channel(kGreenTrigger);
  const uint8_t* route = frame.channel(kRoute);
  const uint8_t* obst = frame.channel(kObstacle);
  for (int i = 0; i < S * S; ++i) {
    float g = 0.08f + 0.22f * road[i] + 0.25f * marking[i] + 0.10f * route[i] +
              0.30f * red_t[i] + 0.18f * green_t[i] + 0.35f * obst[i];
    g = std::min(g, 1.0f);
    const int l = labels[static_cast<size_t>(i)];
    if (l > 0) {
      const auto& col = kPalette[static_cast<size_t>(colors[static_cast<size_t>(l)])];
      rgb[static_cast<size_t>(i)] = col[0];
      rgb[static_cast<size_t>(S) * S + i] = col[1];
      rgb[static_cast<size_t>(2) * S * S + i] = col[2];
    } else {
      rgb[static_cast<size_t>(i)] = g;
      rgb[static_cast<size_t>(S) * S + i] = g;
      rgb[static_cast<size_t>(2) * S * S + i] = g;
    }
  }

  prev_labels_ = std::move(labels);
  prev_colors_.assign(static_cast<size_t>(n), 0);
  for (int comp = 1; comp <= n; ++comp)
    prev_colors_[static_cast<size_t>(comp - 1)] = colors[static_cast<size_t>(comp)];
  return rgb;
}

std::vector<uint8_t> pack_frame(const BevFrame& frame) {
  const size_t nbits = frame.data.size();
  SD_REQUIRE(nbits % 8 == 0, "frame bit count");
  std::vector<uint8_t> out(8 + nbits / 8, 0);
  out[0] = 'B';
  out[1] = 'E';
  out[2] = 'V';
  out[3] = '1';
  out[4] = static_cast<uint8_t>(frame.S & 0xff);
  out[5] = static_cast<uint8_t>((frame.S >> 8) & 0xff);
  out[6] = static_cast<uint8_t>(frame.C);
  for (size_t i = 0; i < nbits; ++i)
    if (frame.data[i]) out[8 + i / 8] |= static_cast<uint8_t>(0x80u >> (i % 8));
  return out;
}

BevFrame unpack_frame(const uint8_t* bytes, size_t len) {
  SD_CHECK(len >= 8 && bytes[0] == 'B' && bytes[1] == 'E' && bytes[2] == 'V' &&
               bytes[3] == '1',
           IoError, "bad frame header");
  const int S = bytes[4] | (bytes[5] << 8);
  const int C = bytes[6];
  const size_t nbits = static_cast<size_t>(C) * S * S;
  SD_CHECK(len == 8 + nbits / 8, IoError, "frame payload size");
  BevFrame f(S, C);
  for (size_t i = 0; i < nbits; ++i)
    f.data[i] = (bytes[8 + i / 8] >> (7 - i % 8)) & 1u;
  return f;
}

}  // namespace slotdrive::bev
