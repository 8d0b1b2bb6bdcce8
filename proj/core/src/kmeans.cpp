#include "slotdrive/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "slotdrive/common.hpp"
#include "slotdrive/rng.hpp"

namespace slotdrive::quant {

namespace {

size_t nearest_index(const std::vector<double>& centroids, double v) {
  // Centroids sorted ascending: binary search, then compare the two
  // neighbours; equidistant values go to the lower index.
  const auto it = std::lower_bound(centroids.begin(), centroids.end(), v);
  if (it == centroids.begin()) return 0;
  if (it == centroids.end()) return centroids.size() - 1;
  const size_t hi = static_cast<size_t>(it - centroids.begin());
  const size_t lo = hi - 1;
  return (v - centroids[lo]) <= (centroids[hi] - v) ? lo : hi;
}

}  // namespace

std::vector<double> fit_kmeans_1d(const std::vector<double>& values, int k,
                                  uint64_t seed) {
  SD_CHECK(k >= 1, ConfigError, "k must be positive");
  std::vector<double> distinct = values;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  SD_CHECK(static_cast<int>(distinct.size()) >= k, InsufficientData,
           "k-means needs >= " << k << " distinct values, got " << distinct.size());

  Rng rng(seed, "kmeans");
  const size_t n = values.size();

  // k-means++ seeding: first centroid uniform, then D^2-weighted picks.
  std::vector<double> centroids;
  centroids.reserve(static_cast<size_t>(k));
  centroids.push_back(values[rng.below(static_cast<int64_t>(n))]);
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double best = 1e300;
      for (double c : centroids) best = std::min(best, (values[i] - c) * (values[i] - c));
      d2[i] = best;
      total += best;
    }
    size_t pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      while (pick + 1 < n && r > d2[pick]) r -= d2[pick++];
      // Roundoff can land on an existing centroid (d2 == 0); scan for a new
      // value, wrapping — one must exist while distinct values remain.
      for (size_t off = 0; off < n && d2[pick] == 0.0; ++off)
        pick = (pick + 1) % n;
    }
    centroids.push_back(values[pick]);
  }

  // Lloyd iterations.
  std::vector<double> sum(static_cast<size_t>(k));
  std::vector<int64_t> count(static_cast<size_t>(k));
  std::vector<size_t> assign(n);
  std::vector<double> sorted = centroids;
  std::sort(sorted.begin(), sorted.end());
  for (int iter = 0; iter < 300; ++iter) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (size_t i = 0; i < n; ++i) {
      assign[i] = nearest_index(sorted, values[i]);
      sum[assign[i]] += values[i];
      count[assign[i]] += 1;
    }
    // Empty clusters grab the value farthest from its assigned centroid.
    for (size_t c = 0; c < sorted.size(); ++c) {
      if (count[c] > 0) continue;
      double worst = -1.0;
      size_t worst_i = 0;
      for (size_t i = 0; i < n; ++i) {
        if (count[assign[i]] <= 1) continue;  // do not empty another cluster
        const double d = std::abs(values[i] - sorted[assign[i]]);
        if (d > worst) {
          worst = d;
          worst_i = i;
        }
      }
      SD_CHECK(worst >= 0.0, RuntimeError, "k-means lost a cluster");
      const size_t from = assign[worst_i];
      sum[from] -= values[worst_i];
      count[from] -= 1;
      sum[c] = values[worst_i];
      count[c] = 1;
      assign[worst_i] = c;
    }
    double moved = 0.0;
    for (size_t c = 0; c < sorted.size(); ++c) {
      const double next = sum[c] / static_cast<double>(count[c]);
      moved = std::max(moved, std::abs(next - sorted[c]));
      sorted[c] = next;
    }
    std::sort(sorted.begin(), sorted.end());
    if (moved <= 1e-6) break;
  }
  return sorted;
}

int Quantizer::k(int dim) const {
  SD_CHECK(dim >= 0 && dim < dims(), IndexOutOfRange, "quantizer dim " << dim);
  return static_cast<int>(centroids[static_cast<size_t>(dim)].size());
}

int Quantizer::quantize(double value, int dim) const {
  SD_CHECK(fitted, Unfitted, "quantizer '" << name << "' not fitted");
  SD_CHECK(dim >= 0 && dim < dims(), IndexOutOfRange, "quantizer dim " << dim);
  return static_cast<int>(nearest_index(centroids[static_cast<size_t>(dim)], value));
}

double Quantizer::dequantize(int index, int dim) const {
  SD_CHECK(fitted, Unfitted, "quantizer '" << name << "' not fitted");
  SD_CHECK(dim >= 0 && dim < dims(), IndexOutOfRange, "quantizer dim " << dim);
  const auto& cs = centroids[static_cast<size_t>(dim)];
  SD_CHECK(index >= 0 && index < static_cast<int>(cs.size()), IndexOutOfRange,
           "index " << index << " for k=" << cs.size());
  return cs[static_cast<size_t>(index)];
}

std::array<int, 2> Quantizer::quantize2(double x, double y) const {
  return {quantize(x, 0), quantize(y, 1)};
}

std::array<double, 2> Quantizer::dequantize2(int ix, int iy) const {
  return {dequantize(ix, 0), dequantize(iy, 1)};
}

Quantizer fit_quantizer(const std::string& name, const std::vector<double>& values,
                        int k, uint64_t seed) {
  Quantizer q;
  q.name = name;
  q.centroids.push_back(fit_kmeans_1d(values, k, seed ^ hash_str(name)));
  q.fitted = true;
  return q;
}

Quantizer fit_quantizer_2d(const std::string& name,
                           const std::vector<std::array<double, 2>>& points, int kx,
                           int ky, uint64_t seed) {
  std::vector<double> xs, ys;
  xs.reserve(points.size());
  ys.reserve(points.size());
  for (const auto& p : points) {
    xs.push_back(p[0]);
    ys.push_back(p[1]);
  }
  Quantizer q;
  q.name = name;
  q.centroids.push_back(fit_kmeans_1d(xs, kx, seed ^ hash_str(name + "/x")));
  q.centroids.push_back(fit_kmeans_1d(ys, ky, seed ^ hash_str(name + "/y")));
  q.fitted = true;
  return q;
}

QuantizerSet fit_driving_quantizers(const AttributeSamples& s, uint64_t seed) {
  QuantizerSet qs;
  qs.speed = fit_quantizer("speed", s.speeds, 14, seed);
  qs.light = fit_quantizer("light", s.lights, 2, seed);
  qs.target = fit_quantizer_2d("target", s.targets, 16, 16, seed);
  qs.waypoint = fit_quantizer_2d("waypoint", s.waypoints, 24, 24, seed);
  return qs;
}

namespace {

void append_quantizer(std::string& out, const Quantizer& q) {
  char buf[64];
  out += "quantizer " + q.name + " dims " + std::to_string(q.dims()) + "\n";
  for (int d = 0; d < q.dims(); ++d) {
    const auto& cs = q.centroids[static_cast<size_t>(d)];
    out += "dim " + std::to_string(d) + " k " + std::to_string(cs.size()) + "\n";
    for (double c : cs) {
      std::snprintf(buf, sizeof(buf), "c %.17g\n", c);
      out += buf;
    }
  }
}

Quantizer* pick(QuantizerSet& qs, const std::string& name) {
  if (name == "speed") return &qs.speed;
  if (name == "light") return &qs.light;
  if (name == "target") return &qs.target;
  if (name == "waypoint") return &qs.waypoint;
  return nullptr;
}

}  // namespace

std::string quantizers_to_text(const QuantizerSet& qs) {
  std::string out = "slotdrive-quantizers v1\n";
  append_quantizer(out, qs.speed);
  append_quantizer(out, qs.light);
  append_quantizer(out, qs.target);
  append_quantizer(out, qs.waypoint);
  return out;
}

QuantizerSet quantizers_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  SD_CHECK(std::getline(is, line) && line == "slotdrive-quantizers v1", IoError,
           "bad quantizer file header");
  QuantizerSet qs;
  Quantizer* cur = nullptr;
  std::vector<double>* cur_dim = nullptr;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "quantizer") {
      std::string name, kw;
      int ndims = 0;
      ls >> name >> kw >> ndims;
      cur = pick(qs, name);
      SD_CHECK(cur != nullptr, IoError, "unknown quantizer '" << name << "'");
      cur->name = name;
      cur->centroids.clear();
      cur->centroids.reserve(static_cast<size_t>(ndims));
      cur->fitted = true;
      cur_dim = nullptr;
    } else if (key == "dim") {
      SD_CHECK(cur != nullptr, IoError, "dim before quantizer");
      int d = 0, kk = 0;
      std::string kw;
      ls >> d >> kw >> kk;
      cur->centroids.emplace_back();
      cur_dim = &cur->centroids.back();
      cur_dim->reserve(static_cast<size_t>(kk));
    } else if (key == "c") {
      SD_CHECK(cur_dim != nullptr, IoError, "centroid before dim");
      double v = 0.0;
      ls >> v;
      cur_dim->push_back(v);
    }
  }
  SD_CHECK(qs.speed.fitted && qs.light.fitted && qs.target.fitted &&
               qs.waypoint.fitted,
           IoError, "quantizer file missing attributes");
  return qs;
}

void save_quantizers(const QuantizerSet& qs, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  SD_CHECK(os.good(), IoError, "cannot write " << path);
  const std::string text = quantizers_to_text(qs);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

QuantizerSet load_quantizers(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  SD_CHECK(is.good(), IoError, "cannot read " << path);
  std::stringstream ss;
  ss << is.rdbuf();
  return quantizers_from_text(ss.str());
}

}  // namespace slotdrive::quant
