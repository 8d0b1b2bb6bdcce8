#pragma once

// Attribute quantizers: per-dimension 1-D k-means over driving attributes
// (speed, light flag, target point, waypoints), turning continuous values
// into small discrete token vocabularies and back.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace slotdrive::quant {

// 1-D k-means with k-means++ seeding and Lloyd iterations (<= 300, tol 1e-6).
// Centroids come back sorted ascending. Throws InsufficientData when the
// number of distinct values is below k.
std::vector<double> fit_kmeans_1d(const std::vector<double>& values, int k,
                                  uint64_t seed);

// A fitted attribute quantizer: one sorted centroid list per dimension.
struct Quantizer {
  std::string name;
  std::vector<std::vector<double>> centroids;  // per dimension, ascending
  bool fitted = false;

  int dims() const { return static_cast<int>(centroids.size()); }
  int k(int dim = 0) const;

  // Nearest centroid by absolute distance; ties break toward the lower index.
  // Throws Unfitted / IndexOutOfRange.
  int quantize(double value, int dim = 0) const;
  double dequantize(int index, int dim = 0) const;

  // Convenience for 2-D attributes (per-dimension independent codes).
  std::array<int, 2> quantize2(double x, double y) const;
  std::array<double, 2> dequantize2(int ix, int iy) const;
};

Quantizer fit_quantizer(const std::string& name, const std::vector<double>& values,
                        int k, uint64_t seed);
Quantizer fit_quantizer_2d(const std::string& name,
                           const std::vector<std::array<double, 2>>& points, int kx,
                           int ky, uint64_t seed);

// The fixed vocabulary family used by the trajectory tokenizer:
// speed 14, light 2, target 16 per dimension, waypoints 24 per dimension.
struct QuantizerSet {
  Quantizer speed;     // 1-D, k=14
  Quantizer light;     // 1-D, k=2 (binary flag, quantized for uniformity)
  Quantizer target;    // 2-D, k=16 per dim
  Quantizer waypoint;  // 2-D, k=24 per dim
};

struct AttributeSamples {
  std::vector<double> speeds;
  std::vector<double> lights;
  std::vector<std::array<double, 2>> targets;
  std::vector<std::array<double, 2>> waypoints;
};

QuantizerSet fit_driving_quantizers(const AttributeSamples& samples, uint64_t seed);

// Plain-text persistence (exact double round-trip via %.17g).
std::string quantizers_to_text(const QuantizerSet& qs);
QuantizerSet quantizers_from_text(const std::string& text);
void save_quantizers(const QuantizerSet& qs, const std::string& path);
QuantizerSet load_quantizers(const std::string& path);

}  // namespace slotdrive::quant
