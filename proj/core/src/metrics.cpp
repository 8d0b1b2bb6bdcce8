#include "slotdrive/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "slotdrive/common.hpp"

namespace slotdrive::metrics {

namespace {

// Find-or-insert into a small label table; returns the dense index.
int dense_id(std::vector<int>& table, int label) {
  for (size_t i = 0; i < table.size(); ++i)
    if (table[i] == label) return static_cast<int>(i);
  table.push_back(label);
  return static_cast<int>(table.size() - 1);
}

inline double pairs2(double m) { return 0.5 * m * (m - 1.0); }

bool has_foreground(std::span<const int> m) {
  for (int v : m)
    if (v > 0) return true;
  return false;
}

}  // namespace

double fg_ari(std::span<const int> pred, std::span<const int> gt) {
  SD_CHECK(pred.size() == gt.size(), ShapeMismatch,
           "mask sizes " << pred.size() << " vs " << gt.size());
  const bool p_fg = has_foreground(pred);
  const bool g_fg = has_foreground(gt);
  if (!p_fg && !g_fg) return 1.0;
  if (p_fg != g_fg) return 0.0;

  // Contingency over ground-truth foreground pixels. Prediction labels keep
  // whatever value they have there (including 0), as their own cluster.
  std::vector<int> ptab, gtab;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] <= 0) continue;
    dense_id(gtab, gt[i]);
    dense_id(ptab, pred[i]);
  }
  const size_t P = ptab.size(), G = gtab.size();
  std::vector<double> cont(P * G, 0.0);
  std::vector<double> a(P, 0.0), b(G, 0.0);
  size_t n = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] <= 0) continue;
    const auto pi = static_cast<size_t>(dense_id(ptab, pred[i]));
    const auto gi = static_cast<size_t>(dense_id(gtab, gt[i]));
    cont[pi * G + gi] += 1.0;
    a[pi] += 1.0;
    b[gi] += 1.0;
    ++n;
  }
  if (n < 2) return 1.0;  // a single pixel agrees with itself

  double sum_ij = 0.0;
  for (double c : cont) sum_ij += pairs2(c);
  double sum_a = 0.0, sum_b = 0.0;
  for (double x : a) sum_a += pairs2(x);
  for (double x : b) sum_b += pairs2(x);
  const double total = pairs2(static_cast<double>(n));
  const double expected = sum_a * sum_b / total;
  const double maximum = 0.5 * (sum_a + sum_b);
  const double denom = maximum - expected;
  if (denom == 0.0) return 1.0;
  return (sum_ij - expected) / denom;
}

double miou(std::span<const int> pred, std::span<const int> gt) {
  SD_CHECK(pred.size() == gt.size(), ShapeMismatch,
           "mask sizes " << pred.size() << " vs " << gt.size());
  const bool p_fg = has_foreground(pred);
  const bool g_fg = has_foreground(gt);
  if (!p_fg && !g_fg) return 1.0;
  if (p_fg != g_fg) return 0.0;

  std::vector<int> ptab, gtab;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (pred[i] > 0) dense_id(ptab, pred[i]);
    if (gt[i] > 0) dense_id(gtab, gt[i]);
  }
  const size_t P = ptab.size(), G = gtab.size();
  std::vector<double> inter(P * G, 0.0);
  std::vector<double> parea(P, 0.0), garea(G, 0.0);
  for (size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] > 0, g = gt[i] > 0;
    if (p) parea[static_cast<size_t>(dense_id(ptab, pred[i]))] += 1.0;
    if (g) garea[static_cast<size_t>(dense_id(gtab, gt[i]))] += 1.0;
    if (p && g)
      inter[static_cast<size_t>(dense_id(ptab, pred[i])) * G +
            static_cast<size_t>(dense_id(gtab, gt[i]))] += 1.0;
  }

  std::vector<double> iou(P * G, 0.0);
  for (size_t r = 0; r < P; ++r)
    for (size_t c = 0; c < G; ++c) {
      const double is = inter[r * G + c];
      const double un = parea[r] + garea[c] - is;
      iou[r * G + c] = un > 0.0 ? is / un : 0.0;
    }

  const std::vector<int> match =
      max_weight_assignment(iou, static_cast<int>(P), static_cast<int>(G));
  double total = 0.0;
  for (size_t r = 0; r < P; ++r)
    if (match[r] >= 0) total += iou[r * G + static_cast<size_t>(match[r])];
  return total / static_cast<double>(G);
}

std::vector<int> max_weight_assignment(const std::vector<double>& score, int rows,
                                       int cols) {
  SD_CHECK(score.size() == static_cast<size_t>(rows) * static_cast<size_t>(cols),
           ShapeMismatch, "score matrix size");
  if (rows == 0 || cols == 0) return std::vector<int>(static_cast<size_t>(rows), -1);
  // Square min-cost matrix: cost = -score, padded with 0 (no-match option).
  const size_t n = static_cast<size_t>(std::max(rows, cols));
  std::vector<double> cost(n * n, 0.0);
  for (size_t r = 0; r < static_cast<size_t>(rows); ++r)
    for (size_t c = 0; c < static_cast<size_t>(cols); ++c)
      cost[r * n + c] = -score[r * static_cast<size_t>(cols) + c];

  // Shortest augmenting paths with potentials (1-indexed internal arrays).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<size_t> match_col(n + 1, 0);  // col -> row (1-based, 0 = free)
  std::vector<size_t> way(n + 1, 0);
  std::vector<double> minv(n + 1);
  std::vector<char> used(n + 1);
  for (size_t i = 1; i <= n; ++i) {
    match_col[0] = i;
    size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const size_t i0 = match_col[j0];
      double delta = inf;
      size_t j1 = 0;
      for (size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != 0);
    do {
      const size_t j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> out(static_cast<size_t>(rows), -1);
  for (size_t j = 1; j <= n; ++j) {
    const size_t r1 = match_col[j];
    if (r1 == 0) continue;
    const size_t r = r1 - 1, c = j - 1;
    if (r < static_cast<size_t>(rows) && c < static_cast<size_t>(cols) &&
        score[r * static_cast<size_t>(cols) + c] > 0.0)
      out[r] = static_cast<int>(c);
  }
  return out;
}

}  // namespace slotdrive::metrics
