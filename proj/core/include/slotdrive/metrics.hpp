#pragma once

// Instance-segmentation agreement metrics for forecast evaluation:
// foreground Adjusted Rand Index and Hungarian-matched mean IoU.
//
// Masks are flat integer label grids; label 0 is background, any positive
// label is an instance id (ground truth) or a slot/cluster id (predictions).

#include <cstdint>
#include <span>
#include <vector>

namespace slotdrive::metrics {

// Adjusted Rand Index over the ground-truth foreground pixels (gt > 0),
// computed with the contingency-table formula; invariant to relabeling on
// either side. Edge cases: both masks without foreground -> 1.0, exactly one
// without foreground -> 0.0, degenerate contingency (zero denominator) -> 1.0.
double fg_ari(std::span<const int> pred, std::span<const int> gt);

// Mean IoU over ground-truth instances under the optimal one-to-one matching
// (Hungarian assignment maximizing total IoU); unmatched ground-truth
// instances count as 0. Edge cases as fg_ari.
double miou(std::span<const int> pred, std::span<const int> gt);

// Maximum-weight one-to-one assignment for a dense score matrix
// (rows x cols); returns col index per row, -1 when unassigned. O(n^3).
std::vector<int> max_weight_assignment(const std::vector<double>& score, int rows,
                                       int cols);

}  // namespace slotdrive::metrics
