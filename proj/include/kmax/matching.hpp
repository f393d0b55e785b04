#pragma once

#include <vector>

#include "kmax/panoptic.hpp"
#include "kmax/tensor.hpp"

namespace kmax {

// Injective ground-truth -> query assignment.
struct Matching {
  std::vector<std::size_t> gt_to_query;  // size K
  std::vector<int> query_to_gt;          // size N, -1 for void targets
  double cost = 0.0;

  std::size_t num_matched() const { return gt_to_query.size(); }
};

// Minimum-cost assignment of every row to a distinct column (Kuhn-Munkres,
// O(K^2 N)). Throws ArgumentError if K > N or a cost is not finite.
Matching hungarian_match(const Tensor& cost);

// Ground-truth segments of a map as dense rows, in PanopticMap::segments()
// order.
struct SegmentTargets {
  std::vector<Segment> segments;
  std::vector<int> pixel_segment;  // per pixel, -1 for void
  std::size_t height = 0;
  std::size_t width = 0;

  static SegmentTargets from_map(const PanopticMap& gt);
  std::size_t size() const { return segments.size(); }
  // K x HW binary masks; K must be positive.
  Tensor masks() const;
};

inline constexpr double kDiceEps = 1e-6;

// cost[i, n] = -p_n(c_i) * Dice(Z_n, m_i). Throws ShapeError when the map
// and prediction resolutions differ, ArgumentError for an empty map.
Tensor matching_cost(const PredictionSet& pred, const SegmentTargets& gt);
Tensor matching_cost(const PredictionSet& pred, const PanopticMap& gt);

// Hungarian matching on matching_cost; all queries unmatched when the map
// has no segments.
Matching match_prediction(const PredictionSet& pred, const SegmentTargets& gt);

}  // namespace kmax
