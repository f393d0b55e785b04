#include "kmax/matching.hpp"

#include <cmath>
#include <limits>

namespace kmax {

Matching hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) throw ArgumentError("hungarian_match: cost must be K x N");
  const std::size_t k = cost.dim(0), n = cost.dim(1);
  if (k > n) {
    throw ArgumentError("hungarian_match: " + std::to_string(k) + " targets but only " +
                        std::to_string(n) + " queries");
  }
  const auto a = cost.data();
  for (double v : a) {
    if (!std::isfinite(v)) throw ArgumentError("hungarian_match: non-finite cost");
  }

  // Shortest augmenting paths with row/column potentials; 1-based with a
  // virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(k + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= k; ++row) {
    owner[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[col0] = true;
      const std::size_t r = owner[col0];
      double delta = inf;
      std::size_t col1 = 0;
      for (std::size_t c = 1; c <= n; ++c) {
        if (used[c]) continue;
        const double cur = a[(r - 1) * n + (c - 1)] - u[r] - v[c];
        if (cur < minv[c]) {
          minv[c] = cur;
          way[c] = col0;
        }
        if (minv[c] < delta) {
          delta = minv[c];
          col1 = c;
        }
      }
      for (std::size_t c = 0; c <= n; ++c) {
        if (used[c]) {
          u[owner[c]] += delta;
          v[c] -= delta;
        } else {
          minv[c] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  Matching m;
  m.gt_to_query.assign(k, 0);
  m.query_to_gt.assign(n, -1);
  for (std::size_t c = 1; c <= n; ++c) {
    if (owner[c] == 0) continue;
    m.gt_to_query[owner[c] - 1] = c - 1;
    m.query_to_gt[c - 1] = static_cast<int>(owner[c] - 1);
  }
  for (std::size_t i = 0; i < k; ++i) m.cost += a[i * n + m.gt_to_query[i]];
  return m;
}

SegmentTargets SegmentTargets::from_map(const PanopticMap& gt) {
  SegmentTargets t;
  t.segments = gt.segments();
  t.pixel_segment = gt.segment_index(t.segments);
  t.height = gt.height;
  t.width = gt.width;
  return t;
}

Tensor SegmentTargets::masks() const {
  const std::size_t hw = pixel_segment.size();
  if (segments.empty()) throw ArgumentError("SegmentTargets::masks: no segments");
  Tensor m({segments.size(), hw});
  auto d = m.mutable_data();
  for (std::size_t p = 0; p < hw; ++p) {
    if (pixel_segment[p] >= 0) d[static_cast<std::size_t>(pixel_segment[p]) * hw + p] = 1.0;
  }
  return m;
}

Tensor matching_cost(const PredictionSet& pred, const SegmentTargets& gt) {
  if (pred.height != gt.height || pred.width != gt.width ||
      pred.masks.dim(0) != gt.pixel_segment.size()) {
    throw ShapeError("matching_cost: prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) +
                     "x" + std::to_string(gt.width));
  }
  const std::size_t k = gt.size(), n = pred.num_queries(), hw = gt.pixel_segment.size();
  if (k == 0) throw ArgumentError("matching_cost: ground truth has no segments");
  const std::size_t classes = pred.classes.dim(1);
  const auto z = pred.masks.data();
  const auto p = pred.classes.data();

  std::vector<double> inter(k * n, 0.0), z_sum(n, 0.0), m_sum(k, 0.0);
  for (std::size_t px = 0; px < hw; ++px) {
    const int s = gt.pixel_segment[px];
    const double* row = &z[px * n];
    for (std::size_t q = 0; q < n; ++q) z_sum[q] += row[q];
    if (s < 0) continue;
    m_sum[static_cast<std::size_t>(s)] += 1.0;
    double* acc = &inter[static_cast<std::size_t>(s) * n];
    for (std::size_t q = 0; q < n; ++q) acc[q] += row[q];
  }
  Tensor cost({k, n});
  auto c = cost.mutable_data();
  for (std::size_t i = 0; i < k; ++i) {
    const auto cls = static_cast<std::size_t>(gt.segments[i].class_id);
    if (cls + 1 >= classes) throw ShapeError("matching_cost: class id out of range");
    for (std::size_t q = 0; q < n; ++q) {
      const double dice = 2.0 * inter[i * n + q] / (z_sum[q] + m_sum[i] + kDiceEps);
      c[i * n + q] = -p[q * classes + cls] * dice;
    }
  }
  return cost;
}

Matching match_prediction(const PredictionSet& pred, const SegmentTargets& gt) {
  if (gt.size() == 0) {
    Matching m;
    m.query_to_gt.assign(pred.num_queries(), -1);
    return m;
  }
  return hungarian_match(matching_cost(pred, gt));
}

Tensor matching_cost(const PredictionSet& pred, const PanopticMap& gt) {
  return matching_cost(pred, SegmentTargets::from_map(gt));
}

}  // namespace kmax
