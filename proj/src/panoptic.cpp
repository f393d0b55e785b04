#include "kmax/panoptic.hpp"

#include <algorithm>
#include <map>

#include "kmax/ops.hpp"

namespace kmax {

PanopticMap PanopticMap::filled(std::size_t height, std::size_t width, int class_id) {
  PanopticMap m;
  m.height = height;
  m.width = width;
  m.class_ids.assign(height * width, class_id);
  m.instance_ids.assign(height * width, 0);
  return m;
}

std::vector<Segment> PanopticMap::segments() const {
  std::map<std::pair<int, int>, std::size_t> areas;
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] == kVoidClass) continue;
    ++areas[{class_ids[i], instance_ids[i]}];
  }
  std::vector<Segment> out;
  for (const auto& [key, area] : areas) out.push_back({key.first, key.second, area, 1.0});
  return out;
}

std::vector<int> PanopticMap::segment_index(const std::vector<Segment>& segs) const {
  std::map<std::pair<int, int>, int> lookup;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    lookup[{segs[s].class_id, segs[s].instance_id}] = static_cast<int>(s);
  }
  std::vector<int> out(class_ids.size(), -1);
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] == kVoidClass) continue;
    auto it = lookup.find({class_ids[i], instance_ids[i]});
    if (it != lookup.end()) out[i] = it->second;
  }
  return out;
}

std::size_t PanopticMap::void_pixels() const {
  return static_cast<std::size_t>(std::count(class_ids.begin(), class_ids.end(), kVoidClass));
}

PanopticMap downsample(const PanopticMap& map, std::size_t factor) {
  if (factor == 0 || map.height % factor || map.width % factor) {
    throw ShapeError("downsample: factor " + std::to_string(factor) + " does not divide " +
                     std::to_string(map.height) + "x" + std::to_string(map.width));
  }
  PanopticMap out = PanopticMap::filled(map.height / factor, map.width / factor);
  std::map<std::pair<int, int>, std::size_t> votes;
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      votes.clear();
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) {
          const std::size_t i = (y * factor + dy) * map.width + x * factor + dx;
          ++votes[{map.class_ids[i], map.instance_ids[i]}];
        }
      // std::map iterates in ascending label order, so ">" keeps the smallest on ties.
      std::pair<int, int> best{};
      std::size_t best_count = 0;
      for (const auto& [label, count] : votes) {
        if (count > best_count) {
          best = label;
          best_count = count;
        }
      }
      out.class_ids[y * out.width + x] = best.first;
      out.instance_ids[y * out.width + x] = best.second;
    }
  }
  return out;
}

PredictionSet to_prediction_set(const PredictionLogits& logits) {
  return {softmax(logits.mask_logits, 1), softmax(logits.class_logits, 1), logits.height,
          logits.width};
}

}  // namespace kmax
