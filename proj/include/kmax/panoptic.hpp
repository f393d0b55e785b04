#pragma once

#include <string>
#include <vector>

#include "kmax/tensor.hpp"

namespace kmax {

inline constexpr int kVoidClass = -1;

struct ClassInfo {
  std::string name;
  bool is_thing = false;
};

// Class ids index into this table; things first, then stuff.
using ClassTable = std::vector<ClassInfo>;

struct Segment {
  int class_id = kVoidClass;
  int instance_id = 0;  // 0 for stuff
  std::size_t area = 0;
  double confidence = 1.0;

  bool operator==(const Segment&) const = default;
};

// Per-pixel (class, instance) labels; void pixels carry kVoidClass.
// Non-overlap holds by construction: one label pair per pixel.
struct PanopticMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> class_ids;
  std::vector<int> instance_ids;

  static PanopticMap filled(std::size_t height, std::size_t width, int class_id = kVoidClass);
  std::size_t pixels() const { return height * width; }
  bool is_void(std::size_t i) const { return class_ids[i] == kVoidClass; }
  // Distinct non-void (class, instance) pairs sorted by (class, instance).
  std::vector<Segment> segments() const;
  // Index into segments() per pixel, -1 for void.
  std::vector<int> segment_index(const std::vector<Segment>& segs) const;
  std::size_t void_pixels() const;

  bool operator==(const PanopticMap&) const = default;
};

// Majority vote over factor x factor blocks (ties -> smallest label pair).
PanopticMap downsample(const PanopticMap& map, std::size_t factor);

// Row-stochastic model outputs for one image.
struct PredictionSet {
  Tensor masks;    // HW x N, rows sum to 1 (softmax over N)
  Tensor classes;  // N x (num_classes + 1), last column is void
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t num_queries() const { return masks.dim(1); }
  std::size_t num_classes() const { return classes.dim(1) - 1; }
};

// Logit form used by training; `to_prediction_set` applies the softmaxes.
struct PredictionLogits {
  Tensor mask_logits;   // HW x N
  Tensor class_logits;  // N x (num_classes + 1)
  std::size_t height = 0;
  std::size_t width = 0;
};

PredictionSet to_prediction_set(const PredictionLogits& logits);

struct PanopticResult {
  PanopticMap map;
  std::vector<Segment> segments;
};

}  // namespace kmax
