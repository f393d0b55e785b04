#pragma once

#include <string>
#include <vector>

#include "kmax/config.hpp"
#include "kmax/dataset.hpp"
#include "kmax/model.hpp"
#include "kmax/panoptic.hpp"

namespace kmax {

struct MergeOptions {
  double conf_thresh = 0.3;
  double overlap_thresh = 0.8;
  double mask_thresh = 0.5;

  static MergeOptions from_config(const InferConfig& infer);
};

// Mask-wise merging. Queries below conf_thresh are dropped; each pixel goes
// to argmax_n conf_n * Z[hw, n]; the query whose kept pixels cover the
// smallest fraction (< overlap_thresh) of its binary mask is dropped and its
// pixels reassigned, until none remain. Things get fresh instance ids,
// same-class stuff merges into one segment.
PanopticResult merge_masks(const PredictionSet& pred, const ClassTable& classes,
                           const MergeOptions& options = {});

struct ClassQuality {
  int class_id = 0;
  std::string name;
  bool is_thing = false;
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;

  bool present() const { return tp + fp + fn > 0; }
  double pq() const;
  double sq() const;
  double rq() const;
};

struct QualityReport {
  double pq = 0.0, pq_th = 0.0, pq_st = 0.0;
  double sq = 0.0, rq = 0.0;
  std::vector<ClassQuality> per_class;
};

// Sums TP/FP/FN/IoU over images. Segments match at IoU > 0.5 with gt-void
// pixels removed from the union; predicted segments lying mostly (> 0.5) in
// gt void are not counted as false positives.
class PanopticQualityAccumulator {
 public:
  explicit PanopticQualityAccumulator(ClassTable classes);
  void add(const PanopticMap& pred, const PanopticMap& gt);
  QualityReport report() const;

 private:
  ClassTable classes_;
  std::vector<ClassQuality> stats_;
};

QualityReport panoptic_quality(const PanopticResult& pred, const PanopticMap& gt,
                               const ClassTable& classes);

struct IoUReport {
  double miou = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from gt
};

// Class-wise IoU over non-void gt pixels, averaged over classes present in
// gt.
IoUReport class_iou(const PanopticMap& pred, const PanopticMap& gt, std::size_t num_classes);
double miou(const PanopticResult& pred, const PanopticMap& gt, std::size_t num_classes);

// Bilinear (half-pixel centers) resize of an HW x C row-major map.
Tensor resize_bilinear(const Tensor& map, std::size_t height, std::size_t width,
                       std::size_t out_height, std::size_t out_width);

// Full-resolution panoptic prediction for one image.
PanopticResult predict_panoptic(const KMaxModel& model, const ImageTensor& image,
                                const ClassTable& classes, const MergeOptions& options);

struct EvalReport {
  std::size_t images = 0;
  QualityReport quality;
  double miou = 0.0;
};

// Evaluates on `count` scenes of `spec`, optionally across `threads` workers.
EvalReport evaluate(const KMaxModel& model, const SceneSpec& spec, std::size_t count,
                    const MergeOptions& options, std::size_t threads = 1);

std::string format_report(const EvalReport& report);

}  // namespace kmax
