#pragma once

#include <vector>

#include "kmax/config.hpp"
#include "kmax/decoder.hpp"
#include "kmax/matching.hpp"
#include "kmax/panoptic.hpp"

namespace kmax {

struct LossWeights {
  double pq = 3.0;
  double sem = 1.0;
  double maskid = 0.3;
  // Multiplier on each auxiliary output's PQ + mask-id terms.
  double aux = 1.0;
  double void_weight = 0.1;
  bool use_aux = true;

  static LossWeights from_config(const TrainConfig& train);
};

struct LossTerms {
  Tensor total;
  // Final-prediction terms (unweighted), for logging.
  double l_pq = 0.0;
  double l_sem = 0.0;
  double l_maskid = 0.0;
  // Weighted sum of all auxiliary contributions.
  double l_aux = 0.0;
};

// class CE + (1 - Dice) averaged over the K matched pairs, plus void CE on
// each unmatched query weighted void_weight / K.
Tensor pq_style_loss(const Tensor& mask_logits, const Tensor& class_logits,
                     const SegmentTargets& gt, const Matching& matching, double void_weight);

// Per-pixel CE of softmax_N(mask_logits) against the matched query of the
// pixel's segment. Void pixels are skipped.
Tensor mask_id_loss(const Tensor& mask_logits, const SegmentTargets& gt, const Matching& matching);

// Per-pixel CE of the semantic head; void pixels are skipped.
Tensor semantic_loss(const Tensor& semantic_logits, const SegmentTargets& gt);

// `gt` must be at the supervision resolution of `final`. `matching` comes
// from the final prediction and is reused for every auxiliary output.
// Throws ContractError when `matching` does not cover the map's segments.
LossTerms total_loss(const PredictionLogits& final, const std::vector<AuxiliaryPrediction>& aux,
                     const Tensor& semantic_logits, const SegmentTargets& gt,
                     const Matching& matching, const LossWeights& weights);

}  // namespace kmax
