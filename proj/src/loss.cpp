#include "kmax/loss.hpp"

#include <algorithm>

#include "kmax/ops.hpp"

namespace kmax {

LossWeights LossWeights::from_config(const TrainConfig& train) {
  LossWeights w;
  w.pq = train.w_pq;
  w.sem = train.w_sem;
  w.maskid = train.w_maskid;
  w.void_weight = train.void_weight;
  w.use_aux = train.aux_loss;
  return w;
}

namespace {

void check_matching(const SegmentTargets& gt, const Matching& matching, std::size_t queries) {
  if (matching.num_matched() != gt.size() || matching.query_to_gt.size() != queries) {
    throw ContractError("loss: matching covers " + std::to_string(matching.num_matched()) + " of " +
                        std::to_string(gt.size()) + " segments over " +
                        std::to_string(matching.query_to_gt.size()) + " queries, expected " +
                        std::to_string(queries));
  }
}

}  // namespace

Tensor pq_style_loss(const Tensor& mask_logits, const Tensor& class_logits,
                     const SegmentTargets& gt, const Matching& matching, double void_weight) {
  const std::size_t n = class_logits.dim(0);
  const std::size_t void_id = class_logits.dim(1) - 1;
  check_matching(gt, matching, n);
  const std::size_t k = gt.size();
  // Unmatched queries are weighted relative to a matched pair, so each one
  // counts void_weight times as much as a matched classification.
  const double pair_weight = 1.0 / static_cast<double>(std::max<std::size_t>(k, 1));

  std::vector<int> targets(n);
  std::vector<double> weights(n);
  for (std::size_t q = 0; q < n; ++q) {
    const int s = matching.query_to_gt[q];
    if (s >= 0) {
      targets[q] = gt.segments[static_cast<std::size_t>(s)].class_id;
      weights[q] = pair_weight;
    } else {
      targets[q] = static_cast<int>(void_id);
      weights[q] = void_weight * pair_weight;
    }
  }
  Tensor loss = cross_entropy_from_logits(class_logits, targets, weights);
  if (k == 0) return loss;

  const Tensor z = transpose(softmax(mask_logits, 1));  // N x HW
  const Tensor zm = select_rows(z, matching.gt_to_query);
  const Tensor m = gt.masks();
  const Tensor inter = reduce_sum(mul(zm, m), 1);
  const Tensor denom = add_scalar(add(reduce_sum(zm, 1), reduce_sum(m, 1)), kDiceEps);
  const Tensor dice = div(scale(inter, 2.0), denom);
  return add(loss, add_scalar(scale(mean(dice), -1.0), 1.0));
}

Tensor mask_id_loss(const Tensor& mask_logits, const SegmentTargets& gt, const Matching& matching) {
  check_matching(gt, matching, mask_logits.dim(1));
  std::vector<int> targets(gt.pixel_segment.size(), kIgnoreIndex);
  bool any = false;
  for (std::size_t p = 0; p < targets.size(); ++p) {
    const int s = gt.pixel_segment[p];
    if (s < 0) continue;
    targets[p] = static_cast<int>(matching.gt_to_query[static_cast<std::size_t>(s)]);
    any = true;
  }
  if (!any) return Tensor::scalar(0.0);
  return cross_entropy_from_logits(mask_logits, targets);
}

Tensor semantic_loss(const Tensor& semantic_logits, const SegmentTargets& gt) {
  std::vector<int> targets(gt.pixel_segment.size(), kIgnoreIndex);
  bool any = false;
  for (std::size_t p = 0; p < targets.size(); ++p) {
    const int s = gt.pixel_segment[p];
    if (s < 0) continue;
    targets[p] = gt.segments[static_cast<std::size_t>(s)].class_id;
    any = true;
  }
  if (!any) return Tensor::scalar(0.0);
  return cross_entropy_from_logits(semantic_logits, targets);
}

LossTerms total_loss(const PredictionLogits& final, const std::vector<AuxiliaryPrediction>& aux,
                     const Tensor& semantic_logits, const SegmentTargets& gt,
                     const Matching& matching, const LossWeights& weights) {
  if (final.mask_logits.dim(0) != gt.pixel_segment.size()) {
    throw ShapeError("total_loss: " + std::to_string(final.mask_logits.dim(0)) +
                     " predicted pixels vs " + std::to_string(gt.pixel_segment.size()) +
                     " ground-truth pixels");
  }
  check_matching(gt, matching, final.class_logits.dim(0));

  const Tensor pq = pq_style_loss(final.mask_logits, final.class_logits, gt, matching,
                                  weights.void_weight);
  const Tensor maskid = mask_id_loss(final.mask_logits, gt, matching);
  const Tensor sem = semantic_loss(semantic_logits, gt);

  LossTerms out;
  out.l_pq = pq.item();
  out.l_maskid = maskid.item();
  out.l_sem = sem.item();
  Tensor total = add(add(scale(pq, weights.pq), scale(sem, weights.sem)),
                     scale(maskid, weights.maskid));

  if (weights.use_aux && !aux.empty()) {
    Tensor aux_total = Tensor::scalar(0.0);
    for (const auto& a : aux) {
      if (a.mask_logits.dim(0) != gt.pixel_segment.size()) {
        throw ShapeError("total_loss: auxiliary stage " + std::to_string(a.stage) +
                         " is not at the supervision resolution");
      }
      const Tensor term =
          add(scale(pq_style_loss(a.mask_logits, a.class_logits, gt, matching, weights.void_weight),
                    weights.pq),
              scale(mask_id_loss(a.mask_logits, gt, matching), weights.maskid));
      aux_total = add(aux_total, term);
    }
    aux_total = scale(aux_total, weights.aux);
    out.l_aux = aux_total.item();
    total = add(total, aux_total);
  }
  out.total = total;
  return out;
}

}  // namespace kmax
