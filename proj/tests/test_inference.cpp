#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "kmax/inference.hpp"
#include "kmax/ops.hpp"
#include "test_helpers.hpp"

namespace kmax {
namespace {

using testing::random_tensor;

ClassTable things_and_stuff() { return {{"a", true}, {"b", true}, {"sky", false}}; }

PanopticMap map_of(std::size_t h, std::size_t w, std::vector<int> cls, std::vector<int> inst) {
  PanopticMap m = PanopticMap::filled(h, w);
  m.class_ids = std::move(cls);
  m.instance_ids = std::move(inst);
  return m;
}

// Class logits are one-hot-ish probabilities over {a, b, sky, void}.
Tensor class_probs(std::initializer_list<std::initializer_list<double>> rows) { return Tensor::matrix(rows); }

TEST(Merge, TwoDisjointThingsBecomeTwoInstances) {
  const Tensor masks = Tensor::matrix({{0.99, 0.01}, {0.99, 0.01}, {0.01, 0.99}, {0.01, 0.99}});
  const PredictionSet pred{masks, class_probs({{0.9, 0.05, 0.0, 0.05}, {0.05, 0.9, 0.0, 0.05}}), 2, 2};
  const PanopticResult r = merge_masks(pred, things_and_stuff());
  ASSERT_EQ(r.segments.size(), 2u);
  EXPECT_EQ(r.map.class_ids, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_NE(r.map.instance_ids[0], 0);
  EXPECT_NE(r.map.instance_ids[2], 0);
  EXPECT_NE(r.map.instance_ids[0], r.map.instance_ids[2]);
  EXPECT_NEAR(r.segments[0].confidence, 0.9, 1e-15);
}

TEST(Merge, SameClassThingsStaySeparate) {
  const Tensor masks = Tensor::matrix({{0.99, 0.01}, {0.01, 0.99}});
  const PredictionSet pred{masks, class_probs({{0.9, 0, 0, 0.1}, {0.8, 0, 0, 0.2}}), 1, 2};
  const PanopticResult r = merge_masks(pred, things_and_stuff());
  EXPECT_EQ(r.segments.size(), 2u);
  EXPECT_NE(r.map.instance_ids[0], r.map.instance_ids[1]);
}

TEST(Merge, AllBelowConfidenceGivesVoid) {
  const Tensor masks = Tensor::matrix({{0.99, 0.01}, {0.01, 0.99}});
  const PredictionSet pred{masks, class_probs({{0.2, 0.1, 0.0, 0.7}, {0.1, 0.25, 0.1, 0.55}}), 1, 2};
  const PanopticResult r = merge_masks(pred, things_and_stuff());
  EXPECT_TRUE(r.segments.empty());
  for (int c : r.map.class_ids) EXPECT_EQ(c, kVoidClass);
}

TEST(Merge, DuplicateStuffQueriesMerge) {
  const Tensor masks = Tensor::matrix({{0.9, 0.1}, {0.9, 0.1}, {0.1, 0.9}, {0.1, 0.9}});
  const PredictionSet pred{masks, class_probs({{0, 0, 0.9, 0.1}, {0, 0, 0.95, 0.05}}), 2, 2};
  const PanopticResult r = merge_masks(pred, things_and_stuff());
  ASSERT_EQ(r.segments.size(), 1u);
  EXPECT_EQ(r.segments[0].class_id, 2);
  EXPECT_EQ(r.segments[0].area, 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.map.instance_ids[i], 0);
}

TEST(Merge, WeakOverlapIsDroppedAndReassigned) {
  // Query 1's binary mask covers pixels 0..3 but query 0 wins 0..2 on
  // confidence, so query 1 keeps 1/4 < 0.8 and its pixel 3 falls back to 0.
  const Tensor masks = Tensor::matrix({{0.9, 0.55}, {0.9, 0.55}, {0.9, 0.55}, {0.2, 0.8}});
  const PredictionSet pred{masks, class_probs({{0.95, 0, 0, 0.05}, {0, 0.6, 0, 0.4}}), 1, 4};
  const PanopticResult r = merge_masks(pred, things_and_stuff());
  ASSERT_EQ(r.segments.size(), 1u);
  EXPECT_EQ(r.map.class_ids, (std::vector<int>{0, 0, 0, 0}));
  MergeOptions lax;
  lax.overlap_thresh = 0.0;
  EXPECT_EQ(merge_masks(pred, things_and_stuff(), lax).segments.size(), 2u);
}

TEST(Merge, EmptyPredictionGivesEmptyResult) {
  const PredictionSet pred{Tensor(), Tensor(), 2, 2};
  const PanopticResult r = merge_masks(pred, things_and_stuff());
  EXPECT_TRUE(r.segments.empty());
  EXPECT_EQ(r.map.pixels(), 4u);
}

TEST(Merge, OutputIsConsistentPartition) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 6;
    Tensor logits = random_tensor(rng, {30, n}, -4, 4);
    const PredictionSet pred{softmax(logits, 1), softmax(random_tensor(rng, {n, 4}, -3, 3), 1), 5, 6};
    MergeOptions o;
    o.conf_thresh = 0.2;
    const PanopticResult r = merge_masks(pred, things_and_stuff(), o);
    std::size_t labeled = 0;
    for (std::size_t i = 0; i < 30; ++i) labeled += !r.map.is_void(i);
    std::size_t area = 0;
    std::set<std::pair<int, int>> ids;
    for (const auto& s : r.segments) {
      area += s.area;
      EXPECT_TRUE(ids.insert({s.class_id, s.instance_id}).second);
      EXPECT_EQ(s.instance_id == 0, s.class_id == 2);
    }
    EXPECT_EQ(area, labeled);
    EXPECT_EQ(r.map.segments().size(), r.segments.size());
  }
}

TEST(PanopticQuality, PerfectPrediction) {
  const PanopticMap gt = map_of(2, 3, {0, 0, 2, 1, 1, 2}, {1, 1, 0, 4, 4, 0});
  const QualityReport q = panoptic_quality({gt, gt.segments()}, gt, things_and_stuff());
  EXPECT_DOUBLE_EQ(q.pq, 1.0);
  EXPECT_DOUBLE_EQ(q.pq_th, 1.0);
  EXPECT_DOUBLE_EQ(q.pq_st, 1.0);
}

TEST(PanopticQuality, TruePositiveAtPointEightPlusFalseNegative) {
  std::vector<int> cls(20, 0), inst(20, 1);
  for (std::size_t i = 10; i < 20; ++i) inst[i] = 2;
  const PanopticMap gt = map_of(1, 20, cls, inst);
  std::vector<int> pcls(20, kVoidClass), pinst(20, 0);
  for (std::size_t i = 0; i < 8; ++i) {
    pcls[i] = 0;
    pinst[i] = 1;
  }
  const PanopticMap pred = map_of(1, 20, pcls, pinst);
  const QualityReport q = panoptic_quality({pred, pred.segments()}, gt, {{"a", true}});
  EXPECT_NEAR(q.pq, 0.8 / 1.5, 1e-12);
  EXPECT_NEAR(q.sq, 0.8, 1e-12);
  EXPECT_NEAR(q.rq, 1.0 / 1.5, 1e-12);
}

TEST(PanopticQuality, EmptyPredictionScoresZero) {
  const PanopticMap gt = map_of(1, 4, {0, 0, 2, 2}, {1, 1, 0, 0});
  const PanopticMap pred = PanopticMap::filled(1, 4);
  EXPECT_EQ(panoptic_quality({pred, {}}, gt, things_and_stuff()).pq, 0.0);
}

TEST(PanopticQuality, VoidHandling) {
  // gt: segment of 4 pixels, 2 void pixels. The prediction spills onto the
  // void pixels: they leave the union, so IoU stays 1.
  const PanopticMap gt = map_of(1, 6, {0, 0, 0, 0, kVoidClass, kVoidClass}, {1, 1, 1, 1, 0, 0});
  const PanopticMap pred = map_of(1, 6, {0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(panoptic_quality({pred, pred.segments()}, gt, {{"a", true}}).pq, 1.0);
  // A prediction lying mostly in void is ignored rather than counted as FP.
  const PanopticMap pred2 = map_of(1, 6, {0, 0, 0, 0, 1, 1}, {1, 1, 1, 1, 2, 2});
  const QualityReport q = panoptic_quality({pred2, pred2.segments()}, gt, {{"a", true}, {"b", true}});
  EXPECT_DOUBLE_EQ(q.pq, 1.0);
  EXPECT_EQ(q.per_class[1].fp, 0u);
}

TEST(PanopticQuality, ShapeMismatch) {
  EXPECT_THROW(panoptic_quality({PanopticMap::filled(2, 2), {}}, PanopticMap::filled(2, 3), things_and_stuff()),
               ShapeError);
}

// Random block maps: 2-class thing/stuff layouts built from rectangles.
PanopticMap random_blocks(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::vector<int> cls(h * w, 2), inst(h * w, 0);
  std::uniform_int_distribution<std::size_t> pos(0, h - 1), count(0, 4);
  std::uniform_int_distribution<int> kind(0, 3);
  const std::size_t k = count(rng);
  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t y0 = pos(rng), x0 = pos(rng) % w, y1 = std::min(h, y0 + 1 + pos(rng) / 2),
                      x1 = std::min(w, x0 + 1 + pos(rng) / 2);
    const int c = kind(rng);
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        cls[y * w + x] = c == 3 ? kVoidClass : c;
        inst[y * w + x] = c < 2 ? static_cast<int>(s + 1) : 0;
      }
  }
  return map_of(h, w, cls, inst);
}

// Straightforward PQ over void-free maps: all (pred, gt) pairs per class.
double reference_pq(const PanopticMap& pred, const PanopticMap& gt, const ClassTable& classes) {
  using Key = std::pair<int, int>;
  std::map<Key, std::size_t> pa, ga;
  std::map<std::pair<Key, Key>, std::size_t> inter;
  for (std::size_t i = 0; i < gt.pixels(); ++i) {
    const Key g{gt.class_ids[i], gt.instance_ids[i]}, p{pred.class_ids[i], pred.instance_ids[i]};
    ++ga[g];
    ++pa[p];
    ++inter[{p, g}];
  }
  double total = 0;
  int present = 0;
  for (int c = 0; c < static_cast<int>(classes.size()); ++c) {
    double iou = 0;
    std::size_t tp = 0, np = 0, ng = 0;
    for (auto& [k, a] : pa) np += k.first == c;
    for (auto& [k, a] : ga) ng += k.first == c;
    for (auto& [pg, n] : inter) {
      if (pg.first.first != c || pg.second.first != c) continue;
      const double u = static_cast<double>(pa[pg.first] + ga[pg.second] - n);
      if (static_cast<double>(n) / u > 0.5) {
        ++tp;
        iou += static_cast<double>(n) / u;
      }
    }
    if (np + ng == 0) continue;
    ++present;
    total += iou / (static_cast<double>(tp) + 0.5 * static_cast<double>(np - tp) + 0.5 * static_cast<double>(ng - tp));
  }
  return present ? total / present : 0.0;
}

PanopticMap without_void(PanopticMap m) {
  for (auto& c : m.class_ids)
    if (c == kVoidClass) c = 2;
  for (std::size_t i = 0; i < m.pixels(); ++i)
    if (m.class_ids[i] == 2) m.instance_ids[i] = 0;
  return m;
}

TEST(PanopticQuality, MatchesReferenceOnVoidFreeMaps) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const PanopticMap gt = without_void(random_blocks(rng, 8, 8));
    const PanopticMap pred = without_void(random_blocks(rng, 8, 8));
    EXPECT_NEAR(panoptic_quality({pred, pred.segments()}, gt, things_and_stuff()).pq,
                reference_pq(pred, gt, things_and_stuff()), 1e-12);
  }
}

PanopticMap relabel(const PanopticMap& m, std::mt19937_64& rng) {
  std::map<int, int> ids;
  std::uniform_int_distribution<int> fresh(1, 1000);
  PanopticMap out = m;
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    const int id = m.instance_ids[i];
    if (id == 0) continue;
    if (!ids.count(id)) {
      int v;
      do v = fresh(rng);
      while (std::any_of(ids.begin(), ids.end(), [&](auto& kv) { return kv.second == v; }));
      ids[id] = v;
    }
    out.instance_ids[i] = ids[id];
  }
  return out;
}

TEST(PanopticQuality, RelabelInvarianceBoundsAndInjectivity) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const PanopticMap gt = random_blocks(rng, 10, 10);
    const PanopticMap pred = random_blocks(rng, 10, 10);
    const QualityReport a = panoptic_quality({pred, pred.segments()}, gt, things_and_stuff());
    const PanopticMap gt2 = relabel(gt, rng), pred2 = relabel(pred, rng);
    const QualityReport b = panoptic_quality({pred2, pred2.segments()}, gt2, things_and_stuff());
    EXPECT_DOUBLE_EQ(a.pq, b.pq);
    EXPECT_GE(a.pq, 0.0);
    EXPECT_LE(a.pq, 1.0);
    // At most one match per gt segment and per prediction.
    for (const ClassQuality& c : a.per_class) {
      std::size_t g = 0, p = 0;
      for (const auto& s : gt.segments()) g += s.class_id == c.class_id;
      for (const auto& s : pred.segments()) p += s.class_id == c.class_id;
      EXPECT_EQ(c.tp + c.fn, g);
      EXPECT_LE(c.tp + c.fp, p);
    }
  }
}

TEST(PanopticQuality, AccumulatorSumsOverImages) {
  std::mt19937_64 rng(4);
  PanopticQualityAccumulator acc(things_and_stuff());
  std::size_t tp = 0;
  for (int t = 0; t < 5; ++t) {
    const PanopticMap gt = random_blocks(rng, 8, 8);
    const PanopticMap pred = random_blocks(rng, 8, 8);
    acc.add(pred, gt);
    for (const auto& c : panoptic_quality({pred, pred.segments()}, gt, things_and_stuff()).per_class) tp += c.tp;
  }
  std::size_t total = 0;
  for (const auto& c : acc.report().per_class) total += c.tp;
  EXPECT_EQ(total, tp);
}

TEST(MeanIoU, HandCases) {
  const PanopticMap gt = map_of(1, 4, {0, 0, 2, 2}, {1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(class_iou(gt, gt, 3).miou, 1.0);
  const PanopticMap swapped = map_of(1, 4, {2, 2, 0, 0}, {0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(class_iou(swapped, gt, 3).miou, 0.0);
  // |intersection| = 1, |union| = 3 for class 0.
  const PanopticMap shifted = map_of(1, 4, {2, 0, 0, 2}, {0, 1, 1, 0});
  const IoUReport r = class_iou(shifted, gt, 3);
  EXPECT_DOUBLE_EQ(r.per_class[0], 1.0 / 3.0);
  EXPECT_TRUE(std::isnan(r.per_class[1]));
  EXPECT_DOUBLE_EQ(r.miou, (1.0 / 3.0 + 1.0 / 3.0) / 2.0);
}

TEST(MeanIoU, IgnoresVoidGtPixels) {
  const PanopticMap gt = map_of(1, 3, {0, 0, kVoidClass}, {1, 1, 0});
  const PanopticMap pred = map_of(1, 3, {0, 0, 0}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(class_iou(pred, gt, 3).miou, 1.0);
  EXPECT_THROW(class_iou(pred, PanopticMap::filled(3, 1), 3), ShapeError);
}

TEST(ResizeBilinear, HalfPixelCenters) {
  const Tensor out = resize_bilinear(Tensor::matrix({{0}, {1}}), 1, 2, 1, 4);
  EXPECT_NEAR(out.at(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(out.at(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(out.at(2, 0), 0.75, 1e-15);
  EXPECT_NEAR(out.at(3, 0), 1.0, 1e-15);
  std::mt19937_64 rng(5);
  const Tensor m = random_tensor(rng, {12, 2});
  EXPECT_EQ(testing::max_abs_diff(resize_bilinear(m, 3, 4, 3, 4), m), 0.0);
  const Tensor flat = resize_bilinear(Tensor({4, 3}, 2.5), 2, 2, 8, 8);
  for (double v : flat.data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  Config c;
  c.model.dim = 16;
  c.model.ffn_hidden = 32;
  c.model.num_queries = 6;
  const KMaxModel model(c.model, 3);
  const SceneSpec spec = SceneSpec::from_config(c.data, 11);
  const EvalReport a = evaluate(model, spec, 4, {}, 1);
  const EvalReport b = evaluate(model, spec, 4, {}, 3);
  EXPECT_EQ(a.images, 4u);
  EXPECT_EQ(a.quality.pq, b.quality.pq);
  EXPECT_EQ(a.miou, b.miou);
  EXPECT_EQ(format_report(a), format_report(b));
}

TEST(Evaluate, ReportFieldOrder) {
  EvalReport r;
  r.images = 3;
  r.quality.per_class.push_back({0, "circle", true, 1, 0, 0, 0.9});
  std::istringstream in(format_report(r));
  std::vector<std::string> keys;
  std::string line;
  while (std::getline(in, line)) keys.push_back(line.substr(0, line.find(' ')));
  const std::vector<std::string> expected{"images", "PQ", "PQ_Th", "PQ_St", "SQ", "RQ", "mIoU", "class", "class"};
  EXPECT_EQ(keys, expected);
}

}  // namespace
}  // namespace kmax
