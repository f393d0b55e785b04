#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "kmax/loss.hpp"
#include "kmax/matching.hpp"
#include "kmax/ops.hpp"
#include "kmax/optimizer.hpp"
#include "kmax/train.hpp"
#include "test_helpers.hpp"

namespace kmax {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

// Exhaustive minimum over all injections rows -> columns.
double brute_force_min(const Tensor& cost) {
  const std::size_t k = cost.dim(0), n = cost.dim(1);
  std::vector<std::size_t> cols(n);
  std::iota(cols.begin(), cols.end(), 0);
  double best = 1e300;
  do {
    double total = 0;
    for (std::size_t i = 0; i < k; ++i) total += cost.at(i, cols[i]);
    best = std::min(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

double assignment_cost(const Tensor& cost, const Matching& m) {
  double total = 0;
  for (std::size_t i = 0; i < m.gt_to_query.size(); ++i) total += cost.at(i, m.gt_to_query[i]);
  return total;
}

void expect_consistent(const Matching& m, std::size_t k, std::size_t n) {
  ASSERT_EQ(m.gt_to_query.size(), k);
  ASSERT_EQ(m.query_to_gt.size(), n);
  std::vector<int> seen(n, 0);
  for (std::size_t i = 0; i < k; ++i) {
    ASSERT_LT(m.gt_to_query[i], n);
    EXPECT_EQ(++seen[m.gt_to_query[i]], 1);
    EXPECT_EQ(m.query_to_gt[m.gt_to_query[i]], static_cast<int>(i));
  }
  std::size_t flagged = 0;
  for (int v : m.query_to_gt) flagged += v < 0;
  EXPECT_EQ(flagged, n - k);
}

TEST(Hungarian, TwoByTwo) {
  const Matching m = hungarian_match(Tensor::matrix({{1, 2}, {2, 1}}));
  EXPECT_EQ(m.gt_to_query, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(m.cost, 2.0);
}

TEST(Hungarian, IdentityFavoring) {
  Tensor cost({4, 4}, 1.0);
  for (std::size_t i = 0; i < 4; ++i) cost.mutable_data()[i * 4 + i] = 0.0;
  const Matching m = hungarian_match(cost);
  EXPECT_EQ(m.gt_to_query, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(m.cost, 0.0);
}

TEST(Hungarian, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> size(1, 7);
  for (int t = 0; t < 150; ++t) {
    const std::size_t n = size(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, n)(rng);
    if (k == 0) continue;
    const Tensor cost = random_tensor(rng, {k, n}, -2, 2);
    const Matching m = hungarian_match(cost);
    expect_consistent(m, k, n);
    EXPECT_NEAR(assignment_cost(cost, m), brute_force_min(cost), 1e-12);
    EXPECT_NEAR(m.cost, assignment_cost(cost, m), 1e-12);
  }
}

TEST(Hungarian, InvariantToConstantShift) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 30; ++t) {
    const Tensor cost = random_tensor(rng, {4, 6}, 0, 1);
    const Matching a = hungarian_match(cost);
    const Matching b = hungarian_match(add_scalar(cost, 17.5));
    EXPECT_EQ(a.gt_to_query, b.gt_to_query);
  }
}

TEST(Hungarian, Errors) {
  EXPECT_THROW(hungarian_match(Tensor({3, 2})), ArgumentError);
  EXPECT_THROW(hungarian_match(Tensor::matrix({{0, std::nan("")}})), ArgumentError);
  EXPECT_THROW(hungarian_match(Tensor::matrix({{0, INFINITY}})), ArgumentError);
}

// 2x2 map: left column class 0 (instance 1), right column class 1 (stuff).
PanopticMap two_segment_map() {
  PanopticMap m = PanopticMap::filled(2, 2);
  m.class_ids = {0, 1, 0, 1};
  m.instance_ids = {1, 0, 1, 0};
  return m;
}

TEST(MatchingCost, PerfectPredictionCostsMinusOne) {
  const PanopticMap gt = two_segment_map();
  PredictionSet pred{Tensor::matrix({{1, 0}, {0, 1}, {1, 0}, {0, 1}}),
                     Tensor::matrix({{1, 0, 0}, {0, 1, 0}}), 2, 2};
  const Tensor cost = matching_cost(pred, gt);
  // Dice = 4 / (4 + eps).
  EXPECT_NEAR(cost.at(0, 0), -4.0 / (4.0 + kDiceEps), 1e-15);
  EXPECT_NEAR(cost.at(1, 1), -4.0 / (4.0 + kDiceEps), 1e-15);
  // Disjoint masks and wrong classes cost nothing.
  EXPECT_EQ(cost.at(0, 1), 0.0);
  EXPECT_EQ(cost.at(1, 0), 0.0);
}

TEST(MatchingCost, BilinearInClassProbability) {
  std::mt19937_64 rng(3);
  const PanopticMap gt = two_segment_map();
  const Tensor masks = softmax(random_tensor(rng, {4, 3}), 1);
  const PredictionSet a{masks, Tensor::matrix({{0.8, 0.1, 0.1}, {0.2, 0.6, 0.2}, {0.5, 0.5, 0.0}}), 2, 2};
  const PredictionSet b{masks, Tensor::matrix({{0.4, 0.1, 0.5}, {0.2, 0.6, 0.2}, {0.5, 0.5, 0.0}}), 2, 2};
  const Tensor ca = matching_cost(a, gt), cb = matching_cost(b, gt);
  EXPECT_NEAR(cb.at(0, 0), 0.5 * ca.at(0, 0), 1e-15);
  // Direct formula for one entry.
  double inter = 0, zs = 0;
  for (std::size_t p = 0; p < 4; ++p) {
    const double mi = gt.class_ids[p] == 1 ? 1.0 : 0.0;
    inter += masks.at(p, 2) * mi;
    zs += masks.at(p, 2);
  }
  EXPECT_NEAR(ca.at(1, 2), -0.5 * 2 * inter / (zs + 2 + kDiceEps), 1e-15);
}

TEST(MatchingCost, Errors) {
  const PredictionSet pred{Tensor({9, 2}, 0.5), Tensor({2, 3}, 1.0 / 3), 3, 3};
  EXPECT_THROW(matching_cost(pred, two_segment_map()), ShapeError);
  EXPECT_THROW(matching_cost({Tensor({4, 2}, 0.5), Tensor({2, 3}, 1.0 / 3), 2, 2}, PanopticMap::filled(2, 2)),
               ArgumentError);
}

TEST(MatchPrediction, EmptyMapLeavesEverythingUnmatched) {
  const PredictionSet pred{Tensor({4, 3}, 1.0 / 3), Tensor({3, 3}, 1.0 / 3), 2, 2};
  const Matching m = match_prediction(pred, SegmentTargets::from_map(PanopticMap::filled(2, 2)));
  EXPECT_EQ(m.num_matched(), 0u);
  EXPECT_EQ(m.query_to_gt, (std::vector<int>{-1, -1, -1}));
}

TEST(Loss, UniformMasksGiveLogNMaskId) {
  const SegmentTargets gt = SegmentTargets::from_map(two_segment_map());
  for (std::size_t n : {2u, 5u, 16u}) {
    const Matching m = hungarian_match(Tensor({2, n}));
    EXPECT_NEAR(mask_id_loss(Tensor({4, n}), gt, m).item(), std::log(static_cast<double>(n)), 1e-12);
  }
}

TEST(Loss, MaskIdSkipsVoidPixels) {
  PanopticMap map = two_segment_map();
  map.class_ids[3] = kVoidClass;
  map.instance_ids[3] = 0;
  const SegmentTargets gt = SegmentTargets::from_map(map);
  const Matching m = hungarian_match(Tensor::matrix({{0, 1}, {1, 0}}));
  // Pixel 3 gets a huge wrong logit; it must not contribute.
  const Tensor logits = Tensor::matrix({{2, 0}, {0, 2}, {2, 0}, {-50, 50}});
  const double expected = std::log(1 + std::exp(-2.0));
  EXPECT_NEAR(mask_id_loss(logits, gt, m).item(), expected, 1e-12);
}

TEST(Loss, PqStyleLossHandComputed) {
  const SegmentTargets gt = SegmentTargets::from_map(two_segment_map());
  const Tensor mask_logits = Tensor::matrix({{1, 0, 0}, {0, 2, 0}, {0.5, 0, 1}, {0, 1, 0}});
  const Tensor class_logits = Tensor::matrix({{1, 0, 0}, {0, 1, 0.5}, {0.2, 0.1, 0.3}});
  const Matching m = hungarian_match(Tensor::matrix({{0, 1, 1}, {1, 0, 1}}));
  ASSERT_EQ(m.gt_to_query, (std::vector<std::size_t>{0, 1}));

  auto ce = [&](std::size_t q, std::size_t target) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(class_logits.at(q, c));
    return std::log(z) - class_logits.at(q, target);
  };
  std::vector<std::vector<double>> zq(3, std::vector<double>(4));
  for (std::size_t p = 0; p < 4; ++p) {
    double z = 0;
    for (std::size_t q = 0; q < 3; ++q) z += std::exp(mask_logits.at(p, q));
    for (std::size_t q = 0; q < 3; ++q) zq[q][p] = std::exp(mask_logits.at(p, q)) / z;
  }
  auto dice = [&](std::size_t q, const std::vector<double>& mask) {
    double inter = 0, a = 0, b = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      inter += zq[q][p] * mask[p];
      a += zq[q][p];
      b += mask[p];
    }
    return 2 * inter / (a + b + kDiceEps);
  };
  const double expected = 0.5 * (ce(0, 0) + ce(1, 1)) + 0.1 * 0.5 * ce(2, 2) + 1.0 -
                          0.5 * (dice(0, {1, 0, 1, 0}) + dice(1, {0, 1, 0, 1}));
  EXPECT_NEAR(pq_style_loss(mask_logits, class_logits, gt, m, 0.1).item(), expected, 1e-12);
}

TEST(Loss, PerfectPredictionReachesVoidFloor) {
  const SegmentTargets gt = SegmentTargets::from_map(two_segment_map());
  const Tensor mask_logits = Tensor::matrix({{60, 0, 0}, {0, 60, 0}, {60, 0, 0}, {0, 60, 0}});
  const Tensor class_logits = Tensor::matrix({{60, 0, 0}, {0, 60, 0}, {0, 0, 0}});
  const Matching m = hungarian_match(Tensor::matrix({{0, 1, 1}, {1, 0, 1}}));
  EXPECT_LT(mask_id_loss(mask_logits, gt, m).item(), 1e-20);
  // Only the unmatched query's void CE (uniform: ln 3) remains, weighted 0.1 / K.
  EXPECT_NEAR(pq_style_loss(mask_logits, class_logits, gt, m, 0.1).item(), 0.05 * std::log(3.0), 1e-6);
}

struct LossFixture {
  SegmentTargets gt = SegmentTargets::from_map(two_segment_map());
  PredictionLogits final;
  std::vector<AuxiliaryPrediction> aux;
  Tensor semantic;
  Matching matching;

  explicit LossFixture(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    final = {random_tensor(rng, {4, 3}), random_tensor(rng, {3, 3}), 2, 2};
    for (int i = 0; i < 2; ++i) {
      AuxiliaryPrediction a;
      a.mask_logits = random_tensor(rng, {4, 3});
      a.class_logits = random_tensor(rng, {3, 3});
      aux.push_back(a);
    }
    semantic = random_tensor(rng, {4, 3});
    matching = hungarian_match(Tensor::matrix({{0, 1, 1}, {1, 1, 0}}));
  }
};

TEST(TotalLoss, WeightedSumOfTerms) {
  LossFixture f(4);
  const LossWeights w;
  const LossTerms t = total_loss(f.final, f.aux, f.semantic, f.gt, f.matching, w);
  const double pq = pq_style_loss(f.final.mask_logits, f.final.class_logits, f.gt, f.matching, 0.1).item();
  const double mid = mask_id_loss(f.final.mask_logits, f.gt, f.matching).item();
  const double sem = semantic_loss(f.semantic, f.gt).item();
  double aux = 0;
  for (const auto& a : f.aux)
    aux += 3.0 * pq_style_loss(a.mask_logits, a.class_logits, f.gt, f.matching, 0.1).item() +
           0.3 * mask_id_loss(a.mask_logits, f.gt, f.matching).item();
  EXPECT_NEAR(t.total.item(), 3.0 * pq + sem + 0.3 * mid + aux, 1e-12);
  EXPECT_NEAR(t.l_pq, pq, 1e-15);
  EXPECT_NEAR(t.l_sem, sem, 1e-15);
  EXPECT_NEAR(t.l_maskid, mid, 1e-15);
  EXPECT_NEAR(t.l_aux, aux, 1e-12);
}

TEST(TotalLoss, DisablingAuxEqualsFinalOnly) {
  LossFixture f(5);
  LossWeights w;
  w.use_aux = false;
  const double off = total_loss(f.final, f.aux, f.semantic, f.gt, f.matching, w).total.item();
  const double none = total_loss(f.final, {}, f.semantic, f.gt, f.matching, LossWeights{}).total.item();
  EXPECT_EQ(off, none);
}

TEST(TotalLoss, MissingMatchingIsContractError) {
  LossFixture f(6);
  EXPECT_THROW(total_loss(f.final, f.aux, f.semantic, f.gt, Matching{}, LossWeights{}), ContractError);
  const Matching wrong_queries = hungarian_match(Tensor({2, 5}));
  EXPECT_THROW(total_loss(f.final, f.aux, f.semantic, f.gt, wrong_queries, LossWeights{}), ContractError);
}

TEST(Schedule, LinearWarmupThenConstant) {
  EXPECT_DOUBLE_EQ(scheduled_lr(0, 100, 0.05, 1e-3), 1e-3 / 5);
  EXPECT_DOUBLE_EQ(scheduled_lr(3, 100, 0.05, 1e-3), 4e-3 / 5);
  EXPECT_DOUBLE_EQ(scheduled_lr(4, 100, 0.05, 1e-3), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(99, 100, 0.05, 1e-3), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(0, 100, 0.0, 1e-3), 1e-3);
}

TEST(AdamW, FirstStepMovesBySignedLr) {
  ParameterSet params;
  Tensor w = params.add("w", Tensor::matrix({{1.0, -2.0}, {0.5, 3.0}}));
  Tensor b = params.add("b", Tensor::vector({1.0, 1.0}));
  add(sum(mul(w, Tensor::matrix({{2, -1}, {0.5, 4}}))), sum(mul(b, Tensor::vector({-3, 0.25})))).backward();
  AdamW opt(params, {});
  opt.step(0.01);
  // m_hat / sqrt(v_hat) = sign(g) on step one; decay 0.05 on matrices only.
  const double expected_w[] = {1.0 - 0.01 * 0.05 * 1.0 - 0.01, -2.0 + 0.01 * 0.05 * 2.0 + 0.01,
                               0.5 - 0.01 * 0.05 * 0.5 - 0.01, 3.0 - 0.01 * 0.05 * 3.0 - 0.01};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.data()[i], expected_w[i], 1e-9);
  EXPECT_NEAR(b.data()[0], 1.0 + 0.01, 1e-9);
  EXPECT_NEAR(b.data()[1], 1.0 - 0.01, 1e-9);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroLearningRateLeavesParameters) {
  ParameterSet params;
  Tensor w = params.add("w", Tensor::matrix({{1.0, -2.0}}));
  sum(mul(w, w)).backward();
  AdamW opt(params, {});
  opt.step(0.0);
  EXPECT_EQ(w.data()[0], 1.0);
  EXPECT_EQ(w.data()[1], -2.0);
}

TEST(GradClip, ScaleFactor) {
  ParameterSet params;
  Tensor w = params.add("w", Tensor::vector({0.0, 0.0}));
  sum(mul(w, Tensor::vector({3, 4}))).backward();
  EXPECT_DOUBLE_EQ(global_grad_norm(params), 5.0);
  EXPECT_DOUBLE_EQ(clip_scale(5.0, 1.0), 0.2);
  EXPECT_DOUBLE_EQ(clip_scale(5.0, 10.0), 1.0);
  EXPECT_DOUBLE_EQ(clip_scale(5.0, 0.0), 1.0);
}

Config tiny_config() {
  Config c;
  c.model.dim = 16;
  c.model.num_queries = 6;
  c.model.ffn_hidden = 32;
  c.model.encoder_channels = {4, 8, 8, 16, 16};
  c.data.image_size = 32;
  c.data.min_shape_size = 4;
  c.data.max_shape_size = 8;
  c.data.max_shapes = 3;
  c.data.val_size = 2;
  c.train.steps = 4;
  c.train.log_every = 1;
  return c;
}

TEST(TrainLoop, BitwiseDeterministic) {
  Config c = tiny_config();
  c.model.drop_query = true;
  c.model.num_queries = 8;
  c.train.batch_size = 2;
  const TrainResult a = train_loop(c), b = train_loop(c);
  ASSERT_EQ(a.trace.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
    EXPECT_EQ(a.trace[i].l_pq, b.trace[i].l_pq);
  }
  EXPECT_EQ(a.final_eval.quality.pq, b.final_eval.quality.pq);
  for (std::size_t i = 0; i < a.model.parameters().size(); ++i)
    EXPECT_EQ(max_abs_diff(a.model.parameters().entries()[i].tensor, b.model.parameters().entries()[i].tensor), 0.0);
}

TEST(TrainLoop, PrefetchMatchesSerial) {
  Config c = tiny_config();
  const TrainResult serial = train_loop(c);
  c.data.threads = 2;
  const TrainResult threaded = train_loop(c);
  for (std::size_t i = 0; i < serial.trace.size(); ++i) EXPECT_EQ(serial.trace[i].loss, threaded.trace[i].loss);
}

TEST(TrainLoop, ZeroLearningRateKeepsInitialParameters) {
  Config c = tiny_config();
  c.train.lr = 0.0;
  const TrainResult r = train_loop(c);
  const KMaxModel init(c.model, c.train.seed);
  for (std::size_t i = 0; i < init.parameters().size(); ++i)
    EXPECT_EQ(max_abs_diff(init.parameters().entries()[i].tensor, r.model.parameters().entries()[i].tensor), 0.0);
}

TEST(TrainLoop, DropQueryLossIsFinite) {
  Config c = tiny_config();
  c.model.drop_query = true;
  EXPECT_THROW(train_loop(c), ConfigError);  // 3 surviving queries, up to 4 segments
  c.model.num_queries = 8;
  for (const StepRecord& r : train_loop(c).trace) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(TrainLoop, InvalidConfigFailsBeforeCompute) {
  Config c = tiny_config();
  c.train.lr = -1;
  EXPECT_THROW(train_loop(c), ConfigError);
  c = tiny_config();
  c.model.schedule = {0, 0, 0};
  EXPECT_THROW(train_loop(c), ConfigError);
}

TEST(TrainLoop, WritesArtifacts) {
  Config c = tiny_config();
  c.train.val_every = 2;
  const std::string dir = ::testing::TempDir() + "/kmax_train_artifacts";
  std::filesystem::remove_all(dir);
  const TrainResult r = train_loop(c, {dir, nullptr});
  std::ifstream csv(dir + "/metrics.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "step,loss,l_pq,l_sem,l_maskid,val_pq");
  std::size_t rows = 0, with_val = 0;
  while (std::getline(csv, line)) {
    ++rows;
    with_val += line.back() != ',';
  }
  EXPECT_EQ(rows, 4u);
  EXPECT_EQ(with_val, 2u);
  EXPECT_EQ(load_checkpoint(dir + "/model.ckpt").config, c);
  EXPECT_EQ(Config::load(dir + "/config.txt"), c);
  EXPECT_TRUE(r.trace.back().has_val);
}

// Mean loss over the last 20 of 200 steps against the first 20, default toy
// model, three seeds.
TEST(TrainLoop, LossDecreasesOverToySteps) {
  std::vector<double> ratios;
  for (std::uint64_t seed : {1, 2, 3}) {
    Config c;
    c.train.steps = 200;
    c.train.seed = seed;
    c.data.val_size = 1;
    const TrainResult r = train_loop(c);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      head += r.trace[i].loss;
      tail += r.trace[180 + i].loss;
    }
    ratios.push_back(tail / head);
  }
  std::sort(ratios.begin(), ratios.end());
  EXPECT_LT(ratios[1], 1.0);
}

}  // namespace
}  // namespace kmax
