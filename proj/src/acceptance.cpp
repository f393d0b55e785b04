#include "kmax/acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "kmax/attention.hpp"
#include "kmax/grad_check.hpp"
#include "kmax/inference.hpp"
#include "kmax/loss.hpp"
#include "kmax/matching.hpp"
#include "kmax/model.hpp"
#include "kmax/ops.hpp"
#include "kmax/train.hpp"

namespace kmax {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), pattern, a, b, c);
  return buf;
}

Tensor uniform(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Values with |x| in [0.2, 1] so kinks and poles stay out of reach of the
// finite-difference probe.
Tensor away_from_zero(std::mt19937_64& rng, Shape shape) {
  Tensor t = uniform(rng, std::move(shape), 0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& x : t.mutable_data()) x = sign(rng) ? x : -x;
  return t;
}

struct GradCase {
  std::string name;
  ScalarFn f;
  Tensor x;
};

// Reduces op(x) against fixed random weights so every output element
// carries a distinct, nonzero sensitivity.
GradCase weighted_case(std::string name, std::function<Tensor(const Tensor&)> op, Tensor x,
                       std::mt19937_64& rng) {
  Shape out_shape;
  {
    NoGradGuard no_grad;
    out_shape = op(x).shape();
  }
  Tensor r = uniform(rng, out_shape, 0.5, 1.5);
  return {std::move(name), [op, r](const Tensor& v) { return sum(mul(op(v), r)); }, std::move(x)};
}

}  // namespace

std::string format_criterion(const CriterionResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), " (%.1f s)", r.seconds);
  return std::string(r.passed ? "[PASS] " : "[FAIL] ") + std::to_string(r.id) + " " + r.name +
         ": " + r.detail + buf;
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

CriterionResult check_gradients() {
  const auto start = Clock::now();
  std::mt19937_64 rng(101);
  std::vector<GradCase> cases;
  auto push = [&](std::string name, std::function<Tensor(const Tensor&)> op, Tensor x) {
    cases.push_back(weighted_case(std::move(name), std::move(op), std::move(x), rng));
  };

  const Tensor b34 = uniform(rng, {3, 4});
  const Tensor m23 = uniform(rng, {2, 3});
  const Tensor w34 = uniform(rng, {3, 4});
  const Tensor bias4 = uniform(rng, {4});
  const Tensor pos23 = uniform(rng, {2, 3}, 0.5, 1.5);
  push("matmul/lhs", [b34](const Tensor& x) { return matmul(x, b34); }, uniform(rng, {2, 3}));
  push("matmul/rhs", [m23](const Tensor& x) { return matmul(m23, x); }, uniform(rng, {3, 4}));
  push("transpose", [](const Tensor& x) { return transpose(x); }, uniform(rng, {2, 3}));
  push("reshape", [](const Tensor& x) { return reshape(x, {3, 2}); }, uniform(rng, {2, 3}));
  push("linear/x", [w34, bias4](const Tensor& x) { return linear(x, w34, bias4); },
      uniform(rng, {2, 3}));
  push("linear/weight", [m23, bias4](const Tensor& w) { return linear(m23, w, bias4); },
      uniform(rng, {3, 4}));
  push("add", [m23](const Tensor& x) { return add(x, m23); }, uniform(rng, {2, 3}));
  push("sub", [m23](const Tensor& x) { return sub(m23, x); }, uniform(rng, {2, 3}));
  push("mul", [m23](const Tensor& x) { return mul(x, m23); }, uniform(rng, {2, 3}));
  push("div/numerator", [pos23](const Tensor& x) { return div(x, pos23); }, uniform(rng, {2, 3}));
  push("div/denominator", [m23](const Tensor& x) { return div(m23, x); },
      uniform(rng, {2, 3}, 0.5, 1.5));
  push("scale", [](const Tensor& x) { return scale(x, -1.7); }, uniform(rng, {2, 3}));
  push("add_scalar", [](const Tensor& x) { return mul(add_scalar(x, 0.3), x); },
      uniform(rng, {2, 3}));
  push("add_rowwise", [m23](const Tensor& b) { return mul(add_rowwise(m23, b), add_rowwise(m23, b)); },
      uniform(rng, {3}));
  push("relu", [](const Tensor& x) { return relu(x); }, away_from_zero(rng, {2, 3}));
  push("gelu", [](const Tensor& x) { return gelu(x); }, uniform(rng, {2, 3}, -2.0, 2.0));
  push("log", [](const Tensor& x) { return log(x); }, uniform(rng, {2, 3}, 0.5, 2.0));
  push("exp", [](const Tensor& x) { return exp(x); }, uniform(rng, {2, 3}));
  push("softmax/axis0", [](const Tensor& x) { return softmax(x, 0); }, uniform(rng, {3, 4}, -2, 2));
  push("softmax/axis1", [](const Tensor& x) { return softmax(x, 1); }, uniform(rng, {3, 4}, -2, 2));
  {
    const Tensor g = uniform(rng, {4}, 0.5, 1.5), b = uniform(rng, {4});
    push("layer_norm/x", [g, b](const Tensor& x) { return layer_norm(x, g, b); },
        uniform(rng, {3, 4}, -2, 2));
    const Tensor x = uniform(rng, {3, 4}, -2, 2);
    push("layer_norm/gain", [x, b](const Tensor& gain) { return layer_norm(x, gain, b); },
        uniform(rng, {4}, 0.5, 1.5));
  }
  push("reduce_sum/axis0", [](const Tensor& x) { return reduce_sum(x, 0); }, uniform(rng, {3, 4}));
  push("reduce_sum/axis1", [](const Tensor& x) { return reduce_sum(x, 1); }, uniform(rng, {3, 4}));
  push("reduce_mean", [](const Tensor& x) { return reduce_mean(x, 1); }, uniform(rng, {3, 4}));
  push("sum", [](const Tensor& x) { return mul(sum(x), sum(x)); }, uniform(rng, {3, 4}));
  push("mean", [](const Tensor& x) { return mul(mean(x), mean(x)); }, uniform(rng, {3, 4}));
  push("slice", [](const Tensor& x) { return slice(x, 1, 1, 3); }, uniform(rng, {3, 4}));
  push("concat", [m23](const Tensor& x) { return concat({m23, x, x}, 0); }, uniform(rng, {2, 3}));
  push("select_rows",
      [](const Tensor& x) {
        const std::vector<std::size_t> rows{2, 0, 2};
        return select_rows(x, rows);
      },
      uniform(rng, {3, 4}));
  push("take",
      [](const Tensor& x) {
        const std::vector<std::size_t> idx{5, 0, 5, 11};
        return take(x, idx);
      },
      uniform(rng, {3, 4}));
  push("upsample_nearest", [](const Tensor& x) { return upsample_nearest(x, 2); },
      uniform(rng, {2, 3, 2}));
  {
    const Tensor w = uniform(rng, {3, 3, 2, 3});
    push("conv3x3/stride1", [w](const Tensor& x) { return conv3x3(x, w, 1); },
        uniform(rng, {4, 5, 2}));
    push("conv3x3/stride2", [w](const Tensor& x) { return conv3x3(x, w, 2); },
        uniform(rng, {5, 4, 2}));
    const Tensor x = uniform(rng, {4, 4, 2});
    push("conv3x3/weight", [x](const Tensor& wt) { return conv3x3(x, wt, 2); },
        uniform(rng, {3, 3, 2, 3}));
  }
  {
    const std::vector<int> targets{2, kIgnoreIndex, 0, 1};
    const std::vector<double> weights{0.5, 1.0, 2.0, 0.25};
    push("cross_entropy/mean", [targets](const Tensor& x) { return cross_entropy_from_logits(x, targets); },
        uniform(rng, {4, 3}, -2, 2));
    push("cross_entropy/weighted",
        [targets, weights](const Tensor& x) { return cross_entropy_from_logits(x, targets, weights); },
        uniform(rng, {4, 3}, -2, 2));
  }
  {
    ProjectionWeights pw;
    pw.wq = uniform(rng, {3, 3});
    pw.wk = uniform(rng, {3, 3});
    pw.wv = uniform(rng, {3, 3});
    const Tensor pixels = uniform(rng, {4, 3});
    const Tensor centers = uniform(rng, {2, 3});
    push("cross_attention_softmax/centers",
        [pw, pixels](const Tensor& c) {
          return cross_attention_softmax({c}, {pixels, 4, 1}, pw).centers.values;
        },
        centers);
    push("cross_attention_softmax/pixels",
        [pw, centers](const Tensor& p) {
          return cross_attention_softmax({centers}, {p, 4, 1}, pw).centers.values;
        },
        pixels);
    // The assignment is piecewise constant; a well-separated instance keeps
    // it fixed under the probe.
    ProjectionWeights id = ProjectionWeights::identity(3);
    id.wv = pw.wv;
    const Tensor sep_centers = Tensor::matrix({{4, 0, 0}, {0, 4, 0}});
    push("cross_attention_kmeans/pixels",
        [id, sep_centers](const Tensor& p) {
          KernelOptions opts;
          opts.normalize = true;
          return cross_attention_kmeans({sep_centers}, {p, 4, 1}, id, opts).centers.values;
        },
        Tensor::matrix({{1.0, 0.1, 0.2}, {0.9, -0.2, 0.1}, {0.1, 1.1, -0.3}, {-0.2, 0.8, 0.4}}));
  }

  // total_loss on a 2-query, 16-pixel instance with one auxiliary output:
  // one segment (so one matched and one void-target query) plus void
  // pixels. The matching is computed once and frozen.
  {
    PanopticMap gt = PanopticMap::filled(4, 4, 1);
    for (std::size_t i : {0u, 1u, 4u, 5u, 15u}) gt.class_ids[i] = kVoidClass;
    const SegmentTargets targets = SegmentTargets::from_map(gt);
    const std::size_t nm = 16 * 2, nc = 2 * 3, ns = 16 * 3;
    const Tensor x = uniform(rng, {2 * nm + 2 * nc + ns}, -1.5, 1.5);
    auto unpack = [=](const Tensor& v, PredictionLogits& fin, AuxiliaryPrediction& aux, Tensor& sem) {
      std::size_t o = 0;
      fin.mask_logits = reshape(slice(v, 0, o, o + nm), {16, 2});
      o += nm;
      fin.class_logits = reshape(slice(v, 0, o, o + nc), {2, 3});
      o += nc;
      aux.mask_logits = reshape(slice(v, 0, o, o + nm), {16, 2});
      o += nm;
      aux.class_logits = reshape(slice(v, 0, o, o + nc), {2, 3});
      o += nc;
      sem = reshape(slice(v, 0, o, o + ns), {16, 3});
      fin.height = fin.width = 4;
    };
    Matching matching;
    {
      NoGradGuard no_grad;
      PredictionLogits fin;
      AuxiliaryPrediction aux;
      Tensor sem;
      unpack(x, fin, aux, sem);
      matching = match_prediction(to_prediction_set(fin), targets);
    }
    cases.push_back({"total_loss",
                     [=](const Tensor& v) {
                       PredictionLogits fin;
                       AuxiliaryPrediction aux;
                       Tensor sem;
                       unpack(v, fin, aux, sem);
                       return total_loss(fin, {aux}, sem, targets, matching, LossWeights{}).total;
                     },
                     x});
  }

  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    const double err = grad_check(c.f, c.x, 1e-5);
    if (!(err <= worst)) {
      worst = err;
      worst_name = c.name;
    }
  }
  CriterionResult r;
  r.id = 1;
  r.name = "gradient correctness";
  r.seconds = seconds_since(start);
  r.passed = worst < 1e-4 && r.seconds < 60.0;
  r.detail = std::to_string(cases.size()) + " cases, max rel err " + fmt("%.3g", worst) + " (" +
             worst_name + "), bound 1e-4";
  return r;
}

namespace {

// Independent Euclidean Lloyd step for the equivalence oracle.
void reference_lloyd(const std::vector<double>& pts, std::size_t m, std::size_t d,
                     const std::vector<double>& centers, std::size_t n, std::vector<std::size_t>& labels,
                     std::vector<double>& updated) {
  labels.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = pts[i * d + j] - centers[c * d + j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        labels[i] = c;
      }
    }
  }
  updated = centers;
  std::vector<std::size_t> count(n, 0);
  std::vector<double> acc(n * d, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    ++count[labels[i]];
    for (std::size_t j = 0; j < d; ++j) acc[labels[i] * d + j] += pts[i * d + j];
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (!count[c]) continue;
    for (std::size_t j = 0; j < d; ++j) {
      updated[c * d + j] = acc[c * d + j] / static_cast<double>(count[c]);
    }
  }
}

}  // namespace

CriterionResult check_kmeans_equivalence() {
  const auto start = Clock::now();
  std::mt19937_64 rng(202);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t label_mismatch = 0;
  double worst = 0.0;
  const std::size_t instances = 20;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t m = std::uniform_int_distribution<std::size_t>(8, 64)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    std::vector<double> pts(m * d);
    for (std::size_t i = 0; i < m; ++i) {
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        pts[i * d + j] = normal(rng);
        norm += pts[i * d + j] * pts[i * d + j];
      }
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < d; ++j) pts[i * d + j] /= norm;
    }
    std::vector<std::size_t> pick(m);
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    std::shuffle(pick.begin(), pick.end(), rng);
    std::vector<double> centers(n * d);
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = pts[pick[c] * d + j];

    KernelOptions opts;
    opts.residual = false;
    opts.normalize = true;
    const KernelOutput out = cross_attention_kmeans({Tensor({n, d}, centers)},
                                                    {Tensor({m, d}, pts), m, 1},
                                                    ProjectionWeights::identity(d), opts);
    std::vector<std::size_t> labels;
    std::vector<double> expected;
    reference_lloyd(pts, m, d, centers, n, labels, expected);
    const auto a = out.attention.data();
    for (std::size_t i = 0; i < m; ++i) {
      if (a[labels[i] * m + i] != 1.0) ++label_mismatch;
    }
    const auto got = out.centers.values.data();
    for (std::size_t k = 0; k < expected.size(); ++k) {
      worst = std::max(worst, std::abs(got[k] - expected[k]));
    }
  }
  CriterionResult r;
  r.id = 2;
  r.name = "k-means equivalence oracle";
  r.passed = label_mismatch == 0 && worst <= 1e-12;
  r.detail = std::to_string(instances) + " instances, " + std::to_string(label_mismatch) +
             " assignment mismatches, max center diff " + fmt("%.3g", worst) + " (bound 1e-12)";
  r.seconds = seconds_since(start);
  return r;
}

CriterionResult check_attention_invariants() {
  const auto start = Clock::now();
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> size(1, 24);
  std::uniform_real_distribution<double> spread(0.1, 20.0);
  std::uniform_real_distribution<double> log_scale(-4.0, 4.0);
  double worst_sum = 0.0;
  std::size_t bad_onehot = 0, bad_scaled = 0;
  for (std::size_t t = 0; t < 100; ++t) {
    const std::size_t n = size(rng), hw = size(rng);
    const double s = spread(rng);
    const Tensor logits = uniform(rng, {n, hw}, -s, s);

    const Tensor rows = softmax(logits, 1);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < hw; ++j) total += rows.at(i, j);
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }

    const Tensor onehot = argmax_onehot(logits, 0);
    for (std::size_t j = 0; j < hw; ++j) {
      std::size_t ones = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = onehot.at(i, j);
        if (v == 1.0) {
          ++ones;
        } else if (v != 0.0) {
          ones += 2;
        }
      }
      if (ones != 1) ++bad_onehot;
    }

    const Tensor scaled = argmax_onehot(scale(logits, std::pow(10.0, log_scale(rng))), 0);
    if (!std::equal(scaled.data().begin(), scaled.data().end(), onehot.data().begin())) ++bad_scaled;
  }
  CriterionResult r;
  r.id = 3;
  r.name = "attention-map invariants";
  r.passed = worst_sum <= 1e-12 && bad_onehot == 0 && bad_scaled == 0;
  r.detail = "100 instances each: max |row sum - 1| " + fmt("%.3g", worst_sum) + ", " +
             std::to_string(bad_onehot) + " non-one-hot columns, " + std::to_string(bad_scaled) +
             " scale-variant argmaxes";
  r.seconds = seconds_since(start);
  return r;
}

CriterionResult check_hungarian_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<std::size_t> size(1, 7);
  std::uniform_int_distribution<int> value(-20, 20);
  std::size_t wrong = 0;
  const std::size_t instances = 200;
  for (std::size_t t = 0; t < instances; ++t) {
    std::size_t k = size(rng), n = size(rng);
    if (k > n) std::swap(k, n);
    std::vector<double> c(k * n);
    for (auto& v : c) v = value(rng);
    const Matching m = hungarian_match(Tensor({k, n}, c));

    // Brute force: every ordered choice of k distinct columns.
    std::vector<std::size_t> cols(n);
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    do {
      double total = 0.0;
      for (std::size_t i = 0; i < k; ++i) total += c[i * n + cols[i]];
      best = std::min(best, total);
    } while (std::next_permutation(cols.begin(), cols.end()));

    std::set<std::size_t> used(m.gt_to_query.begin(), m.gt_to_query.end());
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += c[i * n + m.gt_to_query[i]];
    if (used.size() != k || total != best || m.cost != best) ++wrong;
  }
  CriterionResult r;
  r.id = 4;
  r.name = "Hungarian oracle";
  r.passed = wrong == 0;
  r.detail = std::to_string(instances) + " instances (K, N <= 7) vs exhaustive search, " +
             std::to_string(wrong) + " mismatches";
  r.seconds = seconds_since(start);
  return r;
}

namespace {

// Blocky random scene: a few rectangles over a stuff background.
PanopticMap random_blocks(std::mt19937_64& rng, std::size_t size, int things, int stuff) {
  PanopticMap m = PanopticMap::filled(size, size,
                                      things + std::uniform_int_distribution<int>(0, stuff - 1)(rng));
  std::uniform_int_distribution<std::size_t> coord(0, size - 4);
  std::uniform_int_distribution<std::size_t> extent(3, size / 2);
  std::uniform_int_distribution<int> cls(0, things - 1);
  const int count = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int s = 0; s < count; ++s) {
    const std::size_t y0 = coord(rng), x0 = coord(rng), h = extent(rng), w = extent(rng);
    const int c = cls(rng);
    for (std::size_t y = y0; y < std::min(size, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(size, x0 + w); ++x) {
        m.class_ids[y * size + x] = c;
        m.instance_ids[y * size + x] = s + 1;
      }
  }
  return m;
}

void relabel_instances(PanopticMap& m, std::mt19937_64& rng) {
  std::map<std::pair<int, int>, int> fresh;
  std::vector<int> ids(64);
  std::iota(ids.begin(), ids.end(), 1);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t next = 0;
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    if (m.class_ids[i] == kVoidClass || m.instance_ids[i] == 0) continue;
    auto key = std::make_pair(m.class_ids[i], m.instance_ids[i]);
    auto it = fresh.find(key);
    if (it == fresh.end()) it = fresh.emplace(key, ids[next++]).first;
    m.instance_ids[i] = it->second;
  }
}

}  // namespace

CriterionResult check_pq_hand_cases() {
  const auto start = Clock::now();
  const ClassTable one_thing{{"thing", true}};

  PanopticMap gt = PanopticMap::filled(4, 5);
  for (std::size_t i = 0; i < 20; ++i) {
    gt.class_ids[i] = 0;
    gt.instance_ids[i] = i < 10 ? 1 : 2;
  }
  const double perfect = panoptic_quality({gt, gt.segments()}, gt, one_thing).pq;

  // Prediction covers 8 of the first instance's 10 pixels (IoU 0.8) and
  // misses the second instance.
  PanopticMap pred = PanopticMap::filled(4, 5);
  for (std::size_t i = 0; i < 8; ++i) {
    pred.class_ids[i] = 0;
    pred.instance_ids[i] = 1;
  }
  const double partial = panoptic_quality({pred, pred.segments()}, gt, one_thing).pq;

  std::mt19937_64 rng(505);
  const ClassTable table{{"a", true}, {"b", true}, {"c", false}, {"d", false}};
  std::size_t variant = 0;
  double sum_pq = 0.0;
  for (std::size_t t = 0; t < 50; ++t) {
    PanopticMap g = random_blocks(rng, 16, 2, 2);
    PanopticMap p = g;
    std::uniform_int_distribution<std::size_t> pixel(0, p.pixels() - 1);
    const std::size_t noise = std::uniform_int_distribution<std::size_t>(0, 80)(rng);
    for (std::size_t i = 0; i < noise; ++i) {
      const std::size_t a = pixel(rng), b = pixel(rng);
      p.class_ids[a] = p.class_ids[b];
      p.instance_ids[a] = p.instance_ids[b];
    }
    const double before = panoptic_quality({p, p.segments()}, g, table).pq;
    relabel_instances(g, rng);
    relabel_instances(p, rng);
    const double after = panoptic_quality({p, p.segments()}, g, table).pq;
    if (before != after) ++variant;
    sum_pq += before;
  }

  CriterionResult r;
  r.id = 5;
  r.name = "PQ hand cases";
  r.passed = perfect == 1.0 && std::abs(partial - 0.8 / 1.5) <= 1e-6 && variant == 0;
  r.detail = "perfect " + fmt("%.6f", perfect) + ", TP(0.8)+FN " + fmt("%.6f", partial) +
             " (expect 0.533333), " + std::to_string(variant) +
             "/50 relabelings changed PQ (mean PQ " + fmt("%.3f", sum_pq / 50.0) + ")";
  r.seconds = seconds_since(start);
  return r;
}

CriterionResult check_determinism() {
  const auto start = Clock::now();
  Config c;
  c.train.steps = 10;
  c.train.seed = 7;
  c.data.val_size = 2;
  const TrainResult a = train_loop(c);
  const TrainResult b = train_loop(c);
  bool same = a.trace.size() == b.trace.size();
  for (std::size_t i = 0; same && i < a.trace.size(); ++i) {
    const StepRecord &x = a.trace[i], &y = b.trace[i];
    same = std::memcmp(&x.loss, &y.loss, sizeof(double)) == 0 &&
           std::memcmp(&x.l_pq, &y.l_pq, sizeof(double)) == 0 &&
           std::memcmp(&x.l_sem, &y.l_sem, sizeof(double)) == 0 &&
           std::memcmp(&x.l_maskid, &y.l_maskid, sizeof(double)) == 0;
  }
  const auto& pa = a.model.parameters().entries();
  const auto& pb = b.model.parameters().entries();
  for (std::size_t i = 0; same && i < pa.size(); ++i) {
    const auto x = pa[i].tensor.data(), y = pb[i].tensor.data();
    same = std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  }
  CriterionResult r;
  r.id = 6;
  r.name = "determinism";
  r.passed = same && a.trace.size() == 10;
  r.detail = "10-step trace and final parameters " +
             std::string(same ? "bitwise identical" : "DIFFER") + " across two runs (last loss " +
             fmt("%.6f", a.trace.empty() ? 0.0 : a.trace.back().loss) + ")";
  r.seconds = seconds_since(start);
  return r;
}

CriterionResult check_deep_supervision() {
  const auto start = Clock::now();
  Config c;
  const SceneSpec spec = SceneSpec::from_config(c.data, c.data.seed);
  const Sample sample = generate(spec, 0);

  auto wq_norms = [&](bool aux) {
    KMaxModel model(c.model, 11);
    const ModelOutput out = model_forward(model, sample.image, true);
    const SegmentTargets targets =
        SegmentTargets::from_map(downsample(sample.gt, sample.gt.height / out.mask_height));
    Matching matching;
    {
      NoGradGuard no_grad;
      matching = match_prediction(to_prediction_set(out.final), targets);
    }
    LossWeights w;
    w.use_aux = aux;
    total_loss(out.final, out.aux, out.semantic_logits, targets, matching, w).total.backward();
    std::vector<double> norms;
    for (const auto& block : model.blocks) {
      if (block.config.kernel != InteractionKernel::kKMeans) continue;
      double sq = 0.0;
      for (double g : block.kernel_proj.wq.grad()) sq += g * g;
      norms.push_back(std::sqrt(sq));
    }
    return norms;
  };
  const auto off = wq_norms(false);
  const auto on = wq_norms(true);
  const bool zero = std::all_of(off.begin(), off.end(), [](double v) { return v == 0.0; });
  const bool positive = std::all_of(on.begin(), on.end(), [](double v) { return v > 0.0; });
  const double min_on = on.empty() ? 0.0 : *std::min_element(on.begin(), on.end());
  const double max_off = off.empty() ? 0.0 : *std::max_element(off.begin(), off.end());

  CriterionResult r;
  r.id = 10;
  r.name = "deep-supervision necessity";
  r.passed = !on.empty() && zero && positive;
  r.detail = std::to_string(on.size()) + " k-means kernels: max |dL/dWq| without aux " +
             fmt("%.3g", max_off) + ", min with aux " + fmt("%.3g", min_on);
  r.seconds = seconds_since(start);
  return r;
}

std::vector<StudyResult> run_study(const std::vector<StudyVariant>& variants,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::ostream* progress) {
  std::vector<StudyResult> out;
  for (const auto& v : variants) {
    StudyResult r;
    r.name = v.name;
    const auto start = Clock::now();
    for (auto seed : seeds) {
      Config c = v.config;
      c.train.seed = seed;
      const auto run_start = Clock::now();
      const TrainResult t = train_loop(c);
      r.pq.push_back(t.final_eval.quality.pq);
      if (progress) {
        *progress << v.name << " seed " << seed << ": val PQ "
                  << fmt("%.4f", t.final_eval.quality.pq) << " ("
                  << fmt("%.0f", seconds_since(run_start)) << " s)" << std::endl;
      }
    }
    r.median = median(r.pq);
    r.seconds = seconds_since(start);
    out.push_back(r);
  }
  return out;
}

std::string format_study(const std::vector<StudyResult>& results) {
  std::string out = "variant                    median_pq  per_seed\n";
  char buf[128];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%-26s %9.4f ", r.name.c_str(), r.median);
    out += buf;
    for (double v : r.pq) {
      std::snprintf(buf, sizeof(buf), " %.4f", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::vector<CriterionResult> check_training_criteria(const AcceptanceOptions& options) {
  const auto start = Clock::now();
  Config kmeans = options.base;
  kmeans.model.kernel = InteractionKernel::kKMeans;
  kmeans.model.schedule = {2, 2, 2};
  Config softmax_cfg = kmeans;
  softmax_cfg.model.kernel = InteractionKernel::kSoftmax;
  Config shallow = kmeans;
  shallow.model.schedule = {1, 1, 1};
  const auto study = run_study({{"kmeans (2,2,2)", kmeans},
                                {"softmax (2,2,2)", softmax_cfg},
                                {"kmeans (1,1,1)", shallow}},
                               options.seeds, options.progress);
  const double total = seconds_since(start);
  const std::size_t runs = 3 * options.seeds.size();
  const double per_run = total / static_cast<double>(runs);
  auto seeds_text = [](const StudyResult& s) {
    std::string t;
    for (double v : s.pq) t += (t.empty() ? "" : " ") + fmt("%.4f", v);
    return t;
  };

  std::vector<CriterionResult> out(3);
  out[0].id = 7;
  out[0].name = "toy end-to-end convergence";
  out[0].passed = study[0].median >= 0.55 && per_run < 30 * 60;
  out[0].detail = "kmeans (2,2,2) " + std::to_string(kmeans.train.steps) + " steps, median val PQ " +
                  fmt("%.4f", study[0].median) + " [" + seeds_text(study[0]) +
                  "] (bar 0.55), mean run " + fmt("%.0f", per_run) + " s";
  out[0].seconds = study[0].seconds;

  const double gap = study[0].median - study[1].median;
  out[1].id = 8;
  out[1].name = "ablation direction (kernel)";
  out[1].passed = gap >= 0.03;
  out[1].detail = "kmeans " + fmt("%.4f", study[0].median) + " vs softmax " +
                  fmt("%.4f", study[1].median) + " [" + seeds_text(study[1]) + "], gap " +
                  fmt("%+.4f", gap) + " (need >= +0.03)";
  out[1].seconds = study[1].seconds;

  out[2].id = 9;
  out[2].name = "decoder-count trend";
  out[2].passed = study[0].median >= study[2].median - 0.01;
  out[2].detail = "(2,2,2) " + fmt("%.4f", study[0].median) + " vs (1,1,1) " +
                  fmt("%.4f", study[2].median) + " [" + seeds_text(study[2]) +
                  "] (need >= (1,1,1) - 0.01)";
  out[2].seconds = study[2].seconds;
  return out;
}

std::vector<CriterionResult> run_acceptance(
    const AcceptanceOptions& options, const std::function<void(const CriterionResult&)>& on_result) {
  std::vector<CriterionResult> results;
  auto record = [&](CriterionResult r) {
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  };
  record(check_gradients());
  record(check_kmeans_equivalence());
  record(check_attention_invariants());
  record(check_hungarian_oracle());
  record(check_pq_hand_cases());
  record(check_determinism());
  if (options.training) {
    for (auto& r : check_training_criteria(options)) record(std::move(r));
  }
  record(check_deep_supervision());
  return results;
}

}  // namespace kmax
