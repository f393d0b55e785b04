#include <gtest/gtest.h>

#include <cmath>

#include "kmax/decoder.hpp"
#include "kmax/ops.hpp"
#include "test_helpers.hpp"

namespace kmax {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat affine(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat y = mm(x, to_mat(w));
  const auto bias = to_vec(b);
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  return y;
}

Mat norm(const Mat& x, const LayerNormParams& p) {
  const auto g = to_vec(p.gain), b = to_vec(p.bias);
  Mat y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

// softmax over each row of scale * q k^T, times v.
Mat attend(const Mat& q, const Mat& k, const Mat& v, double scale) {
  Mat out(q.size(), std::vector<double>(v[0].size()));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> a(k.size());
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j < k.size(); ++j) {
      for (std::size_t d = 0; d < q[i].size(); ++d) a[j] += q[i][d] * k[j][d];
      a[j] *= scale;
      mx = std::max(mx, a[j]);
    }
    for (auto& x : a) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t d = 0; d < v[0].size(); ++d) out[i][d] += a[j] / z * v[j][d];
  }
  return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void randomize(ParameterSet& params, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& p : params.entries()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v += u(rng);
  }
}

DecoderBlockConfig small_config(InteractionKernel kernel) {
  DecoderBlockConfig c;
  c.kernel = kernel;
  c.dim = 4;
  c.ffn_hidden = 8;
  c.num_classes = 2;
  return c;
}

TEST(DecoderBlock, ZeroBlockKeepsCentersAndGivesUniformMasks) {
  std::mt19937_64 rng(1);
  for (auto kernel : {InteractionKernel::kSoftmax, InteractionKernel::kKMeans}) {
    const KMaxDecoderBlock block = KMaxDecoderBlock::zeros(small_config(kernel));
    const Tensor c = random_tensor(rng, {3, 4});
    const PixelFeatures p{random_tensor(rng, {6, 4}), 2, 3};
    const DecoderOutput out = decoder_forward(block, {c}, p);
    EXPECT_EQ(max_abs_diff(out.centers.values, c), 0.0);
    for (double v : out.aux.mask_logits.data()) EXPECT_EQ(v, 0.0);
    const Tensor z = softmax(out.aux.mask_logits, 1);
    for (double v : z.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(DecoderBlock, SoftmaxBlockMatchesIndependentTransformerLayer) {
  std::mt19937_64 rng(2);
  ParameterSet params;
  ParameterFactory f(params, 5);
  const DecoderBlockConfig cfg = small_config(InteractionKernel::kSoftmax);
  const KMaxDecoderBlock b = KMaxDecoderBlock::create(cfg, f, "block");
  randomize(params, rng);
  const Tensor c = random_tensor(rng, {2, 4});
  const Tensor p = random_tensor(rng, {6, 4});
  const DecoderOutput out = decoder_forward(b, {c}, {p, 2, 3});

  const double s = 1.0 / 2.0;  // 1/sqrt(4)
  Mat x = to_mat(c);
  {
    const Mat n = norm(x, b.self_norm);
    x = plus(x, attend(affine(n, b.self_proj.wq, b.self_proj.bq), affine(n, b.self_proj.wk, b.self_proj.bk),
                       affine(n, b.self_proj.wv, b.self_proj.bv), s));
  }
  const Mat pn = norm(to_mat(p), b.pixel_norm);
  const Mat keys = affine(pn, b.kernel_proj.wk, b.kernel_proj.bk);
  {
    const Mat q = affine(norm(x, b.query_norm), b.kernel_proj.wq, b.kernel_proj.bq);
    x = plus(x, attend(q, keys, affine(pn, b.kernel_proj.wv, b.kernel_proj.bv), s));
  }
  {
    Mat h = affine(norm(x, b.ffn_norm), b.ffn_in.weight, b.ffn_in.bias);
    for (auto& row : h)
      for (auto& v : row) v = gelu_ref(v);
    x = plus(x, affine(h, b.ffn_out.weight, b.ffn_out.bias));
  }
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(out.centers.values.at(i, d), x[i][d], 1e-12);

  const Mat cls = affine(norm(x, b.head_norm), b.class_head.weight, b.class_head.bias);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out.aux.class_logits.at(i, k), cls[i][k], 1e-12);

  const Mat emb = affine(norm(x, b.query_norm), b.kernel_proj.wq, b.kernel_proj.bq);
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t i = 0; i < 2; ++i) {
      double logit = 0;
      for (std::size_t d = 0; d < 4; ++d) logit += keys[j][d] * emb[i][d];
      EXPECT_NEAR(out.aux.mask_logits.at(j, i), logit * s, 1e-12);
    }
}

TEST(DecoderBlock, KMeansAuxLogitsShareTheAssignmentBilinearForm) {
  std::mt19937_64 rng(3);
  ParameterSet params;
  ParameterFactory f(params, 6);
  const KMaxDecoderBlock b = KMaxDecoderBlock::create(small_config(InteractionKernel::kKMeans), f, "b");
  randomize(params, rng);
  const DecoderOutput out = decoder_forward(b, {random_tensor(rng, {3, 4})}, {random_tensor(rng, {8, 4}), 2, 4});
  EXPECT_EQ(out.aux.mask_logits.shape(), (Shape{8, 3}));
  EXPECT_EQ(out.aux.affinity.values.shape(), (Shape{3, 8}));
}

TEST(DecoderBlock, AuxLogitsAreNearestUpsampled) {
  std::mt19937_64 rng(4);
  ParameterSet params;
  ParameterFactory f(params, 7);
  const KMaxDecoderBlock b = KMaxDecoderBlock::create(small_config(InteractionKernel::kKMeans), f, "b");
  const PixelFeatures p{random_tensor(rng, {4, 4}), 2, 2};
  const Tensor c = random_tensor(rng, {3, 4});
  const Tensor base = decoder_forward(b, {c}, p, 1).aux.mask_logits;
  const Tensor up = decoder_forward(b, {c}, p, 4).aux.mask_logits;
  ASSERT_EQ(up.shape(), (Shape{64, 3}));
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t n = 0; n < 3; ++n)
        EXPECT_EQ(up.at(y * 8 + x, n), base.at((y / 4) * 2 + x / 4, n));
}

TEST(DecoderBlock, Deterministic) {
  std::mt19937_64 rng(5);
  ParameterSet params;
  ParameterFactory f(params, 8);
  const KMaxDecoderBlock b = KMaxDecoderBlock::create(small_config(InteractionKernel::kKMeans), f, "b");
  const Tensor c = random_tensor(rng, {3, 4});
  const PixelFeatures p{random_tensor(rng, {6, 4}), 2, 3};
  EXPECT_EQ(max_abs_diff(decoder_forward(b, {c}, p).centers.values, decoder_forward(b, {c}, p).centers.values), 0.0);
}

struct Stack {
  ParameterSet params;
  std::vector<KMaxDecoderBlock> blocks;
  std::vector<PixelFeatures> pyramid;
};

Stack make_stack(std::size_t per_level, std::mt19937_64& rng) {
  Stack s;
  ParameterFactory f(s.params, 9);
  for (std::size_t i = 0; i < 3 * per_level; ++i)
    s.blocks.push_back(KMaxDecoderBlock::create(small_config(InteractionKernel::kKMeans), f, "b" + std::to_string(i)));
  s.pyramid = {{random_tensor(rng, {4, 4}), 2, 2}, {random_tensor(rng, {16, 4}), 4, 4},
               {random_tensor(rng, {64, 4}), 8, 8}};
  return s;
}

TEST(Stack, TwoBlocksChangeCenters) {
  std::mt19937_64 rng(6);
  Stack s = make_stack(1, rng);
  const Tensor c = random_tensor(rng, {3, 4});
  const DecoderOutput one = decoder_forward(s.blocks[0], {c}, s.pyramid[0]);
  const DecoderOutput two = decoder_forward(s.blocks[1], one.centers, s.pyramid[0]);
  EXPECT_GT(max_abs_diff(two.centers.values, one.centers.values), 0.0);
}

TEST(Stack, ScheduleOneConsumesStridesInOrder) {
  std::mt19937_64 rng(7);
  Stack s = make_stack(1, rng);
  const StackOutput out = stack_forward(s.blocks, {random_tensor(rng, {3, 4})}, s.pyramid, {1, 1, 1}, {4, 2, 1});
  ASSERT_EQ(out.aux.size(), 3u);
  const std::size_t widths[] = {2, 4, 8};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(out.aux[i].stage, i);
    EXPECT_EQ(out.aux[i].width, widths[i]);
    EXPECT_EQ(out.aux[i].mask_logits.dim(0), 64u);
  }
}

TEST(Stack, ScheduleTwoGivesSixAuxOutputs) {
  std::mt19937_64 rng(8);
  Stack s = make_stack(2, rng);
  const StackOutput out = stack_forward(s.blocks, {random_tensor(rng, {3, 4})}, s.pyramid, {2, 2, 2}, {4, 2, 1});
  ASSERT_EQ(out.aux.size(), 6u);
  const std::size_t widths[] = {2, 2, 4, 4, 8, 8};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.aux[i].width, widths[i]);
}

TEST(Stack, ScheduleErrors) {
  std::mt19937_64 rng(9);
  Stack s = make_stack(1, rng);
  const ClusterCenters c{random_tensor(rng, {3, 4})};
  EXPECT_THROW(stack_forward({}, c, s.pyramid, {}, {}), ConfigError);
  EXPECT_THROW(stack_forward({}, c, s.pyramid, {0, 0, 0}, {4, 2, 1}), ConfigError);
  EXPECT_THROW(stack_forward(s.blocks, c, s.pyramid, {2, 1, 1}, {4, 2, 1}), ConfigError);
  EXPECT_THROW(stack_forward(s.blocks, c, s.pyramid, {1, 2}, {4, 2}), ConfigError);
}

// Wq/Wk of a k-means kernel only see gradient through the aux mask logits.
TEST(Stack, KMeansProjectionsNeedDeepSupervision) {
  std::mt19937_64 rng(10);
  ParameterSet params;
  ParameterFactory f(params, 11);
  const KMaxDecoderBlock b = KMaxDecoderBlock::create(small_config(InteractionKernel::kKMeans), f, "b");
  const Tensor c = random_tensor(rng, {3, 4});
  const PixelFeatures p{random_tensor(rng, {6, 4}), 2, 3};
  auto norm2 = [](const Tensor& t) {
    double s = 0;
    for (double g : t.grad()) s += g * g;
    return s;
  };

  params.zero_grad();
  DecoderOutput out = decoder_forward(b, {c}, p);
  sum(mul(out.centers.values, random_tensor(rng, {3, 4}))).backward();
  EXPECT_EQ(norm2(b.kernel_proj.wq), 0.0);
  EXPECT_EQ(norm2(b.kernel_proj.wk), 0.0);
  EXPECT_GT(norm2(b.kernel_proj.wv), 0.0);

  params.zero_grad();
  out = decoder_forward(b, {c}, p);
  sum(mul(out.aux.mask_logits, random_tensor(rng, {6, 3}))).backward();
  EXPECT_GT(norm2(b.kernel_proj.wq), 0.0);
  EXPECT_GT(norm2(b.kernel_proj.wk), 0.0);
}

}  // namespace
}  // namespace kmax
