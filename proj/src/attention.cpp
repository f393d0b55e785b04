#include "kmax/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kmax/ops.hpp"

namespace kmax {

namespace {

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) { return linear(x, w, b); }

void check_dims(const ClusterCenters& c, const PixelFeatures& p, const ProjectionWeights& w,
                const char* op) {
  if (c.values.rank() != 2 || p.values.rank() != 2) {
    throw ShapeError(std::string(op) + ": centers and pixels must be matrices");
  }
  if (p.height * p.width != p.values.dim(0)) {
    throw ShapeError(std::string(op) + ": pixel rows " + std::to_string(p.values.dim(0)) +
                     " != height*width " + std::to_string(p.height * p.width));
  }
  if (c.dim() != p.dim() || w.wq.dim(0) != c.dim() || w.wk.dim(0) != p.dim() ||
      w.wv.dim(0) != p.dim()) {
    throw DimensionError(std::string(op) + ": channel mismatch, centers " +
                         shape_to_string(c.values.shape()) + ", pixels " +
                         shape_to_string(p.values.shape()) + ", projections " +
                         shape_to_string(w.wq.shape()));
  }
}

std::size_t head_width(std::size_t dim, std::size_t heads, const char* op) {
  if (heads == 0 || dim % heads != 0) {
    throw ArgumentError(std::string(op) + ": " + std::to_string(heads) +
                        " heads do not split " + std::to_string(dim) + " channels");
  }
  return dim / heads;
}

Tensor head_slice(const Tensor& x, std::size_t heads, std::size_t h, std::size_t width) {
  return heads == 1 ? x : slice(x, 1, h * width, (h + 1) * width);
}

Tensor average(const std::vector<Tensor>& parts) {
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return parts.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(parts.size()));
}

Tensor detached_average(const std::vector<Tensor>& parts) {
  std::vector<double> acc(parts.front().numel(), 0.0);
  for (const Tensor& t : parts) {
    auto v = t.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  for (auto& v : acc) v /= static_cast<double>(parts.size());
  return Tensor(parts.front().shape(), std::move(acc));
}

}  // namespace

PixelFeatures PixelFeatures::from_map(const Tensor& map) {
  if (map.rank() != 3) throw ShapeError("pixel map must be [H x W x D], got " + shape_to_string(map.shape()));
  return {reshape(map, {map.dim(0) * map.dim(1), map.dim(2)}), map.dim(0), map.dim(1)};
}

ProjectionWeights ProjectionWeights::identity(std::size_t dim) {
  std::vector<double> eye(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) eye[i * dim + i] = 1.0;
  return {Tensor({dim, dim}, eye), Tensor({dim, dim}, eye), Tensor({dim, dim}, eye), {}, {}, {}};
}

ProjectionWeights ProjectionWeights::zeros(std::size_t dim) {
  return {Tensor({dim, dim}), Tensor({dim, dim}), Tensor({dim, dim}),
          Tensor({dim}), Tensor({dim}), Tensor({dim})};
}

ProjectionWeights ProjectionWeights::random(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  auto make = [&] {
    std::vector<double> v(dim * dim);
    for (auto& x : v) x = normal(rng);
    return Tensor({dim, dim}, std::move(v), true);
  };
  ProjectionWeights w;
  w.wq = make();
  w.wk = make();
  w.wv = make();
  w.bq = Tensor({dim}, 0.0, true);
  w.bk = Tensor({dim}, 0.0, true);
  w.bv = Tensor({dim}, 0.0, true);
  return w;
}

const char* to_string(InteractionKernel kernel) {
  return kernel == InteractionKernel::kSoftmax ? "softmax" : "kmeans";
}

InteractionKernel parse_kernel(const std::string& name) {
  if (name == "softmax") return InteractionKernel::kSoftmax;
  if (name == "kmeans") return InteractionKernel::kKMeans;
  throw ConfigError("unknown interaction kernel '" + name + "' (expected softmax|kmeans)");
}

KernelOutput cross_attention_softmax(const ClusterCenters& centers, const PixelFeatures& pixels,
                                     const ProjectionWeights& weights,
                                     const KernelOptions& options) {
  check_dims(centers, pixels, weights, "cross_attention_softmax");
  const std::size_t hw = head_width(centers.dim(), options.heads, "cross_attention_softmax");
  const Tensor q = project(centers.values, weights.wq, weights.bq);
  const Tensor k = project(pixels.values, weights.wk, weights.bk);
  const Tensor v = project(pixels.values, weights.wv, weights.bv);

  std::vector<Tensor> updates, logits, maps;
  for (std::size_t h = 0; h < options.heads; ++h) {
    Tensor lg = matmul(head_slice(q, options.heads, h, hw), transpose(head_slice(k, options.heads, h, hw)));
    Tensor attn = softmax(options.logit_scale == 1.0 ? lg : scale(lg, options.logit_scale), 1);
    updates.push_back(matmul(attn, head_slice(v, options.heads, h, hw)));
    logits.push_back(lg);
    maps.push_back(attn);
  }
  Tensor update = options.heads == 1 ? updates.front() : concat(updates, 1);
  Tensor out = options.residual ? add(centers.values, update) : update;
  return {{out}, {average(logits)}, average(maps), k};
}

KernelOutput cross_attention_kmeans(const ClusterCenters& centers, const PixelFeatures& pixels,
                                    const ProjectionWeights& weights,
                                    const KernelOptions& options) {
  check_dims(centers, pixels, weights, "cross_attention_kmeans");
  const std::size_t hw = head_width(centers.dim(), options.heads, "cross_attention_kmeans");
  const std::size_t n = centers.count();
  const Tensor q = project(centers.values, weights.wq, weights.bq);
  const Tensor k = project(pixels.values, weights.wk, weights.bk);
  const Tensor v = project(pixels.values, weights.wv, weights.bv);

  std::vector<Tensor> updates, logits, maps;
  for (std::size_t h = 0; h < options.heads; ++h) {
    Tensor lg = matmul(head_slice(q, options.heads, h, hw), transpose(head_slice(k, options.heads, h, hw)));
    Tensor assign = argmax_onehot(lg, 0);
    Tensor update = matmul(assign, head_slice(v, options.heads, h, hw));
    if (options.normalize) {
      std::vector<double> inv(n * hw, 0.0), keep(n * hw, 0.0);
      auto a = assign.data();
      const std::size_t pix = assign.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        double count = 0.0;
        for (std::size_t j = 0; j < pix; ++j) count += a[i * pix + j];
        for (std::size_t c = 0; c < hw; ++c) {
          inv[i * hw + c] = count > 0.0 ? 1.0 / count : 0.0;
          keep[i * hw + c] = count > 0.0 ? 0.0 : 1.0;
        }
      }
      update = mul(update, Tensor({n, hw}, std::move(inv)));
      if (!options.residual && options.keep_empty) {
        update = add(update, mul(head_slice(centers.values, options.heads, h, hw),
                                 Tensor({n, hw}, std::move(keep))));
      }
    }
    updates.push_back(update);
    logits.push_back(lg);
    maps.push_back(assign);
  }
  Tensor update = options.heads == 1 ? updates.front() : concat(updates, 1);
  Tensor out = options.residual ? add(centers.values, update) : update;
  return {{out}, {average(logits)}, detached_average(maps), k};
}

KernelOutput cross_attention(InteractionKernel kernel, const ClusterCenters& centers,
                             const PixelFeatures& pixels, const ProjectionWeights& weights,
                             const KernelOptions& options) {
  return kernel == InteractionKernel::kSoftmax
             ? cross_attention_softmax(centers, pixels, weights, options)
             : cross_attention_kmeans(centers, pixels, weights, options);
}

ClusterCenters self_attention(const ClusterCenters& centers, const ProjectionWeights& weights,
                              std::size_t heads, double logit_scale) {
  KernelOptions opts;
  opts.heads = heads;
  opts.logit_scale = logit_scale;
  PixelFeatures as_pixels{centers.values, centers.count(), 1};
  return cross_attention_softmax(centers, as_pixels, weights, opts).centers;
}

KMeansStep kmeans_step(const ClusterCenters& centers, const PixelFeatures& pixels, bool normalize) {
  if (centers.dim() != pixels.dim()) {
    throw DimensionError("kmeans_step: centers " + shape_to_string(centers.values.shape()) +
                         " vs pixels " + shape_to_string(pixels.values.shape()));
  }
  NoGradGuard no_grad;
  const std::size_t n = centers.count(), d = centers.dim(), m = pixels.values.dim(0);
  Tensor assign = argmax_onehot(matmul(centers.values, transpose(pixels.values)), 0);
  auto a = assign.data();
  auto p = pixels.values.data();
  auto c = centers.values.data();
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double count = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (a[i * m + j] == 0.0) continue;
      count += 1.0;
      for (std::size_t f = 0; f < d; ++f) out[i * d + f] += p[j * d + f];
    }
    if (!normalize) continue;
    if (count == 0.0) {
      std::copy_n(c.begin() + i * d, d, out.begin() + i * d);
    } else {
      const double inv = 1.0 / count;
      for (std::size_t f = 0; f < d; ++f) out[i * d + f] *= inv;
    }
  }
  return {{Tensor({n, d}, std::move(out))}, assign};
}

LloydStep lloyd_step(const Tensor& points, const Tensor& centers) {
  if (points.rank() != 2 || centers.rank() != 2 || points.dim(1) != centers.dim(1)) {
    throw DimensionError("lloyd_step: points " + shape_to_string(points.shape()) + " vs centers " +
                         shape_to_string(centers.shape()));
  }
  const std::size_t m = points.dim(0), d = points.dim(1), k = centers.dim(0);
  auto p = points.data();
  auto c = centers.data();
  LloydStep step;
  step.labels.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::size_t f = 0; f < d; ++f) {
        const double diff = p[i * d + f] - c[j * d + f];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        step.labels[i] = j;
      }
    }
    step.distortion += best;
  }
  std::vector<double> sums(k * d, 0.0);
  std::vector<double> counts(k, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    counts[step.labels[i]] += 1.0;
    for (std::size_t f = 0; f < d; ++f) sums[step.labels[i] * d + f] += p[i * d + f];
  }
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t f = 0; f < d; ++f) {
      sums[j * d + f] = counts[j] > 0.0 ? sums[j * d + f] / counts[j] : c[j * d + f];
    }
  }
  step.centers = Tensor({k, d}, std::move(sums));
  return step;
}

LloydResult lloyd_kmeans(const Tensor& points, std::size_t k, std::size_t max_iters,
                         std::uint64_t seed) {
  if (points.rank() != 2) throw ShapeError("lloyd_kmeans: points must be a matrix");
  const std::size_t m = points.dim(0), d = points.dim(1);
  if (k == 0 || k > m) {
    throw ArgumentError("lloyd_kmeans: k=" + std::to_string(k) + " must be in [1, " +
                        std::to_string(m) + "]");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<double> init(k * d);
  auto p = points.data();
  for (std::size_t i = 0; i < k; ++i) std::copy_n(p.begin() + order[i] * d, d, init.begin() + i * d);

  LloydResult result;
  result.centers = Tensor({k, d}, std::move(init));
  for (std::size_t it = 0; it < max_iters; ++it) {
    LloydStep step = lloyd_step(points, result.centers);
    result.distortion.push_back(step.distortion);
    ++result.iterations;
    const bool converged = it > 0 && step.labels == result.labels;
    result.labels = std::move(step.labels);
    if (converged) break;
    result.centers = step.centers;
  }
  return result;
}

}  // namespace kmax
