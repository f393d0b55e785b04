#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "kmax/tensor.hpp"

namespace kmax {

// N x D object queries, viewed as cluster centers.
struct ClusterCenters {
  Tensor values;

  std::size_t count() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

// HW x D flattened pixel features at some output stride.
struct PixelFeatures {
  Tensor values;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return height * width; }
  std::size_t dim() const { return values.dim(1); }
  // Builds from an [H x W x D] map.
  static PixelFeatures from_map(const Tensor& map);
};

// N x HW pixel-cluster affinities (query-key products before normalization).
struct AffinityLogits {
  Tensor values;
};

// Query / key / value projections; biases are optional (undefined = none).
struct ProjectionWeights {
  Tensor wq, wk, wv;
  Tensor bq, bk, bv;

  std::size_t dim() const { return wq.dim(0); }
  static ProjectionWeights identity(std::size_t dim);
  static ProjectionWeights zeros(std::size_t dim);
  // N(0, 1/dim) weights, zero biases, all trainable.
  static ProjectionWeights random(std::size_t dim, std::mt19937_64& rng);
};

enum class InteractionKernel { kSoftmax, kKMeans };

const char* to_string(InteractionKernel kernel);
InteractionKernel parse_kernel(const std::string& name);

struct KernelOptions {
  bool residual = true;
  // k-means only: average assigned values instead of summing them.
  bool normalize = false;
  // Normalized, non-residual mode only: empty clusters keep their input
  // center (k-means convention) instead of producing a zero row.
  bool keep_empty = true;
  std::size_t heads = 1;
  // Multiplies logits before the spatial softmax (unused by argmax).
  double logit_scale = 1.0;
};

struct KernelOutput {
  ClusterCenters centers;
  AffinityLogits logits;
  // N x HW attention map actually used for the update (softmax rows or
  // one-hot pixel columns). Detached for the k-means kernel.
  Tensor attention;
  // HW x D projected pixel keys; decoders reuse them for mask logits.
  Tensor keys;
};

// C + softmax_HW(Q^c K^p^T) V^p.
KernelOutput cross_attention_softmax(const ClusterCenters& centers, const PixelFeatures& pixels,
                                     const ProjectionWeights& weights,
                                     const KernelOptions& options = {});

// C + argmax_N(Q^c K^p^T) V^p with the assignment detached from the graph.
KernelOutput cross_attention_kmeans(const ClusterCenters& centers, const PixelFeatures& pixels,
                                    const ProjectionWeights& weights,
                                    const KernelOptions& options = {});

// Dispatches on `kernel`.
KernelOutput cross_attention(InteractionKernel kernel, const ClusterCenters& centers,
                             const PixelFeatures& pixels, const ProjectionWeights& weights,
                             const KernelOptions& options = {});

// Standard softmax self-attention over the N queries, residual.
ClusterCenters self_attention(const ClusterCenters& centers, const ProjectionWeights& weights,
                              std::size_t heads = 1, double logit_scale = 1.0);

struct KMeansStep {
  ClusterCenters centers;
  Tensor assignment;  // N x HW one-hot columns
};

// Parameter-free, non-residual k-means update: A = argmax_N(C P^T).
// Literal mode: C' = A P (empty clusters become zero rows).
// Normalized mode: row means of assigned pixels (empty clusters keep C).
KMeansStep kmeans_step(const ClusterCenters& centers, const PixelFeatures& pixels,
                       bool normalize = false);

struct LloydResult {
  Tensor centers;                   // k x D
  std::vector<std::size_t> labels;  // per point
  std::vector<double> distortion;   // after each assignment step
  std::size_t iterations = 0;
};

struct LloydStep {
  std::vector<std::size_t> labels;
  Tensor centers;
  double distortion = 0.0;  // of the assignment, w.r.t. the input centers
};

// One Euclidean assignment + mean update; ties go to the lowest index and
// empty clusters retain their center.
LloydStep lloyd_step(const Tensor& points, const Tensor& centers);

// Classic Lloyd iteration from k distinct seeded points.
LloydResult lloyd_kmeans(const Tensor& points, std::size_t k, std::size_t max_iters,
                         std::uint64_t seed);

}  // namespace kmax
