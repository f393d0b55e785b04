#pragma once

#include <string>
#include <vector>

#include "kmax/attention.hpp"
#include "kmax/parameters.hpp"

namespace kmax {

struct LayerNormParams {
  Tensor gain, bias;

  Tensor apply(const Tensor& x) const;
  static LayerNormParams create(ParameterFactory& f, const std::string& name, std::size_t dim);
};

struct AffineParams {
  Tensor weight, bias;

  Tensor apply(const Tensor& x) const;
  static AffineParams create(ParameterFactory& f, const std::string& name, std::size_t in,
                             std::size_t out);
};

struct DecoderBlockConfig {
  InteractionKernel kernel = InteractionKernel::kKMeans;
  std::size_t dim = 64;
  std::size_t ffn_hidden = 256;
  std::size_t num_classes = 4;  // excluding void
  std::size_t kernel_heads = 1;
  std::size_t self_attention_heads = 1;
  bool kmeans_normalize = false;
  bool self_attention_first = true;
  bool scaled_softmax = true;
  bool scaled_mask_logits = true;
};

// Self-attention, pixel-cluster interaction and FFN sublayers (pre-norm,
// residual) plus the prediction heads used for deep supervision.
//
// The kernel's query projection doubles as the mask head: auxiliary mask
// logits are K^p (mask_head(norm(C')))^T, the same bilinear form whose
// argmax defines the k-means assignment. Supervising them is what trains
// the query/key projections of the k-means kernel.
struct KMaxDecoderBlock {
  DecoderBlockConfig config;
  LayerNormParams self_norm;
  ProjectionWeights self_proj;
  LayerNormParams query_norm;
  LayerNormParams pixel_norm;
  ProjectionWeights kernel_proj;
  LayerNormParams ffn_norm;
  AffineParams ffn_in;
  AffineParams ffn_out;
  LayerNormParams head_norm;
  AffineParams class_head;

  static KMaxDecoderBlock create(const DecoderBlockConfig& config, ParameterFactory& f,
                                 const std::string& prefix);
  // Same block with `class_head` / `head_norm` taken from `shared`.
  static KMaxDecoderBlock create_sharing_head(const DecoderBlockConfig& config,
                                              ParameterFactory& f, const std::string& prefix,
                                              const KMaxDecoderBlock& shared);
  // Block with every parameter zero (non-trainable); used by tests.
  static KMaxDecoderBlock zeros(const DecoderBlockConfig& config);
};

struct AuxiliaryPrediction {
  Tensor mask_logits;   // HW_sup x N at the supervision stride
  Tensor class_logits;  // N x (num_classes + 1)
  std::size_t stage = 0;
  // The kernel's N x HW_stage affinities and the stage's spatial size.
  AffinityLogits affinity;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct DecoderOutput {
  ClusterCenters centers;
  AuxiliaryPrediction aux;
};

// `upsample` is the integer factor from this stage's stride to the
// supervision stride (e.g. 8 for stride 32 -> 4).
DecoderOutput decoder_forward(const KMaxDecoderBlock& block, const ClusterCenters& centers,
                              const PixelFeatures& pixels, std::size_t upsample = 1,
                              std::size_t stage = 0);

struct StackOutput {
  ClusterCenters centers;
  std::vector<AuxiliaryPrediction> aux;
};

// Runs `blocks` in order; schedule[i] blocks consume pyramid[i] (strides
// 32, 16, 8). `upsample[i]` maps pyramid[i] to the supervision stride.
StackOutput stack_forward(const std::vector<KMaxDecoderBlock>& blocks, const ClusterCenters& c0,
                          const std::vector<PixelFeatures>& pyramid,
                          const std::vector<std::size_t>& schedule,
                          const std::vector<std::size_t>& upsample);

}  // namespace kmax
