#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "kmax/config.hpp"
#include "kmax/dataset.hpp"
#include "kmax/decoder.hpp"
#include "kmax/panoptic.hpp"
#include "kmax/parameters.hpp"

namespace kmax {

// Decoder-stage features at strides 32/16/8 and the stride-4 mask features,
// all D channels wide, each stored as [H x W x D].
struct FeaturePyramid {
  Tensor stride32;
  Tensor stride16;
  Tensor stride8;
  Tensor stride4;

  // The three decoder levels in consumption order (32, 16, 8).
  std::vector<PixelFeatures> decoder_levels() const;
  PixelFeatures mask_features() const { return PixelFeatures::from_map(stride4); }
};

struct PixelPathParams {
  std::vector<Tensor> encoder_weights;  // 5 strided 3x3 convolutions
  std::vector<Tensor> encoder_biases;
  // encoder_depth residual convs per stage, stage-major.
  std::vector<Tensor> encoder_res_weights, encoder_res_biases;
  AffineParams lateral32, lateral16, lateral8, lateral4;
  // Stride-32 enhancement: one pre-norm self-attention + FFN block.
  LayerNormParams attn_norm;
  ProjectionWeights attn;
  LayerNormParams attn_ffn_norm;
  AffineParams attn_ffn_in, attn_ffn_out;
  // Residual 3x3 conv refinements at strides 16 and 8.
  LayerNormParams refine16_norm, refine8_norm;
  Tensor refine16_weight, refine16_bias, refine8_weight, refine8_bias;
  // Residual per-pixel MLP at stride 4.
  LayerNormParams refine4_norm;
  AffineParams refine4_in, refine4_out;
};

// Parameters are registered in `params` in a fixed order; the count is a
// pure function of the config (see expected_parameter_count).
class KMaxModel {
 public:
  KMaxModel(const ModelConfig& config, std::uint64_t seed);
  KMaxModel(const KMaxModel&) = delete;
  KMaxModel& operator=(const KMaxModel&) = delete;
  KMaxModel(KMaxModel&&) = default;
  KMaxModel& operator=(KMaxModel&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  PixelPathParams pixel;
  Tensor queries;  // N x D
  std::vector<KMaxDecoderBlock> blocks;
  LayerNormParams final_query_norm;
  AffineParams final_mask_head;
  AffineParams final_class_head;
  LayerNormParams final_pixel_norm;
  AffineParams semantic_head;

 private:
  ModelConfig config_;
  ParameterSet params_;
};

std::size_t expected_parameter_count(const ModelConfig& config);

// Strided conv encoder to stride 32, then upsampling decoder with skip
// additions back to stride 4. Throws ShapeError unless H and W are
// multiples of 32.
FeaturePyramid pixel_path(const ImageTensor& image, const KMaxModel& model);

// softmax over N of F C^T; rows sum to 1.
Tensor predict_masks(const PixelFeatures& features, const ClusterCenters& centers);

struct ModelOutput {
  PredictionLogits final;
  std::vector<AuxiliaryPrediction> aux;
  Tensor semantic_logits;  // HW_4 x (num_classes + 1)
  std::vector<std::size_t> kept_queries;
  std::size_t mask_height = 0;
  std::size_t mask_width = 0;
};

// In train mode with drop_query enabled, a random half of the queries
// (drawn from `rng`) takes part in the pass. Eval mode ignores `rng`.
ModelOutput model_forward(const KMaxModel& model, const ImageTensor& image, bool train_mode,
                          std::mt19937_64* rng = nullptr);

// Checkpoint container: "KMAXCKPT1" manifest (config + parameter table),
// then raw little-endian float64 data.
void save_checkpoint(const std::string& path, const Config& config, const KMaxModel& model);

struct LoadedCheckpoint {
  Config config;
  KMaxModel model;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace kmax
