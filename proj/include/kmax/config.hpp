#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kmax/attention.hpp"

namespace kmax {

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t num_queries = 16;
  std::size_t num_classes = 4;  // excluding void
  std::size_t ffn_hidden = 256;
  // Encoder widths at strides 2, 4, 8, 16, 32.
  std::vector<std::size_t> encoder_channels{16, 32, 64, 64, 64};
  // Extra stride-1 residual 3x3 convs after each strided encoder conv.
  std::size_t encoder_depth = 0;
  // Decoder blocks at strides 32, 16, 8.
  std::vector<std::size_t> schedule{2, 2, 2};
  InteractionKernel kernel = InteractionKernel::kKMeans;
  // Cluster-mean center update; false gives the plain cluster sum.
  bool kmeans_normalize = true;
  std::size_t kernel_heads = 1;
  std::size_t self_attention_heads = 1;
  bool self_attention_first = true;
  bool share_class_head = false;
  // 1/sqrt(head width) temperature on softmax attention logits.
  bool scaled_softmax = true;
  // Same 1/sqrt(D) temperature on final and auxiliary mask logits.
  bool scaled_mask_logits = true;
  bool drop_query = false;
  // Appends normalized (x, y) coordinate planes to the encoder input.
  bool coord_channels = true;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  double lr = 2e-3;
  double warmup_fraction = 0.05;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  std::uint64_t seed = 7;
  double w_pq = 3.0;
  double w_sem = 1.0;
  double w_maskid = 0.3;
  // Pixel-wise instance discrimination is not implemented; must stay 0.
  double w_instance = 0.0;
  double void_weight = 0.1;
  bool aux_loss = true;
  bool flip = true;
  // Distinct training scenes cycled with per-epoch shuffling.
  std::size_t train_size = 4000;
  std::size_t log_every = 10;
  // 0 evaluates only after the final step.
  std::size_t val_every = 0;

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::uint64_t seed = 1;
  std::uint64_t val_seed = 1000003;
  std::size_t image_size = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 5;
  // Half-extent of a shape in pixels.
  std::size_t min_shape_size = 7;
  std::size_t max_shape_size = 14;
  double color_jitter = 0.1;
  double max_occlusion = 1.0;
  std::vector<std::string> thing_classes{"circle", "rectangle", "triangle"};
  std::vector<std::string> stuff_classes{"background"};
  std::size_t val_size = 48;
  std::size_t threads = 1;

  bool operator==(const DataConfig&) const = default;
};

struct InferConfig {
  double conf_thresh = 0.3;
  double overlap_thresh = 0.8;
  double mask_thresh = 0.5;

  bool operator==(const InferConfig&) const = default;
};

// Flat `key = value` text with [model] / [train] / [data] / [infer]
// sections. Unknown keys are errors.
struct Config {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  InferConfig infer;

  static Config parse(std::string_view text);
  static Config load(const std::string& path);
  std::string serialize() const;
  void save(const std::string& path) const;
  // Sets one dotted key, e.g. "train.lr".
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();
  void validate() const;

  bool operator==(const Config&) const = default;
};

}  // namespace kmax
