#include "kmax/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kmax/ops.hpp"

namespace kmax {

namespace {

constexpr std::size_t kImageChannels = 3;
constexpr std::size_t kCoordChannels = 2;

std::size_t input_channels(const ModelConfig& c) {
  return kImageChannels + (c.coord_channels ? kCoordChannels : 0);
}

DecoderBlockConfig block_config(const ModelConfig& c) {
  DecoderBlockConfig b;
  b.kernel = c.kernel;
  b.dim = c.dim;
  b.ffn_hidden = c.ffn_hidden;
  b.num_classes = c.num_classes;
  b.kernel_heads = c.kernel_heads;
  b.self_attention_heads = c.self_attention_heads;
  b.kmeans_normalize = c.kmeans_normalize;
  b.self_attention_first = c.self_attention_first;
  b.scaled_softmax = c.scaled_softmax;
  b.scaled_mask_logits = c.scaled_mask_logits;
  return b;
}

// Applies a per-pixel affine map to an [H x W x C] map.
Tensor pixelwise(const AffineParams& p, const Tensor& map) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  Tensor flat = reshape(map, {h * w, map.dim(2)});
  Tensor out = p.apply(flat);
  return reshape(out, {h, w, out.dim(1)});
}

Tensor conv_bias(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride) {
  return add_rowwise(conv3x3(x, w, stride), b);
}

Tensor coordinate_planes(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w * 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      v[(y * w + x) * 2 + 0] = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
      v[(y * w + x) * 2 + 1] = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
    }
  return Tensor({h, w, 2}, std::move(v));
}

}  // namespace

std::vector<PixelFeatures> FeaturePyramid::decoder_levels() const {
  return {PixelFeatures::from_map(stride32), PixelFeatures::from_map(stride16),
          PixelFeatures::from_map(stride8)};
}

KMaxModel::KMaxModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  const std::size_t d = config.dim;
  const auto& ch = config.encoder_channels;
  if (ch.size() != 5) throw ConfigError("model.encoder_channels needs 5 widths");
  if (config.schedule.size() != 3) throw ConfigError("model.schedule needs 3 entries");
  ParameterFactory f(params_, seed);

  std::size_t in = input_channels(config);
  for (std::size_t i = 0; i < ch.size(); ++i) {
    const std::string name = "encoder.conv" + std::to_string(i);
    pixel.encoder_weights.push_back(f.fan_in(name + ".weight", {3, 3, in, ch[i]}));
    pixel.encoder_biases.push_back(f.constant(name + ".bias", {ch[i]}, 0.0));
    for (std::size_t r = 0; r < config.encoder_depth; ++r) {
      const std::string res = name + ".res" + std::to_string(r);
      pixel.encoder_res_weights.push_back(f.fan_in(res + ".weight", {3, 3, ch[i], ch[i]}));
      pixel.encoder_res_biases.push_back(f.constant(res + ".bias", {ch[i]}, 0.0));
    }
    in = ch[i];
  }
  pixel.lateral32 = AffineParams::create(f, "pixel_decoder.lateral32", ch[4], d);
  pixel.attn_norm = LayerNormParams::create(f, "pixel_decoder.attn_norm", d);
  pixel.attn.wq = f.fan_in("pixel_decoder.attn.wq", {d, d});
  pixel.attn.bq = f.constant("pixel_decoder.attn.bq", {d}, 0.0);
  pixel.attn.wk = f.fan_in("pixel_decoder.attn.wk", {d, d});
  pixel.attn.bk = f.constant("pixel_decoder.attn.bk", {d}, 0.0);
  pixel.attn.wv = f.fan_in("pixel_decoder.attn.wv", {d, d});
  pixel.attn.bv = f.constant("pixel_decoder.attn.bv", {d}, 0.0);
  pixel.attn_ffn_norm = LayerNormParams::create(f, "pixel_decoder.attn_ffn_norm", d);
  pixel.attn_ffn_in = AffineParams::create(f, "pixel_decoder.attn_ffn_in", d, config.ffn_hidden);
  pixel.attn_ffn_out = AffineParams::create(f, "pixel_decoder.attn_ffn_out", config.ffn_hidden, d);
  pixel.lateral16 = AffineParams::create(f, "pixel_decoder.lateral16", ch[3], d);
  pixel.refine16_norm = LayerNormParams::create(f, "pixel_decoder.refine16_norm", d);
  pixel.refine16_weight = f.fan_in("pixel_decoder.refine16.weight", {3, 3, d, d});
  pixel.refine16_bias = f.constant("pixel_decoder.refine16.bias", {d}, 0.0);
  pixel.lateral8 = AffineParams::create(f, "pixel_decoder.lateral8", ch[2], d);
  pixel.refine8_norm = LayerNormParams::create(f, "pixel_decoder.refine8_norm", d);
  pixel.refine8_weight = f.fan_in("pixel_decoder.refine8.weight", {3, 3, d, d});
  pixel.refine8_bias = f.constant("pixel_decoder.refine8.bias", {d}, 0.0);
  pixel.lateral4 = AffineParams::create(f, "pixel_decoder.lateral4", ch[1], d);
  pixel.refine4_norm = LayerNormParams::create(f, "pixel_decoder.refine4_norm", d);
  pixel.refine4_in = AffineParams::create(f, "pixel_decoder.refine4_in", d, d);
  pixel.refine4_out = AffineParams::create(f, "pixel_decoder.refine4_out", d, d);

  queries = f.normal("queries", {config.num_queries, d}, 1.0 / std::sqrt(static_cast<double>(d)));

  const DecoderBlockConfig bc = block_config(config);
  const std::size_t total = std::accumulate(config.schedule.begin(), config.schedule.end(), std::size_t{0});
  for (std::size_t i = 0; i < total; ++i) {
    const std::string prefix = "decoder" + std::to_string(i);
    if (config.share_class_head && i > 0) {
      blocks.push_back(KMaxDecoderBlock::create_sharing_head(bc, f, prefix, blocks.front()));
    } else {
      blocks.push_back(KMaxDecoderBlock::create(bc, f, prefix));
    }
  }

  final_query_norm = LayerNormParams::create(f, "head.query_norm", d);
  final_mask_head = AffineParams::create(f, "head.mask", d, d);
  if (config.share_class_head && !blocks.empty()) {
    final_class_head = blocks.front().class_head;
  } else {
    final_class_head = AffineParams::create(f, "head.class", d, config.num_classes + 1);
  }
  final_pixel_norm = LayerNormParams::create(f, "head.pixel_norm", d);
  semantic_head = AffineParams::create(f, "head.semantic", d, config.num_classes + 1);
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.dim, h = c.ffn_hidden, k = c.num_classes + 1;
  const auto& ch = c.encoder_channels;
  const std::size_t ln = 2 * d;
  const std::size_t proj = 3 * (d * d + d);
  std::size_t n = 0;
  std::size_t in = input_channels(c);
  for (auto out : ch) {
    n += 9 * in * out + out + c.encoder_depth * (9 * out * out + out);
    in = out;
  }
  n += (ch[4] + ch[3] + ch[2] + ch[1]) * d + 4 * d;        // laterals
  n += ln + proj + ln + (d * h + h) + (h * d + d);         // stride-32 attention block
  n += 2 * (ln + 9 * d * d + d);                           // refine16 / refine8
  n += ln + 2 * (d * d + d);                               // refine4
  n += c.num_queries * d;                                  // queries
  const std::size_t blocks = std::accumulate(c.schedule.begin(), c.schedule.end(), std::size_t{0});
  const std::size_t body = ln + proj + 2 * ln + proj + ln + (d * h + h) + (h * d + d);
  const std::size_t head = ln + d * k + k;
  n += blocks * body + (c.share_class_head ? head : blocks * head);
  n += ln + (d * d + d);                                   // final query norm + mask head
  n += c.share_class_head ? 0 : d * k + k;                 // final class head
  n += ln + d * k + k;                                     // pixel norm + semantic head
  return n;
}

FeaturePyramid pixel_path(const ImageTensor& image, const KMaxModel& model) {
  const Tensor& img = image.values;
  if (img.rank() != 3 || img.dim(2) != kImageChannels) {
    throw ShapeError("pixel_path: image must be [H x W x 3], got " + shape_to_string(img.shape()));
  }
  if (img.dim(0) % 32 != 0 || img.dim(1) % 32 != 0) {
    throw ShapeError("pixel_path: image " + shape_to_string(img.shape()) +
                     " is not a multiple of 32 in both dimensions");
  }
  const PixelPathParams& p = model.pixel;
  const ModelConfig& cfg = model.config();

  Tensor x = cfg.coord_channels ? concat({img, coordinate_planes(img.dim(0), img.dim(1))}, 2) : img;
  std::vector<Tensor> enc;
  for (std::size_t i = 0; i < p.encoder_weights.size(); ++i) {
    x = gelu(conv_bias(x, p.encoder_weights[i], p.encoder_biases[i], 2));
    for (std::size_t r = 0; r < cfg.encoder_depth; ++r) {
      const std::size_t j = i * cfg.encoder_depth + r;
      x = add(x, gelu(conv_bias(x, p.encoder_res_weights[j], p.encoder_res_biases[j], 1)));
    }
    enc.push_back(x);
  }
  // enc[i] is at stride 2^(i+1).

  FeaturePyramid out;
  Tensor s32 = pixelwise(p.lateral32, enc[4]);
  {
    const std::size_t h = s32.dim(0), w = s32.dim(1), d = s32.dim(2);
    Tensor tokens = reshape(s32, {h * w, d});
    const Tensor normed = p.attn_norm.apply(tokens);
    KernelOptions opts;
    opts.residual = false;
    opts.logit_scale = cfg.scaled_softmax ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
    tokens = add(tokens, cross_attention_softmax({normed}, {normed, h * w, 1}, p.attn, opts).centers.values);
    tokens = add(tokens, p.attn_ffn_out.apply(gelu(p.attn_ffn_in.apply(p.attn_ffn_norm.apply(tokens)))));
    out.stride32 = reshape(tokens, {h, w, d});
  }

  Tensor s16 = add(upsample2x(out.stride32), pixelwise(p.lateral16, enc[3]));
  out.stride16 = add(s16, conv_bias(gelu(p.refine16_norm.apply(s16)), p.refine16_weight, p.refine16_bias, 1));

  Tensor s8 = add(upsample2x(out.stride16), pixelwise(p.lateral8, enc[2]));
  out.stride8 = add(s8, conv_bias(gelu(p.refine8_norm.apply(s8)), p.refine8_weight, p.refine8_bias, 1));

  Tensor s4 = add(upsample2x(out.stride8), pixelwise(p.lateral4, enc[1]));
  out.stride4 = add(s4, pixelwise(p.refine4_out, gelu(pixelwise(p.refine4_in, p.refine4_norm.apply(s4)))));
  return out;
}

Tensor predict_masks(const PixelFeatures& features, const ClusterCenters& centers) {
  if (features.dim() != centers.dim()) {
    throw DimensionError("predict_masks: features " + shape_to_string(features.values.shape()) +
                         " vs centers " + shape_to_string(centers.values.shape()));
  }
  return softmax(matmul(features.values, transpose(centers.values)), 1);
}

ModelOutput model_forward(const KMaxModel& model, const ImageTensor& image, bool train_mode,
                          std::mt19937_64* rng) {
  const ModelConfig& cfg = model.config();
  const FeaturePyramid pyramid = pixel_path(image, model);

  ModelOutput out;
  out.kept_queries.resize(cfg.num_queries);
  std::iota(out.kept_queries.begin(), out.kept_queries.end(), 0);
  Tensor c0 = model.queries;
  if (train_mode && cfg.drop_query) {
    if (!rng) throw ContractError("model_forward: drop_query needs an rng in train mode");
    std::vector<std::size_t> order = out.kept_queries;
    std::shuffle(order.begin(), order.end(), *rng);
    order.resize(cfg.num_queries / 2);
    std::sort(order.begin(), order.end());
    out.kept_queries = order;
    c0 = select_rows(model.queries, out.kept_queries);
  }

  const std::size_t h4 = pyramid.stride4.dim(0), w4 = pyramid.stride4.dim(1);
  const std::vector<std::size_t> upsample{h4 / pyramid.stride32.dim(0), h4 / pyramid.stride16.dim(0),
                                          h4 / pyramid.stride8.dim(0)};
  StackOutput stack = stack_forward(model.blocks, {c0}, pyramid.decoder_levels(), cfg.schedule, upsample);

  const PixelFeatures f = pyramid.mask_features();
  const Tensor pixels = model.final_pixel_norm.apply(f.values);
  const Tensor normed_centers = model.final_query_norm.apply(stack.centers.values);
  const Tensor mask_embed = model.final_mask_head.apply(normed_centers);
  out.final.mask_logits = matmul(pixels, transpose(mask_embed));
  if (cfg.scaled_mask_logits) {
    out.final.mask_logits = scale(out.final.mask_logits, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
  }
  out.final.class_logits = model.final_class_head.apply(normed_centers);
  out.final.height = h4;
  out.final.width = w4;
  out.semantic_logits = model.semantic_head.apply(pixels);
  out.aux = std::move(stack.aux);
  out.mask_height = h4;
  out.mask_width = w4;
  return out;
}

}  // namespace kmax
