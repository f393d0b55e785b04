#include "kmax/decoder.hpp"

#include <cmath>
#include <numeric>

#include "kmax/ops.hpp"

namespace kmax {

Tensor LayerNormParams::apply(const Tensor& x) const { return layer_norm(x, gain, bias); }

LayerNormParams LayerNormParams::create(ParameterFactory& f, const std::string& name,
                                        std::size_t dim) {
  return {f.constant(name + ".gain", {dim}, 1.0), f.constant(name + ".bias", {dim}, 0.0)};
}

Tensor AffineParams::apply(const Tensor& x) const { return linear(x, weight, bias); }

AffineParams AffineParams::create(ParameterFactory& f, const std::string& name, std::size_t in,
                                  std::size_t out) {
  return {f.fan_in(name + ".weight", {in, out}), f.constant(name + ".bias", {out}, 0.0)};
}

namespace {

ProjectionWeights create_projection(ParameterFactory& f, const std::string& name, std::size_t dim) {
  ProjectionWeights w;
  w.wq = f.fan_in(name + ".wq", {dim, dim});
  w.bq = f.constant(name + ".bq", {dim}, 0.0);
  w.wk = f.fan_in(name + ".wk", {dim, dim});
  w.bk = f.constant(name + ".bk", {dim}, 0.0);
  w.wv = f.fan_in(name + ".wv", {dim, dim});
  w.bv = f.constant(name + ".bv", {dim}, 0.0);
  return w;
}

KMaxDecoderBlock create_body(const DecoderBlockConfig& config, ParameterFactory& f,
                             const std::string& prefix) {
  const std::size_t d = config.dim;
  KMaxDecoderBlock b;
  b.config = config;
  b.self_norm = LayerNormParams::create(f, prefix + ".self_norm", d);
  b.self_proj = create_projection(f, prefix + ".self_attention", d);
  b.query_norm = LayerNormParams::create(f, prefix + ".query_norm", d);
  b.pixel_norm = LayerNormParams::create(f, prefix + ".pixel_norm", d);
  b.kernel_proj = create_projection(f, prefix + ".kernel", d);
  b.ffn_norm = LayerNormParams::create(f, prefix + ".ffn_norm", d);
  b.ffn_in = AffineParams::create(f, prefix + ".ffn_in", d, config.ffn_hidden);
  b.ffn_out = AffineParams::create(f, prefix + ".ffn_out", config.ffn_hidden, d);
  return b;
}

double softmax_scale(const DecoderBlockConfig& c, std::size_t heads) {
  return c.scaled_softmax ? 1.0 / std::sqrt(static_cast<double>(c.dim / heads)) : 1.0;
}

}  // namespace

KMaxDecoderBlock KMaxDecoderBlock::create(const DecoderBlockConfig& config, ParameterFactory& f,
                                          const std::string& prefix) {
  KMaxDecoderBlock b = create_body(config, f, prefix);
  b.head_norm = LayerNormParams::create(f, prefix + ".head_norm", config.dim);
  b.class_head = AffineParams::create(f, prefix + ".class_head", config.dim, config.num_classes + 1);
  return b;
}

KMaxDecoderBlock KMaxDecoderBlock::create_sharing_head(const DecoderBlockConfig& config,
                                                       ParameterFactory& f,
                                                       const std::string& prefix,
                                                       const KMaxDecoderBlock& shared) {
  KMaxDecoderBlock b = create_body(config, f, prefix);
  b.head_norm = shared.head_norm;
  b.class_head = shared.class_head;
  return b;
}

KMaxDecoderBlock KMaxDecoderBlock::zeros(const DecoderBlockConfig& config) {
  const std::size_t d = config.dim, h = config.ffn_hidden, k = config.num_classes + 1;
  auto ln = [d] { return LayerNormParams{Tensor({d}), Tensor({d})}; };
  KMaxDecoderBlock b;
  b.config = config;
  b.self_norm = ln();
  b.self_proj = ProjectionWeights::zeros(d);
  b.query_norm = ln();
  b.pixel_norm = ln();
  b.kernel_proj = ProjectionWeights::zeros(d);
  b.ffn_norm = ln();
  b.ffn_in = {Tensor({d, h}), Tensor({h})};
  b.ffn_out = {Tensor({h, d}), Tensor({d})};
  b.head_norm = ln();
  b.class_head = {Tensor({d, k}), Tensor({k})};
  return b;
}

DecoderOutput decoder_forward(const KMaxDecoderBlock& block, const ClusterCenters& centers,
                              const PixelFeatures& pixels, std::size_t upsample,
                              std::size_t stage) {
  const DecoderBlockConfig& cfg = block.config;
  if (centers.dim() != cfg.dim || pixels.dim() != cfg.dim) {
    throw DimensionError("decoder_forward: block width " + std::to_string(cfg.dim) +
                         " vs centers " + shape_to_string(centers.values.shape()) + " / pixels " +
                         shape_to_string(pixels.values.shape()));
  }
  Tensor x = centers.values;

  auto self_attention_sublayer = [&] {
    const Tensor normed = block.self_norm.apply(x);
    KernelOptions opts;
    opts.residual = false;
    opts.heads = cfg.self_attention_heads;
    opts.logit_scale = softmax_scale(cfg, cfg.self_attention_heads);
    const PixelFeatures tokens{normed, normed.dim(0), 1};
    x = add(x, cross_attention_softmax({normed}, tokens, block.self_proj, opts).centers.values);
  };

  const PixelFeatures normed_pixels{block.pixel_norm.apply(pixels.values), pixels.height,
                                    pixels.width};
  KernelOutput kernel_out;
  auto interaction_sublayer = [&] {
    KernelOptions opts;
    opts.residual = false;
    opts.keep_empty = false;
    opts.normalize = cfg.kmeans_normalize;
    opts.heads = cfg.kernel_heads;
    opts.logit_scale = softmax_scale(cfg, cfg.kernel_heads);
    kernel_out = cross_attention(cfg.kernel, {block.query_norm.apply(x)}, normed_pixels,
                                 block.kernel_proj, opts);
    x = add(x, kernel_out.centers.values);
  };

  if (cfg.self_attention_first) {
    self_attention_sublayer();
    interaction_sublayer();
  } else {
    interaction_sublayer();
    self_attention_sublayer();
  }
  x = add(x, block.ffn_out.apply(gelu(block.ffn_in.apply(block.ffn_norm.apply(x)))));

  AuxiliaryPrediction aux;
  aux.stage = stage;
  aux.affinity = kernel_out.logits;
  aux.height = pixels.height;
  aux.width = pixels.width;
  aux.class_logits = block.class_head.apply(block.head_norm.apply(x));
  const Tensor mask_embed =
      linear(block.query_norm.apply(x), block.kernel_proj.wq, block.kernel_proj.bq);
  Tensor logits = matmul(kernel_out.keys, transpose(mask_embed));  // HW x N
  if (cfg.scaled_mask_logits) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
  if (upsample > 1) {
    const std::size_t n = logits.dim(1);
    logits = upsample_nearest(reshape(logits, {pixels.height, pixels.width, n}), upsample);
    logits = reshape(logits, {pixels.height * upsample * pixels.width * upsample, n});
  }
  aux.mask_logits = logits;
  return {{x}, std::move(aux)};
}

StackOutput stack_forward(const std::vector<KMaxDecoderBlock>& blocks, const ClusterCenters& c0,
                          const std::vector<PixelFeatures>& pyramid,
                          const std::vector<std::size_t>& schedule,
                          const std::vector<std::size_t>& upsample) {
  if (schedule.empty() || std::accumulate(schedule.begin(), schedule.end(), std::size_t{0}) == 0) {
    throw ConfigError("stack_forward: empty decoder schedule");
  }
  if (schedule.size() != pyramid.size() || upsample.size() != pyramid.size()) {
    throw ConfigError("stack_forward: schedule has " + std::to_string(schedule.size()) +
                      " stages but the pyramid has " + std::to_string(pyramid.size()));
  }
  const std::size_t total = std::accumulate(schedule.begin(), schedule.end(), std::size_t{0});
  if (total != blocks.size()) {
    throw ConfigError("stack_forward: schedule sums to " + std::to_string(total) + " but " +
                      std::to_string(blocks.size()) + " blocks were given");
  }
  StackOutput out{c0, {}};
  std::size_t index = 0;
  for (std::size_t level = 0; level < schedule.size(); ++level) {
    for (std::size_t r = 0; r < schedule[level]; ++r, ++index) {
      DecoderOutput step =
          decoder_forward(blocks[index], out.centers, pyramid[level], upsample[level], index);
      out.centers = step.centers;
      out.aux.push_back(std::move(step.aux));
    }
  }
  return out;
}

}  // namespace kmax
