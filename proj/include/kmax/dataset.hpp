#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kmax/config.hpp"
#include "kmax/panoptic.hpp"
#include "kmax/tensor.hpp"

namespace kmax {

// H x W x 3 image with values in [0, 1].
struct ImageTensor {
  Tensor values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

// Procedural scene description: shapes ('thing') over two background bands
// ('stuff').
struct SceneSpec {
  std::uint64_t seed = 1;
  std::size_t image_size = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 5;
  std::size_t min_shape_size = 7;
  std::size_t max_shape_size = 14;
  double color_jitter = 0.1;
  // Largest fraction of an earlier shape's visible area a later shape may
  // cover; 1 allows any occlusion.
  double max_occlusion = 1.0;
  std::vector<std::string> thing_classes{"circle", "rectangle", "triangle"};
  // One entry: every band is that class. Two entries: first labels flat
  // bands, second labels gradient bands.
  std::vector<std::string> stuff_classes{"background"};
  // Which band textures may be drawn ("flat", "gradient").
  std::vector<std::string> background_kinds{"flat", "gradient"};

  static SceneSpec from_config(const DataConfig& data, std::uint64_t seed);
  ClassTable class_table() const;
  void validate() const;
};

struct Sample {
  ImageTensor image;
  PanopticMap gt;
};

inline constexpr std::size_t kMinSegmentArea = 8;

// Pure function of (spec.seed, index).
Sample generate(const SceneSpec& spec, std::uint64_t index);

Sample flip_horizontal(const Sample& sample);
// Flips with probability 0.5.
Sample augment_flip(const Sample& sample, std::mt19937_64& rng);

// Writes `count` consecutive samples as <dir>/<index>.ppm + <index>.seg.txt.
void dump_dataset(const SceneSpec& spec, std::uint64_t first, std::size_t count,
                  const std::string& dir);

void write_ppm(const std::string& path, std::size_t height, std::size_t width,
               const std::vector<unsigned char>& rgb);
std::vector<unsigned char> image_to_rgb8(const ImageTensor& image);

std::string format_segment_map(const PanopticMap& map, const ClassTable& classes);
PanopticMap parse_segment_map(const std::string& text);

}  // namespace kmax
