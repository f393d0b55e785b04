#pragma once

#include <array>
#include <string>
#include <vector>

#include "kmax/inference.hpp"
#include "kmax/model.hpp"

namespace kmax {

using Rgb = std::array<unsigned char, 3>;

// Fixed palette: golden-angle hue steps, deterministic in `index`.
Rgb cluster_color(std::size_t index);

// Nearest-neighbour upscaled RGB8 rendering of a label grid; label -1 is
// black.
std::vector<unsigned char> render_labels(const std::vector<int>& labels, std::size_t height,
                                         std::size_t width, std::size_t out_height,
                                         std::size_t out_width);

// argmax over clusters of an N x HW affinity map.
std::vector<int> assignment_labels(const AffinityLogits& affinity);

// Writes stage_<k>.ppm for every decoder block (k = 1..) and panoptic.ppm.
// Returns the written paths.
std::vector<std::string> write_visualizations(const KMaxModel& model, const ImageTensor& image,
                                              const ClassTable& classes,
                                              const MergeOptions& options,
                                              const std::string& out_dir);

}  // namespace kmax
