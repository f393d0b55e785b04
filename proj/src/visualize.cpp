#include "kmax/visualize.hpp"

#include <cmath>
#include <filesystem>

#include "kmax/dataset.hpp"

namespace kmax {

Rgb cluster_color(std::size_t index) {
  const double hue = std::fmod(static_cast<double>(index) * 137.50776405, 360.0) / 60.0;
  const double sat = index % 2 ? 0.65 : 0.9;
  const double val = index % 3 == 2 ? 0.7 : 0.95;
  const double c = val * sat;
  const double x = c * (1.0 - std::fabs(std::fmod(hue, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hue)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = val - c;
  auto byte = [m](double v) { return static_cast<unsigned char>(std::lround((v + m) * 255.0)); };
  return {byte(r), byte(g), byte(b)};
}

std::vector<unsigned char> render_labels(const std::vector<int>& labels, std::size_t height,
                                         std::size_t width, std::size_t out_height,
                                         std::size_t out_width) {
  if (labels.size() != height * width) {
    throw ShapeError("render_labels: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<unsigned char> rgb(out_height * out_width * 3, 0);
  for (std::size_t y = 0; y < out_height; ++y) {
    for (std::size_t x = 0; x < out_width; ++x) {
      const int l = labels[(y * height / out_height) * width + x * width / out_width];
      if (l < 0) continue;
      const Rgb c = cluster_color(static_cast<std::size_t>(l));
      std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>((y * out_width + x) * 3));
    }
  }
  return rgb;
}

std::vector<int> assignment_labels(const AffinityLogits& affinity) {
  const Tensor& a = affinity.values;
  const std::size_t n = a.dim(0), hw = a.dim(1);
  const auto d = a.data();
  std::vector<int> labels(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t q = 1; q < n; ++q) {
      if (d[q * hw + p] > d[static_cast<std::size_t>(labels[p]) * hw + p]) labels[p] = static_cast<int>(q);
    }
  }
  return labels;
}

std::vector<std::string> write_visualizations(const KMaxModel& model, const ImageTensor& image,
                                              const ClassTable& classes,
                                              const MergeOptions& options,
                                              const std::string& out_dir) {
  NoGradGuard no_grad;
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  const std::size_t h = image.height(), w = image.width();
  std::vector<std::string> written;

  const ModelOutput out = model_forward(model, image, false);
  for (const auto& aux : out.aux) {
    const auto rgb = render_labels(assignment_labels(aux.affinity), aux.height, aux.width, h, w);
    const std::string path = (dir / ("stage_" + std::to_string(aux.stage + 1) + ".ppm")).string();
    write_ppm(path, h, w, rgb);
    written.push_back(path);
  }

  const PanopticResult result = predict_panoptic(model, image, classes, options);
  const auto index = result.map.segment_index(result.segments);
  const std::string path = (dir / "panoptic.ppm").string();
  write_ppm(path, h, w, render_labels(index, h, w, h, w));
  written.push_back(path);
  return written;
}

}  // namespace kmax
