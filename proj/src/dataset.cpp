#include "kmax/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace kmax {

namespace {

using Color = std::array<double, 3>;

constexpr int kMaxAttempts = 200;
constexpr std::size_t kPlacementTries = 20;

// Saturated base colours per shape kind; backgrounds stay in the muted mid-range.
Color base_color(const std::string& kind) {
  if (kind == "circle") return {0.85, 0.25, 0.20};
  if (kind == "rectangle") return {0.20, 0.75, 0.30};
  return {0.25, 0.35, 0.85};
}

bool inside_shape(const std::string& kind, double px, double py, double cx, double cy,
                  double hx, double hy) {
  const double dx = px - cx, dy = py - cy;
  if (kind == "circle") return dx * dx + dy * dy <= hx * hx;
  if (kind == "rectangle") return std::abs(dx) <= hx && std::abs(dy) <= hy;
  // Upward isosceles triangle inscribed in the [-hx,hx] x [-hy,hy] box.
  if (dy < -hy || dy > hy) return false;
  const double t = (dy + hy) / (2.0 * hy);  // 0 at apex, 1 at base
  return std::abs(dx) <= t * hx;
}

Sample render_attempt(const SceneSpec& spec, std::mt19937_64& rng) {
  const std::size_t n = spec.image_size;
  const std::size_t things = spec.thing_classes.size();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> muted(0.3, 0.7);

  std::vector<double> rgb(n * n * 3);
  PanopticMap gt = PanopticMap::filled(n, n);

  // Two bands split horizontally or vertically.
  const bool horizontal = unit(rng) < 0.5;
  std::uniform_int_distribution<std::size_t> split_dist(n / 4, 3 * n / 4);
  const std::size_t split = split_dist(rng);
  std::uniform_int_distribution<std::size_t> kind_dist(0, spec.background_kinds.size() - 1);
  for (int band = 0; band < 2; ++band) {
    const std::string& kind = spec.background_kinds[kind_dist(rng)];
    const Color c0{muted(rng), muted(rng), muted(rng)};
    Color c1 = c0;
    const bool gradient = kind == "gradient";
    if (gradient) {
      for (auto& v : c1) v = std::clamp(v + (unit(rng) < 0.5 ? -0.25 : 0.25), 0.0, 1.0);
    }
    int stuff_class = static_cast<int>(things);
    if (spec.stuff_classes.size() == 2) stuff_class += gradient ? 1 : 0;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t along = horizontal ? y : x;
        if ((band == 0) != (along < split)) continue;
        // Ramp runs across the band direction so both bands show the texture.
        const double t = static_cast<double>(horizontal ? x : y) / static_cast<double>(n - 1);
        for (int c = 0; c < 3; ++c) rgb[(y * n + x) * 3 + c] = c0[c] + t * (c1[c] - c0[c]);
        gt.class_ids[y * n + x] = stuff_class;
      }
    }
  }

  std::uniform_int_distribution<std::size_t> count_dist(spec.min_shapes, spec.max_shapes);
  std::uniform_int_distribution<std::size_t> thing_dist(0, things - 1);
  std::uniform_int_distribution<std::size_t> size_dist(spec.min_shape_size, spec.max_shape_size);
  std::uniform_real_distribution<double> jitter(-spec.color_jitter, spec.color_jitter);
  const std::size_t count = count_dist(rng);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t cls = thing_dist(rng);
    const std::string& kind = spec.thing_classes[cls];
    const double hx = static_cast<double>(size_dist(rng));
    double hy = hx;
    if (kind != "circle") hy = std::max(static_cast<double>(spec.min_shape_size), std::round(hx * (0.6 + 0.4 * unit(rng))));
    std::uniform_real_distribution<double> cx_dist(hx, static_cast<double>(n - 1) - hx);
    std::uniform_real_distribution<double> cy_dist(hy, static_cast<double>(n - 1) - hy);
    Color color = base_color(kind);
    for (auto& v : color) v = std::clamp(v + jitter(rng), 0.0, 1.0);

    // Re-draw the position until no earlier shape loses more than
    // max_occlusion of its visible area; give up on the shape otherwise.
    std::vector<std::size_t> cover;
    bool placed = false;
    for (std::size_t tries = 0; tries < kPlacementTries && !placed; ++tries) {
      const double cx = cx_dist(rng), cy = cy_dist(rng);
      cover.clear();
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          if (inside_shape(kind, static_cast<double>(x), static_cast<double>(y), cx, cy, hx, hy))
            cover.push_back(y * n + x);
      placed = spec.max_occlusion >= 1.0;
      if (placed) break;
      std::vector<std::size_t> visible(s + 1, 0), hidden(s + 1, 0);
      for (std::size_t i = 0; i < n * n; ++i)
        if (gt.instance_ids[i] > 0) ++visible[static_cast<std::size_t>(gt.instance_ids[i] - 1)];
      for (std::size_t i : cover)
        if (gt.instance_ids[i] > 0) ++hidden[static_cast<std::size_t>(gt.instance_ids[i] - 1)];
      placed = true;
      for (std::size_t e = 0; e < s; ++e)
        if (visible[e] > 0 &&
            static_cast<double>(hidden[e]) > spec.max_occlusion * static_cast<double>(visible[e]))
          placed = false;
    }
    if (!placed) continue;
    for (std::size_t i : cover) {
      for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = color[c];
      gt.class_ids[i] = static_cast<int>(cls);
      gt.instance_ids[i] = static_cast<int>(s + 1);
    }
  }
  return {{Tensor({n, n, 3}, std::move(rgb))}, std::move(gt)};
}

}  // namespace

SceneSpec SceneSpec::from_config(const DataConfig& data, std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  s.image_size = data.image_size;
  s.min_shapes = data.min_shapes;
  s.max_shapes = data.max_shapes;
  s.min_shape_size = data.min_shape_size;
  s.max_shape_size = data.max_shape_size;
  s.color_jitter = data.color_jitter;
  s.max_occlusion = data.max_occlusion;
  s.thing_classes = data.thing_classes;
  s.stuff_classes = data.stuff_classes;
  return s;
}

ClassTable SceneSpec::class_table() const {
  ClassTable t;
  for (const auto& c : thing_classes) t.push_back({c, true});
  for (const auto& c : stuff_classes) t.push_back({c, false});
  return t;
}

void SceneSpec::validate() const {
  if (image_size < 4) throw SpecError("image_size too small");
  if (thing_classes.empty()) throw SpecError("no thing classes");
  if (stuff_classes.empty() || stuff_classes.size() > 2) throw SpecError("need 1 or 2 stuff classes");
  if (background_kinds.empty()) throw SpecError("no background kinds");
  for (const auto& k : background_kinds)
    if (k != "flat" && k != "gradient") throw SpecError("unknown background kind '" + k + "'");
  for (const auto& k : thing_classes)
    if (k != "circle" && k != "rectangle" && k != "triangle") throw SpecError("unknown shape '" + k + "'");
  if (min_shapes == 0 || min_shapes > max_shapes) throw SpecError("invalid shape count range");
  if (min_shape_size == 0 || min_shape_size > max_shape_size) throw SpecError("invalid shape size range");
  if (!(max_occlusion >= 0.0 && max_occlusion <= 1.0)) throw SpecError("max_occlusion must lie in [0, 1]");
  if (2 * max_shape_size + 1 > image_size) {
    throw SpecError("shape extent " + std::to_string(2 * max_shape_size + 1) +
                    " does not fit in a " + std::to_string(image_size) + " pixel image");
  }
}

Sample generate(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      static_cast<std::uint32_t>(attempt)};
    std::mt19937_64 rng(seq);
    Sample s = render_attempt(spec, rng);
    const auto segs = s.gt.segments();
    const bool ok = std::all_of(segs.begin(), segs.end(),
                                [](const Segment& seg) { return seg.area >= kMinSegmentArea; });
    if (ok) return s;
  }
  throw SpecError("could not sample a scene with all segments >= " + std::to_string(kMinSegmentArea) +
                  " pixels");
}

Sample flip_horizontal(const Sample& sample) {
  const std::size_t h = sample.image.height(), w = sample.image.width();
  auto src = sample.image.values.data();
  std::vector<double> rgb(src.size());
  PanopticMap gt = sample.gt;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t from = y * w + (w - 1 - x), to = y * w + x;
      for (int c = 0; c < 3; ++c) rgb[to * 3 + c] = src[from * 3 + c];
      gt.class_ids[to] = sample.gt.class_ids[from];
      gt.instance_ids[to] = sample.gt.instance_ids[from];
    }
  return {{Tensor({h, w, 3}, std::move(rgb))}, std::move(gt)};
}

Sample augment_flip(const Sample& sample, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  return coin(rng) ? flip_horizontal(sample) : sample;
}

std::vector<unsigned char> image_to_rgb8(const ImageTensor& image) {
  std::vector<unsigned char> out;
  out.reserve(image.values.numel());
  for (double v : image.values.data()) {
    out.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

void write_ppm(const std::string& path, std::size_t height, std::size_t width,
               const std::vector<unsigned char>& rgb) {
  if (rgb.size() != height * width * 3) throw ShapeError("write_ppm: buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

std::string format_segment_map(const PanopticMap& map, const ClassTable& classes) {
  std::ostringstream os;
  os << "kmax-segments 1\n";
  os << "size " << map.width << ' ' << map.height << '\n';
  for (std::size_t c = 0; c < classes.size(); ++c) {
    os << "class " << c << ' ' << classes[c].name << ' ' << (classes[c].is_thing ? "thing" : "stuff") << '\n';
  }
  const auto segs = map.segments();
  for (std::size_t s = 0; s < segs.size(); ++s) {
    os << "segment " << s << ' ' << segs[s].class_id << ' ' << segs[s].instance_id << ' '
       << segs[s].area << '\n';
  }
  os << "map\n";
  const auto index = map.segment_index(segs);
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) os << (x ? " " : "") << index[y * map.width + x];
    os << '\n';
  }
  return os.str();
}

PanopticMap parse_segment_map(const std::string& text) {
  std::istringstream in(text);
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "kmax-segments" || version != 1) {
    throw IoError("segment map: bad header");
  }
  PanopticMap map;
  std::map<int, std::pair<int, int>> segs;
  while (in >> tag) {
    if (tag == "size") {
      in >> map.width >> map.height;
    } else if (tag == "class") {
      std::string name, kind;
      int id = 0;
      in >> id >> name >> kind;
    } else if (tag == "segment") {
      int id = 0, cls = 0, inst = 0;
      std::size_t area = 0;
      in >> id >> cls >> inst >> area;
      segs[id] = {cls, inst};
    } else if (tag == "map") {
      break;
    } else {
      throw IoError("segment map: unexpected token '" + tag + "'");
    }
  }
  map = PanopticMap::filled(map.height, map.width);
  for (std::size_t i = 0; i < map.pixels(); ++i) {
    int id = 0;
    if (!(in >> id)) throw IoError("segment map: truncated pixel grid");
    if (id < 0) continue;
    auto it = segs.find(id);
    if (it == segs.end()) throw IoError("segment map: unknown segment id " + std::to_string(id));
    map.class_ids[i] = it->second.first;
    map.instance_ids[i] = it->second.second;
  }
  return map;
}

void dump_dataset(const SceneSpec& spec, std::uint64_t first, std::size_t count,
                  const std::string& dir) {
  std::filesystem::create_directories(dir);
  const ClassTable classes = spec.class_table();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = first + i;
    const Sample s = generate(spec, index);
    const std::string stem = dir + "/" + std::to_string(index);
    write_ppm(stem + ".ppm", s.image.height(), s.image.width(), image_to_rgb8(s.image));
    std::ofstream out(stem + ".seg.txt");
    if (!out) throw IoError("cannot write '" + stem + ".seg.txt'");
    out << format_segment_map(s.gt, classes);
  }
}

}  // namespace kmax
