#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "kmax/dataset.hpp"
#include "test_helpers.hpp"

namespace kmax {
namespace {

using testing::max_abs_diff;

SceneSpec default_spec(std::uint64_t seed = 1) { return SceneSpec::from_config(DataConfig{}, seed); }

TEST(Generate, PureFunctionOfSeedAndIndex) {
  const SceneSpec spec = default_spec(3);
  for (std::uint64_t i : {0u, 5u, 123u}) {
    const Sample a = generate(spec, i), b = generate(spec, i);
    EXPECT_EQ(max_abs_diff(a.image.values, b.image.values), 0.0);
    EXPECT_EQ(a.gt, b.gt);
  }
  EXPECT_NE(generate(spec, 0).gt, generate(spec, 1).gt);
  EXPECT_NE(generate(default_spec(4), 0).gt, generate(spec, 0).gt);
}

TEST(Generate, OneCircleOnFlatBackground) {
  SceneSpec spec = default_spec();
  spec.thing_classes = {"circle"};
  spec.background_kinds = {"flat"};
  spec.min_shapes = spec.max_shapes = 1;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto segs = generate(spec, i).gt.segments();
    ASSERT_EQ(segs.size(), 2u);
    EXPECT_EQ(segs[0].class_id, 0);
    EXPECT_EQ(segs[1].class_id, 1);
  }
}

TEST(Generate, PartitionAndMinimumArea) {
  const SceneSpec spec = default_spec(7);
  const ClassTable classes = spec.class_table();
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Sample s = generate(spec, i);
    const auto segs = s.gt.segments();
    std::size_t area = 0;
    for (const auto& seg : segs) {
      area += seg.area;
      EXPECT_GE(seg.area, kMinSegmentArea);
      ASSERT_LT(static_cast<std::size_t>(seg.class_id), classes.size());
      // Things carry instance ids, stuff does not.
      EXPECT_EQ(seg.instance_id != 0, classes[static_cast<std::size_t>(seg.class_id)].is_thing);
    }
    EXPECT_EQ(area + s.gt.void_pixels(), 64u * 64u);
    std::size_t things = 0;
    for (const auto& seg : segs) things += classes[static_cast<std::size_t>(seg.class_id)].is_thing;
    EXPECT_LE(things, 5u);
    for (double v : s.image.values.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Generate, TwoStuffClassesFollowBandTexture) {
  SceneSpec spec = default_spec(2);
  spec.stuff_classes = {"flat", "gradient"};
  bool saw_flat = false, saw_gradient = false;
  for (std::uint64_t i = 0; i < 30; ++i) {
    for (const auto& seg : generate(spec, i).gt.segments()) {
      saw_flat |= seg.class_id == 3;
      saw_gradient |= seg.class_id == 4;
    }
  }
  EXPECT_TRUE(saw_flat);
  EXPECT_TRUE(saw_gradient);
}

TEST(Generate, NoOcclusionKeepsShapesApart) {
  SceneSpec spec = default_spec(5);
  spec.max_occlusion = 0.0;
  spec.thing_classes = {"rectangle"};
  spec.min_shapes = spec.max_shapes = 3;
  for (std::uint64_t i = 0; i < 20; ++i) {
    // Rectangles that never cover each other stay rectangular: every visible
    // instance fills its bounding box.
    const PanopticMap gt = generate(spec, i).gt;
    std::map<int, std::array<std::size_t, 5>> boxes;  // y0, y1, x0, x1, area
    for (std::size_t y = 0; y < gt.height; ++y)
      for (std::size_t x = 0; x < gt.width; ++x) {
        const int id = gt.instance_ids[y * gt.width + x];
        if (id == 0) continue;
        auto [it, fresh] = boxes.try_emplace(id, std::array<std::size_t, 5>{y, y, x, x, 0});
        auto& b = it->second;
        b[0] = std::min(b[0], y);
        b[1] = std::max(b[1], y);
        b[2] = std::min(b[2], x);
        b[3] = std::max(b[3], x);
        ++b[4];
      }
    for (const auto& [id, b] : boxes) EXPECT_EQ((b[1] - b[0] + 1) * (b[3] - b[2] + 1), b[4]);
  }
}

TEST(Generate, ImpossibleSpecs) {
  SceneSpec spec = default_spec();
  spec.max_shape_size = 40;
  EXPECT_THROW(generate(spec, 0), SpecError);
  spec = default_spec();
  spec.thing_classes = {"hexagon"};
  EXPECT_THROW(generate(spec, 0), SpecError);
  spec = default_spec();
  spec.min_shapes = 0;
  EXPECT_THROW(generate(spec, 0), SpecError);
  spec = default_spec();
  spec.max_occlusion = 1.5;
  EXPECT_THROW(generate(spec, 0), SpecError);
}

TEST(Flip, TwiceIsIdentity) {
  const Sample s = generate(default_spec(), 3);
  const Sample twice = flip_horizontal(flip_horizontal(s));
  EXPECT_EQ(max_abs_diff(twice.image.values, s.image.values), 0.0);
  EXPECT_EQ(twice.gt, s.gt);
}

TEST(Flip, MirrorsPixelsAndKeepsSegments) {
  const Sample s = generate(default_spec(), 4);
  const Sample f = flip_horizontal(s);
  const std::size_t n = 64;
  for (std::size_t y = 0; y < n; y += 7)
    for (std::size_t x = 0; x < n; x += 5) {
      EXPECT_EQ(f.gt.class_ids[y * n + x], s.gt.class_ids[y * n + (n - 1 - x)]);
      EXPECT_EQ(f.image.values.data()[(y * n + x) * 3 + 1], s.image.values.data()[(y * n + n - 1 - x) * 3 + 1]);
    }
  EXPECT_EQ(f.gt.segments(), s.gt.segments());
}

TEST(Flip, RandomFlipHitsBothOutcomes) {
  const Sample s = generate(default_spec(), 5);
  std::mt19937_64 rng(9);
  int flipped = 0;
  for (int i = 0; i < 200; ++i) flipped += augment_flip(s, rng).gt != s.gt;
  EXPECT_GT(flipped, 60);
  EXPECT_LT(flipped, 140);
}

TEST(Dump, WritesImageAndSegmentMap) {
  const SceneSpec spec = default_spec();
  const std::string dir = ::testing::TempDir() + "/kmax_dump";
  std::filesystem::remove_all(dir);
  dump_dataset(spec, 2, 2, dir);
  for (int i : {2, 3}) {
    const std::string stem = dir + "/" + std::to_string(i);
    std::ifstream ppm(stem + ".ppm", std::ios::binary);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    ppm >> magic >> w >> h >> maxval;
    EXPECT_EQ(magic, "P6");
    EXPECT_EQ(w, 64u);
    EXPECT_EQ(maxval, 255u);
    std::stringstream seg;
    seg << std::ifstream(stem + ".seg.txt").rdbuf();
    EXPECT_EQ(parse_segment_map(seg.str()), generate(spec, static_cast<std::uint64_t>(i)).gt);
  }
}

TEST(SegmentMap, RoundTripAndErrors) {
  const SceneSpec spec = default_spec();
  const PanopticMap gt = generate(spec, 8).gt;
  EXPECT_EQ(parse_segment_map(format_segment_map(gt, spec.class_table())), gt);
  EXPECT_ANY_THROW(parse_segment_map("garbage"));
}

TEST(Downsample, MajorityVote) {
  PanopticMap m = PanopticMap::filled(2, 4);
  m.class_ids = {0, 0, 1, 1, 0, 1, 1, 1};
  m.instance_ids = {1, 1, 0, 0, 1, 0, 0, 0};
  const PanopticMap d = downsample(m, 2);
  EXPECT_EQ(d.class_ids, (std::vector<int>{0, 1}));
  EXPECT_EQ(d.instance_ids, (std::vector<int>{1, 0}));
}

}  // namespace
}  // namespace kmax
