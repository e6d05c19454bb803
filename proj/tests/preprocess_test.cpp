// Copyright 2026 The vesselid Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "vesselid/components.hpp"
#include "vesselid/preprocess.hpp"

namespace vesselid {
namespace {

TEST(PlanTiles, ThreeByThreeOnLargeImage) {
  auto plan = plan_tiles(6400, 6400, 2560, 256);
  EXPECT_EQ(plan.cols, 3);
  EXPECT_EQ(plan.rows, 3);
  ASSERT_EQ(plan.grid.size(), 9u);
  EXPECT_EQ(plan.grid[1].x_min, 2304);
  EXPECT_EQ(plan.grid[2].x_max, 6400);
  // Adjacent tiles share exactly `overlap` columns.
  EXPECT_EQ(plan.grid[0].x_max - plan.grid[1].x_min, 256);
}

TEST(PlanTiles, SmallImageIsOneTile) {
  auto plan = plan_tiles(300, 200, 512, 64);
  ASSERT_EQ(plan.grid.size(), 1u);
  EXPECT_EQ(plan.grid[0], (BBox{0, 0, 300, 200}));
}

TEST(PlanTiles, ZeroOverlapPartitions) {
  auto plan = plan_tiles(1024, 512, 256, 0);
  EXPECT_EQ(plan.cols, 4);
  EXPECT_EQ(plan.rows, 2);
  std::int64_t area = 0;
  for (const auto& t : plan.grid) area += t.area();
  EXPECT_EQ(area, 1024 * 512);
}

TEST(PlanTiles, CoverageOnAwkwardSizes) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    int w = 1 + rng() % 3000, h = 1 + rng() % 3000;
    int tile = 2 + rng() % 700, ov = rng() % tile;
    auto plan = plan_tiles(w, h, tile, ov);
    EXPECT_EQ(plan.grid.back().x_max, w);
    EXPECT_EQ(plan.grid.back().y_max, h);
    for (int c = 1; c < plan.cols; ++c)
      EXPECT_GE(plan.grid[c - 1].x_max, plan.grid[c].x_min + std::min(ov, 1));
  }
}

TEST(PlanTiles, RejectsBadOverlap) {
  EXPECT_THROW(plan_tiles(100, 100, 50, 50), Error);
  EXPECT_THROW(plan_tiles(100, 100, 50, -1), Error);
}

TEST(Stitch, SingleTileIsIdentity) {
  auto plan = plan_tiles(500, 500, 512, 64);
  std::vector<Detection> d{{{10, 20, 30, 40}, 0.9}, {{100, 100, 200, 150}, 0.4}};
  auto out = stitch({{0, d}}, plan);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].bbox, d[0].bbox);
  EXPECT_EQ(out[1].bbox, d[1].bbox);
}

TEST(Stitch, OverlapDuplicateKeepsHigherConfidence) {
  auto plan = plan_tiles(1000, 500, 600, 200);
  ASSERT_EQ(plan.grid.size(), 2u);
  // Same object seen by both tiles: global boxes {410..510} and {410..520}
  // have IOU 100/110 > 0.5.
  Detection a{{410, 100, 510, 200}, 0.8};
  Detection b{{410 - 400, 100, 520 - 400, 200}, 0.7};
  auto out = stitch({{0, {a}}, {1, {b}}}, plan);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0].confidence, 0.8);
  EXPECT_EQ(out[0].bbox, a.bbox);
}

TEST(Stitch, DisjointDetectionsSurvive) {
  auto plan = plan_tiles(1000, 500, 600, 200);
  auto out = stitch({{0, {{{10, 10, 50, 50}, 0.5}}}, {1, {{{300, 10, 350, 60}, 0.6}}}}, plan);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].bbox, (BBox{700, 10, 750, 60}));
  EXPECT_EQ(out[1].bbox, (BBox{10, 10, 50, 50}));
}

TEST(Stitch, SmallBoxCutByInteriorEdgeIsDropped) {
  auto plan = plan_tiles(1000, 500, 600, 200);
  // Touches tile 0's right edge (x=600) and is narrower than the overlap.
  auto out = stitch({{0, {{{560, 10, 600, 60}, 0.9}}}}, plan);
  EXPECT_TRUE(out.empty());
}

TEST(SuppressDuplicates, IouExactlyHalfIsKept) {
  // Second box is half of the first: IOU 50/100.
  std::vector<Detection> d{{{0, 0, 10, 10}, 0.9}, {{0, 0, 10, 5}, 0.8}};
  EXPECT_EQ(suppress_duplicates(d).size(), 2u);  // IOU exactly 0.5
  d.push_back({{0, 0, 10, 9}, 0.7});
  EXPECT_EQ(suppress_duplicates(d).size(), 2u);  // IOU 0.9 suppressed
}

class CropSlide : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    auto dir = testing::scratch_dir("crop_slide");
    SlideMeta m;
    m.slide_id = "crop";
    m.maceration_id = "m";
    m.width_px = 3000;
    m.height_px = 2500;
    m.plane_count = 2;
    m.channels = 1;
    PlaneSource src = [](int p, std::int64_t x, std::int64_t y, int w, int h) {
      Raster r(w, h, 1);
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
          r.at(xx, yy) = static_cast<std::uint8_t>((x + xx + 3 * (y + yy) + 40 * p) & 0xff);
      return r;
    };
    source_ = new PlaneSource(src);
    slide_ = new SlideContainer(SlideWriter::write(src, m, dir / "crop", 256));
  }
  static void TearDownTestSuite() {
    delete slide_;
    delete source_;
  }
  static SlideContainer* slide_;
  static PlaneSource* source_;
};
SlideContainer* CropSlide::slide_ = nullptr;
PlaneSource* CropSlide::source_ = nullptr;

TEST_F(CropSlide, ZeroMarginMatchesBox) {
  auto c = extract_crop(*slide_, {100, 200, 350, 420}, 1);
  EXPECT_EQ(c, (*source_)(1, 100, 200, 250, 220));
}

TEST_F(CropSlide, TenPercentMarginGrowsEachSide) {
  auto c = extract_crop(*slide_, {1000, 750, 2000, 1750}, 0, 0.1);
  EXPECT_EQ(c.width, 1200);
  EXPECT_EQ(c.height, 1200);
  EXPECT_EQ(c, (*source_)(0, 900, 650, 1200, 1200));
}

TEST_F(CropSlide, CornerBoxIsClippedNotPadded) {
  auto r = crop_rect(slide_->meta(), {0, 0, 100, 100}, 0.5);
  EXPECT_EQ(r, (BBox{0, 0, 150, 150}));  // unclipped would start at -50
  auto c = extract_crop(*slide_, {2900, 2400, 3000, 2500}, 0, 0.5);
  EXPECT_EQ(c.width, 150);
  EXPECT_EQ(c.height, 150);
  EXPECT_EQ(c, (*source_)(0, 2850, 2350, 150, 150));
}

TEST_F(CropSlide, OutsideBoxIsAnError) {
  EXPECT_THROW(extract_crop(*slide_, {4000, 10, 4100, 50}, 0), Error);
  EXPECT_THROW(extract_crop(*slide_, {10, 10, 10, 50}, 0), Error);
}

TEST(NormalizeCrop, LongSideBecomesTarget) {
  Raster img(1241, 766, 3, 200);
  auto n = normalize_crop(img, {});
  EXPECT_EQ(n.image.width, 800);
  EXPECT_EQ(n.image.height, 800);
  EXPECT_EQ(n.image.channels, 1);
  EXPECT_EQ(n.content.width(), 800);
  // r = 800/1241 applied to 766 gives 493.8 -> 494, padding 153 top and bottom.
  EXPECT_EQ(n.content.height(), 494);
  EXPECT_EQ(n.content.y_min, 153);
  EXPECT_EQ(800 - n.content.y_max, 153);
  EXPECT_EQ(n.image.at(400, 152), 0);
  EXPECT_EQ(n.image.at(400, 153), 200);
  EXPECT_EQ(n.image.at(400, 646), 200);
  EXPECT_EQ(n.image.at(400, 647), 0);
}

TEST(NormalizeCrop, SmallCropIsPurePadding) {
  Raster img(600, 500, 1);
  std::mt19937 rng(1);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng());
  auto n = normalize_crop(img, {800, NormalizeMode::pad, true});
  EXPECT_EQ(n.content, (BBox{100, 150, 700, 650}));
  EXPECT_EQ(crop(n.image, 100, 150, 600, 500), img);
  EXPECT_EQ(n.image.at(99, 300), 0);
  EXPECT_EQ(n.image.at(700, 300), 0);
}

TEST(NormalizeCrop, OddRemainderGoesRightAndBottom) {
  auto n = normalize_crop(Raster(7, 4, 1, 9), {10, NormalizeMode::pad, true});
  EXPECT_EQ(n.content, (BBox{1, 3, 8, 7}));
}

TEST(NormalizeCrop, AspectPreservedWithinOnePixel) {
  std::mt19937 rng(9);
  for (int i = 0; i < 50; ++i) {
    int w = 1 + rng() % 2500, h = 1 + rng() % 2500;
    auto n = normalize_crop(Raster(w, h, 1, 5), {800, NormalizeMode::pad, true});
    double r = std::max(w, h) > 800 ? std::min(800.0 / w, 800.0 / h) : 1.0;
    EXPECT_NEAR(n.content.width(), w * r, 1.0);
    EXPECT_NEAR(n.content.height(), h * r, 1.0);
  }
}

TEST(NormalizeCrop, DistortResizeFillsSquare) {
  auto n = normalize_crop(Raster(1241, 766, 1, 77), {800, NormalizeMode::distort_resize, true});
  EXPECT_EQ(n.content, (BBox{0, 0, 800, 800}));
  for (auto v : n.image.data) ASSERT_EQ(v, 77);
}

TEST(Grayscale, LumaExamples) {
  Raster px(3, 1, 3);
  const std::uint8_t vals[] = {255, 255, 255, 0, 0, 0, 255, 0, 0};
  std::copy(std::begin(vals), std::end(vals), px.data.begin());
  auto g = grayscale(px);
  EXPECT_EQ(g.at(0, 0), 255);
  EXPECT_EQ(g.at(1, 0), 0);
  EXPECT_EQ(g.at(2, 0), 76);
}

TEST(Grayscale, IdempotentOnGrayInput) {
  Raster rgb(256, 1, 3);
  for (int v = 0; v < 256; ++v)
    for (int c = 0; c < 3; ++c) rgb.at(v, 0, c) = static_cast<std::uint8_t>(v);
  auto g = grayscale(rgb);
  for (int v = 0; v < 256; ++v) EXPECT_EQ(g.at(v, 0), v);
  EXPECT_EQ(grayscale(g), g);
}

TEST(AssemblePlanes, Modes) {
  std::vector<Raster> crops;
  for (int p = 0; p < 5; ++p) crops.emplace_back(4, 4, 1, static_cast<std::uint8_t>(10 * (p + 1)));
  auto single = assemble_planes(crops, PlaneMode::single(3));
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0], crops[2]);

  auto stack = assemble_planes(crops, PlaneMode::stack3(1, 2, 3));
  ASSERT_EQ(stack.size(), 1u);
  EXPECT_EQ(stack[0].channels, 3);
  EXPECT_EQ(stack[0].at(0, 0, 0), 10);
  EXPECT_EQ(stack[0].at(0, 0, 1), 20);
  EXPECT_EQ(stack[0].at(0, 0, 2), 30);

  EXPECT_EQ(assemble_planes(crops, PlaneMode::per_plane()).size(), 5u);
  EXPECT_THROW(assemble_planes(crops, PlaneMode::single(6)), Error);
  crops.resize(2);
  EXPECT_THROW(assemble_planes(crops, PlaneMode::stack3(1, 2, 3)), Error);
}

TEST(PlaneModeText, RoundTrips) {
  for (std::string s : {"single:3", "stack3:1,2,3", "per_plane"})
    EXPECT_EQ(PlaneMode::parse(s).str(), s);
  EXPECT_THROW(PlaneMode::parse("stack3:1,2"), Error);
  EXPECT_EQ(PlaneMode::parse("stack3:2,4,5").required(5), (std::vector<int>{1, 3, 4}));
}

TEST(Components, EightConnectivityAndHull) {
  // Two diagonal pixels join; a separate block stays apart.
  Raster m(10, 10, 1, 0);
  m.at(1, 1) = m.at(2, 2) = 1;
  for (int y = 5; y < 8; ++y)
    for (int x = 5; x < 9; ++x) m.at(x, y) = 1;
  auto comps = label_components(10, 10, [&](int x, int y) { return m.at(x, y) != 0; });
  ASSERT_EQ(comps.size(), 2u);
  EXPECT_EQ(comps[0].area, 2);
  EXPECT_EQ(comps[0].bbox, (BBox{1, 1, 3, 3}));
  EXPECT_EQ(comps[1].bbox, (BBox{5, 5, 9, 8}));
  EXPECT_DOUBLE_EQ(solidity(comps[1]), 1.0);
  // Diagonal pair: hull of two touching squares has area 3.
  EXPECT_DOUBLE_EQ(convex_hull_area(comps[0]), 3.0);
}

TEST(Components, UShapeMergesAcrossRows) {
  Raster m(5, 3, 1, 0);
  for (int y = 0; y < 3; ++y) m.at(0, y) = m.at(4, y) = 1;
  for (int x = 0; x < 5; ++x) m.at(x, 2) = 1;
  auto comps = label_components(5, 3, [&](int x, int y) { return m.at(x, y) != 0; });
  ASSERT_EQ(comps.size(), 1u);
  EXPECT_EQ(comps[0].area, 9);
}

TEST(Otsu, SeparatesBimodalHistogram) {
  std::array<std::uint64_t, 256> h{};
  h[40] = 100;
  h[220] = 300;
  int t = otsu_threshold(h);
  EXPECT_GT(t, 40);
  EXPECT_LE(t, 220);
}

}  // namespace
}  // namespace vesselid
