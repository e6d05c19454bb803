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

#include <fstream>
#include <random>

#include "augment_oracle.hpp"
#include "vesselid/augment.hpp"

namespace vesselid {
namespace {

Raster noise(int w, int h, int ch, std::uint64_t seed) {
  Raster r(w, h, ch);
  std::mt19937_64 rng(seed);
  for (auto& v : r.data) v = static_cast<std::uint8_t>(rng());
  return r;
}

std::vector<AugSample> four_squares() {
  std::vector<AugSample> s;
  for (int k = 0; k < 4; ++k) {
    AugSample a;
    a.image = noise(640, 640, 3, 10 + k);
    a.boxes.push_back({{100, 120, 300, 260}, "Fagus", "b" + std::to_string(k)});
    s.push_back(a);
  }
  return s;
}

TEST(Mosaic, ZeroJitterQuadrantsAreBitExact) {
  auto s = four_squares();
  auto r = mosaic(s, {1280, 0, 0.1, 0}, 5);
  const int ox[] = {0, 640, 0, 640}, oy[] = {0, 0, 640, 640};
  ASSERT_EQ(r.sample.boxes.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(crop(r.sample.image, ox[k], oy[k], 640, 640), s[k].image) << k;
    EXPECT_EQ(r.sample.boxes[k].bbox, s[k].boxes[0].bbox.translated(ox[k], oy[k]));
    EXPECT_EQ(r.sample.boxes[k].genus, "Fagus");
    EXPECT_EQ(r.sample.boxes[k].id, s[k].boxes[0].id);
  }
}

TEST(Mosaic, QuadrantsMatchScaledSourcesUnderJitter) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    std::vector<AugSample> s(4);
    for (int k = 0; k < 4; ++k)
      s[k].image = noise(100 + rng() % 700, 100 + rng() % 700, 1, rng());
    auto r = mosaic(s, {640, 150, 0.1, 0}, rng());
    for (int k = 0; k < 4; ++k) {
      const auto& pl = r.placements[k];
      const int nw = static_cast<int>(std::llround(pl.scale_x * s[k].image.width));
      const int nh = static_cast<int>(std::llround(pl.scale_y * s[k].image.height));
      EXPECT_GE(nw, pl.quadrant.width());
      EXPECT_GE(nh, pl.quadrant.height());
      auto scaled = resize(s[k].image, nw, nh);
      auto expect = crop(scaled, static_cast<int>(pl.quadrant.x_min - pl.offset_x),
                         static_cast<int>(pl.quadrant.y_min - pl.offset_y),
                         static_cast<int>(pl.quadrant.width()), static_cast<int>(pl.quadrant.height()));
      EXPECT_EQ(crop(r.sample.image, static_cast<int>(pl.quadrant.x_min),
                     static_cast<int>(pl.quadrant.y_min), static_cast<int>(pl.quadrant.width()),
                     static_cast<int>(pl.quadrant.height())),
                expect);
    }
  }
}

TEST(Mosaic, BoxesFollowAffineMapAndClip) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<AugSample> s(4);
    for (int k = 0; k < 4; ++k) {
      s[k].image = Raster(200 + rng() % 600, 200 + rng() % 600, 1, 0);
      for (int b = 0; b < 5; ++b)
        s[k].boxes.push_back({oracle::random_box_in(rng, s[k].image.width, s[k].image.height), {}, {}});
    }
    auto r = mosaic(s, {800, 200, 0.1, 0}, rng());
    std::size_t expected = 0;
    for (int k = 0; k < 4; ++k)
      for (const auto& b : s[k].boxes) {
        auto m = oracle::affine_box(b.bbox, r.placements[k]);
        auto c = intersect(m, r.placements[k].quadrant);
        if (c.valid() && c.area() >= 0.1 * m.area()) ++expected;
      }
    EXPECT_EQ(r.sample.boxes.size(), expected);
    for (const auto& b : r.sample.boxes) {
      EXPECT_TRUE((BBox{0, 0, 800, 800}).contains(b.bbox));
    }
  }
}

TEST(Mosaic, InteriorBoxAreaScalesWithQuadrantMap) {
  auto s = four_squares();
  for (auto& a : s) a.image = Raster(1280, 1280, 3, 9);  // scale 0.5 into 640 quadrants
  auto r = mosaic(s, {1280, 0, 0.1, 0}, 1);
  ASSERT_EQ(r.sample.boxes.size(), 4u);
  for (const auto& b : r.sample.boxes) EXPECT_EQ(b.bbox.area(), 100 * 70);
}

TEST(Mosaic, MarkerLandsInsideRemappedBox) {
  std::mt19937_64 rng(4);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    auto c = oracle::marker_case(rng);
    auto r = mosaic(c.samples, {c.canvas, c.jitter, 0.1, 0}, c.seed);
    auto where = oracle::locate_marker(r.sample.image, r.placements[c.k].quadrant);
    const BBox* box = nullptr;
    for (const auto& b : r.sample.boxes)
      if (b.id == "marked") box = &b.bbox;
    if (!where || !box) continue;
    ++checked;
    EXPECT_TRUE(box->contains({where->first, where->second, where->first + 1, where->second + 1}))
        << "case " << t;
  }
  EXPECT_GT(checked, 50);
}

TEST(Mosaic, NeedsFourSamples) {
  auto s = four_squares();
  s.pop_back();
  EXPECT_THROW(mosaic(s, {}, 1), Error);
  EXPECT_THROW(mosaic(four_squares(), {100, 50, 0.1, 0}, 1), Error);
}

TEST(Photometric, IdentityIsBitExact) {
  auto img = noise(50, 40, 3, 1);
  EXPECT_EQ(photometric(img, {}, 9), img);
}

TEST(Photometric, ValueScaleDoublesMidGray) {
  PhotometricConfig c;
  c.value_scale = {2, 2};
  EXPECT_EQ(photometric(Raster(4, 4, 3, 100), c, 1), Raster(4, 4, 3, 200));
  EXPECT_EQ(photometric(Raster(4, 4, 1, 100), c, 1), Raster(4, 4, 1, 200));
  EXPECT_EQ(photometric(Raster(4, 4, 1, 200), c, 1), Raster(4, 4, 1, 255));
}

TEST(Photometric, ZeroSaturationGivesGray) {
  PhotometricConfig c;
  c.saturation_scale = {0, 0};
  auto out = photometric(noise(30, 30, 3, 2), c, 1);
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 30; ++x) {
      EXPECT_EQ(out.at(x, y, 0), out.at(x, y, 1));
      EXPECT_EQ(out.at(x, y, 1), out.at(x, y, 2));
    }
}

TEST(Photometric, DeterministicAndShapePreserving) {
  PhotometricConfig c{{-10, 10}, {0.5, 1.5}, {0.7, 1.3}, {-20, 20}, {0.8, 1.2}};
  auto img = noise(33, 21, 3, 3);
  auto a = photometric(img, c, 42), b = photometric(img, c, 42);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.width, 33);
  EXPECT_EQ(a.height, 21);
  EXPECT_NE(photometric(img, c, 43), a);
}

TEST(Geometric, IdentityIsUnchanged) {
  AugSample s{noise(64, 48, 3, 4), {{{5, 6, 20, 30}, "Salix", "x"}}};
  auto out = geometric(s, {}, 1);
  EXPECT_EQ(out.image, s.image);
  EXPECT_EQ(out.boxes, s.boxes);
}

TEST(Geometric, FlipTwiceRestores) {
  AugSample s{noise(64, 48, 1, 5), {{{5, 6, 20, 30}, "Salix", "x"}}};
  GeometricConfig c;
  c.flip_lr_prob = 1.0;
  auto once = geometric(s, c, 1);
  EXPECT_EQ(once.boxes[0].bbox, (BBox{44, 6, 59, 30}));
  EXPECT_EQ(once.image.at(63, 0), s.image.at(0, 0));
  auto twice = geometric(once, c, 1);
  EXPECT_EQ(twice.image, s.image);
  EXPECT_EQ(twice.boxes, s.boxes);
}

TEST(Geometric, HalfScaleHalvesBoxes) {
  AugSample s{Raster(400, 300, 1, 1), {{{40, 60, 140, 210}, "A", "a"}, {{0, 0, 33, 17}, "B", "b"}}};
  GeometricConfig c;
  c.scale = {0.5, 0.5};
  auto out = geometric(s, c, 1);
  ASSERT_EQ(out.boxes.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(out.boxes[i].bbox.width(), s.boxes[i].bbox.width() / 2.0, 1.0);
    EXPECT_NEAR(out.boxes[i].bbox.height(), s.boxes[i].bbox.height() / 2.0, 1.0);
    EXPECT_EQ(out.boxes[i].genus, s.boxes[i].genus);
  }
}

TEST(Geometric, MarkerStaysInsideBox) {
  std::mt19937_64 rng(6);
  GeometricConfig c{{0.4, 1.8}, {-0.3, 0.3}, {-0.3, 0.3}, 0.5, 0.5, 0.1, 0};
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    const int w = 100 + rng() % 300, h = 100 + rng() % 300;
    BBox b = oracle::random_box_in(rng, w, h);
    AugSample s{Raster(w, h, 1, 0), {{b, "G", "m"}}};
    const int px = static_cast<int>(b.x_min + rng() % b.width());
    const int py = static_cast<int>(b.y_min + rng() % b.height());
    s.image.at(px, py) = 255;
    auto out = geometric(s, c, rng());
    auto where = oracle::locate_marker(out.image, {0, 0, w, h});
    if (!where || out.boxes.empty()) continue;
    ++checked;
    EXPECT_TRUE(out.boxes[0].bbox.contains({where->first, where->second, where->first + 1,
                                            where->second + 1}));
  }
  EXPECT_GT(checked, 50);
}

TEST(ClassificationAugment, DefaultsKeepHorizontalFlipAndNoiseOff) {
  AugmentConfig c;
  EXPECT_FALSE(c.classification.horizontal_flip_enabled);
  EXPECT_FALSE(c.classification.noise_enabled);
  EXPECT_TRUE(c.classification.vertical_flip_enabled);
  // With photometric off, output is the input or its vertical mirror.
  auto k = c.classification;
  k.photometric_enabled = false;
  auto img = noise(20, 10, 1, 7);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto out = augment_crop(img, k, seed);
    EXPECT_TRUE(out == img || out == flip_ud(img));
  }
}

TEST(AugmentConfigFile, CheckedInDefaultsMatchBuiltIns) {
  std::ifstream in(VESSELID_SOURCE_DIR "/configs/augment.json");
  ASSERT_TRUE(in.good());
  auto j = nlohmann::json::parse(in);
  EXPECT_EQ(augment_to_json(augment_from_json(j)), augment_to_json(AugmentConfig{}));
  auto partial = augment_from_json({{"classification", {{"noise", {{"enabled", true}}}}}});
  EXPECT_TRUE(partial.classification.noise_enabled);
  EXPECT_DOUBLE_EQ(partial.classification.noise_sd, 5.0);
}

}  // namespace
}  // namespace vesselid
