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
#include <sstream>

#include "vesselid/core.hpp"
#include "vesselid/raster.hpp"

namespace vesselid {
namespace {

TEST(GenusCatalog, DefaultOrderDefinesClassIndex) {
  auto cat = GenusCatalog::default_catalog();
  ASSERT_EQ(cat.size(), 9u);
  EXPECT_EQ(class_index(cat, "Acacia"), 0u);
  EXPECT_EQ(class_index(cat, "Schima"), 8u);
}

TEST(GenusCatalog, UnknownGenusNamesTheOffender) {
  auto cat = GenusCatalog::default_catalog();
  try {
    class_index(cat, "Quercus");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "unknown_genus");
    EXPECT_NE(std::string(e.what()).find("Quercus"), std::string::npos);
  }
}

TEST(GenusCatalog, IndexIsABijection) {
  auto cat = GenusCatalog::default_catalog();
  for (std::size_t i = 0; i < cat.size(); ++i)
    EXPECT_EQ(class_index(cat, cat.name(i)), i);
}

TEST(GenusCatalog, FileRoundTripAndValidation) {
  std::stringstream ss;
  GenusCatalog::default_catalog().write(ss);
  EXPECT_EQ(GenusCatalog::parse(ss), GenusCatalog::default_catalog());

  std::stringstream dup("Fagus\nHevea\nFagus\n");
  EXPECT_THROW(GenusCatalog::parse(dup), Error);
  std::stringstream empty("\n\n");
  EXPECT_THROW(GenusCatalog::parse(empty), Error);
}

TEST(Argmax, PicksMaximumWithLowestIndexTieBreak) {
  auto cat = GenusCatalog::default_catalog();
  ProbabilityVector onehot{std::vector<double>(9, 0.0)};
  onehot.scores[0] = 1.0;
  EXPECT_EQ(argmax_class(cat, onehot), "Acacia");

  ProbabilityVector uniform{std::vector<double>(9, 1.0 / 9)};
  EXPECT_EQ(argmax_class(cat, uniform), "Acacia");

  ProbabilityVector p{{0.1, 0.7, 0.2, 0, 0, 0, 0, 0, 0}};
  EXPECT_EQ(argmax_class(cat, p), "Betula");
}

TEST(Argmax, EmptyAndMismatchedVectorsAreErrors) {
  auto cat = GenusCatalog::default_catalog();
  EXPECT_THROW(argmax_class(cat, ProbabilityVector{}), Error);
  EXPECT_THROW(argmax_class(cat, ProbabilityVector{{0.5, 0.5}}), Error);
}

TEST(Argmax, InvariantUnderPositiveScaling) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0), c(0.01, 100.0);
  for (int trial = 0; trial < 500; ++trial) {
    ProbabilityVector p;
    for (int i = 0; i < 9; ++i) p.scores.push_back(std::floor(u(rng) * 8) / 8);
    ProbabilityVector q = p;
    double k = c(rng);
    for (auto& v : q.scores) v *= k;
    EXPECT_EQ(argmax_index(p), argmax_index(q));
  }
}

TEST(Annotation, ValidationEnforcesSourceInvariants) {
  Annotation a;
  a.annotation_id = "a1";
  a.slide_id = "s";
  a.bbox = {0, 0, 10, 10};
  EXPECT_NO_THROW(a.validate());

  a.confidence = 0.5;  // human with confidence
  EXPECT_THROW(a.validate(), Error);

  a.source = Source::predicted;
  a.review = Review::pending;
  EXPECT_NO_THROW(a.validate());

  a.source = Source::corrected;
  a.confidence.reset();
  EXPECT_THROW(a.validate(), Error);  // corrected must be accepted
}

TEST(SlideMeta, DefaultsAndValidation) {
  SlideMeta m;
  m.slide_id = "s1";
  m.width_px = 100;
  m.height_px = 50;
  EXPECT_DOUBLE_EQ(m.pixel_scale_um, 0.69);
  EXPECT_DOUBLE_EQ(m.plane_step_um, 16.33);
  EXPECT_EQ(m.plane_count, 5);
  EXPECT_NO_THROW(m.validate());
  m.plane_count = 0;
  EXPECT_THROW(m.validate(), Error);
}

TEST(Raster, ResizeSameSizeIsIdentityAndAreaKeepsMean) {
  Raster r(8, 6, 3);
  for (std::size_t i = 0; i < r.data.size(); ++i)
    r.data[i] = static_cast<std::uint8_t>(i * 37 % 251);
  EXPECT_EQ(resize(r, 8, 6), r);

  Raster flat(64, 64, 1, 200);
  auto small = resize(flat, 16, 16);
  for (auto v : small.data) EXPECT_EQ(v, 200);
}

}  // namespace
}  // namespace vesselid
