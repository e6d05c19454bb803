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

// Test-side geometry for augmentation checks.

#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <utility>

#include "vesselid/augment.hpp"

namespace vesselid::oracle {

inline BBox random_box_in(std::mt19937_64& rng, int w, int h) {
  const std::int64_t bw = 2 + rng() % std::max(1, w / 3), bh = 2 + rng() % std::max(1, h / 3);
  const std::int64_t x = rng() % (w - bw + 1), y = rng() % (h - bh + 1);
  return {x, y, x + bw, y + bh};
}

/// Source box under a placement's map, edges rounded outward. Uses exact
/// rational scale nw / w through long double arithmetic.
inline BBox affine_box(const BBox& b, const MosaicPlacement& p) {
  auto lo = [](std::int64_t v, long double s) {
    return static_cast<std::int64_t>(std::floor(v * s + 1e-9L));
  };
  auto hi = [](std::int64_t v, long double s) {
    return static_cast<std::int64_t>(std::ceil(v * s - 1e-9L));
  };
  return {p.offset_x + lo(b.x_min, p.scale_x), p.offset_y + lo(b.y_min, p.scale_y),
          p.offset_x + hi(b.x_max, p.scale_x), p.offset_y + hi(b.y_max, p.scale_y)};
}

/// Brightest pixel of the first channel inside `region`, if any is non-zero.
inline std::optional<std::pair<std::int64_t, std::int64_t>> locate_marker(const Raster& img,
                                                                         const BBox& region) {
  int best = 0;
  std::optional<std::pair<std::int64_t, std::int64_t>> at;
  for (auto y = region.y_min; y < region.y_max; ++y)
    for (auto x = region.x_min; x < region.x_max; ++x) {
      const int v = img.at(static_cast<int>(x), static_cast<int>(y));
      if (v > best) {
        best = v;
        at = {{x, y}};
      }
    }
  return at;
}

struct MarkerCase {
  std::vector<AugSample> samples;
  int k = 0;
  int canvas = 0;
  int jitter = 0;
  std::uint64_t seed = 0;
};

/// Four black single-channel sources; source k holds one box "marked" with
/// a single bright pixel somewhere inside it.
inline MarkerCase marker_case(std::mt19937_64& rng) {
  MarkerCase c;
  c.canvas = 400 + static_cast<int>(rng() % 800);
  c.jitter = static_cast<int>(rng() % (c.canvas / 2 - 1));
  c.k = static_cast<int>(rng() % 4);
  c.seed = rng();
  c.samples.resize(4);
  for (int i = 0; i < 4; ++i) {
    c.samples[i].image = Raster(150 + rng() % 750, 150 + rng() % 750, 1, 0);
  }
  auto& s = c.samples[c.k];
  BBox b = random_box_in(rng, s.image.width, s.image.height);
  s.boxes.push_back({b, "G", "marked"});
  s.image.at(static_cast<int>(b.x_min + rng() % b.width()),
             static_cast<int>(b.y_min + rng() % b.height())) = 255;
  return c;
}

}  // namespace vesselid::oracle
