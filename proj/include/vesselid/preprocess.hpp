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

// Detection-side tiling/stitching and classification-side crop preparation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vesselid/core.hpp"
#include "vesselid/metrics.hpp"
#include "vesselid/raster.hpp"
#include "vesselid/slide_store.hpp"

namespace vesselid {

struct TilingPlan {
  int image_width = 0;
  int image_height = 0;
  int tile_size = 0;
  int overlap = 0;
  int cols = 0;
  int rows = 0;
  /// Row-major; tile i is at column i % cols, row i / cols.
  std::vector<BBox> grid;
};

namespace detail {

inline std::vector<std::pair<int, int>> axis_spans(int dim, int tile, int overlap) {
  const int stride = tile - overlap;
  int n = dim <= tile ? 1 : (dim - overlap + stride - 1) / stride;
  std::vector<std::pair<int, int>> spans;
  for (int k = 0; k < n; ++k) {
    int s = k * stride;
    spans.emplace_back(s, std::min(dim, s + tile));
  }
  return spans;
}

}  // namespace detail

inline TilingPlan plan_tiles(int width, int height, int tile_size, int overlap) {
  if (width < 1 || height < 1) throw Error("range", "image must be non-empty");
  if (tile_size < 1) throw Error("range", "tile size must be positive");
  if (overlap < 0 || overlap >= tile_size)
    throw Error("range", "overlap must satisfy 0 <= overlap < tile_size");
  TilingPlan plan{width, height, tile_size, overlap, 0, 0, {}};
  auto xs = detail::axis_spans(width, tile_size, overlap);
  auto ys = detail::axis_spans(height, tile_size, overlap);
  plan.cols = static_cast<int>(xs.size());
  plan.rows = static_cast<int>(ys.size());
  for (auto [y0, y1] : ys)
    for (auto [x0, x1] : xs) plan.grid.push_back({x0, y0, x1, y1});
  return plan;
}

struct TileDetections {
  std::size_t tile = 0;
  std::vector<Detection> detections;  // tile-local coordinates
};

/// Greedy suppression: keep the most confident box, drop later boxes with
/// IOU > threshold against any kept box. Ties keep input order.
inline std::vector<Detection> suppress_duplicates(std::vector<Detection> dets,
                                                  double iou_threshold = 0.5) {
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
    return a.confidence > b.confidence;
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool dup = false;
    for (const auto& k : kept)
      if (metrics::iou(d.bbox, k.bbox) > iou_threshold) {
        dup = true;
        break;
      }
    if (!dup) kept.push_back(d);
  }
  return kept;
}

/// Moves per-tile boxes to image coordinates and removes duplicates from
/// tile overlaps. A box cut by an interior tile edge is dropped when it is
/// narrower than the overlap across that edge, since the neighbouring tile
/// then sees the whole object.
inline std::vector<Detection> stitch(const std::vector<TileDetections>& per_tile,
                                     const TilingPlan& plan) {
  std::vector<Detection> global;
  for (const auto& td : per_tile) {
    if (td.tile >= plan.grid.size()) throw Error("range", "detection from unknown tile");
    const BBox& t = plan.grid[td.tile];
    for (const auto& d : td.detections) {
      BBox b = d.bbox.translated(t.x_min, t.y_min);
      bool cut = false;
      if (b.x_min <= t.x_min && t.x_min > 0 && b.width() < plan.overlap) cut = true;
      if (b.x_max >= t.x_max && t.x_max < plan.image_width && b.width() < plan.overlap) cut = true;
      if (b.y_min <= t.y_min && t.y_min > 0 && b.height() < plan.overlap) cut = true;
      if (b.y_max >= t.y_max && t.y_max < plan.image_height && b.height() < plan.overlap) cut = true;
      if (!cut) global.push_back({b, d.confidence});
    }
  }
  return suppress_duplicates(std::move(global), 0.5);
}

/// bbox grown by margin_frac of its size on every side, clipped to the slide.
inline BBox crop_rect(const SlideMeta& meta, const BBox& bbox, double margin_frac) {
  if (!bbox.valid()) throw Error("range", "crop bbox is degenerate");
  const auto mx = static_cast<std::int64_t>(std::llround(bbox.width() * margin_frac));
  const auto my = static_cast<std::int64_t>(std::llround(bbox.height() * margin_frac));
  BBox grown{bbox.x_min - mx, bbox.y_min - my, bbox.x_max + mx, bbox.y_max + my};
  BBox r = grown.clipped(meta.width_px, meta.height_px);
  if (!r.valid()) throw Error("range", "crop bbox lies outside the slide");
  return r;
}

inline Raster extract_crop(TileReader& reader, const SlideContainer& slide,
                           const BBox& bbox, int plane, double margin_frac = 0.0) {
  return read_region(reader, slide, {plane, 0, crop_rect(slide.meta(), bbox, margin_frac)});
}

inline Raster extract_crop(const SlideContainer& slide, const BBox& bbox, int plane,
                           double margin_frac = 0.0) {
  TileReader reader(slide, 16);
  return extract_crop(reader, slide, bbox, plane, margin_frac);
}

enum class NormalizeMode { pad, distort_resize };

struct NormalizeConfig {
  int target = 800;
  NormalizeMode mode = NormalizeMode::pad;
  bool grayscale = true;
};

/// S x S model input plus where the (possibly rescaled) crop sits in it.
struct NormalizedCrop {
  Raster image;
  BBox content;
};

/// Rec. 601 luma, rounded half up: (299 R + 587 G + 114 B) / 1000.
inline Raster grayscale(const Raster& rgb) {
  if (rgb.channels == 1) return rgb;
  if (rgb.channels != 3) throw Error("shape", "grayscale expects 3 channels");
  Raster out(rgb.width, rgb.height, 1);
  const std::size_t n = static_cast<std::size_t>(rgb.width) * rgb.height;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned r = rgb.data[3 * i], g = rgb.data[3 * i + 1], b = rgb.data[3 * i + 2];
    out.data[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return out;
}

inline NormalizedCrop normalize_crop(const Raster& crop_img, const NormalizeConfig& cfg) {
  if (crop_img.width < 1 || crop_img.height < 1) throw Error("range", "empty crop");
  if (cfg.target < 1) throw Error("range", "target size must be positive");
  const int S = cfg.target;
  Raster src = cfg.grayscale ? grayscale(crop_img) : crop_img;
  NormalizedCrop out;
  if (cfg.mode == NormalizeMode::distort_resize) {
    out.image = resize(src, S, S);
    out.content = {0, 0, S, S};
    return out;
  }
  const int W = src.width, H = src.height;
  if (std::max(W, H) > S) {
    const double r = std::min(static_cast<double>(S) / W, static_cast<double>(S) / H);
    const int nw = std::clamp(static_cast<int>(std::llround(W * r)), 1, S);
    const int nh = std::clamp(static_cast<int>(std::llround(H * r)), 1, S);
    src = resize(src, nw, nh);
  }
  const int left = (S - src.width) / 2, top = (S - src.height) / 2;
  out.image = Raster(S, S, src.channels, 0);
  paste(out.image, src, left, top);
  out.content = {left, top, left + src.width, top + src.height};
  return out;
}

/// Which focal planes feed the classifier. Plane numbers are 1-based, as in
/// "the 3rd plane" of a five-plane stack.
struct PlaneMode {
  enum class Kind { single, stack3, per_plane };
  Kind kind = Kind::per_plane;
  std::array<int, 3> planes{3, 0, 0};

  static PlaneMode single(int k) { return {Kind::single, {k, 0, 0}}; }
  static PlaneMode stack3(int i, int j, int k) { return {Kind::stack3, {i, j, k}}; }
  static PlaneMode per_plane() { return {Kind::per_plane, {0, 0, 0}}; }

  /// "single:3", "stack3:1,2,3" or "per_plane".
  static PlaneMode parse(const std::string& s) {
    if (s == "per_plane") return per_plane();
    auto colon = s.find(':');
    std::string head = s.substr(0, colon);
    std::vector<int> nums;
    if (colon != std::string::npos) {
      std::stringstream ss(s.substr(colon + 1));
      std::string tok;
      while (std::getline(ss, tok, ',')) nums.push_back(std::stoi(tok));
    }
    if (head == "single" && nums.size() == 1) return single(nums[0]);
    if (head == "stack3" && nums.size() == 3) return stack3(nums[0], nums[1], nums[2]);
    throw Error("parse", "bad plane mode '" + s + "'");
  }

  std::string str() const {
    switch (kind) {
      case Kind::single: return "single:" + std::to_string(planes[0]);
      case Kind::stack3:
        return "stack3:" + std::to_string(planes[0]) + "," + std::to_string(planes[1]) +
               "," + std::to_string(planes[2]);
      case Kind::per_plane: return "per_plane";
    }
    return "?";
  }

  /// 0-based plane indices that must be extracted.
  std::vector<int> required(int plane_count) const {
    std::vector<int> r;
    if (kind == Kind::per_plane) {
      r.resize(plane_count);
      std::iota(r.begin(), r.end(), 0);
    } else {
      int n = kind == Kind::single ? 1 : 3;
      for (int i = 0; i < n; ++i) r.push_back(planes[i] - 1);
    }
    return r;
  }
};

/// Builds model inputs from per-plane normalized crops (index = plane - 1).
inline std::vector<Raster> assemble_planes(const std::vector<Raster>& crops,
                                           const PlaneMode& mode) {
  auto need = [&](int plane) -> const Raster& {
    if (plane < 1 || plane > static_cast<int>(crops.size()) ||
        crops[plane - 1].empty())
      throw Error("missing_plane", "plane " + std::to_string(plane) + " is missing");
    return crops[plane - 1];
  };
  switch (mode.kind) {
    case PlaneMode::Kind::single:
      return {grayscale(need(mode.planes[0]))};
    case PlaneMode::Kind::stack3: {
      std::array<Raster, 3> ch;
      for (int i = 0; i < 3; ++i) ch[i] = grayscale(need(mode.planes[i]));
      for (int i = 1; i < 3; ++i)
        if (ch[i].width != ch[0].width || ch[i].height != ch[0].height)
          throw Error("shape", "stacked planes differ in size");
      Raster out(ch[0].width, ch[0].height, 3);
      for (std::size_t p = 0; p < ch[0].data.size(); ++p)
        for (int i = 0; i < 3; ++i) out.data[3 * p + i] = ch[i].data[p];
      return {out};
    }
    case PlaneMode::Kind::per_plane: {
      std::vector<Raster> out;
      for (int p = 1; p <= static_cast<int>(crops.size()); ++p)
        out.push_back(grayscale(need(p)));
      return out;
    }
  }
  return {};
}

}  // namespace vesselid
