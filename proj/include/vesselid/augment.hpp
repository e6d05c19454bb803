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

// Training-data augmentation. Every transform is a pure function of its
// inputs and seed; labels ride along untouched.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vesselid/core.hpp"
#include "vesselid/raster.hpp"

namespace vesselid {

struct LabeledBox {
  BBox bbox;
  std::optional<std::string> genus;
  std::string id;

  bool operator==(const LabeledBox&) const = default;
};

struct AugSample {
  Raster image;
  std::vector<LabeledBox> boxes;
};

/// Closed interval sampled uniformly; lo == hi is a constant.
struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double sample(std::mt19937_64& rng) const {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  bool operator==(const Range&) const = default;
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  if (j.is_number()) {
    r.lo = r.hi = j.get<double>();
    return;
  }
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
  if (r.lo > r.hi) throw Error("config", "range with lo > hi");
}

namespace detail {

/// Mapped box of a source box under x -> ox + x * sx (scaled edges rounded
/// outward), clipped to `clip`. Empty when under `min_visible` of the
/// mapped area survives.
inline std::optional<BBox> remap_box(const BBox& b, double sx, double sy, std::int64_t ox,
                                     std::int64_t oy, const BBox& clip, double min_visible) {
  BBox m{ox + static_cast<std::int64_t>(std::floor(b.x_min * sx + 1e-9)),
         oy + static_cast<std::int64_t>(std::floor(b.y_min * sy + 1e-9)),
         ox + static_cast<std::int64_t>(std::ceil(b.x_max * sx - 1e-9)),
         oy + static_cast<std::int64_t>(std::ceil(b.y_max * sy - 1e-9))};
  if (!m.valid()) return std::nullopt;
  BBox c = intersect(m, clip);
  if (!c.valid()) return std::nullopt;
  if (static_cast<double>(c.area()) < min_visible * static_cast<double>(m.area()))
    return std::nullopt;
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Mosaic

struct MosaicConfig {
  int canvas = 1280;
  /// Junction offset from the canvas centre, drawn from [-j, j] per axis.
  int center_jitter = 0;
  /// Clipped boxes keeping less than this share of their area are dropped.
  double min_visible = 0.1;
  std::uint8_t fill = 0;

  void validate() const {
    if (canvas < 2) throw Error("config", "mosaic canvas must be at least 2 px");
    if (center_jitter < 0 || 2 * center_jitter >= canvas - 1)
      throw Error("config", "mosaic center_jitter must satisfy 0 <= j < canvas/2");
    if (min_visible < 0 || min_visible > 1) throw Error("config", "min_visible must lie in [0, 1]");
  }
};

/// Where one source landed in the mosaic.
struct MosaicPlacement {
  BBox quadrant;
  std::int64_t offset_x = 0;
  std::int64_t offset_y = 0;
  double scale_x = 1.0;
  double scale_y = 1.0;
};

struct MosaicResult {
  AugSample sample;
  std::array<MosaicPlacement, 4> placements;
};

/// Four sources around a junction point. Source k (0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right) is scaled uniformly by the smallest factor
/// that covers its quadrant and anchored with a corner at the junction, so
/// the region nearest the junction is always visible.
inline MosaicResult mosaic(const std::vector<AugSample>& samples, const MosaicConfig& cfg,
                           std::uint64_t seed) {
  cfg.validate();
  if (samples.size() < 4) throw Error("mosaic", "mosaic needs four samples");
  const int ch = samples[0].image.channels;
  for (int k = 0; k < 4; ++k) {
    if (samples[k].image.empty()) throw Error("mosaic", "empty mosaic source");
    if (samples[k].image.channels != ch) throw Error("mosaic", "mosaic sources differ in channels");
  }
  std::mt19937_64 rng(seed);
  const int C = cfg.canvas;
  std::uniform_int_distribution<int> jit(-cfg.center_jitter, cfg.center_jitter);
  const int cx = C / 2 + jit(rng), cy = C / 2 + jit(rng);

  MosaicResult out;
  out.sample.image = Raster(C, C, ch, cfg.fill);
  const std::array<BBox, 4> quads{BBox{0, 0, cx, cy}, BBox{cx, 0, C, cy}, BBox{0, cy, cx, C},
                                  BBox{cx, cy, C, C}};
  for (int k = 0; k < 4; ++k) {
    const auto& src = samples[k].image;
    const auto& q = quads[k];
    const double s = std::max(static_cast<double>(q.width()) / src.width,
                              static_cast<double>(q.height()) / src.height);
    const int nw = std::max<int>(static_cast<int>(q.width()),
                                 static_cast<int>(std::llround(src.width * s)));
    const int nh = std::max<int>(static_cast<int>(q.height()),
                                 static_cast<int>(std::llround(src.height * s)));
    const std::int64_t ox = (k % 2 == 0) ? cx - nw : cx;
    const std::int64_t oy = (k < 2) ? cy - nh : cy;
    Raster scaled = resize(src, nw, nh);
    Raster part = crop(scaled, static_cast<int>(q.x_min - ox), static_cast<int>(q.y_min - oy),
                       static_cast<int>(q.width()), static_cast<int>(q.height()));
    paste(out.sample.image, part, static_cast<int>(q.x_min), static_cast<int>(q.y_min));
    MosaicPlacement pl{q, ox, oy, static_cast<double>(nw) / src.width,
                       static_cast<double>(nh) / src.height};
    out.placements[k] = pl;
    for (const auto& b : samples[k].boxes) {
      auto m = detail::remap_box(b.bbox, pl.scale_x, pl.scale_y, ox, oy, q, cfg.min_visible);
      if (m) out.sample.boxes.push_back({*m, b.genus, b.id});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Photometric

struct PhotometricConfig {
  Range hue_delta{0, 0};          // degrees
  Range saturation_scale{1, 1};
  Range value_scale{1, 1};
  Range brightness_delta{0, 0};   // additive, in pixel units
  Range contrast_scale{1, 1};     // about mid-gray 127.5

  bool identity() const {
    return hue_delta == Range{0, 0} && saturation_scale == Range{1, 1} &&
           value_scale == Range{1, 1} && brightness_delta == Range{0, 0} &&
           contrast_scale == Range{1, 1};
  }

  void validate() const {
    if (saturation_scale.lo < 0 || value_scale.lo < 0 || contrast_scale.lo < 0)
      throw Error("config", "photometric scales must be non-negative");
  }
};

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0;
  if (d == 0) h = 0;
  else if (mx == r) h = 60 * std::fmod((g - b) / d + 6, 6);
  else if (mx == g) h = 60 * ((b - r) / d + 2);
  else h = 60 * ((r - g) / d + 4);
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = std::fmod(std::fmod(h, 360) + 360, 360);
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h / 60, 2) - 1)), m = v - c;
  double rr = 0, gg = 0, bb = 0;
  switch (static_cast<int>(h / 60) % 6) {
    case 0: rr = c, gg = x; break;
    case 1: rr = x, gg = c; break;
    case 2: gg = c, bb = x; break;
    case 3: gg = x, bb = c; break;
    case 4: rr = x, bb = c; break;
    default: rr = c, bb = x; break;
  }
  r = rr + m;
  g = gg + m;
  b = bb + m;
}

}  // namespace detail

/// HSV jitter, then brightness and contrast; results are clamped and
/// rounded half up. Identity settings return the input bit-exact.
inline Raster photometric(const Raster& img, const PhotometricConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.identity()) return img;
  std::mt19937_64 rng(seed);
  const double dh = cfg.hue_delta.sample(rng), ss = cfg.saturation_scale.sample(rng),
               vs = cfg.value_scale.sample(rng), db = cfg.brightness_delta.sample(rng),
               cs = cfg.contrast_scale.sample(rng);
  auto tone = [&](double v) { return (v * vs + db - 127.5) * cs + 127.5; };
  Raster out(img.width, img.height, img.channels);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (img.channels == 3) {
    for (std::size_t i = 0; i < n; ++i) {
      double h, s, v, r, g, b;
      detail::rgb_to_hsv(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2], h, s, v);
      detail::hsv_to_rgb(h + dh, std::clamp(s * ss, 0.0, 1.0), v, r, g, b);
      // Value scale, brightness and contrast act on each channel alike.
      out.data[3 * i] = round_to_u8(tone(r));
      out.data[3 * i + 1] = round_to_u8(tone(g));
      out.data[3 * i + 2] = round_to_u8(tone(b));
    }
  } else {
    for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = round_to_u8(tone(img.data[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometric

struct GeometricConfig {
  Range scale{1, 1};
  Range shift_x{0, 0};  // fraction of width
  Range shift_y{0, 0};  // fraction of height
  double flip_lr_prob = 0.0;
  double flip_ud_prob = 0.0;
  double min_visible = 0.1;
  std::uint8_t fill = 0;

  void validate() const {
    if (!(scale.lo > 0)) throw Error("config", "scale must be positive");
  }
};

inline Raster flip_lr(const Raster& img) {
  Raster out(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
  return out;
}

inline Raster flip_ud(const Raster& img) {
  Raster out(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y)
  {
    const auto src = img.row(y);
    std::copy(src.begin(), src.end(), out.row(img.height - 1 - y).begin());
  }
  return out;
}

/// Scale about the centre, shift, then optional flips, on a canvas of the
/// input size. Boxes follow the same map and are clipped.
inline AugSample geometric(const AugSample& in, const GeometricConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double s = cfg.scale.sample(rng);
  const double fx = cfg.shift_x.sample(rng), fy = cfg.shift_y.sample(rng);
  std::bernoulli_distribution lr(cfg.flip_lr_prob), ud(cfg.flip_ud_prob);
  const bool do_lr = cfg.flip_lr_prob > 0 && lr(rng);
  const bool do_ud = cfg.flip_ud_prob > 0 && ud(rng);
  const int W = in.image.width, H = in.image.height;
  const int nw = std::max(1, static_cast<int>(std::llround(W * s)));
  const int nh = std::max(1, static_cast<int>(std::llround(H * s)));
  const auto ox = static_cast<std::int64_t>(std::llround((W - nw) / 2.0 + fx * W));
  const auto oy = static_cast<std::int64_t>(std::llround((H - nh) / 2.0 + fy * H));

  AugSample out;
  out.image = Raster(W, H, in.image.channels, cfg.fill);
  paste(out.image, resize(in.image, nw, nh), static_cast<int>(ox), static_cast<int>(oy));
  const BBox canvas{0, 0, W, H};
  for (const auto& b : in.boxes) {
    auto m = detail::remap_box(b.bbox, static_cast<double>(nw) / W, static_cast<double>(nh) / H,
                               ox, oy, canvas, cfg.min_visible);
    if (!m) continue;
    BBox r = *m;
    if (do_lr) r = {W - r.x_max, r.y_min, W - r.x_min, r.y_max};
    if (do_ud) r = {r.x_min, H - r.y_max, r.x_max, H - r.y_min};
    out.boxes.push_back({r, b.genus, b.id});
  }
  if (do_lr) out.image = flip_lr(out.image);
  if (do_ud) out.image = flip_ud(out.image);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct DetectionAugmentConfig {
  bool mosaic_enabled = true;
  MosaicConfig mosaic{1280, 160, 0.1, 0};
  bool hsv_enabled = true;
  PhotometricConfig hsv{{-5.4, 5.4}, {0.3, 1.7}, {0.6, 1.4}, {0, 0}, {1, 1}};
  bool geometric_enabled = true;
  GeometricConfig geometric{{0.5, 1.5}, {-0.1, 0.1}, {-0.1, 0.1}, 0.5, 0.0, 0.1, 0};
};

/// Class-preserving set for classification crops. Horizontal flip and
/// noise exist but are off by default.
struct ClassificationAugmentConfig {
  bool vertical_flip_enabled = true;
  double vertical_flip_prob = 0.5;
  bool photometric_enabled = true;
  PhotometricConfig photometric{{-5, 5}, {0.8, 1.2}, {1, 1}, {-20, 20}, {0.8, 1.2}};
  bool horizontal_flip_enabled = false;
  double horizontal_flip_prob = 0.5;
  bool noise_enabled = false;
  double noise_sd = 5.0;
};

struct AugmentConfig {
  DetectionAugmentConfig detection;
  ClassificationAugmentConfig classification;
};

inline nlohmann::json photometric_to_json(const PhotometricConfig& p) {
  return {{"hue_delta", p.hue_delta},
          {"saturation_scale", p.saturation_scale},
          {"value_scale", p.value_scale},
          {"brightness_delta", p.brightness_delta},
          {"contrast_scale", p.contrast_scale}};
}

inline PhotometricConfig photometric_from_json(const nlohmann::json& j, PhotometricConfig p = {}) {
  if (j.contains("hue_delta")) p.hue_delta = j.at("hue_delta").get<Range>();
  if (j.contains("saturation_scale")) p.saturation_scale = j.at("saturation_scale").get<Range>();
  if (j.contains("value_scale")) p.value_scale = j.at("value_scale").get<Range>();
  if (j.contains("brightness_delta")) p.brightness_delta = j.at("brightness_delta").get<Range>();
  if (j.contains("contrast_scale")) p.contrast_scale = j.at("contrast_scale").get<Range>();
  p.validate();
  return p;
}

namespace detail {
inline nlohmann::json with_enabled(nlohmann::json j, bool enabled) {
  j["enabled"] = enabled;
  return j;
}
}  // namespace detail

inline nlohmann::json augment_to_json(const AugmentConfig& c) {
  using detail::with_enabled;
  const auto& d = c.detection;
  const auto& k = c.classification;
  return {
      {"detection",
       {{"mosaic",
         {{"enabled", d.mosaic_enabled},
          {"canvas", d.mosaic.canvas},
          {"center_jitter", d.mosaic.center_jitter},
          {"min_visible", d.mosaic.min_visible}}},
        {"hsv", with_enabled(photometric_to_json(d.hsv), d.hsv_enabled)},
        {"geometric",
         {{"enabled", d.geometric_enabled},
          {"scale", d.geometric.scale},
          {"shift_x", d.geometric.shift_x},
          {"shift_y", d.geometric.shift_y},
          {"flip_lr_prob", d.geometric.flip_lr_prob},
          {"min_visible", d.geometric.min_visible}}}}},
      {"classification",
       {{"vertical_flip", {{"enabled", k.vertical_flip_enabled}, {"prob", k.vertical_flip_prob}}},
        {"photometric", with_enabled(photometric_to_json(k.photometric), k.photometric_enabled)},
        {"horizontal_flip",
         {{"enabled", k.horizontal_flip_enabled}, {"prob", k.horizontal_flip_prob}}},
        {"noise", {{"enabled", k.noise_enabled}, {"sd", k.noise_sd}}}}}};
}

/// Missing keys keep their defaults.
inline AugmentConfig augment_from_json(const nlohmann::json& j) {
  AugmentConfig c;
  if (j.contains("detection")) {
    const auto& d = j.at("detection");
    auto& o = c.detection;
    if (d.contains("mosaic")) {
      const auto& m = d.at("mosaic");
      o.mosaic_enabled = m.value("enabled", o.mosaic_enabled);
      o.mosaic.canvas = m.value("canvas", o.mosaic.canvas);
      o.mosaic.center_jitter = m.value("center_jitter", o.mosaic.center_jitter);
      o.mosaic.min_visible = m.value("min_visible", o.mosaic.min_visible);
      o.mosaic.validate();
    }
    if (d.contains("hsv")) {
      o.hsv_enabled = d.at("hsv").value("enabled", o.hsv_enabled);
      o.hsv = photometric_from_json(d.at("hsv"), o.hsv);
    }
    if (d.contains("geometric")) {
      const auto& g = d.at("geometric");
      o.geometric_enabled = g.value("enabled", o.geometric_enabled);
      if (g.contains("scale")) o.geometric.scale = g.at("scale").get<Range>();
      if (g.contains("shift_x")) o.geometric.shift_x = g.at("shift_x").get<Range>();
      if (g.contains("shift_y")) o.geometric.shift_y = g.at("shift_y").get<Range>();
      o.geometric.flip_lr_prob = g.value("flip_lr_prob", o.geometric.flip_lr_prob);
      o.geometric.min_visible = g.value("min_visible", o.geometric.min_visible);
      o.geometric.validate();
    }
  }
  if (j.contains("classification")) {
    const auto& k = j.at("classification");
    auto& o = c.classification;
    if (k.contains("vertical_flip")) {
      o.vertical_flip_enabled = k.at("vertical_flip").value("enabled", o.vertical_flip_enabled);
      o.vertical_flip_prob = k.at("vertical_flip").value("prob", o.vertical_flip_prob);
    }
    if (k.contains("photometric")) {
      o.photometric_enabled = k.at("photometric").value("enabled", o.photometric_enabled);
      o.photometric = photometric_from_json(k.at("photometric"), o.photometric);
    }
    if (k.contains("horizontal_flip")) {
      o.horizontal_flip_enabled = k.at("horizontal_flip").value("enabled", o.horizontal_flip_enabled);
      o.horizontal_flip_prob = k.at("horizontal_flip").value("prob", o.horizontal_flip_prob);
    }
    if (k.contains("noise")) {
      o.noise_enabled = k.at("noise").value("enabled", o.noise_enabled);
      o.noise_sd = k.at("noise").value("sd", o.noise_sd);
    }
  }
  return c;
}

/// Class-preserving augmentation of one classification crop.
inline Raster augment_crop(const Raster& img, const ClassificationAugmentConfig& cfg,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Raster out = cfg.photometric_enabled ? photometric(img, cfg.photometric, rng()) : img;
  if (cfg.vertical_flip_enabled && std::bernoulli_distribution(cfg.vertical_flip_prob)(rng))
    out = flip_ud(out);
  if (cfg.horizontal_flip_enabled && std::bernoulli_distribution(cfg.horizontal_flip_prob)(rng))
    out = flip_lr(out);
  if (cfg.noise_enabled && cfg.noise_sd > 0) {
    std::normal_distribution<double> nd(0.0, cfg.noise_sd);
    for (auto& v : out.data) v = round_to_u8(v + nd(rng));
  }
  return out;
}

/// Detection pipeline for one training sample: optional mosaic with three
/// partners, then geometric and HSV jitter.
inline AugSample augment_detection(const std::vector<AugSample>& four,
                                   const DetectionAugmentConfig& cfg, std::uint64_t seed) {
  if (four.empty()) throw Error("augment", "no sample to augment");
  std::mt19937_64 rng(seed);
  AugSample s = cfg.mosaic_enabled ? mosaic(four, cfg.mosaic, rng()).sample : four[0];
  if (!cfg.mosaic_enabled) rng();
  if (cfg.geometric_enabled) s = geometric(s, cfg.geometric, rng());
  else rng();
  if (cfg.hsv_enabled) s.image = photometric(s.image, cfg.hsv, rng());
  return s;
}

}  // namespace vesselid
