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

// Deterministic synthetic macerate slides with exact ground truth.
//
// Vessel elements are rotated super-ellipses carrying a periodic dot pattern
// (pit proxy). Fibers are thin unannotated distractors. Focal planes are the
// base rendering blurred per plane, optionally with additive noise.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vesselid/core.hpp"
#include "vesselid/raster.hpp"
#include "vesselid/slide_store.hpp"

namespace vesselid {

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

struct SynthGenusProfile {
  std::string genus;
  MeanSd length_px;
  MeanSd aspect;
  /// Dot-lattice frequency in cycles per pixel.
  double pit_texture_freq = 0.1;
  std::array<std::uint8_t, 3> base_tint{120, 100, 160};

  void validate() const {
    if (genus.empty()) throw Error("config", "profile without genus");
    if (!(length_px.mean > 0) || !(aspect.mean > 0) || !(pit_texture_freq > 0))
      throw Error("config", "profile means must be positive for " + genus);
    if (length_px.sd < 0 || aspect.sd < 0)
      throw Error("config", "profile sd must be non-negative for " + genus);
  }
};

/// Full-resolution profiles of the nine default genera. Hevea is ~1400 px
/// long; the other means are free parameters chosen to be distinct.
inline std::vector<SynthGenusProfile> default_profiles() {
  return {
      {"Acacia", {450, 45}, {2.2, 0.2}, 1.0 / 14, {150, 110, 170}},
      {"Betula", {1100, 110}, {5.0, 0.4}, 1.0 / 10, {120, 120, 175}},
      {"Eucalyptus", {650, 65}, {2.6, 0.2}, 1.0 / 22, {110, 80, 140}},
      {"Fagus", {800, 80}, {3.6, 0.3}, 1.0 / 12, {135, 95, 165}},
      {"Hevea", {1400, 140}, {3.0, 0.25}, 1.0 / 26, {100, 95, 150}},
      {"Liquidambar", {1250, 125}, {6.0, 0.5}, 1.0 / 9, {160, 130, 185}},
      {"Populus", {900, 90}, {3.0, 0.25}, 1.0 / 16, {170, 150, 195}},
      {"Salix", {750, 75}, {2.4, 0.2}, 1.0 / 18, {90, 70, 120}},
      {"Schima", {1000, 100}, {5.5, 0.45}, 1.0 / 20, {140, 135, 180}},
  };
}

/// Lengths multiplied by `factor`; the dot lattice period scales along.
inline std::vector<SynthGenusProfile> scale_profiles(std::vector<SynthGenusProfile> profiles,
                                                     double factor) {
  if (!(factor > 0)) throw Error("config", "profile scale must be positive");
  for (auto& p : profiles) {
    p.length_px.mean *= factor;
    p.length_px.sd *= factor;
    p.pit_texture_freq /= factor;
  }
  return profiles;
}

inline nlohmann::json profile_to_json(const SynthGenusProfile& p) {
  return {{"genus", p.genus},
          {"length_px", {{"mean", p.length_px.mean}, {"sd", p.length_px.sd}}},
          {"aspect", {{"mean", p.aspect.mean}, {"sd", p.aspect.sd}}},
          {"pit_texture_freq", p.pit_texture_freq},
          {"base_tint", p.base_tint}};
}

inline SynthGenusProfile profile_from_json(const nlohmann::json& j) {
  SynthGenusProfile p;
  p.genus = j.at("genus").get<std::string>();
  p.length_px = {j.at("length_px").at("mean").get<double>(),
                 j.at("length_px").value("sd", 0.0)};
  p.aspect = {j.at("aspect").at("mean").get<double>(), j.at("aspect").value("sd", 0.0)};
  p.pit_texture_freq = j.at("pit_texture_freq").get<double>();
  if (j.contains("base_tint")) p.base_tint = j.at("base_tint").get<std::array<std::uint8_t, 3>>();
  p.validate();
  return p;
}

struct SynthSpec {
  std::string slide_id = "synth";
  std::string maceration_id = "synth-m";
  int width = 2048;
  int height = 2048;
  int planes = 5;
  std::map<std::string, double> genus_mix{{"Fagus", 0.5}, {"Hevea", 0.5}};
  int element_count = 20;
  int fiber_count = 0;
  double brightness = 1.0;
  double stain_jitter = 0.1;
  /// One radius per plane; empty means 2 * |k - middle|.
  std::vector<int> blur_per_plane;
  /// Additive Gaussian noise sd per plane; empty means none.
  std::vector<double> noise_per_plane;
  std::uint64_t seed = 1;
  /// Pairwise box IOU cap for placement; lifted entirely in clustered mode.
  double max_iou = 0.3;
  /// Extra clearance between element boxes (px); only with max_iou == 0.
  int min_gap_px = 0;
  bool clustered = false;
  double pixel_scale_um = 0.69;

  std::vector<int> blur_radii() const {
    if (!blur_per_plane.empty()) return blur_per_plane;
    std::vector<int> r(planes);
    for (int k = 0; k < planes; ++k) r[k] = 2 * std::abs(k - (planes - 1) / 2);
    return r;
  }

  void validate() const {
    if (width < 1 || height < 1 || planes < 1)
      throw Error("config", "synthetic slide needs positive size and plane count");
    if (element_count < 0 || fiber_count < 0) throw Error("config", "counts must be >= 0");
    double s = 0;
    for (const auto& [g, f] : genus_mix) {
      if (f < 0) throw Error("config", "negative mix fraction for " + g);
      s += f;
    }
    if (!genus_mix.empty() && std::abs(s - 1.0) > 1e-9)
      throw Error("config", "genus_mix fractions must sum to 1");
    if (genus_mix.empty() && element_count > 0)
      throw Error("config", "elements requested without a genus mix");
    if (brightness < 0 || brightness > 1 || stain_jitter < 0 || stain_jitter > 1)
      throw Error("config", "brightness and stain_jitter must lie in [0, 1]");
    if (!blur_per_plane.empty() && static_cast<int>(blur_per_plane.size()) != planes)
      throw Error("config", "blur_per_plane needs one radius per plane");
    if (!noise_per_plane.empty() && static_cast<int>(noise_per_plane.size()) != planes)
      throw Error("config", "noise_per_plane needs one value per plane");
  }
};

inline nlohmann::json spec_to_json(const SynthSpec& s) {
  return {{"slide_id", s.slide_id},
          {"maceration_id", s.maceration_id},
          {"width_px", s.width},
          {"height_px", s.height},
          {"plane_count", s.planes},
          {"genus_mix", s.genus_mix},
          {"element_count", s.element_count},
          {"fiber_count", s.fiber_count},
          {"brightness", s.brightness},
          {"stain_jitter", s.stain_jitter},
          {"blur_per_plane", s.blur_per_plane},
          {"noise_per_plane", s.noise_per_plane},
          {"seed", s.seed},
          {"max_iou", s.max_iou},
          {"min_gap_px", s.min_gap_px},
          {"clustered", s.clustered},
          {"pixel_scale_um", s.pixel_scale_um}};
}

inline SynthSpec spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.slide_id = j.value("slide_id", s.slide_id);
  s.maceration_id = j.value("maceration_id", s.maceration_id);
  s.width = j.value("width_px", s.width);
  s.height = j.value("height_px", s.height);
  s.planes = j.value("plane_count", s.planes);
  if (j.contains("genus_mix")) s.genus_mix = j.at("genus_mix").get<std::map<std::string, double>>();
  s.element_count = j.value("element_count", s.element_count);
  s.fiber_count = j.value("fiber_count", s.fiber_count);
  s.brightness = j.value("brightness", s.brightness);
  s.stain_jitter = j.value("stain_jitter", s.stain_jitter);
  s.blur_per_plane = j.value("blur_per_plane", s.blur_per_plane);
  s.noise_per_plane = j.value("noise_per_plane", s.noise_per_plane);
  s.seed = j.value("seed", s.seed);
  s.max_iou = j.value("max_iou", s.max_iou);
  s.min_gap_px = j.value("min_gap_px", s.min_gap_px);
  s.clustered = j.value("clustered", s.clustered);
  s.pixel_scale_um = j.value("pixel_scale_um", s.pixel_scale_um);
  s.validate();
  return s;
}

/// A config file holds the spec keys plus optional "profiles" (list) and
/// "profile_scale" (applied to the listed or default profiles).
struct SynthConfig {
  SynthSpec spec;
  std::vector<SynthGenusProfile> profiles = default_profiles();
};

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.spec = spec_from_json(j);
  if (j.contains("profiles")) {
    c.profiles.clear();
    for (const auto& p : j.at("profiles")) c.profiles.push_back(profile_from_json(p));
  }
  if (j.contains("profile_scale"))
    c.profiles = scale_profiles(c.profiles, j.at("profile_scale").get<double>());
  return c;
}

/// Exact integer counts summing to n: floor(f n) plus one extra for the
/// largest remainders (ties by key order).
inline std::map<std::string, int> largest_remainder_counts(
    const std::map<std::string, double>& mix, int n) {
  std::map<std::string, int> out;
  std::vector<std::pair<double, std::string>> rem;
  int assigned = 0;
  for (const auto& [g, f] : mix) {
    const double exact = f * n;
    const int base = static_cast<int>(std::floor(exact + 1e-9));
    out[g] = base;
    assigned += base;
    rem.emplace_back(exact - base, g);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; assigned < n && i < static_cast<int>(rem.size()); ++i, ++assigned)
    ++out[rem[i].second];
  return out;
}

/// Separable box blur of the given radius (window 2r + 1, edges clamped),
/// rounded half up. Radius 0 returns the input unchanged.
inline Raster box_blur(const Raster& src, int radius) {
  if (radius < 0) throw Error("range", "blur radius must be non-negative");
  if (radius == 0 || src.empty()) return src;
  const int w = src.width, h = src.height, ch = src.channels;
  const int n = 2 * radius + 1;
  Raster tmp(w, h, ch), out(w, h, ch);
  std::vector<std::uint32_t> acc;
  for (int y = 0; y < h; ++y)
    for (int c = 0; c < ch; ++c) {
      std::uint32_t s = 0;
      for (int k = -radius; k <= radius; ++k) s += src.at(std::clamp(k, 0, w - 1), y, c);
      for (int x = 0; x < w; ++x) {
        tmp.at(x, y, c) = static_cast<std::uint8_t>((s + n / 2) / n);
        s += src.at(std::min(x + radius + 1, w - 1), y, c);
        s -= src.at(std::max(x - radius, 0), y, c);
      }
    }
  for (int x = 0; x < w; ++x)
    for (int c = 0; c < ch; ++c) {
      std::uint32_t s = 0;
      for (int k = -radius; k <= radius; ++k) s += tmp.at(x, std::clamp(k, 0, h - 1), c);
      for (int y = 0; y < h; ++y) {
        out.at(x, y, c) = static_cast<std::uint8_t>((s + n / 2) / n);
        s += tmp.at(x, std::min(y + radius + 1, h - 1), c);
        s -= tmp.at(x, std::max(y - radius, 0), c);
      }
    }
  return out;
}

/// Additive Gaussian noise, clamped and rounded; sd 0 is the identity.
inline Raster add_noise(const Raster& src, double sd, std::uint64_t seed) {
  if (sd < 0) throw Error("range", "noise sd must be non-negative");
  if (sd == 0) return src;
  Raster out = src;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : out.data) v = round_to_u8(v + nd(rng));
  return out;
}

/// Plane k is the base blurred with radii[k].
inline std::vector<Raster> plane_degrade(const Raster& base, const std::vector<int>& radii) {
  if (radii.empty()) throw Error("range", "at least one blur radius is required");
  std::vector<Raster> out;
  for (int r : radii) out.push_back(box_blur(base, r));
  return out;
}

/// Pixel mask of one drawn shape, relative to its integer anchor.
struct ShapeMask {
  BBox box;  // relative to the anchor
  std::vector<std::uint8_t> bits;  // row-major over box; 1 = body, 2 = dot
  std::uint8_t get(std::int64_t x, std::int64_t y) const {
    return bits[static_cast<std::size_t>((y - box.y_min) * box.width() + (x - box.x_min))];
  }
};

/// Rotated super-ellipse |u/a|^n + |v/b|^n <= 1 sampled at pixel centres,
/// with a dot lattice of period `period` in the shape frame (0 = no dots).
inline ShapeMask super_ellipse_mask(double a, double b, double exponent, double angle,
                                    double period) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  const auto r = static_cast<std::int64_t>(std::ceil(std::max(a, b))) + 1;
  std::vector<std::uint8_t> full(static_cast<std::size_t>((2 * r) * (2 * r)), 0);
  BBox tight{r, r, -r, -r};
  for (std::int64_t y = -r; y < r; ++y)
    for (std::int64_t x = -r; x < r; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double u = px * ca + py * sa, v = -px * sa + py * ca;
      if (std::pow(std::abs(u / a), exponent) + std::pow(std::abs(v / b), exponent) > 1.0)
        continue;
      std::uint8_t bit = 1;
      if (period > 0) {
        const double fu = u / period - std::round(u / period);
        const double fv = v / period - std::round(v / period);
        if (fu * fu + fv * fv < 0.09) bit = 2;
      }
      full[static_cast<std::size_t>((y + r) * 2 * r + (x + r))] = bit;
      tight.x_min = std::min(tight.x_min, x);
      tight.y_min = std::min(tight.y_min, y);
      tight.x_max = std::max(tight.x_max, x + 1);
      tight.y_max = std::max(tight.y_max, y + 1);
    }
  ShapeMask m;
  if (!tight.valid()) {
    m.box = {0, 0, 1, 1};
    m.bits = {1};
    return m;
  }
  m.box = tight;
  m.bits.resize(static_cast<std::size_t>(tight.area()));
  for (std::int64_t y = tight.y_min; y < tight.y_max; ++y)
    for (std::int64_t x = tight.x_min; x < tight.x_max; ++x)
      m.bits[static_cast<std::size_t>((y - tight.y_min) * tight.width() + (x - tight.x_min))] =
          full[static_cast<std::size_t>((y + r) * 2 * r + (x + r))];
  return m;
}

struct SynthScene {
  Raster base;  // RGB, before plane blur/noise
  std::vector<Annotation> truth;
  std::vector<BBox> fibers;
};

namespace detail {

inline const SynthGenusProfile& find_profile(const std::vector<SynthGenusProfile>& profiles,
                                             const std::string& genus) {
  for (const auto& p : profiles)
    if (p.genus == genus) return p;
  throw Error("config", "no synthetic profile for genus '" + genus + "'");
}

inline double sample_positive(std::mt19937_64& rng, const MeanSd& d, double lo_frac) {
  std::normal_distribution<double> nd(d.mean, d.sd);
  const double v = d.sd > 0 ? nd(rng) : d.mean;
  return std::clamp(v, d.mean * lo_frac, d.mean * (2.0 - lo_frac));
}

inline void paint(Raster& img, const ShapeMask& m, std::int64_t ax, std::int64_t ay,
                  const std::array<double, 3>& body, const std::array<double, 3>& dot) {
  for (std::int64_t y = m.box.y_min; y < m.box.y_max; ++y)
    for (std::int64_t x = m.box.x_min; x < m.box.x_max; ++x) {
      const auto bit = m.get(x, y);
      if (!bit) continue;
      const auto& col = bit == 2 ? dot : body;
      for (int c = 0; c < 3; ++c)
        img.at(static_cast<int>(ax + x), static_cast<int>(ay + y), c) = round_to_u8(col[c]);
    }
}

inline bool acceptable(const BBox& cand, const std::vector<BBox>& placed, double max_iou,
                       int gap) {
  for (const auto& b : placed) {
    if (max_iou <= 0) {
      BBox grown{b.x_min - gap, b.y_min - gap, b.x_max + gap, b.y_max + gap};
      if (intersect(cand, grown).valid()) return false;
    } else {
      const BBox i = intersect(cand, b);
      if (!i.valid()) continue;
      const double inter = static_cast<double>(i.area());
      if (inter / (cand.area() + b.area() - inter) > max_iou) return false;
    }
  }
  return true;
}

}  // namespace detail

constexpr std::array<std::uint8_t, 3> kSynthBackground{236, 234, 228};

/// Renders the base image and ground truth. Deterministic in (spec, profiles).
inline SynthScene render_scene(const SynthSpec& spec,
                               const std::vector<SynthGenusProfile>& profiles) {
  spec.validate();
  for (const auto& [g, _] : spec.genus_mix) detail::find_profile(profiles, g).validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SynthScene scene;
  scene.base = Raster(spec.width, spec.height, 3);
  for (std::size_t i = 0; i < scene.base.data.size(); ++i)
    scene.base.data[i] = kSynthBackground[i % 3];

  std::vector<std::string> order;
  for (const auto& [g, n] : largest_remainder_counts(spec.genus_mix, spec.element_count))
    order.insert(order.end(), n, g);
  std::shuffle(order.begin(), order.end(), rng);

  // Cluster centres for the clustered mode.
  std::vector<std::pair<double, double>> clusters;
  if (spec.clustered) {
    const int k = std::max(1, spec.element_count / 4);
    for (int i = 0; i < k; ++i)
      clusters.emplace_back(unit(rng) * spec.width, unit(rng) * spec.height);
  }

  struct Placed {
    ShapeMask mask;
    std::int64_t ax, ay;
    std::array<double, 3> body, dot;
  };
  std::vector<Placed> elements;
  std::vector<BBox> boxes;
  constexpr int kAttempts = 2000;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& prof = detail::find_profile(profiles, order[i]);
    const double len = detail::sample_positive(rng, prof.length_px, 0.6);
    const double asp = std::max(1.0, detail::sample_positive(rng, prof.aspect, 0.6));
    const double angle = unit(rng) * M_PI;
    auto mask = super_ellipse_mask(len / 2, len / (2 * asp), 2.5, angle,
                                   1.0 / prof.pit_texture_freq);
    if (mask.box.width() > spec.width || mask.box.height() > spec.height)
      throw Error("config", "element of " + prof.genus + " does not fit the slide");
    std::array<double, 3> body{}, dot{};
    for (int c = 0; c < 3; ++c) {
      const double j = 1.0 + spec.stain_jitter * (unit(rng) - 0.5);
      body[c] = std::clamp(prof.base_tint[c] * j, 0.0, 255.0);
      dot[c] = body[c] * 0.55;
    }
    bool placed = false;
    for (int a = 0; a < kAttempts && !placed; ++a) {
      std::int64_t ax, ay;
      if (spec.clustered) {
        const auto& [cx, cy] = clusters[static_cast<std::size_t>(unit(rng) * clusters.size())];
        const double spread = prof.length_px.mean * 0.6;
        ax = static_cast<std::int64_t>(std::llround(cx + (unit(rng) - 0.5) * 2 * spread));
        ay = static_cast<std::int64_t>(std::llround(cy + (unit(rng) - 0.5) * 2 * spread));
        ax = std::clamp<std::int64_t>(ax, -mask.box.x_min, spec.width - mask.box.x_max);
        ay = std::clamp<std::int64_t>(ay, -mask.box.y_min, spec.height - mask.box.y_max);
      } else {
        ax = -mask.box.x_min +
             static_cast<std::int64_t>(unit(rng) * (spec.width - mask.box.width() + 1));
        ay = -mask.box.y_min +
             static_cast<std::int64_t>(unit(rng) * (spec.height - mask.box.height() + 1));
      }
      const BBox cand = mask.box.translated(ax, ay);
      if (!spec.clustered && !detail::acceptable(cand, boxes, spec.max_iou, spec.min_gap_px))
        continue;
      boxes.push_back(cand);
      elements.push_back({std::move(mask), ax, ay, body, dot});
      placed = true;
    }
    if (!placed)
      throw Error("crowded", "could not place element " + std::to_string(i) +
                                 " under the overlap cap; enlarge the slide or lower the count");
  }

  // Fibers first so elements paint over them; fibers keep clear of element
  // boxes outside clustered mode.
  for (int i = 0; i < spec.fiber_count; ++i) {
    const double len = 0.5 * profiles.front().length_px.mean * (0.8 + 0.8 * unit(rng));
    const double width = std::max(2.0, len / (25.0 + 15.0 * unit(rng)));
    auto mask = super_ellipse_mask(len / 2, width / 2, 2.0, unit(rng) * M_PI, 0.0);
    const std::array<double, 3> tone{150.0 + 20 * unit(rng), 125.0, 115.0};
    bool placed = false;
    for (int a = 0; a < kAttempts && !placed; ++a) {
      if (mask.box.width() > spec.width || mask.box.height() > spec.height) break;
      const std::int64_t ax = -mask.box.x_min + static_cast<std::int64_t>(
                                                    unit(rng) * (spec.width - mask.box.width() + 1));
      const std::int64_t ay = -mask.box.y_min + static_cast<std::int64_t>(
                                                    unit(rng) * (spec.height - mask.box.height() + 1));
      const BBox cand = mask.box.translated(ax, ay);
      if (!spec.clustered && !detail::acceptable(cand, boxes, 0.0, spec.min_gap_px)) continue;
      detail::paint(scene.base, mask, ax, ay, tone, tone);
      scene.fibers.push_back(cand);
      placed = true;
    }
    if (!placed) throw Error("crowded", "could not place fiber " + std::to_string(i));
  }

  for (std::size_t i = 0; i < elements.size(); ++i) {
    const auto& e = elements[i];
    detail::paint(scene.base, e.mask, e.ax, e.ay, e.body, e.dot);
    Annotation a;
    a.annotation_id = spec.slide_id + "-gt" + std::to_string(i);
    a.slide_id = spec.slide_id;
    a.bbox = boxes[i];
    a.genus = order[i];
    a.source = Source::human;
    a.review = Review::accepted;
    a.version = 1;
    scene.truth.push_back(std::move(a));
  }

  if (spec.brightness != 1.0)
    for (auto& v : scene.base.data) v = round_to_u8(v * spec.brightness);
  return scene;
}

/// Plane k of a rendered scene: blur, then per-plane noise.
inline Raster render_plane(const SynthScene& scene, const SynthSpec& spec, int plane) {
  const auto radii = spec.blur_radii();
  Raster out = box_blur(scene.base, radii.at(plane));
  if (!spec.noise_per_plane.empty())
    out = add_noise(out, spec.noise_per_plane.at(plane),
                    spec.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(plane) + 1);
  return out;
}

inline SlideMeta synth_meta(const SynthSpec& spec) {
  SlideMeta m;
  m.slide_id = spec.slide_id;
  m.maceration_id = spec.maceration_id;
  if (spec.genus_mix.size() == 1) m.genus = spec.genus_mix.begin()->first;
  m.pixel_scale_um = spec.pixel_scale_um;
  m.plane_count = spec.planes;
  m.width_px = spec.width;
  m.height_px = spec.height;
  m.channels = 3;
  return m;
}

struct SynthResult {
  SlideContainer slide;
  std::vector<Annotation> truth;
};

/// Renders and stores a slide. Planes are produced one at a time, so peak
/// memory is about two full-resolution rasters.
inline SynthResult generate(const SynthSpec& spec,
                            const std::vector<SynthGenusProfile>& profiles,
                            const std::filesystem::path& root,
                            int tile_size = SlideContainer::kDefaultTileSize) {
  auto scene = render_scene(spec, profiles);
  int cached_plane = -1;
  Raster cached;
  PlaneSource src = [&](int plane, std::int64_t x, std::int64_t y, int w, int h) {
    if (plane != cached_plane) {
      cached = render_plane(scene, spec, plane);
      cached_plane = plane;
    }
    return crop(cached, static_cast<int>(x), static_cast<int>(y), w, h);
  };
  auto slide = SlideWriter::write(src, synth_meta(spec), root, tile_size);
  return {std::move(slide), std::move(scene.truth)};
}

}  // namespace vesselid
