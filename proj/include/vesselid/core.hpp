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

// Domain types shared by every module: genus catalog, slide metadata,
// boxes, annotations and per-genus probability vectors.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vesselid {

/// Error carrying a short machine-readable code next to the message.
/// The CLI prints both on one line when a command fails.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class GenusCatalog {
 public:
  /// The nine hardwood genera of the reference collection, in class-index
  /// order.
  static GenusCatalog default_catalog() {
    return GenusCatalog({"Acacia", "Betula", "Eucalyptus", "Fagus", "Hevea",
                         "Liquidambar", "Populus", "Salix", "Schima"});
  }

  GenusCatalog() : GenusCatalog(default_catalog()) {}

  explicit GenusCatalog(std::vector<std::string> genera)
      : genera_(std::move(genera)) {
    std::set<std::string> seen;
    for (const auto& g : genera_) {
      if (g.empty()) throw Error("catalog", "empty genus name in catalog");
      if (!seen.insert(g).second)
        throw Error("catalog", "duplicate genus name in catalog: " + g);
    }
    if (genera_.empty()) throw Error("catalog", "genus catalog is empty");
  }

  /// One genus per line; blank lines are skipped.
  static GenusCatalog parse(std::istream& in) {
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
        line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
    return GenusCatalog(std::move(names));
  }

  static GenusCatalog load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "cannot open genus catalog " + path);
    return parse(in);
  }

  void write(std::ostream& out) const {
    for (const auto& g : genera_) out << g << '\n';
  }

  std::size_t size() const noexcept { return genera_.size(); }
  const std::string& name(std::size_t index) const { return genera_.at(index); }
  const std::vector<std::string>& names() const noexcept { return genera_; }

  bool contains(std::string_view name) const {
    return std::find(genera_.begin(), genera_.end(), name) != genera_.end();
  }

  bool operator==(const GenusCatalog&) const = default;

 private:
  std::vector<std::string> genera_;
};

inline std::size_t class_index(const GenusCatalog& catalog,
                               std::string_view name) {
  const auto& names = catalog.names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end())
    throw Error("unknown_genus",
                "unknown genus '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - names.begin());
}

/// Axis-aligned box in level-0 pixels, half-open: [x_min, x_max) x
/// [y_min, y_max).
struct BBox {
  std::int64_t x_min = 0;
  std::int64_t y_min = 0;
  std::int64_t x_max = 0;
  std::int64_t y_max = 0;

  std::int64_t width() const noexcept { return x_max - x_min; }
  std::int64_t height() const noexcept { return y_max - y_min; }
  std::int64_t area() const noexcept {
    return valid() ? width() * height() : 0;
  }
  bool valid() const noexcept { return x_min < x_max && y_min < y_max; }

  BBox translated(std::int64_t dx, std::int64_t dy) const noexcept {
    return {x_min + dx, y_min + dy, x_max + dx, y_max + dy};
  }

  /// Intersection with [0,w) x [0,h); may come back invalid.
  BBox clipped(std::int64_t w, std::int64_t h) const noexcept {
    return {std::clamp<std::int64_t>(x_min, 0, w),
            std::clamp<std::int64_t>(y_min, 0, h),
            std::clamp<std::int64_t>(x_max, 0, w),
            std::clamp<std::int64_t>(y_max, 0, h)};
  }

  bool contains(const BBox& o) const noexcept {
    return o.x_min >= x_min && o.y_min >= y_min && o.x_max <= x_max &&
           o.y_max <= y_max;
  }

  bool operator==(const BBox&) const = default;
};

inline BBox intersect(const BBox& a, const BBox& b) noexcept {
  return {std::max(a.x_min, b.x_min), std::max(a.y_min, b.y_min),
          std::min(a.x_max, b.x_max), std::min(a.y_max, b.y_max)};
}

/// A scored box; coordinates are in whatever raster the detector saw until
/// they are mapped back to level 0.
struct Detection {
  BBox bbox;
  double confidence = 0.0;

  bool operator==(const Detection&) const = default;
};

struct SlideMeta {
  std::string slide_id;
  std::string maceration_id;
  std::optional<std::string> genus;
  double pixel_scale_um = 0.69;
  double plane_step_um = 16.33;
  int plane_count = 5;
  std::int64_t width_px = 0;
  std::int64_t height_px = 0;
  int channels = 3;

  void validate() const {
    if (slide_id.empty()) throw Error("meta", "slide_id is empty");
    if (plane_count < 1)
      throw Error("meta", "plane_count must be >= 1 for " + slide_id);
    if (width_px <= 0 || height_px <= 0)
      throw Error("meta", "slide dimensions must be positive for " + slide_id);
    if (!(pixel_scale_um > 0))
      throw Error("meta", "pixel_scale_um must be positive for " + slide_id);
    if (channels != 1 && channels != 3)
      throw Error("meta", "channels must be 1 or 3 for " + slide_id);
  }

  std::int64_t long_side() const noexcept {
    return std::max(width_px, height_px);
  }
};

enum class Source { human, predicted, corrected };
enum class Review { pending, accepted, rejected };

inline std::string to_string(Source s) {
  switch (s) {
    case Source::human: return "human";
    case Source::predicted: return "predicted";
    case Source::corrected: return "corrected";
  }
  return "?";
}

inline std::string to_string(Review r) {
  switch (r) {
    case Review::pending: return "pending";
    case Review::accepted: return "accepted";
    case Review::rejected: return "rejected";
  }
  return "?";
}

inline Source parse_source(std::string_view s) {
  if (s == "human") return Source::human;
  if (s == "predicted") return Source::predicted;
  if (s == "corrected") return Source::corrected;
  throw Error("parse", "unknown annotation source '" + std::string(s) + "'");
}

inline Review parse_review(std::string_view s) {
  if (s == "pending") return Review::pending;
  if (s == "accepted") return Review::accepted;
  if (s == "rejected") return Review::rejected;
  throw Error("parse", "unknown review state '" + std::string(s) + "'");
}

struct Annotation {
  std::string annotation_id;
  std::string slide_id;
  BBox bbox;
  std::optional<std::string> genus;
  std::optional<double> confidence;
  Source source = Source::human;
  Review review = Review::accepted;
  int version = 1;
  // Free-text note, e.g. an anatomical subtype. Not part of the file format.
  std::string note;

  void validate() const {
    if (annotation_id.empty()) throw Error("annotation", "empty annotation id");
    if (!bbox.valid())
      throw Error("annotation", "degenerate bbox on " + annotation_id);
    if (source != Source::predicted && review != Review::accepted)
      throw Error("annotation", "human/corrected annotation " + annotation_id +
                                    " must be accepted");
    if (confidence.has_value() != (source == Source::predicted))
      throw Error("annotation", "confidence must be present iff predicted on " +
                                    annotation_id);
    if (confidence && (*confidence < 0.0 || *confidence > 1.0))
      throw Error("annotation", "confidence out of [0,1] on " + annotation_id);
    if (version < 1) throw Error("annotation", "version < 1 on " + annotation_id);
  }

  bool operator==(const Annotation& o) const {
    return annotation_id == o.annotation_id && slide_id == o.slide_id &&
           bbox == o.bbox && genus == o.genus && confidence == o.confidence &&
           source == o.source && review == o.review && version == o.version;
  }
};

/// One score per catalog genus.
struct ProbabilityVector {
  std::vector<double> scores;

  std::size_t size() const noexcept { return scores.size(); }
  double sum() const noexcept {
    double s = 0.0;
    for (double v : scores) s += v;
    return s;
  }
};

/// Index of the maximal score; ties go to the lowest index.
inline std::size_t argmax_index(const ProbabilityVector& p) {
  if (p.scores.empty()) throw Error("empty", "argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.scores.size(); ++i)
    if (p.scores[i] > p.scores[best]) best = i;
  return best;
}

inline const std::string& argmax_class(const GenusCatalog& catalog,
                                       const ProbabilityVector& p) {
  if (p.scores.empty()) throw Error("empty", "argmax of an empty vector");
  if (p.size() != catalog.size())
    throw Error("shape", "probability vector has " + std::to_string(p.size()) +
                             " entries, catalog has " +
                             std::to_string(catalog.size()));
  return catalog.name(argmax_index(p));
}

}  // namespace vesselid
