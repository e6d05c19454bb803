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

// Detector/classifier baselines, external prediction files and focal-plane
// fusion.
//
// The baselines are deterministic classical stand-ins for trained networks:
// a threshold + connected-component detector and a nearest-centroid
// classifier over four shape/texture features. Externally produced
// predictions enter through the line-delimited file formats below.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vesselid/components.hpp"
#include "vesselid/core.hpp"
#include "vesselid/preprocess.hpp"
#include "vesselid/raster.hpp"

namespace vesselid {

// ---------------------------------------------------------------------------
// Detector

enum class ThresholdMode { otsu, fixed };

struct DetectorParams {
  ThresholdMode threshold_mode = ThresholdMode::otsu;
  /// Pixels darker than this are foreground (fixed mode).
  int fixed_threshold = 128;
  std::int64_t min_area_px = 16;
  std::int64_t max_area_px = std::int64_t{1} << 40;

  void validate() const {
    if (min_area_px > max_area_px)
      throw Error("config", "min_area_px must not exceed max_area_px");
    if (fixed_threshold < 0 || fixed_threshold > 256)
      throw Error("config", "fixed_threshold must lie in [0, 256]");
  }
};

/// Threshold actually used on this image.
inline int detection_threshold(const Raster& gray, const DetectorParams& params) {
  return params.threshold_mode == ThresholdMode::otsu
             ? otsu_threshold(histogram(gray))
             : params.fixed_threshold;
}

/// Dark objects on a bright background: foreground is v < threshold, i.e.
/// the bright side of the inverted image. Boxes are tight around 8-connected
/// components within the area window; confidence is component solidity.
inline std::vector<Detection> detect_baseline(const Raster& gray,
                                              const DetectorParams& params) {
  params.validate();
  if (gray.channels != 1) throw Error("shape", "detector expects a 1-channel raster");
  if (gray.empty()) return {};
  const int t = detection_threshold(gray, params);
  auto comps = label_components(gray.width, gray.height,
                                [&](int x, int y) { return gray.at(x, y) < t; });
  std::vector<Detection> out;
  for (const auto& c : comps) {
    if (c.area < params.min_area_px || c.area > params.max_area_px) continue;
    out.push_back({c.bbox, solidity(c)});
  }
  return out;
}

/// Keeps detections at or above the confidence threshold, order preserved.
inline std::vector<Detection> filter_confidence(const std::vector<Detection>& dets,
                                                double threshold) {
  std::vector<Detection> out;
  for (const auto& d : dets)
    if (d.confidence >= threshold) out.push_back(d);
  return out;
}

// ---------------------------------------------------------------------------
// Classifier features

constexpr std::size_t kFeatureCount = 4;
using FeatureVector = std::array<double, kFeatureCount>;

/// (foreground long side px, aspect ratio, mean interior intensity,
/// dot-texture energy) of the largest dark component inside the crop's
/// content rectangle.
///
/// Long side and aspect come from second moments (rotation invariant):
/// long side = 4 sqrt(l1), aspect = sqrt(l1 / l2). Interior holes (pits)
/// are filled before measuring; texture energy is the mean absolute
/// 4-neighbour Laplacian over pixels whose neighbours are all inside.
inline FeatureVector crop_features(const Raster& gray, const BBox& content) {
  if (gray.channels != 1) throw Error("shape", "features need a 1-channel raster");
  const BBox r = content.clipped(gray.width, gray.height);
  if (!r.valid()) throw Error("range", "empty crop content");
  const int w = static_cast<int>(r.width()), h = static_cast<int>(r.height());
  const int ox = static_cast<int>(r.x_min), oy = static_cast<int>(r.y_min);

  std::array<std::uint64_t, 256> hist{};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) ++hist[gray.at(ox + x, oy + y)];
  const int t = otsu_threshold(hist);
  auto comps = label_components(w, h, [&](int x, int y) { return gray.at(ox + x, oy + y) < t; });
  if (comps.empty()) return {0.0, 1.0, 255.0, 0.0};
  const Component* best = &comps[0];
  for (const auto& c : comps)
    if (c.area > best->area) best = &c;

  // Mask of the component, then fill holes: background not reachable from
  // the border becomes foreground.
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
  for (const auto& run : best->runs)
    for (int x = run.x0; x < run.x1; ++x) mask[static_cast<std::size_t>(run.y) * w + x] = 1;
  std::vector<std::uint8_t> outside(mask.size(), 0);
  std::vector<int> stack;
  auto seed = [&](int x, int y) {
    auto i = static_cast<std::size_t>(y) * w + x;
    if (!mask[i] && !outside[i]) {
      outside[i] = 1;
      stack.push_back(static_cast<int>(i));
    }
  };
  for (int x = 0; x < w; ++x) {
    seed(x, 0);
    seed(x, h - 1);
  }
  for (int y = 0; y < h; ++y) {
    seed(0, y);
    seed(w - 1, y);
  }
  while (!stack.empty()) {
    int i = stack.back();
    stack.pop_back();
    int x = i % w, y = i / w;
    if (x > 0) seed(x - 1, y);
    if (x + 1 < w) seed(x + 1, y);
    if (y > 0) seed(x, y - 1);
    if (y + 1 < h) seed(x, y + 1);
  }

  double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, intensity = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (outside[static_cast<std::size_t>(y) * w + x]) continue;
      n += 1;
      sx += x;
      sy += y;
      sxx += static_cast<double>(x) * x;
      syy += static_cast<double>(y) * y;
      sxy += static_cast<double>(x) * y;
      intensity += gray.at(ox + x, oy + y);
    }
  const double mx = sx / n, my = sy / n;
  const double cxx = sxx / n - mx * mx + 1.0 / 12, cyy = syy / n - my * my + 1.0 / 12;
  const double cxy = sxy / n - mx * my;
  const double tr = cxx + cyy, det = cxx * cyy - cxy * cxy;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
  const double l1 = tr / 2 + disc, l2 = std::max(1e-9, tr / 2 - disc);

  double texture = 0, tn = 0;
  auto inside = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < w && y < h &&
           !outside[static_cast<std::size_t>(y) * w + x];
  };
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      if (!inside(x, y) || !inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) ||
          !inside(x, y + 1))
        continue;
      const int c = gray.at(ox + x, oy + y);
      const int lap = 4 * c - gray.at(ox + x - 1, oy + y) - gray.at(ox + x + 1, oy + y) -
                      gray.at(ox + x, oy + y - 1) - gray.at(ox + x, oy + y + 1);
      texture += std::abs(lap);
      tn += 1;
    }
  return {4.0 * std::sqrt(l1), std::sqrt(l1 / l2), intensity / n,
          tn > 0 ? texture / tn : 0.0};
}

/// Features of one model input. Multi-channel (stacked) inputs average the
/// per-channel feature vectors.
inline FeatureVector input_features(const Raster& input, const BBox& content) {
  if (input.channels == 1) return crop_features(input, content);
  FeatureVector acc{};
  for (int c = 0; c < input.channels; ++c) {
    Raster ch(input.width, input.height, 1);
    for (std::size_t p = 0; p < ch.data.size(); ++p)
      ch.data[p] = input.data[p * input.channels + c];
    auto f = crop_features(ch, content);
    for (std::size_t k = 0; k < kFeatureCount; ++k) acc[k] += f[k] / input.channels;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Nearest-centroid classifier

/// Standardizes features with training mean/sd, then scores genus g by
/// softmax(-distance to centroid g). Genera without training samples score 0.
class CentroidClassifier {
 public:
  CentroidClassifier() = default;
  explicit CentroidClassifier(GenusCatalog catalog) : catalog_(std::move(catalog)) {}

  bool trained() const noexcept { return trained_; }
  const GenusCatalog& catalog() const noexcept { return catalog_; }

  void fit(const std::vector<std::pair<FeatureVector, std::size_t>>& samples) {
    if (samples.empty()) throw Error("untrained", "no training samples");
    FeatureVector mean{}, sd{};
    for (const auto& [f, _] : samples)
      for (std::size_t k = 0; k < kFeatureCount; ++k) mean[k] += f[k];
    for (auto& m : mean) m /= static_cast<double>(samples.size());
    for (const auto& [f, _] : samples)
      for (std::size_t k = 0; k < kFeatureCount; ++k)
        sd[k] += (f[k] - mean[k]) * (f[k] - mean[k]);
    for (auto& s : sd) {
      s = std::sqrt(s / static_cast<double>(samples.size()));
      if (s < 1e-9) s = 1.0;
    }
    mean_ = mean;
    sd_ = sd;
    centroids_.assign(catalog_.size(), std::nullopt);
    std::vector<FeatureVector> sums(catalog_.size(), FeatureVector{});
    std::vector<std::size_t> counts(catalog_.size(), 0);
    for (const auto& [f, g] : samples) {
      if (g >= catalog_.size()) throw Error("range", "training label out of range");
      auto z = standardize(f);
      for (std::size_t k = 0; k < kFeatureCount; ++k) sums[g][k] += z[k];
      ++counts[g];
    }
    for (std::size_t g = 0; g < catalog_.size(); ++g) {
      if (counts[g] == 0) continue;
      FeatureVector c{};
      for (std::size_t k = 0; k < kFeatureCount; ++k) c[k] = sums[g][k] / counts[g];
      centroids_[g] = c;
    }
    trained_ = true;
  }

  ProbabilityVector predict(const FeatureVector& f) const {
    if (!trained_) throw Error("untrained", "classifier has not been fitted");
    auto z = standardize(f);
    std::vector<double> d(catalog_.size(), 0.0);
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < catalog_.size(); ++g) {
      if (!centroids_[g]) continue;
      double s = 0;
      for (std::size_t k = 0; k < kFeatureCount; ++k)
        s += (z[k] - (*centroids_[g])[k]) * (z[k] - (*centroids_[g])[k]);
      d[g] = std::sqrt(s);
      dmin = std::min(dmin, d[g]);
    }
    ProbabilityVector p{std::vector<double>(catalog_.size(), 0.0)};
    double total = 0;
    for (std::size_t g = 0; g < catalog_.size(); ++g) {
      if (!centroids_[g]) continue;
      p.scores[g] = std::exp(-(d[g] - dmin));
      total += p.scores[g];
    }
    for (auto& v : p.scores) v /= total;
    return p;
  }

  /// Raw feature vector sitting exactly on genus g's centroid.
  FeatureVector prototype(std::size_t g) const {
    if (!trained_ || g >= centroids_.size() || !centroids_[g])
      throw Error("untrained", "no centroid for class " + std::to_string(g));
    FeatureVector f{};
    for (std::size_t k = 0; k < kFeatureCount; ++k) f[k] = (*centroids_[g])[k] * sd_[k] + mean_[k];
    return f;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["genera"] = catalog_.names();
    j["mean"] = mean_;
    j["sd"] = sd_;
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : centroids_) cs.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
    j["centroids"] = cs;
    return j;
  }

  static CentroidClassifier from_json(const nlohmann::json& j) {
    CentroidClassifier c(GenusCatalog(j.at("genera").get<std::vector<std::string>>()));
    c.mean_ = j.at("mean").get<FeatureVector>();
    c.sd_ = j.at("sd").get<FeatureVector>();
    for (const auto& e : j.at("centroids")) {
      if (e.is_null()) c.centroids_.push_back(std::nullopt);
      else c.centroids_.push_back(e.get<FeatureVector>());
    }
    if (c.centroids_.size() != c.catalog_.size())
      throw Error("parse", "centroid table does not match genera");
    c.trained_ = true;
    return c;
  }

 private:
  FeatureVector standardize(const FeatureVector& f) const {
    FeatureVector z{};
    for (std::size_t k = 0; k < kFeatureCount; ++k) z[k] = (f[k] - mean_[k]) / sd_[k];
    return z;
  }

  GenusCatalog catalog_;
  FeatureVector mean_{};
  FeatureVector sd_{};
  std::vector<std::optional<FeatureVector>> centroids_;
  bool trained_ = false;
};

enum class FusionMode { average, maximum };

inline std::string to_string(FusionMode m) {
  return m == FusionMode::average ? "average" : "maximum";
}

inline FusionMode parse_fusion(const std::string& s) {
  if (s == "average") return FusionMode::average;
  if (s == "maximum") return FusionMode::maximum;
  throw Error("parse", "unknown fusion mode '" + s + "'");
}

/// Average keeps a distribution; maximum is element-wise and left
/// unnormalized since only its argmax is used.
inline ProbabilityVector fuse(const std::vector<ProbabilityVector>& vectors, FusionMode mode) {
  if (vectors.empty()) throw Error("empty", "nothing to fuse");
  const std::size_t n = vectors[0].size();
  for (const auto& v : vectors)
    if (v.size() != n) throw Error("shape", "fused vectors differ in length");
  ProbabilityVector out{std::vector<double>(n, mode == FusionMode::average ? 0.0 : -1.0)};
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < n; ++i) {
      if (mode == FusionMode::average) out.scores[i] += v.scores[i];
      else out.scores[i] = std::max(out.scores[i], v.scores[i]);
    }
  if (mode == FusionMode::average)
    for (auto& s : out.scores) s /= static_cast<double>(vectors.size());
  return out;
}

/// One classifier per model input slot: per-plane mode fits one table per
/// focal plane, single/stack3 modes use slot 0 only.
struct PlaneClassifier {
  PlaneMode mode = PlaneMode::per_plane();
  FusionMode fusion = FusionMode::average;
  std::vector<CentroidClassifier> slots;
  /// Macerations whose annotations trained this model (leakage checks).
  std::vector<std::string> training_macerations;

  bool trained() const {
    return !slots.empty() &&
           std::all_of(slots.begin(), slots.end(), [](const auto& s) { return s.trained(); });
  }

  /// inputs[i] goes to slot i. The fused vector is rescaled to sum to 1.
  ProbabilityVector classify(const std::vector<Raster>& inputs, const BBox& content) const {
    if (!trained()) throw Error("untrained", "classifier has not been fitted");
    if (inputs.size() != slots.size())
      throw Error("shape", "expected " + std::to_string(slots.size()) + " model inputs, got " +
                               std::to_string(inputs.size()));
    std::vector<ProbabilityVector> per;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      per.push_back(slots[i].predict(input_features(inputs[i], content)));
    if (per.size() == 1) return per[0];
    auto out = fuse(per, fusion);
    const double total = out.sum();
    if (total > 0)
      for (auto& v : out.scores) v /= total;
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["plane_mode"] = mode.str();
    j["fusion"] = to_string(fusion);
    j["training_macerations"] = training_macerations;
    nlohmann::json s = nlohmann::json::array();
    for (const auto& c : slots) s.push_back(c.to_json());
    j["slots"] = s;
    return j;
  }

  static PlaneClassifier from_json(const nlohmann::json& j) {
    PlaneClassifier p;
    p.mode = PlaneMode::parse(j.at("plane_mode").get<std::string>());
    p.fusion = parse_fusion(j.value("fusion", std::string("average")));
    p.training_macerations = j.value("training_macerations", std::vector<std::string>{});
    for (const auto& s : j.at("slots")) p.slots.push_back(CentroidClassifier::from_json(s));
    return p;
  }
};

// ---------------------------------------------------------------------------
// External prediction files
//
// Detections:      "# slide=<id> long_side=<px>" then
//                  "x_min y_min x_max y_max confidence" per line.
// Classifications: "annotation_id <genus_1> ... <genus_n>" header then
//                  "<id> p_1 ... p_n" per line.

struct DetectionFile {
  std::string slide_id;
  std::int64_t long_side = 0;
  std::vector<Detection> detections;
};

inline DetectionFile parse_detection_file(std::istream& in) {
  DetectionFile f;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "slide") f.slide_id = val;
        else if (key == "long_side") f.long_side = std::stoll(val);
      }
      header = true;
      continue;
    }
    if (!header) throw Error("parse", "detection file lacks a header before line " + std::to_string(lineno));
    std::istringstream ls(line);
    Detection d;
    std::string extra;
    if (!(ls >> d.bbox.x_min >> d.bbox.y_min >> d.bbox.x_max >> d.bbox.y_max >> d.confidence) ||
        (ls >> extra))
      throw Error("parse", "malformed detection row " + std::to_string(lineno));
    if (!d.bbox.valid() || d.confidence < 0 || d.confidence > 1)
      throw Error("parse", "invalid detection on row " + std::to_string(lineno));
    f.detections.push_back(d);
  }
  if (!header || f.slide_id.empty() || f.long_side <= 0)
    throw Error("parse", "detection file header must carry slide and long_side");
  return f;
}

inline void write_detection_file(std::ostream& out, const std::string& slide_id,
                                 std::int64_t long_side, const std::vector<Detection>& dets) {
  out << "# slide=" << slide_id << " long_side=" << long_side << '\n';
  for (const auto& d : dets) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(6) << d.confidence;
    out << d.bbox.x_min << ' ' << d.bbox.y_min << ' ' << d.bbox.x_max << ' ' << d.bbox.y_max
        << ' ' << c.str() << '\n';
  }
}

/// Detections rescaled from the file's working resolution to level 0.
inline std::vector<Detection> ingest_external_detections(std::istream& in,
                                                         const SlideMeta& slide) {
  auto f = parse_detection_file(in);
  if (f.slide_id != slide.slide_id)
    throw Error("wrong_slide", "prediction file is for slide '" + f.slide_id + "', expected '" +
                                   slide.slide_id + "'");
  const double s = static_cast<double>(slide.long_side()) / static_cast<double>(f.long_side);
  std::vector<Detection> out;
  for (const auto& d : f.detections) {
    BBox b{static_cast<std::int64_t>(std::floor(d.bbox.x_min * s + 1e-9)),
           static_cast<std::int64_t>(std::floor(d.bbox.y_min * s + 1e-9)),
           static_cast<std::int64_t>(std::ceil(d.bbox.x_max * s - 1e-9)),
           static_cast<std::int64_t>(std::ceil(d.bbox.y_max * s - 1e-9))};
    out.push_back({b.clipped(slide.width_px, slide.height_px), d.confidence});
  }
  return out;
}

using Classification = std::pair<std::string, ProbabilityVector>;

/// Rows are reordered into catalog order (absent genera score 0). Rows whose
/// sum is within 1e-3 of 1 are renormalized; others are rejected.
inline std::vector<Classification> ingest_external_classifications(std::istream& in,
                                                                   const GenusCatalog& catalog) {
  std::string line;
  int lineno = 0;
  std::vector<std::size_t> columns;
  bool header = false;
  std::vector<Classification> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (!header) {
      std::string first, g;
      ls >> first;
      if (first != "annotation_id")
        throw Error("parse", "classification header must start with annotation_id");
      while (ls >> g) {
        if (!catalog.contains(g))
          throw Error("unknown_genus", "unknown genus column '" + g + "'");
        columns.push_back(class_index(catalog, g));
      }
      if (columns.empty()) throw Error("parse", "classification header lists no genera");
      header = true;
      continue;
    }
    std::string id;
    ls >> id;
    ProbabilityVector p{std::vector<double>(catalog.size(), 0.0)};
    double sum = 0;
    for (auto col : columns) {
      double v;
      if (!(ls >> v) || !std::isfinite(v) || v < 0)
        throw Error("parse", "malformed classification row " + std::to_string(lineno));
      p.scores[col] = v;
      sum += v;
    }
    std::string extra;
    if (id.empty() || (ls >> extra))
      throw Error("parse", "malformed classification row " + std::to_string(lineno));
    if (std::abs(sum - 1.0) > 1e-3)
      throw Error("bad_probability", "probabilities on row " + std::to_string(lineno) +
                                         " sum to " + std::to_string(sum));
    for (auto& v : p.scores) v /= sum;
    out.emplace_back(id, std::move(p));
  }
  if (!header) throw Error("parse", "classification file has no header");
  return out;
}

inline void write_classification_file(std::ostream& out, const GenusCatalog& catalog,
                                      const std::vector<Classification>& rows) {
  out << "annotation_id";
  for (const auto& g : catalog.names()) out << ' ' << g;
  out << '\n';
  out << std::setprecision(9);
  for (const auto& [id, p] : rows) {
    out << id;
    for (double v : p.scores) out << ' ' << v;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Slide-level genus presence

struct PresenceRule {
  std::size_t min_count = 3;
  double min_fraction = 0.05;
};

struct GenusPresence {
  std::string genus;
  std::size_t count = 0;
  double fraction = 0.0;
};

struct ClassifiedDetection {
  Detection detection;
  std::size_t genus = 0;  // catalog index
};

/// Genera with at least min_count detections and at least min_fraction of the
/// classified detections above the confidence threshold, by descending count.
inline std::vector<GenusPresence> slide_report(const std::vector<ClassifiedDetection>& dets,
                                               const GenusCatalog& catalog,
                                               const PresenceRule& rule,
                                               double confidence_threshold = 0.0) {
  std::vector<std::size_t> counts(catalog.size(), 0);
  std::size_t total = 0;
  for (const auto& d : dets) {
    if (d.detection.confidence < confidence_threshold) continue;
    if (d.genus >= catalog.size()) throw Error("range", "genus index out of range");
    ++counts[d.genus];
    ++total;
  }
  std::vector<GenusPresence> out;
  if (total == 0) return out;
  for (std::size_t g = 0; g < catalog.size(); ++g) {
    const double frac = static_cast<double>(counts[g]) / total;
    if (counts[g] >= rule.min_count && frac >= rule.min_fraction)
      out.push_back({catalog.name(g), counts[g], frac});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.count > b.count; });
  return out;
}

}  // namespace vesselid
