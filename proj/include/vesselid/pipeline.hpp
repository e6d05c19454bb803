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

// Workflow commands behind the command-line tool. Each command reads the
// dataset root, writes under the output directory and leaves a manifest.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>
#include <json.hpp>

#include "vesselid/augment.hpp"
#include "vesselid/core.hpp"
#include "vesselid/dataset.hpp"
#include "vesselid/metrics.hpp"
#include "vesselid/png_io.hpp"
#include "vesselid/preprocess.hpp"
#include "vesselid/scorers.hpp"
#include "vesselid/slide_store.hpp"
#include "vesselid/synth.hpp"

namespace vesselid {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Configuration

struct DetectionSettings {
  std::string scorer = "baseline";  // baseline | external
  std::string external_dir;
  std::int64_t long_side = 5184;
  int tile_size = 2560;
  int overlap = 256;
  int plane = -1;  // 0-based; -1 picks the middle plane
  /// Area limits are in level-0 pixels.
  DetectorParams params;
  double confidence_threshold = 0.25;
  int tile_budget = 64;
};

struct ClassificationSettings {
  std::string scorer = "baseline";  // baseline | external
  std::string external_dir;
  NormalizeConfig normalize;
  double margin = 0.0;
  PlaneMode plane_mode = PlaneMode::per_plane();
  FusionMode fusion = FusionMode::average;
};

struct EvaluationSettings {
  double iou_threshold = 0.5;
  Partition partition = Partition::test;
  std::map<std::string, std::string> merge_groups;
};

struct RunConfig {
  std::filesystem::path dataset = ".";
  std::filesystem::path out;  // empty: <dataset>/run
  std::uint64_t seed = 0;
  GenusCatalog catalog;
  DetectionSettings detection;
  ClassificationSettings classification;
  EvaluationSettings evaluation;
  PresenceRule presence;
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};
  nlohmann::json split_assignment;  // optional maceration -> partition
  nlohmann::json synth = nlohmann::json::object();
  nlohmann::json ingest = nlohmann::json::array();
  AugmentConfig augment;
  int augment_samples = 8;
  std::int64_t augment_view = 1280;
  nlohmann::json loop = nlohmann::json::object();
  /// Directory that relative paths inside the config resolve against.
  std::filesystem::path base;

  std::filesystem::path out_dir() const { return out.empty() ? dataset / "run" : out; }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path q(p);
    return q.is_absolute() || base.empty() ? q : base / q;
  }

  nlohmann::json to_json() const {
    const auto& d = detection;
    const auto& c = classification;
    nlohmann::json aug = augment_to_json(augment);
    aug["samples"] = augment_samples;
    aug["view_long_side"] = augment_view;
    nlohmann::json j{
        {"dataset", dataset.string()},
        {"out", out_dir().string()},
        {"seed", seed},
        {"genera", catalog.names()},
        {"detection",
         {{"scorer", d.scorer},
          {"external_dir", d.external_dir},
          {"long_side", d.long_side},
          {"tile_size", d.tile_size},
          {"overlap", d.overlap},
          {"plane", d.plane},
          {"threshold_mode", d.params.threshold_mode == ThresholdMode::otsu ? "otsu" : "fixed"},
          {"fixed_threshold", d.params.fixed_threshold},
          {"min_area_px", d.params.min_area_px},
          {"max_area_px", d.params.max_area_px},
          {"confidence_threshold", d.confidence_threshold},
          {"tile_budget", d.tile_budget}}},
        {"classification",
         {{"scorer", c.scorer},
          {"external_dir", c.external_dir},
          {"target", c.normalize.target},
          {"normalize", c.normalize.mode == NormalizeMode::pad ? "pad" : "distort_resize"},
          {"grayscale", c.normalize.grayscale},
          {"margin", c.margin},
          {"plane_mode", c.plane_mode.str()},
          {"fusion", to_string(c.fusion)}}},
        {"evaluate",
         {{"iou_threshold", evaluation.iou_threshold},
          {"partition", to_string(evaluation.partition)},
          {"merge_groups", evaluation.merge_groups}}},
        {"presence", {{"min_count", presence.min_count}, {"min_fraction", presence.min_fraction}}},
        {"split", {{"ratios", split_ratios}}},
        {"synth", synth},
        {"ingest", ingest},
        {"augment", aug},
        {"loop", loop}};
    if (!split_assignment.is_null()) j["split"]["assignment"] = split_assignment;
    return j;
  }

  /// Missing keys keep their defaults. Relative paths resolve against `base`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
    RunConfig r;
    r.base = base;
    try {
      if (j.contains("dataset")) r.dataset = r.resolve(j["dataset"].get<std::string>());
      if (j.contains("out")) r.out = r.resolve(j["out"].get<std::string>());
      r.seed = j.value("seed", r.seed);
      if (j.contains("genera")) r.catalog = GenusCatalog(j["genera"].get<std::vector<std::string>>());
      if (j.contains("catalog")) r.catalog = GenusCatalog::load(r.resolve(j["catalog"]).string());
      if (j.contains("detection")) {
        const auto& d = j["detection"];
        auto& s = r.detection;
        s.scorer = d.value("scorer", s.scorer);
        if (d.contains("external_dir")) s.external_dir = r.resolve(d["external_dir"]).string();
        s.long_side = d.value("long_side", s.long_side);
        s.tile_size = d.value("tile_size", s.tile_size);
        s.overlap = d.value("overlap", s.overlap);
        s.plane = d.value("plane", s.plane);
        const auto mode = d.value("threshold_mode", std::string("otsu"));
        if (mode != "otsu" && mode != "fixed")
          throw Error("config", "threshold_mode must be otsu or fixed");
        s.params.threshold_mode = mode == "otsu" ? ThresholdMode::otsu : ThresholdMode::fixed;
        s.params.fixed_threshold = d.value("fixed_threshold", s.params.fixed_threshold);
        s.params.min_area_px = d.value("min_area_px", s.params.min_area_px);
        s.params.max_area_px = d.value("max_area_px", s.params.max_area_px);
        s.confidence_threshold = d.value("confidence_threshold", s.confidence_threshold);
        s.tile_budget = d.value("tile_budget", s.tile_budget);
      }
      if (j.contains("classification")) {
        const auto& c = j["classification"];
        auto& s = r.classification;
        s.scorer = c.value("scorer", s.scorer);
        if (c.contains("external_dir")) s.external_dir = r.resolve(c["external_dir"]).string();
        s.normalize.target = c.value("target", s.normalize.target);
        const auto mode = c.value("normalize", std::string("pad"));
        if (mode != "pad" && mode != "distort_resize")
          throw Error("config", "normalize must be pad or distort_resize");
        s.normalize.mode = mode == "pad" ? NormalizeMode::pad : NormalizeMode::distort_resize;
        s.normalize.grayscale = c.value("grayscale", s.normalize.grayscale);
        s.margin = c.value("margin", s.margin);
        if (c.contains("plane_mode")) s.plane_mode = PlaneMode::parse(c["plane_mode"]);
        if (c.contains("fusion")) s.fusion = parse_fusion(c["fusion"]);
      }
      if (j.contains("evaluate")) {
        const auto& e = j["evaluate"];
        r.evaluation.iou_threshold = e.value("iou_threshold", r.evaluation.iou_threshold);
        if (e.contains("partition")) r.evaluation.partition = parse_partition(e["partition"]);
        if (e.contains("merge_groups"))
          r.evaluation.merge_groups = e["merge_groups"].get<std::map<std::string, std::string>>();
      }
      if (j.contains("presence")) {
        r.presence.min_count = j["presence"].value("min_count", r.presence.min_count);
        r.presence.min_fraction = j["presence"].value("min_fraction", r.presence.min_fraction);
      }
      if (j.contains("split")) {
        r.split_ratios = j["split"].value("ratios", r.split_ratios);
        if (j["split"].contains("assignment")) r.split_assignment = j["split"]["assignment"];
      }
      if (j.contains("synth")) r.synth = j["synth"];
      if (j.contains("ingest")) r.ingest = j["ingest"];
      if (j.contains("augment")) {
        const auto& a = j["augment"];
        r.augment = augment_from_json(a);
        r.augment_samples = a.value("samples", r.augment_samples);
        r.augment_view = a.value("view_long_side", r.augment_view);
      }
      if (j.contains("loop")) r.loop = j["loop"];
    } catch (const nlohmann::json::exception& e) {
      throw Error("config", e.what());
    }
    r.validate();
    return r;
  }

  static RunConfig load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error("io", "cannot open config " + file.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error("config", file.string() + ": " + e.what());
    }
    return from_json(j, file.parent_path());
  }

  void validate() const {
    detection.params.validate();
    if (detection.long_side < 1) throw Error("config", "detection long_side must be positive");
    if (detection.tile_size < 1 || detection.overlap < 0 || detection.overlap >= detection.tile_size)
      throw Error("config", "tile overlap must lie in [0, tile_size)");
    if (detection.scorer != "baseline" && detection.scorer != "external")
      throw Error("scorer", "unknown detection scorer '" + detection.scorer + "'");
    if (classification.scorer != "baseline" && classification.scorer != "external")
      throw Error("scorer", "unknown classification scorer '" + classification.scorer + "'");
    if (classification.normalize.target < 1) throw Error("config", "classification target must be positive");
  }

  /// FNV-1a over the canonical effective config.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_json().dump()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Shared plumbing

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io", "cannot write " + p.string());
  out << s;
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("not_found", "missing " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", p.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Seed for item `i` of a stream `tag` under the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t i) {
  return detail::splitmix(detail::splitmix(seed ^ detail::splitmix(tag)) + i);
}

struct RunPaths {
  std::filesystem::path out;
  std::filesystem::path predictions() const { return out / "predictions"; }
  std::filesystem::path models() const { return out / "models"; }
  std::filesystem::path reports() const { return out / "reports"; }
  std::filesystem::path detections(const std::string& slide) const {
    return predictions() / (slide + ".det");
  }
  std::filesystem::path classifications(const std::string& slide) const {
    return predictions() / (slide + ".cls");
  }
  std::filesystem::path presence(const std::string& slide) const {
    return reports() / (slide + ".presence.json");
  }
};

inline nlohmann::json versions() {
  return {{"vesselid", kVersion},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"libpng", PNG_LIBPNG_VER_STRING}};
}

/// `<out>/manifest_<command>.json`; no timestamps, so reruns are identical.
inline void write_manifest(const RunConfig& cfg, const std::string& command,
                           const nlohmann::json& summary) {
  nlohmann::json m{{"command", command},
                   {"config_hash", cfg.hash()},
                   {"seed", cfg.seed},
                   {"versions", versions()},
                   {"config", cfg.to_json()},
                   {"summary", summary}};
  detail::write_text(cfg.out_dir() / ("manifest_" + command + ".json"), m.dump(2) + "\n");
}

inline DatasetIndex load_or_create_index(const RunConfig& cfg) {
  if (std::filesystem::exists(cfg.dataset / "index.json")) return DatasetIndex::load(cfg.dataset);
  return {};
}

inline SlideContainer open_slide(const RunConfig& cfg, const DatasetIndex& index,
                                 const std::string& slide_id) {
  const auto rel = index.container_path(slide_id);
  if (rel.empty()) throw Error("not_found", "slide " + slide_id + " has no stored pixels");
  std::filesystem::path p(rel);
  return SlideContainer::open(p.is_absolute() ? p : cfg.dataset / p);
}

inline std::filesystem::path split_file(const RunConfig& cfg) { return cfg.dataset / "split.json"; }

inline SplitAssignment load_split(const RunConfig& cfg) {
  return SplitAssignment::from_json(detail::read_json(split_file(cfg)));
}

// ---------------------------------------------------------------------------
// Detection

/// Baseline detector over a tiling. One global threshold is computed on the
/// whole image and handed to every tile.
inline std::vector<Detection> detect_tiled(const Raster& gray, DetectorParams params, int tile_size,
                                           int overlap) {
  if (gray.empty()) return {};
  params.fixed_threshold = detection_threshold(gray, params);
  params.threshold_mode = ThresholdMode::fixed;
  const auto plan = plan_tiles(gray.width, gray.height, tile_size, overlap);
  std::vector<TileDetections> per;
  for (std::size_t i = 0; i < plan.grid.size(); ++i) {
    const BBox& t = plan.grid[i];
    Raster part = crop(gray, static_cast<int>(t.x_min), static_cast<int>(t.y_min),
                       static_cast<int>(t.width()), static_cast<int>(t.height()));
    per.push_back({i, detect_baseline(part, params)});
  }
  return stitch(per, plan);
}

/// Downscale, tile, score, stitch; boxes come back in level-0 pixels.
inline std::vector<Detection> detect_slide(const SlideContainer& c, const DetectionSettings& s) {
  const auto& m = c.meta();
  const int plane = s.plane < 0 ? m.plane_count / 2 : s.plane;
  if (plane >= m.plane_count)
    throw Error("missing_plane", "slide " + m.slide_id + " has no plane " + std::to_string(plane + 1));
  const std::int64_t long0 = m.long_side();
  const std::int64_t target = std::min(s.long_side, long0);
  Raster view = target < long0
                    ? downscaled_view(c, plane, target, s.tile_budget)
                    : read_region(c, {plane, 0, {0, 0, m.width_px, m.height_px}}, s.tile_budget);
  Raster gray = grayscale(view);
  const std::int64_t W = m.width_px, H = m.height_px, w = gray.width, h = gray.height;
  DetectorParams p = s.params;
  const double area_scale = static_cast<double>(w * h) / static_cast<double>(W * H);
  if (area_scale < 1.0) {
    p.min_area_px = static_cast<std::int64_t>(std::floor(p.min_area_px * area_scale));
    if (p.max_area_px < (std::int64_t{1} << 40))
      p.max_area_px = static_cast<std::int64_t>(std::ceil(p.max_area_px * area_scale));
  }
  auto dets = detect_tiled(gray, p, s.tile_size, s.overlap);
  for (auto& d : dets) {
    auto& b = d.bbox;
    b = BBox{b.x_min * W / w, b.y_min * H / h, (b.x_max * W + w - 1) / w, (b.y_max * H + h - 1) / h}
            .clipped(W, H);
  }
  return dets;
}

inline DetectionSettings detector_model(const RunConfig& cfg) {
  DetectionSettings s = cfg.detection;
  const auto p = RunPaths{cfg.out_dir()}.models() / "detector.json";
  if (std::filesystem::exists(p)) {
    auto j = detail::read_json(p);
    s.params.min_area_px = j.value("min_area_px", s.params.min_area_px);
    s.params.max_area_px = j.value("max_area_px", s.params.max_area_px);
  }
  return s;
}

inline std::vector<Detection> read_detections(const RunConfig& cfg, const SlideMeta& meta) {
  const auto p = RunPaths{cfg.out_dir()}.detections(meta.slide_id);
  std::ifstream in(p);
  if (!in) throw Error("not_found", "no detections for slide " + meta.slide_id);
  return ingest_external_detections(in, meta);
}

// ---------------------------------------------------------------------------
// Classification

/// Normalized model inputs for one box; `content` receives the crop's place
/// inside the S x S frame.
inline std::vector<Raster> model_inputs(TileReader& reader, const SlideContainer& c,
                                        const BBox& box, const ClassificationSettings& s,
                                        BBox& content) {
  const int P = c.meta().plane_count;
  const auto need = s.plane_mode.required(P);
  for (int p : need)
    if (p < 0 || p >= P)
      throw Error("missing_plane", "slide " + c.meta().slide_id + " lacks plane " +
                                       std::to_string(p + 1) + " required by " + s.plane_mode.str());
  std::vector<Raster> crops(P);
  for (int p : need) {
    auto n = normalize_crop(extract_crop(reader, c, box, p, s.margin), s.normalize);
    crops[p] = std::move(n.image);
    content = n.content;
  }
  return assemble_planes(crops, s.plane_mode);
}

/// Fits one centroid table per model input on accepted annotations of the
/// given slides.
inline PlaneClassifier fit_classifier(const RunConfig& cfg, const DatasetIndex& index,
                                      const std::vector<std::string>& slides) {
  PlaneClassifier pc;
  pc.mode = cfg.classification.plane_mode;
  pc.fusion = cfg.classification.fusion;
  std::vector<std::vector<std::pair<FeatureVector, std::size_t>>> samples;
  std::set<std::string> macs;
  for (const auto& sid : slides) {
    auto c = open_slide(cfg, index, sid);
    TileReader reader(c, cfg.detection.tile_budget);
    bool used = false;
    for (const auto& a : index.training_export(sid)) {
      auto g = index.genus_of(a);
      if (!g || !cfg.catalog.contains(*g)) continue;
      BBox content;
      auto inputs = model_inputs(reader, c, a.bbox, cfg.classification, content);
      if (samples.empty()) samples.resize(inputs.size());
      if (inputs.size() != samples.size())
        throw Error("shape", "slide " + sid + " yields a different number of model inputs");
      const auto label = class_index(cfg.catalog, *g);
      for (std::size_t i = 0; i < inputs.size(); ++i)
        samples[i].emplace_back(input_features(inputs[i], content), label);
      used = true;
    }
    if (used) macs.insert(index.maceration_of(sid));
  }
  if (samples.empty()) throw Error("untrained", "no labelled training annotations");
  for (const auto& s : samples) {
    CentroidClassifier cc(cfg.catalog);
    cc.fit(s);
    pc.slots.push_back(std::move(cc));
  }
  pc.training_macerations.assign(macs.begin(), macs.end());
  return pc;
}

inline std::string detection_id(const std::string& slide, std::size_t k) {
  return slide + "-d" + std::to_string(k);
}

/// Classifies every detection at or above the confidence threshold.
inline std::vector<Classification> classify_detections(const RunConfig& cfg,
                                                       const PlaneClassifier& model,
                                                       const SlideContainer& c,
                                                       const std::vector<Detection>& dets) {
  TileReader reader(c, cfg.detection.tile_budget);
  std::vector<Classification> out;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    if (dets[k].confidence < cfg.detection.confidence_threshold) continue;
    BBox content;
    auto inputs = model_inputs(reader, c, dets[k].bbox, cfg.classification, content);
    out.emplace_back(detection_id(c.meta().slide_id, k), model.classify(inputs, content));
  }
  return out;
}

inline std::vector<ClassifiedDetection> classified(const std::string& slide,
                                                   const std::vector<Detection>& dets,
                                                   const std::vector<Classification>& cls) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t k = 0; k < dets.size(); ++k) by_id[detection_id(slide, k)] = k;
  std::vector<ClassifiedDetection> out;
  for (const auto& [id, p] : cls) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("not_found", "classification for unknown detection " + id);
    out.push_back({dets[it->second], argmax_index(p)});
  }
  return out;
}

inline nlohmann::json presence_json(const std::string& slide, std::size_t classified_count,
                                    const std::vector<GenusPresence>& report) {
  nlohmann::json g = nlohmann::json::array();
  for (const auto& r : report)
    g.push_back(nlohmann::json{{"genus", r.genus}, {"count", r.count}, {"fraction", r.fraction}});
  return {{"slide_id", slide}, {"classified", classified_count}, {"genera", g}};
}

inline std::vector<Classification> read_classifications(const RunConfig& cfg,
                                                        const std::string& slide) {
  std::ifstream in(RunPaths{cfg.out_dir()}.classifications(slide));
  if (!in) throw Error("not_found", "no classifications for slide " + slide);
  return ingest_external_classifications(in, cfg.catalog);
}

// ---------------------------------------------------------------------------
// Commands

inline nlohmann::json cmd_synth(const RunConfig& cfg, std::ostream& log) {
  const auto& sj = cfg.synth;
  auto profiles = default_profiles();
  if (sj.contains("profiles")) {
    profiles.clear();
    for (const auto& p : sj["profiles"]) profiles.push_back(profile_from_json(p));
  }
  if (sj.contains("profile_scale")) profiles = scale_profiles(profiles, sj["profile_scale"].get<double>());
  const int tile_size = sj.value("tile_size", SlideContainer::kDefaultTileSize);

  struct Job {
    SynthSpec spec;
    bool annotate = true;
  };
  std::vector<Job> jobs;
  if (sj.contains("slides")) {
    std::size_t i = 0;
    for (const auto& s : sj["slides"]) {
      auto js = s;
      if (!js.contains("seed")) js["seed"] = derive_seed(cfg.seed, 1, i);
      jobs.push_back({spec_from_json(js), s.value("annotate", true)});
      ++i;
    }
  }
  if (sj.contains("batch")) {
    const auto& b = sj["batch"];
    const int count = b.value("count", 0);
    const auto genera = b.value("genera", cfg.catalog.names());
    const int per = b.value("genera_per_slide", 1);
    const int each = b.value("elements_per_genus", 10);
    const std::string prefix = b.value("prefix", std::string("s"));
    const bool annotate = b.value("annotate", true);
    if (count < 0 || per < 1 || per > static_cast<int>(genera.size()) || each < 1)
      throw Error("config", "bad synth batch parameters");
    for (int i = 0; i < count; ++i) {
      auto js = b.value("spec", nlohmann::json::object());
      std::ostringstream id;
      id << prefix << std::setw(2) << std::setfill('0') << i;
      js["slide_id"] = id.str();
      js["maceration_id"] = id.str() + "-m";
      js["seed"] = derive_seed(cfg.seed, 2, static_cast<std::uint64_t>(i));
      nlohmann::json mix = nlohmann::json::object();
      for (int k = 0; k < per; ++k) mix[genera[(static_cast<std::size_t>(i) * per + k) % genera.size()]] = 1.0 / per;
      js["genus_mix"] = mix;
      js["element_count"] = per * each;
      jobs.push_back({spec_from_json(js), annotate});
    }
  }
  if (jobs.empty()) throw Error("config", "synth config lists no slides");

  auto index = load_or_create_index(cfg);
  nlohmann::json made = nlohmann::json::array();
  for (const auto& job : jobs) {
    const auto& spec = job.spec;
    if (index.has_slide(spec.slide_id)) throw Error("conflict", "slide " + spec.slide_id + " exists");
    for (const auto& [g, _] : spec.genus_mix)
      if (!cfg.catalog.contains(g)) throw Error("unknown_genus", "unknown genus '" + g + "'");
    const std::string rel = "slides/" + spec.slide_id;
    std::filesystem::remove_all(cfg.dataset / rel);
    auto res = generate(spec, profiles, cfg.dataset / rel, tile_size);
    index.add_slide(res.slide.meta(), rel);
    std::ostringstream truth;
    write_annotations(truth, res.truth);
    detail::write_text(cfg.dataset / "truth" / (spec.slide_id + ".csv"), truth.str());
    if (job.annotate)
      for (const auto& a : res.truth) index.add_annotation(a);
    log << "synth " << spec.slide_id << ": " << res.truth.size() << " elements\n";
    made.push_back(nlohmann::json{{"slide_id", spec.slide_id}, {"elements", res.truth.size()}});
  }
  index.save(cfg.dataset);
  nlohmann::json summary{{"slides", made}};
  write_manifest(cfg, "synth", summary);
  return summary;
}

/// Entries: {"meta": {...} | "meta_file": path, "planes": [png...],
/// "annotations": csv?, "tile_size"?}.
inline nlohmann::json cmd_ingest(const RunConfig& cfg, std::ostream& log) {
  if (!cfg.ingest.is_array() || cfg.ingest.empty()) throw Error("config", "ingest lists no slides");
  auto index = load_or_create_index(cfg);
  nlohmann::json done = nlohmann::json::array();
  for (const auto& e : cfg.ingest) {
    nlohmann::json mj = e.contains("meta_file") ? detail::read_json(cfg.resolve(e["meta_file"]))
                                                : e.at("meta");
    std::vector<Raster> planes;
    for (const auto& p : e.at("planes")) planes.push_back(read_png(cfg.resolve(p).string()));
    if (planes.empty()) throw Error("missing_plane", "ingest entry has no planes");
    if (!mj.contains("width_px")) mj["width_px"] = planes[0].width;
    if (!mj.contains("height_px")) mj["height_px"] = planes[0].height;
    auto meta = meta_from_json(mj);
    if (index.has_slide(meta.slide_id)) throw Error("conflict", "slide " + meta.slide_id + " exists");
    const std::string rel = "slides/" + meta.slide_id;
    std::filesystem::remove_all(cfg.dataset / rel);
    auto c = vesselid::ingest(planes, meta, cfg.dataset / rel,
                              e.value("tile_size", SlideContainer::kDefaultTileSize));
    index.add_slide(c.meta(), rel);
    std::size_t n = 0;
    if (e.contains("annotations")) {
      std::ifstream af(cfg.resolve(e["annotations"]));
      if (!af) throw Error("not_found", "missing annotation file for " + meta.slide_id);
      for (auto& a : read_annotations(af, meta.slide_id)) {
        if (a.bbox.x_min < 0 || a.bbox.y_min < 0 || a.bbox.x_max > meta.width_px ||
            a.bbox.y_max > meta.height_px)
          throw Error("invalid_bbox", "annotation " + a.annotation_id + " lies outside the slide");
        index.add_annotation(std::move(a));
        ++n;
      }
    }
    log << "ingest " << meta.slide_id << ": " << planes.size() << " planes, " << n
        << " annotations\n";
    done.push_back(nlohmann::json{{"slide_id", meta.slide_id}, {"planes", planes.size()}, {"annotations", n}});
  }
  index.save(cfg.dataset);
  nlohmann::json summary{{"slides", done}};
  write_manifest(cfg, "ingest", summary);
  return summary;
}

inline nlohmann::json cmd_split(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  SplitAssignment s;
  if (!cfg.split_assignment.is_null()) {
    s.ratios = cfg.split_ratios;
    s.seed = cfg.seed;
    const auto macs = index.macerations();
    for (const auto& [m, p] : cfg.split_assignment.items()) {
      if (!macs.count(m)) throw Error("not_found", "split assigns unknown maceration " + m);
      s.partition[m] = parse_partition(p.get<std::string>());
    }
    for (const auto& [m, _] : macs)
      if (!s.partition.count(m)) throw Error("config", "split leaves maceration " + m + " unassigned");
  } else {
    s = split(index, cfg.split_ratios, cfg.seed);
  }
  detail::write_text(split_file(cfg), s.to_json().dump(2) + "\n");
  nlohmann::json counts = nlohmann::json::object();
  for (auto p : {Partition::train, Partition::val, Partition::test}) {
    counts[to_string(p)] = {{"macerations", s.macerations_in(p).size()},
                            {"slides", slides_in(index, s, p).size()}};
    log << "split " << to_string(p) << ": " << s.macerations_in(p).size() << " macerations\n";
  }
  write_manifest(cfg, "split", counts);
  return counts;
}

inline nlohmann::json cmd_detect(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  const RunPaths paths{cfg.out_dir()};
  const auto settings = detector_model(cfg);
  nlohmann::json per = nlohmann::json::object();
  for (const auto& meta : index.slides()) {
    std::vector<Detection> dets;
    if (settings.scorer == "external") {
      const auto p = std::filesystem::path(settings.external_dir) / (meta.slide_id + ".det");
      std::ifstream in(p);
      if (!in) throw Error("scorer", "external detector output missing for slide " + meta.slide_id);
      dets = ingest_external_detections(in, meta);
    } else {
      dets = detect_slide(open_slide(cfg, index, meta.slide_id), settings);
    }
    std::ostringstream os;
    write_detection_file(os, meta.slide_id, meta.long_side(), dets);
    detail::write_text(paths.detections(meta.slide_id), os.str());
    log << "detect " << meta.slide_id << ": " << dets.size() << " boxes\n";
    per[meta.slide_id] = dets.size();
  }
  nlohmann::json summary{{"detections", per}};
  write_manifest(cfg, "detect", summary);
  return summary;
}

inline nlohmann::json cmd_classify(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  const RunPaths paths{cfg.out_dir()};
  PlaneClassifier model;
  if (cfg.classification.scorer == "baseline") {
    const auto split = load_split(cfg);
    model = fit_classifier(cfg, index, slides_in(index, split, Partition::train));
    detail::write_text(paths.models() / "classifier.json", model.to_json().dump(2) + "\n");
    log << "classifier fitted on " << model.training_macerations.size() << " macerations, "
        << model.mode.str() << " / " << to_string(model.fusion) << " fusion\n";
  }
  nlohmann::json per = nlohmann::json::object();
  for (const auto& meta : index.slides()) {
    if (!std::filesystem::exists(paths.detections(meta.slide_id))) continue;
    const auto dets = read_detections(cfg, meta);
    std::vector<Classification> cls;
    if (cfg.classification.scorer == "external") {
      const auto p = std::filesystem::path(cfg.classification.external_dir) / (meta.slide_id + ".cls");
      std::ifstream in(p);
      if (!in) throw Error("scorer", "external classifier output missing for slide " + meta.slide_id);
      cls = ingest_external_classifications(in, cfg.catalog);
    } else {
      cls = classify_detections(cfg, model, open_slide(cfg, index, meta.slide_id), dets);
    }
    std::ostringstream os;
    write_classification_file(os, cfg.catalog, cls);
    detail::write_text(paths.classifications(meta.slide_id), os.str());
    const auto cd = classified(meta.slide_id, dets, cls);
    const auto report = slide_report(cd, cfg.catalog, cfg.presence, cfg.detection.confidence_threshold);
    const auto pj = presence_json(meta.slide_id, cd.size(), report);
    detail::write_text(paths.presence(meta.slide_id), pj.dump(2) + "\n");
    log << "classify " << meta.slide_id << ": " << cls.size() << " crops, genera";
    for (const auto& r : report) log << ' ' << r.genus << '(' << r.count << ')';
    log << '\n';
    per[meta.slide_id] = pj;
  }
  nlohmann::json summary{{"fusion", to_string(cfg.classification.fusion)},
                         {"plane_mode", cfg.classification.plane_mode.str()},
                         {"slides", per}};
  write_manifest(cfg, "classify", summary);
  return summary;
}

inline nlohmann::json cmd_report(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  const RunPaths paths{cfg.out_dir()};
  nlohmann::json slides = nlohmann::json::array();
  for (const auto& meta : index.slides()) {
    if (!std::filesystem::exists(paths.classifications(meta.slide_id))) continue;
    const auto cd = classified(meta.slide_id, read_detections(cfg, meta),
                               read_classifications(cfg, meta.slide_id));
    const auto report = slide_report(cd, cfg.catalog, cfg.presence, cfg.detection.confidence_threshold);
    auto pj = presence_json(meta.slide_id, cd.size(), report);
    detail::write_text(paths.presence(meta.slide_id), pj.dump(2) + "\n");
    log << meta.slide_id << ':';
    for (const auto& r : report) log << ' ' << r.genus;
    log << '\n';
    slides.push_back(pj);
  }
  nlohmann::json st = nlohmann::json::array();
  for (const auto& g : stats(index))
    st.push_back(nlohmann::json{{"genus", g.genus}, {"images", g.images}, {"vessels", g.vessels}});
  nlohmann::json summary{{"presence", slides}, {"dataset", st}};
  detail::write_text(paths.reports() / "presence.json", summary.dump(2) + "\n");
  write_manifest(cfg, "report", summary);
  return summary;
}

/// Macro F1 over the classes that occur as truth or prediction.
inline double macro_f1_observed(const metrics::ConfusionMatrix& cm) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cm.n(); ++i) {
    if (cm.row_sum(i) == 0 && cm.col_sum(i) == 0) continue;
    s += cm.class_f1(i);
    ++n;
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

inline nlohmann::json cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  const RunPaths paths{cfg.out_dir()};
  const auto split = load_split(cfg);
  const auto eval_macs = split.macerations_in(cfg.evaluation.partition);
  const std::set<std::string> eval_set(eval_macs.begin(), eval_macs.end());
  for (const auto& m : split.macerations_in(Partition::train))
    if (eval_set.count(m)) throw Error("leakage", "maceration " + m + " is in train and evaluation");
  const auto model_path = paths.models() / "classifier.json";
  if (std::filesystem::exists(model_path)) {
    const auto model = PlaneClassifier::from_json(detail::read_json(model_path));
    for (const auto& m : model.training_macerations)
      if (eval_set.count(m))
        throw Error("leakage", "classifier was trained on evaluation maceration " + m);
  }
  const auto slides = slides_in(index, split, cfg.evaluation.partition);
  if (slides.empty()) throw Error("empty", "no slides in the evaluation partition");

  const metrics::MatchConfig mc{cfg.evaluation.iou_threshold, cfg.detection.confidence_threshold};
  std::vector<Detection> pooled;
  std::vector<BBox> pooled_gt;
  std::map<std::size_t, std::pair<std::vector<Detection>, std::vector<BBox>>> by_class;
  std::vector<std::pair<std::string, metrics::MatchResult>> per_genus;
  metrics::ConfusionMatrix cm(cfg.catalog);
  std::size_t tp = 0, fp = 0, fn = 0;
  bool any_cls = false;
  std::int64_t offset = 0;
  std::vector<double> slide_aps;
  for (const auto& sid : slides) {
    const auto& meta = index.slide(sid);
    const auto dets = read_detections(cfg, meta);
    std::vector<BBox> gts;
    std::vector<std::size_t> gt_genus;
    for (const auto& a : index.training_export(sid)) {
      auto g = index.genus_of(a);
      if (!g) throw Error("invalid", "ground truth " + a.annotation_id + " has no genus");
      gts.push_back(a.bbox);
      gt_genus.push_back(class_index(cfg.catalog, *g));
    }
    std::map<std::size_t, std::size_t> pred_genus;
    if (std::filesystem::exists(paths.classifications(sid))) {
      any_cls = true;
      std::map<std::string, std::size_t> ids;
      for (std::size_t k = 0; k < dets.size(); ++k) ids[detection_id(sid, k)] = k;
      for (const auto& [id, p] : read_classifications(cfg, sid)) {
        auto it = ids.find(id);
        if (it == ids.end()) throw Error("not_found", "classification for unknown detection " + id);
        pred_genus[it->second] = argmax_index(p);
      }
    }
    if (!gts.empty())
      slide_aps.push_back(metrics::average_precision_11pt(dets, gts, cfg.evaluation.iou_threshold));
    auto m = metrics::match(dets, gts, mc);
    tp += m.tp_count();
    fp += m.fp_count();
    fn += m.fn_count();
    std::map<std::string, metrics::MatchResult> split_rows;
    for (const auto& [p, g] : m.tp) {
      split_rows[cfg.catalog.name(gt_genus[g])].tp.emplace_back(p, g);
      if (pred_genus.count(p)) cm.add(gt_genus[g], pred_genus[p]);
    }
    for (auto g : m.fn) split_rows[cfg.catalog.name(gt_genus[g])].fn.push_back(g);
    for (auto p : m.fp) {
      std::string genus = meta.genus ? *meta.genus
                          : pred_genus.count(p) ? cfg.catalog.name(pred_genus[p])
                                                : std::string("unclassified");
      split_rows[genus].fp.push_back(p);
    }
    for (auto& [g, r] : split_rows) per_genus.emplace_back(g, std::move(r));

    // Offsetting each slide keeps boxes of different slides from matching.
    auto shift = [&](const BBox& b) { return b.translated(offset, 0); };
    for (const auto& d : dets) pooled.push_back({shift(d.bbox), d.confidence});
    for (std::size_t g = 0; g < gts.size(); ++g) {
      pooled_gt.push_back(shift(gts[g]));
      by_class[gt_genus[g]].second.push_back(shift(gts[g]));
    }
    for (const auto& [k, g] : pred_genus)
      by_class[g].first.push_back({shift(dets[k].bbox), dets[k].confidence});
    offset += meta.width_px + 1;
  }

  const double ap = metrics::average_precision_11pt(pooled, pooled_gt, cfg.evaluation.iou_threshold);
  double map = ap;
  nlohmann::json class_ap = nlohmann::json::object();
  if (any_cls) {
    std::vector<double> aps;
    for (const auto& [g, pr] : by_class) {
      if (pr.second.empty()) continue;
      const double v = metrics::average_precision_11pt(pr.first, pr.second, cfg.evaluation.iou_threshold);
      aps.push_back(v);
      class_ap[cfg.catalog.name(g)] = v;
    }
    if (!aps.empty()) map = metrics::mean_average_precision(aps);
  }
  const auto rows = metrics::per_genus_detection_report(per_genus);
  std::ostringstream table_txt, table_csv, conf_csv;
  metrics::write_detection_table_text(table_txt, rows);
  metrics::write_detection_table_csv(table_csv, rows);
  metrics::write_confusion_csv(conf_csv, cm);
  detail::write_text(paths.reports() / "detection_table.txt", table_txt.str());
  detail::write_text(paths.reports() / "detection_table.csv", table_csv.str());
  detail::write_text(paths.reports() / "confusion.csv", conf_csv.str());

  const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows)
    table.push_back(nlohmann::json{{"genus", r.genus},
                     {"precision", r.precision()},
                     {"recall", r.recall()},
                     {"f2", r.f2()}});
  nlohmann::json summary{{"partition", to_string(cfg.evaluation.partition)},
                         {"slides", slides.size()},
                         {"ap", ap},
                         {"ap_slide_mean", slide_aps.empty() ? 0.0 : metrics::mean_average_precision(slide_aps)},
                         {"map", map},
                         {"class_ap", class_ap},
                         {"precision", precision},
                         {"recall", recall},
                         {"tp", tp},
                         {"fp", fp},
                         {"fn", fn},
                         {"per_genus", table},
                         {"classified_matches", cm.total()},
                         {"accuracy", cm.accuracy()},
                         {"macro_f1", macro_f1_observed(cm)}};
  if (!cfg.evaluation.merge_groups.empty()) {
    auto merged = metrics::merge_classes(
        cm, metrics::merge_mapping(cm.labels(), cfg.evaluation.merge_groups));
    std::ostringstream mcsv;
    metrics::write_confusion_csv(mcsv, merged);
    detail::write_text(paths.reports() / "confusion_merged.csv", mcsv.str());
    summary["merged_classes"] = merged.n();
    summary["merged_macro_f1"] = macro_f1_observed(merged);
  }
  detail::write_text(paths.reports() / "evaluation.json", summary.dump(2) + "\n");
  log << table_txt.str();
  log << std::fixed << std::setprecision(4) << "AP pooled " << ap << "  AP slide mean "
      << summary["ap_slide_mean"].get<double>() << "  mAP " << map << "  P "
      << precision << "  R " << recall << "  macro F1 " << macro_f1_observed(cm) << '\n';
  log.unsetf(std::ios::floatfield);
  write_manifest(cfg, "evaluate", summary);
  return summary;
}

/// Detection samples from slide overviews and classification samples from
/// annotated crops, written as PNG plus a JSON label list.
inline nlohmann::json cmd_augment(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  const auto dir = cfg.out_dir() / "augment";
  std::vector<std::string> slides;
  if (std::filesystem::exists(split_file(cfg)))
    slides = slides_in(index, load_split(cfg), Partition::train);
  else
    for (const auto& m : index.slides()) slides.push_back(m.slide_id);
  if (slides.empty()) throw Error("empty", "no slides to augment");

  std::vector<AugSample> views;
  std::vector<std::pair<std::string, Annotation>> crops;
  for (const auto& sid : slides) {
    auto c = open_slide(cfg, index, sid);
    const auto& m = c.meta();
    const int plane = m.plane_count / 2;
    const std::int64_t target = std::min(cfg.augment_view, m.long_side());
    AugSample s;
    s.image = target < m.long_side()
                  ? downscaled_view(c, plane, target, cfg.detection.tile_budget)
                  : read_region(c, {plane, 0, {0, 0, m.width_px, m.height_px}}, cfg.detection.tile_budget);
    const std::int64_t W = m.width_px, H = m.height_px, w = s.image.width, h = s.image.height;
    for (const auto& a : index.training_export(sid)) {
      BBox b{a.bbox.x_min * w / W, a.bbox.y_min * h / H, (a.bbox.x_max * w + W - 1) / W,
             (a.bbox.y_max * h + H - 1) / H};
      s.boxes.push_back({b, index.genus_of(a), a.annotation_id});
      crops.emplace_back(sid, a);
    }
    views.push_back(std::move(s));
  }

  nlohmann::json det_labels = nlohmann::json::array();
  for (int k = 0; k < cfg.augment_samples; ++k) {
    std::vector<AugSample> four;
    for (std::size_t j = 0; j < 4; ++j) four.push_back(views[(k + j) % views.size()]);
    auto s = augment_detection(four, cfg.augment.detection, derive_seed(cfg.seed, 3, k));
    const std::string name = "det_" + std::to_string(k) + ".png";
    std::filesystem::create_directories(dir);
    write_png((dir / name).string(), s.image);
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : s.boxes)
      boxes.push_back(nlohmann::json{{"id", b.id}, {"genus", b.genus ? nlohmann::json(*b.genus) : nlohmann::json(nullptr)}, {"bbox", bbox_to_json(b.bbox)}});
    det_labels.push_back(nlohmann::json{{"image", name}, {"boxes", boxes}});
  }

  nlohmann::json cls_labels = nlohmann::json::array();
  NormalizeConfig ncfg = cfg.classification.normalize;
  ncfg.grayscale = false;
  const std::size_t n_cls = std::min<std::size_t>(crops.size(), static_cast<std::size_t>(cfg.augment_samples));
  for (std::size_t k = 0; k < n_cls; ++k) {
    const auto& [sid, a] = crops[(k * 7919) % crops.size()];
    auto c = open_slide(cfg, index, sid);
    auto n = normalize_crop(extract_crop(c, a.bbox, c.meta().plane_count / 2, cfg.classification.margin), ncfg);
    Raster img = augment_crop(n.image, cfg.augment.classification, derive_seed(cfg.seed, 4, k));
    if (cfg.classification.normalize.grayscale) img = grayscale(img);
    const std::string name = "cls_" + std::to_string(k) + ".png";
    write_png((dir / name).string(), img);
    cls_labels.push_back(nlohmann::json{{"image", name},
                                        {"annotation_id", a.annotation_id},
                                        {"genus", index.genus_of(a).value_or("")}});
  }
  nlohmann::json labels{{"detection", det_labels}, {"classification", cls_labels}};
  detail::write_text(dir / "labels.json", labels.dump(2) + "\n");
  log << "augment: " << det_labels.size() << " detection samples, " << cls_labels.size()
      << " classification samples\n";
  nlohmann::json summary{{"detection_samples", det_labels.size()},
                         {"classification_samples", cls_labels.size()}};
  write_manifest(cfg, "augment", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// Annotation loop

/// Reviewer stand-in: matched predictions are accepted, or adjusted to the
/// reference box and genus; unmatched ones are rejected. Reference objects
/// nobody predicted come back as new human annotations.
inline std::vector<ReviewDecision> simulate_review(const std::vector<Annotation>& pending,
                                                   const std::vector<Annotation>& truth,
                                                   std::vector<Annotation>& missed,
                                                   double iou_threshold = 0.5) {
  std::vector<Detection> preds;
  for (const auto& a : pending) preds.push_back({a.bbox, a.confidence.value_or(0.0)});
  std::vector<BBox> gts;
  for (const auto& t : truth) gts.push_back(t.bbox);
  const auto m = metrics::match(preds, gts, {iou_threshold, 0.0});
  std::vector<ReviewDecision> out;
  for (const auto& [p, g] : m.tp) {
    ReviewDecision d;
    d.annotation_id = pending[p].annotation_id;
    d.expected_version = pending[p].version;
    d.reviewer = "simulated";
    if (pending[p].bbox != truth[g].bbox) d.bbox = truth[g].bbox;
    if (truth[g].genus && pending[p].genus != truth[g].genus) d.genus = truth[g].genus;
    d.kind = d.bbox || d.genus ? ReviewDecision::Kind::adjust : ReviewDecision::Kind::accept;
    out.push_back(d);
  }
  for (auto p : m.fp) {
    ReviewDecision d;
    d.annotation_id = pending[p].annotation_id;
    d.kind = ReviewDecision::Kind::reject;
    d.expected_version = pending[p].version;
    d.reviewer = "simulated";
    out.push_back(d);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.annotation_id < b.annotation_id; });
  for (auto g : m.fn) missed.push_back(truth[g]);
  return out;
}

/// Smallest accepted box area bounds the next detector's minimum component
/// area from below; the limit only ever loosens.
inline DetectorParams refit_detector(const DetectorParams& current, const DatasetIndex& index,
                                     const std::vector<std::string>& slides) {
  DetectorParams p = current;
  for (const auto& sid : slides)
    for (const auto& a : index.training_export(sid))
      p.min_area_px = std::min(p.min_area_px, a.bbox.area() / 4);
  return p;
}

inline double slide_recall(const SlideContainer& c, const DetectionSettings& s,
                           const std::vector<Annotation>& reference) {
  std::vector<BBox> gts;
  for (const auto& a : reference) gts.push_back(a.bbox);
  if (gts.empty()) return 0.0;
  return metrics::match(detect_slide(c, s), gts, {0.5, s.confidence_threshold}).recall();
}

/// One iteration: publish predictions, merge a review, refit, log deltas.
/// Config keys under "loop": "slides" (default all), "decisions" (JSON list
/// of corrections) or "truth_dir" (reference annotation files).
inline nlohmann::json cmd_loop(const RunConfig& cfg, std::ostream& log) {
  auto index = DatasetIndex::load(cfg.dataset);
  const RunPaths paths{cfg.out_dir()};
  std::vector<std::string> slides = cfg.loop.value("slides", std::vector<std::string>{});
  if (slides.empty())
    for (const auto& m : index.slides()) slides.push_back(m.slide_id);
  for (const auto& s : slides) index.slide(s);

  auto settings = detector_model(cfg);
  std::optional<PlaneClassifier> model;
  if (std::filesystem::exists(paths.models() / "classifier.json"))
    model = PlaneClassifier::from_json(detail::read_json(paths.models() / "classifier.json"));

  std::size_t published = 0;
  for (const auto& sid : slides) {
    const auto& anns = index.annotations(sid);
    if (std::any_of(anns.begin(), anns.end(), [](const auto& a) { return a.source != Source::human; }))
      continue;
    auto c = open_slide(cfg, index, sid);
    auto dets = filter_confidence(detect_slide(c, settings), settings.confidence_threshold);
    std::vector<std::optional<std::string>> genera;
    if (model) {
      TileReader reader(c, settings.tile_budget);
      for (const auto& d : dets) {
        BBox content;
        auto inputs = model_inputs(reader, c, d.bbox, cfg.classification, content);
        genera.emplace_back(cfg.catalog.name(argmax_index(model->classify(inputs, content))));
      }
    }
    published += add_predictions(index, sid, dets, genera).size();
  }

  std::vector<Annotation> pending;
  for (const auto& sid : slides)
    for (const auto& a : index.annotations(sid))
      if (a.source == Source::predicted && a.review == Review::pending) pending.push_back(a);
  if (pending.empty()) {
    log << "loop: no pending predictions; nothing to do\n";
    nlohmann::json summary{{"status", "noop"}, {"published", published}};
    write_manifest(cfg, "loop", summary);
    return summary;
  }

  std::vector<ReviewDecision> decisions;
  std::vector<Annotation> missed;
  if (cfg.loop.contains("decisions")) {
    auto j = detail::read_json(cfg.resolve(cfg.loop["decisions"]));
    for (const auto& d : j) decisions.push_back(decision_from_json(d));
  } else if (cfg.loop.contains("truth_dir")) {
    const std::filesystem::path dir = cfg.resolve(cfg.loop["truth_dir"]);
    for (const auto& sid : slides) {
      std::ifstream in(dir / (sid + ".csv"));
      if (!in) throw Error("not_found", "no reference annotations for slide " + sid);
      const auto truth = read_annotations(in, sid);
      std::vector<Annotation> mine;
      for (const auto& a : pending)
        if (a.slide_id == sid) mine.push_back(a);
      std::vector<Annotation> slide_missed;
      auto d = simulate_review(mine, truth, slide_missed);
      decisions.insert(decisions.end(), d.begin(), d.end());
      for (std::size_t k = 0; k < slide_missed.size(); ++k) {
        auto a = slide_missed[k];
        a.annotation_id = sid + "-h" + std::to_string(k);
        while (index.find(a.annotation_id)) a.annotation_id += "x";
        missed.push_back(a);
      }
    }
  } else {
    index.save(cfg.dataset);
    log << "loop: published " << published << " predictions; awaiting review\n";
    nlohmann::json summary{{"status", "published"}, {"published", published}};
    write_manifest(cfg, "loop", summary);
    return summary;
  }

  auto vessels = [&] {
    std::size_t n = 0;
    for (const auto& g : stats(index)) n += g.vessels;
    return n;
  };
  const std::size_t vessels_before = vessels();
  merge_review(index, decisions, &cfg.catalog);
  for (auto& a : missed) index.add_annotation(a);
  const std::size_t vessels_after = vessels();

  // Refit on everything outside the evaluation partition.
  std::vector<std::string> fit_slides;
  std::optional<SplitAssignment> split_asg;
  if (std::filesystem::exists(split_file(cfg))) split_asg = load_split(cfg);
  for (const auto& m : index.slides()) {
    if (split_asg) {
      auto it = split_asg->partition.find(m.maceration_id);
      if (it != split_asg->partition.end() && it->second == cfg.evaluation.partition) continue;
    }
    fit_slides.push_back(m.slide_id);
  }
  DetectionSettings refit = settings;
  refit.params = refit_detector(settings.params, index, fit_slides);
  detail::write_text(paths.models() / "detector.json",
                     nlohmann::json{{"min_area_px", refit.params.min_area_px},
                                    {"max_area_px", refit.params.max_area_px}}
                             .dump(2) + "\n");
  if (split_asg) {
    auto train = slides_in(index, *split_asg, Partition::train);
    for (const auto& s : slides)
      if (!split_asg->partition.count(index.maceration_of(s))) train.push_back(s);
    auto pc = fit_classifier(cfg, index, train);
    detail::write_text(paths.models() / "classifier.json", pc.to_json().dump(2) + "\n");
  }

  nlohmann::json deltas = nlohmann::json::object();
  for (const auto& sid : slides) {
    auto c = open_slide(cfg, index, sid);
    const auto ref = index.training_export(sid);
    const double before = slide_recall(c, settings, ref), after = slide_recall(c, refit, ref);
    deltas[sid] = {{"recall_before", before}, {"recall_after", after}};
    log << "loop " << sid << ": recall " << before << " -> " << after << '\n';
  }
  index.save(cfg.dataset);
  std::map<std::string, std::size_t> actions;
  for (const auto& d : decisions) ++actions[to_string(d.kind)];
  log << "loop: " << decisions.size() << " decisions, vessels " << vessels_before << " -> "
      << vessels_after << '\n';
  nlohmann::json summary{{"status", "merged"},
                         {"published", published},
                         {"decisions", actions},
                         {"added_missed", missed.size()},
                         {"vessels_before", vessels_before},
                         {"vessels_after", vessels_after},
                         {"min_area_px", refit.params.min_area_px},
                         {"slides", deltas}};
  detail::write_text(paths.reports() / "loop.json", summary.dump(2) + "\n");
  write_manifest(cfg, "loop", summary);
  return summary;
}

}  // namespace vesselid
