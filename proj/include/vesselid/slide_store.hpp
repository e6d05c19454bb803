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

// Tiled, pyramidal, multi-plane slide storage.
//
// Layout on disk:
//   <root>/meta.json
//   <root>/p<plane>/l<level>/t<x>_<y>.png
//
// Level L pixel (x, y) is the mean of the level-0 block
// [x*2^L, (x+1)*2^L) x [y*2^L, (y+1)*2^L), clipped to the image, rounded
// half up once from exact integer sums. Edge tiles keep their true size.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "vesselid/core.hpp"
#include "vesselid/png_io.hpp"
#include "vesselid/raster.hpp"

namespace vesselid {

namespace fs = std::filesystem;

inline nlohmann::json meta_to_json(const SlideMeta& m) {
  nlohmann::json j;
  j["slide_id"] = m.slide_id;
  j["maceration_id"] = m.maceration_id;
  j["genus"] = m.genus ? nlohmann::json(*m.genus) : nlohmann::json(nullptr);
  j["pixel_scale_um"] = m.pixel_scale_um;
  j["plane_step_um"] = m.plane_step_um;
  j["plane_count"] = m.plane_count;
  j["width_px"] = m.width_px;
  j["height_px"] = m.height_px;
  j["channels"] = m.channels;
  return j;
}

inline SlideMeta meta_from_json(const nlohmann::json& j) {
  SlideMeta m;
  m.slide_id = j.at("slide_id").get<std::string>();
  m.maceration_id = j.value("maceration_id", std::string{});
  if (j.contains("genus") && !j["genus"].is_null())
    m.genus = j["genus"].get<std::string>();
  m.pixel_scale_um = j.value("pixel_scale_um", 0.69);
  m.plane_step_um = j.value("plane_step_um", 16.33);
  m.plane_count = j.value("plane_count", 5);
  m.width_px = j.at("width_px").get<std::int64_t>();
  m.height_px = j.at("height_px").get<std::int64_t>();
  m.channels = j.value("channels", 3);
  return m;
}

/// Live and peak counts of decoded tile buffers.
class TileGauge {
 public:
  void acquire() noexcept {
    int now = live_.fetch_add(1) + 1;
    int prev = peak_.load();
    while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
    }
  }
  void release() noexcept { live_.fetch_sub(1); }
  int live() const noexcept { return live_.load(); }
  int peak() const noexcept { return peak_.load(); }
  void reset_peak() noexcept { peak_.store(live_.load()); }

 private:
  std::atomic<int> live_{0};
  std::atomic<int> peak_{0};
};

class SlideContainer {
 public:
  static constexpr int kDefaultTileSize = 512;
  static constexpr int kMinTopLevel = 6;  // factor 64

  SlideContainer() = default;

  static SlideContainer open(const fs::path& root) {
    std::ifstream in(root / "meta.json");
    if (!in) throw Error("not_found", "no slide container at " + root.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("parse", "bad meta.json in " + root.string() + ": " + e.what());
    }
    SlideContainer c;
    c.root_ = root;
    c.meta_ = meta_from_json(j);
    c.meta_.validate();
    c.tile_size_ = j.value("tile_size", kDefaultTileSize);
    c.levels_ = j.at("levels").get<std::vector<std::int64_t>>();
    return c;
  }

  const fs::path& root() const noexcept { return root_; }
  const SlideMeta& meta() const noexcept { return meta_; }
  int tile_size() const noexcept { return tile_size_; }
  /// Downscale factor per level index: 1, 2, 4, ...
  const std::vector<std::int64_t>& levels() const noexcept { return levels_; }
  int level_count() const noexcept { return static_cast<int>(levels_.size()); }

  std::int64_t level_width(int level) const {
    return ceil_div(meta_.width_px, levels_.at(level));
  }
  std::int64_t level_height(int level) const {
    return ceil_div(meta_.height_px, levels_.at(level));
  }
  std::int64_t tiles_x(int level) const {
    return ceil_div(level_width(level), tile_size_);
  }
  std::int64_t tiles_y(int level) const {
    return ceil_div(level_height(level), tile_size_);
  }

  bool has_tile(int plane, int level, std::int64_t tx, std::int64_t ty) const {
    return plane >= 0 && plane < meta_.plane_count && level >= 0 &&
           level < level_count() && tx >= 0 && ty >= 0 && tx < tiles_x(level) &&
           ty < tiles_y(level);
  }

  fs::path tile_path(int plane, int level, std::int64_t tx,
                     std::int64_t ty) const {
    return root_ / ("p" + std::to_string(plane)) / ("l" + std::to_string(level)) /
           ("t" + std::to_string(tx) + "_" + std::to_string(ty) + ".png");
  }

  static std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    return (a + b - 1) / b;
  }

  /// Levels 0..max(6, enough to fit the long side in one tile).
  static std::vector<std::int64_t> level_factors(std::int64_t long_side,
                                                 int tile_size) {
    std::vector<std::int64_t> f{1};
    while (static_cast<int>(f.size()) <= kMinTopLevel ||
           ceil_div(long_side, f.back()) > tile_size)
      f.push_back(f.back() * 2);
    return f;
  }

  void write_meta() const {
    auto j = meta_to_json(meta_);
    j["tile_size"] = tile_size_;
    j["levels"] = levels_;
    std::ofstream out(root_ / "meta.json");
    if (!out) throw Error("io", "cannot write meta.json under " + root_.string());
    out << j.dump(2) << '\n';
  }

 private:
  friend class SlideWriter;
  fs::path root_;
  SlideMeta meta_;
  int tile_size_ = kDefaultTileSize;
  std::vector<std::int64_t> levels_;
};

/// Produces the level-0 pixels of one plane inside [x, x+w) x [y, y+h).
using PlaneSource =
    std::function<Raster(int plane, std::int64_t x, std::int64_t y, int w, int h)>;

/// Streams level-0 tiles in Morton order and cascades exact block sums up
/// the pyramid, so only one partial tile per level is resident at a time.
class SlideWriter {
 public:
  static SlideContainer write(const PlaneSource& source, SlideMeta meta,
                              const fs::path& root,
                              int tile_size = SlideContainer::kDefaultTileSize,
                              int compression = 1) {
    meta.validate();
    if (tile_size < 2 || tile_size % 2 != 0)
      throw Error("range", "tile_size must be a positive even number");
    SlideContainer c;
    c.root_ = root;
    c.meta_ = std::move(meta);
    c.tile_size_ = tile_size;
    c.levels_ = SlideContainer::level_factors(c.meta_.long_side(), tile_size);
    fs::create_directories(root);
    for (int p = 0; p < c.meta_.plane_count; ++p) {
      for (int l = 0; l < c.level_count(); ++l)
        fs::create_directories(root / ("p" + std::to_string(p)) /
                               ("l" + std::to_string(l)));
      SlideWriter w(c, p, compression);
      w.run(source);
    }
    c.write_meta();
    return c;
  }

 private:
  struct Accum {
    std::int64_t tx = 0, ty = 0;
    int w = 0, h = 0;
    int children_seen = 0;
    int children_expected = 0;
    std::vector<std::uint64_t> sums;
  };

  SlideWriter(const SlideContainer& c, int plane, int compression)
      : c_(c), plane_(plane), compression_(compression),
        open_(c.level_count()) {}

  void run(const PlaneSource& source) {
    const std::int64_t nx = c_.tiles_x(0), ny = c_.tiles_y(0);
    std::int64_t side = 1;
    while (side < std::max(nx, ny)) side *= 2;
    const int ts = c_.tile_size();
    for (std::uint64_t code = 0; code < static_cast<std::uint64_t>(side * side);
         ++code) {
      auto [tx, ty] = morton_decode(code);
      if (tx >= nx || ty >= ny) continue;
      const std::int64_t x0 = tx * ts, y0 = ty * ts;
      const int w = static_cast<int>(std::min<std::int64_t>(ts, c_.meta().width_px - x0));
      const int h = static_cast<int>(std::min<std::int64_t>(ts, c_.meta().height_px - y0));
      Raster tile = source(plane_, x0, y0, w, h);
      if (tile.width != w || tile.height != h || tile.channels != c_.meta().channels)
        throw Error("shape", "plane source returned a raster of the wrong shape");
      write_png(c_.tile_path(plane_, 0, tx, ty).string(), tile, compression_);
      if (c_.level_count() > 1) fold_level0(tile, tx, ty);
    }
  }

  static std::pair<std::int64_t, std::int64_t> morton_decode(std::uint64_t code) {
    std::int64_t x = 0, y = 0;
    for (int b = 0; b < 32; ++b) {
      x |= static_cast<std::int64_t>((code >> (2 * b)) & 1u) << b;
      y |= static_cast<std::int64_t>((code >> (2 * b + 1)) & 1u) << b;
    }
    return {x, y};
  }

  Accum& accumulator(int level, std::int64_t tx, std::int64_t ty) {
    auto& slot = open_[level];
    auto key = std::make_pair(tx, ty);
    auto it = slot.find(key);
    if (it != slot.end()) return it->second;
    Accum a;
    a.tx = tx;
    a.ty = ty;
    const int ts = c_.tile_size();
    a.w = static_cast<int>(std::min<std::int64_t>(ts, c_.level_width(level) - tx * ts));
    a.h = static_cast<int>(std::min<std::int64_t>(ts, c_.level_height(level) - ty * ts));
    // Children at the level below: up to 2x2, clipped to that level's grid.
    const std::int64_t cx = std::min<std::int64_t>(2, c_.tiles_x(level - 1) - 2 * tx);
    const std::int64_t cy = std::min<std::int64_t>(2, c_.tiles_y(level - 1) - 2 * ty);
    a.children_expected = static_cast<int>(cx * cy);
    a.sums.assign(static_cast<std::size_t>(a.w) * a.h * c_.meta().channels, 0);
    return slot.emplace(key, std::move(a)).first->second;
  }

  void fold_level0(const Raster& tile, std::int64_t tx, std::int64_t ty) {
    const int ts = c_.tile_size();
    auto& acc = accumulator(1, tx / 2, ty / 2);
    const int ch = tile.channels;
    // Offset of this level-0 tile inside the level-1 tile, in level-1 pixels.
    const int ox = static_cast<int>((tx % 2) * ts / 2);
    const int oy = static_cast<int>((ty % 2) * ts / 2);
    for (int y = 0; y < tile.height; ++y) {
      auto row = tile.row(y);
      std::uint64_t* dst =
          acc.sums.data() + static_cast<std::size_t>(oy + y / 2) * acc.w * ch;
      for (int x = 0; x < tile.width; ++x)
        for (int k = 0; k < ch; ++k) dst[(ox + x / 2) * ch + k] += row[x * ch + k];
    }
    if (++acc.children_seen == acc.children_expected) finish(1, tx / 2, ty / 2);
  }

  void finish(int level, std::int64_t tx, std::int64_t ty) {
    auto node = open_[level].extract(std::make_pair(tx, ty));
    Accum& acc = node.mapped();
    const int ts = c_.tile_size();
    const int ch = c_.meta().channels;
    const std::int64_t factor = c_.levels()[level];
    Raster out(acc.w, acc.h, ch);
    for (int y = 0; y < acc.h; ++y) {
      const std::int64_t gy = (ty * ts + y) * factor;
      const std::int64_t nh = std::min(factor, c_.meta().height_px - gy);
      for (int x = 0; x < acc.w; ++x) {
        const std::int64_t gx = (tx * ts + x) * factor;
        const std::int64_t nw = std::min(factor, c_.meta().width_px - gx);
        const std::uint64_t n = static_cast<std::uint64_t>(nw * nh);
        for (int k = 0; k < ch; ++k) {
          std::uint64_t s = acc.sums[(static_cast<std::size_t>(y) * acc.w + x) * ch + k];
          out.at(x, y, k) = static_cast<std::uint8_t>((2 * s + n) / (2 * n));
        }
      }
    }
    write_png(c_.tile_path(plane_, level, tx, ty).string(), out, compression_);
    if (level + 1 >= c_.level_count()) return;
    auto& parent = accumulator(level + 1, tx / 2, ty / 2);
    const int ox = static_cast<int>((tx % 2) * ts / 2);
    const int oy = static_cast<int>((ty % 2) * ts / 2);
    for (int y = 0; y < acc.h; ++y)
      for (int x = 0; x < acc.w; ++x)
        for (int k = 0; k < ch; ++k)
          parent.sums[(static_cast<std::size_t>(oy + y / 2) * parent.w + ox + x / 2) * ch + k] +=
              acc.sums[(static_cast<std::size_t>(y) * acc.w + x) * ch + k];
    if (++parent.children_seen == parent.children_expected)
      finish(level + 1, tx / 2, ty / 2);
  }

  const SlideContainer& c_;
  int plane_;
  int compression_;
  std::vector<std::map<std::pair<std::int64_t, std::int64_t>, Accum>> open_;
};

/// Builds a container from in-memory level-0 planes.
inline SlideContainer ingest(const std::vector<Raster>& planes, SlideMeta meta,
                             const fs::path& root,
                             int tile_size = SlideContainer::kDefaultTileSize) {
  if (planes.empty()) throw Error("shape", "ingest needs at least one plane");
  for (const auto& p : planes) {
    if (p.width != planes[0].width || p.height != planes[0].height ||
        p.channels != planes[0].channels)
      throw Error("shape", "all planes must share dimensions and channels");
  }
  if (planes[0].width != meta.width_px || planes[0].height != meta.height_px)
    throw Error("shape", "plane dimensions do not match slide metadata");
  meta.plane_count = static_cast<int>(planes.size());
  meta.channels = planes[0].channels;
  PlaneSource src = [&planes](int plane, std::int64_t x, std::int64_t y, int w,
                              int h) {
    return crop(planes[plane], static_cast<int>(x), static_cast<int>(y), w, h);
  };
  return SlideWriter::write(src, std::move(meta), root, tile_size);
}

struct RegionRequest {
  int plane = 0;
  int level = 0;
  BBox rect;  // level coordinates
};

/// Decoded-tile LRU cache with at most `budget` buffers resident. Tile
/// buffers are counted by the gauge from decode until the last reference
/// drops.
class TileReader {
 public:
  TileReader(const SlideContainer& c, int budget,
             std::shared_ptr<TileGauge> gauge = std::make_shared<TileGauge>())
      : c_(c), budget_(budget), gauge_(std::move(gauge)) {
    if (budget < 4) throw Error("range", "tile budget must be at least 4");
  }

  using TilePtr = std::shared_ptr<const Raster>;

  TilePtr tile(int plane, int level, std::int64_t tx, std::int64_t ty) {
    Key key{plane, level, tx, ty};
    auto it = index_.find(key);
    if (it != index_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      return it->second->second;
    }
    while (static_cast<int>(lru_.size()) >= budget_) {
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    auto path = c_.tile_path(plane, level, tx, ty).string();
    auto gauge = gauge_;
    gauge->acquire();
    TilePtr t;
    try {
      t = TilePtr(new Raster(read_png(path)), [gauge](const Raster* r) {
        delete r;
        gauge->release();
      });
    } catch (...) {
      gauge->release();
      throw;
    }
    lru_.emplace_front(key, t);
    index_[key] = lru_.begin();
    return t;
  }

  const TileGauge& gauge() const noexcept { return *gauge_; }

 private:
  using Key = std::tuple<int, int, std::int64_t, std::int64_t>;
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept {
      auto h = std::hash<std::int64_t>{};
      return h(std::get<0>(k)) * 1000003u ^ h(std::get<1>(k)) * 10007u ^
             h(std::get<2>(k)) * 131u ^ h(std::get<3>(k));
    }
  };

  const SlideContainer& c_;
  int budget_;
  std::shared_ptr<TileGauge> gauge_;
  std::list<std::pair<Key, TilePtr>> lru_;
  std::unordered_map<Key, std::list<std::pair<Key, TilePtr>>::iterator, KeyHash>
      index_;
};

inline Raster read_region(TileReader& reader, const SlideContainer& c,
                          const RegionRequest& req) {
  if (req.plane < 0 || req.plane >= c.meta().plane_count)
    throw Error("range", "plane " + std::to_string(req.plane) + " out of range");
  if (req.level < 0 || req.level >= c.level_count())
    throw Error("range", "level " + std::to_string(req.level) + " out of range");
  const BBox r = req.rect.clipped(c.level_width(req.level), c.level_height(req.level));
  if (!r.valid()) throw Error("range", "region is empty after clipping");
  const int ts = c.tile_size();
  const int ch = c.meta().channels;
  Raster out(static_cast<int>(r.width()), static_cast<int>(r.height()), ch);
  for (std::int64_t ty = r.y_min / ts; ty <= (r.y_max - 1) / ts; ++ty) {
    for (std::int64_t tx = r.x_min / ts; tx <= (r.x_max - 1) / ts; ++tx) {
      auto t = reader.tile(req.plane, req.level, tx, ty);
      const BBox tb{tx * ts, ty * ts, tx * ts + t->width, ty * ts + t->height};
      const BBox part = intersect(tb, r);
      for (std::int64_t y = part.y_min; y < part.y_max; ++y)
        std::memcpy(out.row(static_cast<int>(y - r.y_min)).data() +
                        (part.x_min - r.x_min) * ch,
                    t->row(static_cast<int>(y - tb.y_min)).data() +
                        (part.x_min - tb.x_min) * ch,
                    static_cast<std::size_t>(part.width()) * ch);
    }
  }
  return out;
}

inline Raster read_region(const SlideContainer& c, const RegionRequest& req,
                          int budget = 64) {
  TileReader reader(c, budget);
  return read_region(reader, c, req);
}

/// Reads the smallest pyramid level whose long side is still >= target, then
/// area-resamples so the long side equals target.
inline Raster downscaled_view(const SlideContainer& c, int plane,
                              std::int64_t target_long_side, int budget = 64) {
  const std::int64_t long0 = c.meta().long_side();
  if (target_long_side < 1 || target_long_side > long0)
    throw Error("range", "target long side must be in [1, level-0 long side]");
  int level = 0;
  for (int l = 0; l < c.level_count(); ++l) {
    if (std::max(c.level_width(l), c.level_height(l)) >= target_long_side)
      level = l;
  }
  RegionRequest req{plane, level,
                    {0, 0, c.level_width(level), c.level_height(level)}};
  Raster img = read_region(c, req, budget);
  const double s = static_cast<double>(target_long_side) / long0;
  int w = static_cast<int>(c.meta().width_px >= c.meta().height_px
                               ? target_long_side
                               : std::max<std::int64_t>(1, std::llround(c.meta().width_px * s)));
  int h = static_cast<int>(c.meta().height_px >= c.meta().width_px
                               ? target_long_side
                               : std::max<std::int64_t>(1, std::llround(c.meta().height_px * s)));
  return resize(img, w, h);
}

}  // namespace vesselid
