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

// Run-length 8-connected component labeling and the per-component shape
// measures used by the baseline scorers.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "vesselid/core.hpp"
#include "vesselid/raster.hpp"

namespace vesselid {

struct Run {
  int y;
  int x0;  // inclusive
  int x1;  // exclusive
};

struct Component {
  std::vector<Run> runs;
  std::int64_t area = 0;
  BBox bbox;
};

namespace detail {

class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent_[a] = b;
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

/// Components of the pixels where `fg(x, y)` holds, inside [0,w) x [0,h).
/// Components come out ordered by their first pixel in raster order.
inline std::vector<Component> label_components(
    int w, int h, const std::function<bool(int, int)>& fg) {
  std::vector<Run> runs;
  std::vector<std::size_t> row_start(h + 1, 0);
  for (int y = 0; y < h; ++y) {
    row_start[y] = runs.size();
    int x = 0;
    while (x < w) {
      while (x < w && !fg(x, y)) ++x;
      if (x >= w) break;
      int s = x;
      while (x < w && fg(x, y)) ++x;
      runs.push_back({y, s, x});
    }
  }
  row_start[h] = runs.size();

  detail::DisjointSet ds(runs.size());
  for (int y = 1; y < h; ++y) {
    std::size_t a = row_start[y - 1], b = row_start[y];
    const std::size_t a_end = row_start[y], b_end = row_start[y + 1];
    while (a < a_end && b < b_end) {
      // 8-connectivity: runs touch if they overlap after widening by one.
      if (runs[a].x1 >= runs[b].x0 && runs[b].x1 >= runs[a].x0)
        ds.unite(a, b);
      if (runs[a].x1 < runs[b].x1) ++a;
      else ++b;
    }
  }

  std::vector<Component> comps;
  std::vector<std::size_t> slot(runs.size(), static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < runs.size(); ++i) {
    std::size_t root = ds.find(i);
    if (slot[root] == static_cast<std::size_t>(-1)) {
      slot[root] = comps.size();
      Component c;
      c.bbox = {runs[i].x0, runs[i].y, runs[i].x1, runs[i].y + 1};
      comps.push_back(std::move(c));
    }
    auto& c = comps[slot[root]];
    const auto& r = runs[i];
    c.runs.push_back(r);
    c.area += r.x1 - r.x0;
    c.bbox.x_min = std::min<std::int64_t>(c.bbox.x_min, r.x0);
    c.bbox.x_max = std::max<std::int64_t>(c.bbox.x_max, r.x1);
    c.bbox.y_min = std::min<std::int64_t>(c.bbox.y_min, r.y);
    c.bbox.y_max = std::max<std::int64_t>(c.bbox.y_max, r.y + 1);
  }
  return comps;
}

/// Area of the convex hull of the component's pixel squares.
inline double convex_hull_area(const Component& c) {
  using P = std::array<std::int64_t, 2>;
  std::vector<P> pts;
  pts.reserve(c.runs.size() * 4);
  for (const auto& r : c.runs) {
    pts.push_back({r.x0, r.y});
    pts.push_back({r.x1, r.y});
    pts.push_back({r.x0, r.y + 1});
    pts.push_back({r.x1, r.y + 1});
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return 0.0;
  auto cross = [](const P& o, const P& a, const P& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  std::vector<P> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
    hull[k++] = pts[i - 1];
  }
  hull.resize(k - 1);
  std::int64_t twice = 0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    twice += a[0] * b[1] - b[0] * a[1];
  }
  return std::abs(static_cast<double>(twice)) / 2.0;
}

/// Component area over hull area, in [0, 1].
inline double solidity(const Component& c) {
  const double hull = convex_hull_area(c);
  if (hull <= 0.0) return 0.0;
  return std::clamp(static_cast<double>(c.area) / hull, 0.0, 1.0);
}

/// Otsu threshold T on a 256-bin histogram: the split {v < T} / {v >= T}
/// with maximal between-class variance. Ties keep the smallest T.
inline int otsu_threshold(const std::array<std::uint64_t, 256>& hist) {
  std::uint64_t total = 0;
  double sum_all = 0.0;
  for (int v = 0; v < 256; ++v) {
    total += hist[v];
    sum_all += static_cast<double>(v) * hist[v];
  }
  if (total == 0) return 128;
  double best = -1.0;
  int best_t = 128;
  std::uint64_t w0 = 0;
  double sum0 = 0.0;
  for (int t = 1; t < 256; ++t) {
    w0 += hist[t - 1];
    sum0 += static_cast<double>(t - 1) * hist[t - 1];
    const std::uint64_t w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = static_cast<double>(w0) * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

inline std::array<std::uint64_t, 256> histogram(const Raster& gray) {
  std::array<std::uint64_t, 256> h{};
  for (auto v : gray.data) ++h[v];
  return h;
}

}  // namespace vesselid
