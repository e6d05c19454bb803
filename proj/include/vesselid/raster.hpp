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

// 8-bit interleaved raster plus the resampling primitives the pipeline uses.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "vesselid/core.hpp"

namespace vesselid {

struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Raster() = default;
  Raster(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {
    if (w < 0 || h < 0 || c < 1) throw Error("raster", "bad raster shape");
  }

  bool empty() const noexcept { return width == 0 || height == 0; }
  std::size_t row_bytes() const noexcept {
    return static_cast<std::size_t>(width) * channels;
  }

  std::uint8_t& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  std::span<std::uint8_t> row(int y) {
    return {data.data() + y * row_bytes(), row_bytes()};
  }
  std::span<const std::uint8_t> row(int y) const {
    return {data.data() + y * row_bytes(), row_bytes()};
  }

  bool operator==(const Raster&) const = default;
};

inline std::uint8_t round_to_u8(double v) {
  // Round half up, clamp to the 8-bit range.
  double r = std::floor(v + 0.5);
  if (r < 0.0) return 0;
  if (r > 255.0) return 255;
  return static_cast<std::uint8_t>(r);
}

/// Copy of [x, x+w) x [y, y+h); the rect must lie inside the raster.
inline Raster crop(const Raster& src, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > src.width ||
      y + h > src.height)
    throw Error("range", "crop rect outside raster");
  Raster out(w, h, src.channels);
  for (int r = 0; r < h; ++r)
    std::memcpy(out.row(r).data(), src.row(y + r).data() + x * src.channels,
                out.row_bytes());
  return out;
}

/// Writes src at (x, y) into dst, clipping whatever falls outside.
inline void paste(Raster& dst, const Raster& src, int x, int y) {
  if (dst.channels != src.channels)
    throw Error("shape", "paste channel mismatch");
  int x0 = std::max(0, x), y0 = std::max(0, y);
  int x1 = std::min(dst.width, x + src.width);
  int y1 = std::min(dst.height, y + src.height);
  if (x0 >= x1 || y0 >= y1) return;
  for (int r = y0; r < y1; ++r)
    std::memcpy(dst.row(r).data() + x0 * dst.channels,
                src.row(r - y).data() + (x0 - x) * src.channels,
                static_cast<std::size_t>(x1 - x0) * dst.channels);
}

namespace detail {

struct Tap {
  int src;
  double weight;
};

/// Per-output-index taps for one axis. Shrinking (or equal) uses exact area
/// coverage; enlarging uses bilinear interpolation with pixel-center
/// alignment.
inline std::vector<std::vector<Tap>> axis_taps(int in, int out) {
  std::vector<std::vector<Tap>> taps(out);
  if (out == in) {
    for (int j = 0; j < out; ++j) taps[j].push_back({j, 1.0});
    return taps;
  }
  const double scale = static_cast<double>(in) / out;
  if (out < in) {
    for (int j = 0; j < out; ++j) {
      double a = j * scale, b = (j + 1) * scale;
      int first = static_cast<int>(std::floor(a));
      int last = std::min(in - 1, static_cast<int>(std::ceil(b)) - 1);
      for (int s = first; s <= last; ++s) {
        double cover = std::min(b, s + 1.0) - std::max(a, static_cast<double>(s));
        if (cover > 0) taps[j].push_back({s, cover / scale});
      }
    }
  } else {
    for (int j = 0; j < out; ++j) {
      double u = (j + 0.5) * scale - 0.5;
      u = std::clamp(u, 0.0, static_cast<double>(in - 1));
      int s0 = static_cast<int>(std::floor(u));
      int s1 = std::min(in - 1, s0 + 1);
      double f = u - s0;
      if (f == 0.0 || s1 == s0) {
        taps[j].push_back({s0, 1.0});
      } else {
        taps[j].push_back({s0, 1.0 - f});
        taps[j].push_back({s1, f});
      }
    }
  }
  return taps;
}

}  // namespace detail

/// Separable resize: area averaging on shrinking axes, bilinear on growing
/// axes, identity on unchanged axes. Same-size input comes back bit-exact.
inline Raster resize(const Raster& src, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw Error("raster", "resize to empty raster");
  if (src.empty()) throw Error("raster", "resize of an empty raster");
  if (out_w == src.width && out_h == src.height) return src;
  const int c = src.channels;
  auto xt = detail::axis_taps(src.width, out_w);
  auto yt = detail::axis_taps(src.height, out_h);
  std::vector<double> tmp(static_cast<std::size_t>(out_w) * src.height * c);
  for (int y = 0; y < src.height; ++y) {
    auto row = src.row(y);
    double* trow = tmp.data() + static_cast<std::size_t>(y) * out_w * c;
    for (int x = 0; x < out_w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (const auto& t : xt[x]) acc += t.weight * row[t.src * c + ch];
        trow[x * c + ch] = acc;
      }
  }
  Raster out(out_w, out_h, c);
  std::vector<double> acc(static_cast<std::size_t>(out_w) * c);
  for (int y = 0; y < out_h; ++y) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const auto& t : yt[y]) {
      const double* trow = tmp.data() + static_cast<std::size_t>(t.src) * out_w * c;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t.weight * trow[i];
    }
    auto orow = out.row(y);
    for (std::size_t i = 0; i < acc.size(); ++i) orow[i] = round_to_u8(acc[i]);
  }
  return out;
}

inline double mean_intensity(const Raster& r) {
  if (r.data.empty()) return 0.0;
  double s = 0.0;
  for (auto v : r.data) s += v;
  return s / static_cast<double>(r.data.size());
}

inline double variance(const Raster& r) {
  if (r.data.empty()) return 0.0;
  double m = mean_intensity(r), s = 0.0;
  for (auto v : r.data) s += (v - m) * (v - m);
  return s / static_cast<double>(r.data.size());
}

}  // namespace vesselid
