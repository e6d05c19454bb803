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

// Detection and classification evaluation.
//
// Matching is greedy PASCAL-style: predictions are visited by descending
// confidence (ties keep input order) and each claims the still-unmatched
// ground-truth box with the highest IOU. A claim needs IOU strictly greater
// than the threshold; equality is a false positive.
//
// Zero-denominator conventions: precision is 0 with no predictions, recall is
// 0 with no ground truth, AP is 0 with no ground truth, F-beta is 0 when
// precision and recall are both 0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "vesselid/core.hpp"

namespace vesselid::metrics {

inline double iou(const BBox& a, const BBox& b) {
  const BBox inter = intersect(a, b);
  const double ia = static_cast<double>(inter.area());
  if (ia <= 0.0) return 0.0;
  const double ua = static_cast<double>(a.area()) + b.area() - ia;
  return ua > 0.0 ? ia / ua : 0.0;
}

struct MatchConfig {
  double iou_threshold = 0.5;
  double confidence_threshold = 0.25;

  void validate() const {
    if (iou_threshold < 0 || iou_threshold > 1 || confidence_threshold < 0 ||
        confidence_threshold > 1)
      throw Error("config", "match thresholds must lie in [0,1]");
  }
};

struct MatchResult {
  /// (prediction index, ground-truth index), in claim order.
  std::vector<std::pair<std::size_t, std::size_t>> tp;
  /// Prediction indices that claimed nothing.
  std::vector<std::size_t> fp;
  /// Ground-truth indices nobody claimed.
  std::vector<std::size_t> fn;

  std::size_t tp_count() const noexcept { return tp.size(); }
  std::size_t fp_count() const noexcept { return fp.size(); }
  std::size_t fn_count() const noexcept { return fn.size(); }

  double precision() const noexcept {
    const auto n = tp.size() + fp.size();
    return n == 0 ? 0.0 : static_cast<double>(tp.size()) / n;
  }
  double recall() const noexcept {
    const auto n = tp.size() + fn.size();
    return n == 0 ? 0.0 : static_cast<double>(tp.size()) / n;
  }
};

namespace detail {

/// Prediction indices sorted by descending confidence, stable.
inline std::vector<std::size_t> confidence_order(
    const std::vector<Detection>& preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return preds[a].confidence > preds[b].confidence;
  });
  return order;
}

/// Best still-unclaimed gt for one prediction, or npos.
inline std::size_t claim(const BBox& box, const std::vector<BBox>& gts,
                         const std::vector<bool>& taken, double threshold) {
  std::size_t best = static_cast<std::size_t>(-1);
  double best_iou = -1.0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (taken[g]) continue;
    const double v = iou(box, gts[g]);
    if (v > best_iou) {
      best_iou = v;
      best = g;
    }
  }
  if (best != static_cast<std::size_t>(-1) && best_iou > threshold) return best;
  return static_cast<std::size_t>(-1);
}

}  // namespace detail

inline MatchResult match(const std::vector<Detection>& preds,
                         const std::vector<BBox>& gts,
                         const MatchConfig& cfg = {}) {
  cfg.validate();
  MatchResult out;
  std::vector<bool> taken(gts.size(), false);
  for (auto p : detail::confidence_order(preds)) {
    if (preds[p].confidence < cfg.confidence_threshold) continue;
    auto g = detail::claim(preds[p].bbox, gts, taken, cfg.iou_threshold);
    if (g == static_cast<std::size_t>(-1)) {
      out.fp.push_back(p);
    } else {
      taken[g] = true;
      out.tp.emplace_back(p, g);
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (!taken[g]) out.fn.push_back(g);
  return out;
}

/// One point of the precision/recall curve, kept as counts so recall levels
/// can be compared exactly.
struct PRCurvePoint {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t gt = 0;

  double r() const noexcept {
    return gt == 0 ? 0.0 : static_cast<double>(tp) / gt;
  }
  double p() const noexcept {
    return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  }
};

/// Curve points at every distinct confidence, high to low. Tied predictions
/// form a single step: a threshold cannot separate them.
inline std::vector<PRCurvePoint> pr_curve(const std::vector<Detection>& preds,
                                          const std::vector<BBox>& gts,
                                          double iou_threshold) {
  std::vector<PRCurvePoint> curve;
  std::vector<bool> taken(gts.size(), false);
  auto order = detail::confidence_order(preds);
  PRCurvePoint cur{0, 0, gts.size()};
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& d = preds[order[k]];
    auto g = detail::claim(d.bbox, gts, taken, iou_threshold);
    if (g == static_cast<std::size_t>(-1)) {
      ++cur.fp;
    } else {
      taken[g] = true;
      ++cur.tp;
    }
    const bool group_end = k + 1 == order.size() ||
                           preds[order[k + 1]].confidence != d.confidence;
    if (group_end) curve.push_back(cur);
  }
  return curve;
}

/// Mean interpolated precision at recall 0, 0.1, ..., 1.0, where the
/// interpolated precision at r is the best precision reached at any recall
/// >= r (0 when recall r is never reached).
inline double average_precision_11pt(const std::vector<Detection>& preds,
                                     const std::vector<BBox>& gts,
                                     double iou_threshold = 0.5) {
  if (gts.empty()) return 0.0;
  auto curve = pr_curve(preds, gts, iou_threshold);
  double total = 0.0;
  for (int level = 0; level <= 10; ++level) {
    double best = 0.0;
    for (const auto& pt : curve)
      if (10 * pt.tp >= static_cast<std::size_t>(level) * pt.gt)
        best = std::max(best, pt.p());
    total += best;
  }
  return total / 11.0;
}

inline double mean_average_precision(const std::vector<double>& per_class_ap) {
  if (per_class_ap.empty())
    throw Error("empty", "mAP needs at least one class AP");
  double s = 0.0;
  for (double v : per_class_ap) s += v;
  return s / static_cast<double>(per_class_ap.size());
}

inline double f_beta(double precision, double recall, double beta) {
  if (!(beta > 0)) throw Error("range", "beta must be positive");
  const double b2 = beta * beta;
  const double den = b2 * precision + recall;
  if (den <= 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / den;
}

/// Rows are the true class, columns the predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::vector<std::string> labels)
      : labels_(std::move(labels)),
        counts_(labels_.size() * labels_.size(), 0) {}

  explicit ConfusionMatrix(const GenusCatalog& catalog)
      : ConfusionMatrix(catalog.names()) {}

  std::size_t n() const noexcept { return labels_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  std::int64_t& at(std::size_t truth, std::size_t pred) {
    return counts_.at(truth * n() + pred);
  }
  std::int64_t at(std::size_t truth, std::size_t pred) const {
    return counts_.at(truth * n() + pred);
  }

  void add(std::size_t truth, std::size_t pred, std::int64_t count = 1) {
    if (count < 0) throw Error("range", "negative confusion count");
    at(truth, pred) += count;
  }

  std::int64_t row_sum(std::size_t i) const {
    std::int64_t s = 0;
    for (std::size_t j = 0; j < n(); ++j) s += at(i, j);
    return s;
  }
  std::int64_t col_sum(std::size_t j) const {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < n(); ++i) s += at(i, j);
    return s;
  }
  std::int64_t total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
  }

  double class_precision(std::size_t i) const {
    auto c = col_sum(i);
    return c == 0 ? 0.0 : static_cast<double>(at(i, i)) / c;
  }
  double class_recall(std::size_t i) const {
    auto r = row_sum(i);
    return r == 0 ? 0.0 : static_cast<double>(at(i, i)) / r;
  }
  double class_f1(std::size_t i) const {
    return f_beta(class_precision(i), class_recall(i), 1.0);
  }

  double accuracy() const {
    auto t = total();
    if (t == 0) return 0.0;
    std::int64_t d = 0;
    for (std::size_t i = 0; i < n(); ++i) d += at(i, i);
    return static_cast<double>(d) / t;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::vector<std::string> labels_;
  std::vector<std::int64_t> counts_;
};

inline double macro_f1(const ConfusionMatrix& cm) {
  if (cm.n() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < cm.n(); ++i) s += cm.class_f1(i);
  return s / static_cast<double>(cm.n());
}

/// Sums rows and columns into merged classes. `mapping[i]` names the merged
/// class of label i; merged classes are ordered by first occurrence.
inline ConfusionMatrix merge_classes(const ConfusionMatrix& cm,
                                     const std::vector<std::string>& mapping) {
  if (mapping.size() != cm.n())
    throw Error("shape", "class mapping must cover every label");
  std::vector<std::string> merged;
  std::vector<std::size_t> target(cm.n());
  for (std::size_t i = 0; i < cm.n(); ++i) {
    auto it = std::find(merged.begin(), merged.end(), mapping[i]);
    if (it == merged.end()) {
      target[i] = merged.size();
      merged.push_back(mapping[i]);
    } else {
      target[i] = static_cast<std::size_t>(it - merged.begin());
    }
  }
  ConfusionMatrix out(merged);
  for (std::size_t i = 0; i < cm.n(); ++i)
    for (std::size_t j = 0; j < cm.n(); ++j)
      out.add(target[i], target[j], cm.at(i, j));
  return out;
}

/// Mapping from a `genus -> merged class` table; genera absent from the
/// table keep their own name.
inline std::vector<std::string> merge_mapping(
    const std::vector<std::string>& labels,
    const std::map<std::string, std::string>& groups) {
  std::vector<std::string> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = groups.find(l);
    out.push_back(it == groups.end() ? l : it->second);
  }
  return out;
}

struct GenusDetectionRow {
  std::string genus;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  double precision() const noexcept {
    return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  }
  double recall() const noexcept {
    return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
  }
  double f2() const { return f_beta(precision(), recall(), 2.0); }
};

/// Micro-aggregates tp/fp/fn per slide genus; rows sorted by ascending F2,
/// then genus name.
inline std::vector<GenusDetectionRow> per_genus_detection_report(
    const std::vector<std::pair<std::string, MatchResult>>& per_slide) {
  std::map<std::string, GenusDetectionRow> acc;
  for (const auto& [genus, m] : per_slide) {
    auto& row = acc[genus];
    row.genus = genus;
    row.tp += m.tp_count();
    row.fp += m.fp_count();
    row.fn += m.fn_count();
  }
  std::vector<GenusDetectionRow> rows;
  for (auto& [_, r] : acc) rows.push_back(r);
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.f2() < b.f2();
  });
  return rows;
}

inline void write_detection_table_text(
    std::ostream& out, const std::vector<GenusDetectionRow>& rows) {
  out << std::left << std::setw(14) << "Genus" << std::right << std::setw(11)
      << "Precision" << std::setw(9) << "Recall" << std::setw(9) << "F2"
      << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    out << std::left << std::setw(14) << r.genus << std::right << std::setw(11)
        << r.precision() << std::setw(9) << r.recall() << std::setw(9)
        << r.f2() << '\n';
  out.unsetf(std::ios::floatfield);
}

inline void write_detection_table_csv(
    std::ostream& out, const std::vector<GenusDetectionRow>& rows) {
  out << "genus,precision,recall,f2\n";
  out << std::fixed << std::setprecision(6);
  for (const auto& r : rows)
    out << r.genus << ',' << r.precision() << ',' << r.recall() << ','
        << r.f2() << '\n';
  out.unsetf(std::ios::floatfield);
}

/// Header line of labels, then one row of counts per true class.
inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
  out << "true\\pred";
  for (const auto& l : cm.labels()) out << ',' << l;
  out << '\n';
  for (std::size_t i = 0; i < cm.n(); ++i) {
    out << cm.labels()[i];
    for (std::size_t j = 0; j < cm.n(); ++j) out << ',' << cm.at(i, j);
    out << '\n';
  }
}

}  // namespace vesselid::metrics
