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

// Annotation storage, maceration-level splitting, review merging and
// dataset statistics.
//
// On-disk layout of a dataset directory:
//   index.json                 slide metadata and container locations
//   annotations/<slide>.csv    one annotation file per slide
//   audit.log                  one JSON line per annotation state change

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vesselid/core.hpp"
#include "vesselid/slide_store.hpp"

namespace vesselid {

// ---------------------------------------------------------------------------
// Annotation file
//
//   # annotation_id,bbox,genus,confidence,source,review,version
//   a1,10 20 110 220,Fagus,-,human,accepted,1
//   p7,5 5 50 60,-,0.8125,predicted,pending,1

inline void write_annotations(std::ostream& out, const std::vector<Annotation>& anns) {
  out << "# annotation_id,bbox,genus,confidence,source,review,version\n";
  for (const auto& a : anns) {
    out << a.annotation_id << ',' << a.bbox.x_min << ' ' << a.bbox.y_min << ' ' << a.bbox.x_max
        << ' ' << a.bbox.y_max << ',' << (a.genus ? *a.genus : "-") << ',';
    if (a.confidence) {
      std::ostringstream c;
      c << std::setprecision(17) << *a.confidence;
      out << c.str();
    } else {
      out << '-';
    }
    out << ',' << to_string(a.source) << ',' << to_string(a.review) << ',' << a.version << '\n';
  }
}

inline std::vector<Annotation> read_annotations(std::istream& in, const std::string& slide_id) {
  std::vector<Annotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    const std::string where = "annotation line " + std::to_string(lineno);
    if (f.size() != 7) throw Error("parse", where + ": expected 7 fields");
    Annotation a;
    a.annotation_id = f[0];
    a.slide_id = slide_id;
    std::istringstream bs(f[1]);
    if (!(bs >> a.bbox.x_min >> a.bbox.y_min >> a.bbox.x_max >> a.bbox.y_max))
      throw Error("parse", where + ": bad bbox");
    if (f[2] != "-") a.genus = f[2];
    try {
      if (f[3] != "-") a.confidence = std::stod(f[3]);
      a.source = parse_source(f[4]);
      a.review = parse_review(f[5]);
      a.version = std::stoi(f[6]);
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw Error("parse", where + ": bad number");
    }
    a.validate();
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Index

enum class Partition { train, val, test };

inline std::string to_string(Partition p) {
  switch (p) {
    case Partition::train: return "train";
    case Partition::val: return "val";
    case Partition::test: return "test";
  }
  return "?";
}

inline Partition parse_partition(const std::string& s) {
  if (s == "train") return Partition::train;
  if (s == "val") return Partition::val;
  if (s == "test") return Partition::test;
  throw Error("parse", "unknown partition '" + s + "'");
}

struct SplitAssignment {
  std::map<std::string, Partition> partition;  // maceration -> partition
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;

  std::vector<std::string> macerations_in(Partition p) const {
    std::vector<std::string> out;
    for (const auto& [m, q] : partition)
      if (q == p) out.push_back(m);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json parts = nlohmann::json::object();
    for (const auto& [m, p] : partition) parts[m] = to_string(p);
    return {{"seed", seed}, {"ratios", ratios}, {"partition", parts}};
  }

  static SplitAssignment from_json(const nlohmann::json& j) {
    SplitAssignment s;
    s.seed = j.value("seed", std::uint64_t{0});
    s.ratios = j.value("ratios", s.ratios);
    for (const auto& [m, p] : j.at("partition").items())
      s.partition[m] = parse_partition(p.get<std::string>());
    return s;
  }
};

class DatasetIndex {
 public:
  DatasetIndex() = default;

  const std::vector<SlideMeta>& slides() const noexcept { return slides_; }

  const SlideMeta& slide(const std::string& id) const {
    for (const auto& s : slides_)
      if (s.slide_id == id) return s;
    throw Error("not_found", "unknown slide '" + id + "'");
  }

  bool has_slide(const std::string& id) const {
    return std::any_of(slides_.begin(), slides_.end(),
                       [&](const auto& s) { return s.slide_id == id; });
  }

  /// Container directory for a slide, relative to the dataset root unless
  /// absolute. Empty when the slide has no stored pixels.
  std::string container_path(const std::string& id) const {
    auto it = containers_.find(id);
    return it == containers_.end() ? std::string{} : it->second;
  }

  void add_slide(const SlideMeta& meta, const std::string& container = {}) {
    meta.validate();
    if (meta.maceration_id.empty())
      throw Error("meta", "slide " + meta.slide_id + " has no maceration_id");
    if (has_slide(meta.slide_id)) throw Error("conflict", "slide " + meta.slide_id + " exists");
    slides_.push_back(meta);
    if (!container.empty()) containers_[meta.slide_id] = container;
    annotations_[meta.slide_id];
  }

  const std::vector<Annotation>& annotations(const std::string& slide_id) const {
    auto it = annotations_.find(slide_id);
    if (it == annotations_.end()) throw Error("not_found", "unknown slide '" + slide_id + "'");
    return it->second;
  }

  void add_annotation(Annotation a) {
    a.validate();
    auto& list = annotations_mut(a.slide_id);
    if (owner_.count(a.annotation_id))
      throw Error("conflict", "duplicate annotation id " + a.annotation_id);
    owner_[a.annotation_id] = a.slide_id;
    list.push_back(std::move(a));
  }

  const Annotation* find(const std::string& annotation_id) const {
    auto it = owner_.find(annotation_id);
    if (it == owner_.end()) return nullptr;
    for (const auto& a : annotations_.at(it->second))
      if (a.annotation_id == annotation_id) return &a;
    return nullptr;
  }

  Annotation* find_mut(const std::string& annotation_id) {
    return const_cast<Annotation*>(std::as_const(*this).find(annotation_id));
  }

  /// maceration_id -> slide ids, sorted.
  std::map<std::string, std::vector<std::string>> macerations() const {
    std::map<std::string, std::vector<std::string>> m;
    for (const auto& s : slides_) m[s.maceration_id].push_back(s.slide_id);
    for (auto& [_, v] : m) std::sort(v.begin(), v.end());
    return m;
  }

  std::string maceration_of(const std::string& slide_id) const { return slide(slide_id).maceration_id; }

  /// Genus label of an annotation: its own, else the slide's.
  std::optional<std::string> genus_of(const Annotation& a) const {
    if (a.genus) return a.genus;
    return slide(a.slide_id).genus;
  }

  /// Accepted records only: what detector/classifier training may use.
  std::vector<Annotation> training_export(const std::string& slide_id) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations(slide_id))
      if (a.review == Review::accepted) out.push_back(a);
    return out;
  }

  /// Rejected predictions, kept as hard negatives.
  std::vector<Annotation> hard_negatives(const std::string& slide_id) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations(slide_id))
      if (a.review == Review::rejected) out.push_back(a);
    return out;
  }

  std::vector<std::string> audit_log() const { return audit_; }
  void record_audit(const nlohmann::json& entry) { audit_.push_back(entry.dump()); }

  // -- persistence ----------------------------------------------------------

  static std::filesystem::path annotation_file(const std::filesystem::path& root,
                                               const std::string& slide_id) {
    return root / "annotations" / (slide_id + ".csv");
  }

  /// Writes every file through a temporary and a rename.
  void save(const std::filesystem::path& root) const {
    namespace fs = std::filesystem;
    fs::create_directories(root / "annotations");
    nlohmann::json j;
    j["slides"] = nlohmann::json::array();
    for (const auto& s : slides_) {
      auto e = meta_to_json(s);
      auto it = containers_.find(s.slide_id);
      if (it != containers_.end()) e["container"] = it->second;
      j["slides"].push_back(e);
    }
    write_atomic(root / "index.json", j.dump(2) + "\n");
    for (const auto& s : slides_) {
      std::ostringstream os;
      write_annotations(os, annotations_.at(s.slide_id));
      write_atomic(annotation_file(root, s.slide_id), os.str());
    }
    std::string log;
    for (const auto& l : audit_) log += l + "\n";
    write_atomic(root / "audit.log", log);
  }

  static DatasetIndex load(const std::filesystem::path& root) {
    std::ifstream in(root / "index.json");
    if (!in) throw Error("io", "no dataset index at " + root.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error("parse", std::string("index.json: ") + e.what());
    }
    DatasetIndex idx;
    for (const auto& e : j.at("slides")) {
      auto meta = meta_from_json(e);
      idx.add_slide(meta, e.value("container", std::string{}));
      std::ifstream af(annotation_file(root, meta.slide_id));
      if (af)
        for (auto& a : read_annotations(af, meta.slide_id)) idx.add_annotation(std::move(a));
    }
    std::ifstream log(root / "audit.log");
    for (std::string line; std::getline(log, line);)
      if (!line.empty()) idx.audit_.push_back(line);
    return idx;
  }

 private:
  std::vector<Annotation>& annotations_mut(const std::string& slide_id) {
    auto it = annotations_.find(slide_id);
    if (it == annotations_.end()) throw Error("not_found", "unknown slide '" + slide_id + "'");
    return it->second;
  }

  static void write_atomic(const std::filesystem::path& p, const std::string& content) {
    auto tmp = p;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("io", "cannot write " + tmp.string());
      out << content;
    }
    std::filesystem::rename(tmp, p);
  }

  std::vector<SlideMeta> slides_;
  std::map<std::string, std::string> containers_;
  std::map<std::string, std::vector<Annotation>> annotations_;
  std::map<std::string, std::string> owner_;  // annotation id -> slide id
  std::vector<std::string> audit_;
};

/// Predicted, pending annotations for one slide, ids "<slide>-p<k>" counting
/// on from existing predictions.
inline std::vector<std::string> add_predictions(DatasetIndex& index, const std::string& slide_id,
                                                const std::vector<Detection>& dets,
                                                const std::vector<std::optional<std::string>>& genera = {}) {
  if (!genera.empty() && genera.size() != dets.size())
    throw Error("shape", "one genus per detection expected");
  int next = 0;
  while (index.find(slide_id + "-p" + std::to_string(next))) ++next;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    Annotation a;
    a.annotation_id = slide_id + "-p" + std::to_string(next++);
    a.slide_id = slide_id;
    a.bbox = dets[i].bbox;
    if (!genera.empty()) a.genus = genera[i];
    a.confidence = dets[i].confidence;
    a.source = Source::predicted;
    a.review = Review::pending;
    index.add_annotation(a);
    ids.push_back(a.annotation_id);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Split

namespace detail {

struct SplitProblem {
  std::vector<std::string> genera;                    // sorted
  std::vector<std::vector<std::string>> macs;         // per genus, seed-shuffled
  std::vector<std::vector<double>> counts;            // annotations per maceration
  std::vector<std::array<int, 3>> quota;              // macerations per partition
  std::array<double, 3> ratios{};
};

/// (max deviation, sum of squared deviations, ratio deviation) for a full
/// assignment; compared lexicographically.
struct SplitScore {
  double worst = 0, spread = 0, ratio = 0;
  bool better_than(const SplitScore& o) const {
    constexpr double eps = 1e-12;
    if (worst < o.worst - eps) return true;
    if (worst > o.worst + eps) return false;
    if (spread < o.spread - eps) return true;
    if (spread > o.spread + eps) return false;
    return ratio < o.ratio - eps;
  }
};

inline SplitScore score_split(const SplitProblem& pb, const std::vector<std::vector<int>>& part) {
  const std::size_t G = pb.genera.size();
  std::vector<std::array<double, 3>> per(G, {0, 0, 0});
  std::array<double, 3> total{0, 0, 0};
  std::vector<double> genus_total(G, 0);
  double all = 0;
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t m = 0; m < pb.macs[g].size(); ++m) {
      per[g][part[g][m]] += pb.counts[g][m];
      total[part[g][m]] += pb.counts[g][m];
      genus_total[g] += pb.counts[g][m];
      all += pb.counts[g][m];
    }
  SplitScore s;
  for (std::size_t g = 0; g < G; ++g) {
    const double global = all > 0 ? genus_total[g] / all : 0;
    const double tr = total[0] > 0 ? per[g][0] / total[0] : 0;
    const double va = total[1] > 0 ? per[g][1] / total[1] : 0;
    for (double d : {std::abs(tr - global), std::abs(va - global), std::abs(tr - va)}) {
      s.worst = std::max(s.worst, d);
      s.spread += d * d;
    }
    if (genus_total[g] > 0)
      for (int p = 0; p < 3; ++p)
        s.ratio = std::max(s.ratio, std::abs(per[g][p] / genus_total[g] - pb.ratios[p]));
  }
  return s;
}

/// Largest-remainder partition sizes with at least one maceration each.
inline std::array<int, 3> partition_quota(int n, const std::array<double, 3>& r) {
  std::array<int, 3> q{};
  std::array<double, 3> rem{};
  int used = 0;
  for (int p = 0; p < 3; ++p) {
    q[p] = static_cast<int>(std::floor(r[p] * n + 1e-9));
    rem[p] = r[p] * n - q[p];
    used += q[p];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int i = 0; used < n; ++i, ++used) ++q[order[i % 3]];
  for (int p = 0; p < 3; ++p)
    while (q[p] < 1) {
      int donor = static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin());
      --q[donor];
      ++q[p];
    }
  return q;
}

/// All ways to fill one genus's slots with its quota, in lexicographic order.
inline void enumerate_genus(const std::array<int, 3>& quota, std::size_t n,
                            std::vector<std::vector<int>>& out) {
  std::vector<int> cur(n, 0);
  std::array<int, 3> left = quota;
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == n) {
      out.push_back(cur);
      return;
    }
    for (int p = 0; p < 3; ++p) {
      if (left[p] == 0) continue;
      --left[p];
      cur[i] = p;
      rec(i + 1);
      ++left[p];
    }
  };
  rec(0);
}

}  // namespace detail

/// Search space up to which the split is solved exactly.
constexpr double kExhaustiveSplitLimit = 200000;
/// Descent restarts for larger instances.
constexpr int kSplitRestarts = 64;

/// Leakage-safe stratified split on maceration ids.
///
/// Each genus's macerations are divided by largest-remainder quotas (>= 1 per
/// partition). The assignment minimizes, in order: the worst per-genus
/// deviation of train/val annotation share from the global share, the sum
/// of squared deviations, and the worst deviation of a genus's annotation
/// fraction per partition from the target ratio. Small instances are solved
/// exhaustively, larger ones by pairwise-swap descent. Ties go to the
/// earliest candidate in a seed-shuffled order.
inline SplitAssignment split(const DatasetIndex& index, const std::array<double, 3>& ratios,
                             std::uint64_t seed) {
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9 ||
      std::any_of(ratios.begin(), ratios.end(), [](double r) { return r <= 0; }))
    throw Error("config", "split ratios must be positive and sum to 1");

  // Maceration genus and annotation volume.
  std::map<std::string, std::string> mac_genus;
  std::map<std::string, double> mac_count;
  for (const auto& [mac, slides] : index.macerations()) {
    std::map<std::string, int> votes;
    double n = 0;
    for (const auto& sid : slides) {
      const auto& meta = index.slide(sid);
      if (meta.genus) votes[*meta.genus] += 1000000;
      for (const auto& a : index.annotations(sid)) {
        if (a.review == Review::rejected) continue;
        n += 1;
        if (auto g = index.genus_of(a)) ++votes[*g];
      }
    }
    if (votes.empty()) throw Error("split", "maceration " + mac + " has no genus");
    mac_genus[mac] = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
                       return a.second < b.second;
                     })->first;
    mac_count[mac] = n;
  }

  detail::SplitProblem pb;
  pb.ratios = ratios;
  std::mt19937_64 rng(seed);
  std::map<std::string, std::vector<std::string>> by_genus;
  for (const auto& [m, g] : mac_genus) by_genus[g].push_back(m);
  for (auto& [g, macs] : by_genus) {
    if (macs.size() < 3)
      throw Error("split", "genus " + g + " has only " + std::to_string(macs.size()) +
                               " macerations; at least 3 are required");
    std::shuffle(macs.begin(), macs.end(), rng);
    pb.genera.push_back(g);
    std::vector<double> c;
    for (const auto& m : macs) c.push_back(mac_count[m]);
    pb.counts.push_back(c);
    pb.quota.push_back(detail::partition_quota(static_cast<int>(macs.size()), ratios));
    pb.macs.push_back(macs);
  }

  const std::size_t G = pb.genera.size();
  std::vector<std::vector<int>> part(G);
  double space = 1;
  std::vector<std::vector<std::vector<int>>> options(G);
  for (std::size_t g = 0; g < G && space <= kExhaustiveSplitLimit; ++g) {
    // Multinomial coefficient n! / (a! b! c!).
    const auto& q = pb.quota[g];
    double c = 1;
    int k = 0;
    for (int p = 0; p < 3; ++p)
      for (int i = 1; i <= q[p]; ++i) c = c * (++k) / i;
    space *= c;
  }

  if (space <= kExhaustiveSplitLimit) {
    for (std::size_t g = 0; g < G; ++g) detail::enumerate_genus(pb.quota[g], pb.macs[g].size(), options[g]);
    std::vector<std::size_t> pick(G, 0);
    std::vector<std::vector<int>> best;
    detail::SplitScore best_score;
    bool have = false;
    while (true) {
      for (std::size_t g = 0; g < G; ++g) part[g] = options[g][pick[g]];
      auto s = detail::score_split(pb, part);
      if (!have || s.better_than(best_score)) {
        best = part;
        best_score = s;
        have = true;
      }
      std::size_t g = 0;
      while (g < G && ++pick[g] == options[g].size()) pick[g++] = 0;
      if (g == G) break;
    }
    part = best;
  } else {
    // Pairwise-swap descent from several seeded starts; the first start is
    // the plain quota fill.
    std::vector<std::vector<int>> best;
    detail::SplitScore best_score;
    for (int start = 0; start < kSplitRestarts; ++start) {
      for (std::size_t g = 0; g < G; ++g) {
        part[g].clear();
        for (int p = 0; p < 3; ++p) part[g].insert(part[g].end(), pb.quota[g][p], p);
        if (start > 0) std::shuffle(part[g].begin(), part[g].end(), rng);
      }
      auto cur = detail::score_split(pb, part);
      for (bool improved = true; improved;) {
        improved = false;
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t i = 0; i < part[g].size(); ++i)
            for (std::size_t j = i + 1; j < part[g].size(); ++j) {
              if (part[g][i] == part[g][j]) continue;
              std::swap(part[g][i], part[g][j]);
              auto s = detail::score_split(pb, part);
              if (s.better_than(cur)) {
                cur = s;
                improved = true;
              } else {
                std::swap(part[g][i], part[g][j]);
              }
            }
      }
      if (start == 0 || cur.better_than(best_score)) {
        best = part;
        best_score = cur;
      }
    }
    part = best;
  }

  SplitAssignment out;
  out.ratios = ratios;
  out.seed = seed;
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t m = 0; m < pb.macs[g].size(); ++m)
      out.partition[pb.macs[g][m]] = static_cast<Partition>(part[g][m]);
  return out;
}

/// Slide ids of one partition.
inline std::vector<std::string> slides_in(const DatasetIndex& index, const SplitAssignment& s,
                                          Partition p) {
  std::vector<std::string> out;
  for (const auto& meta : index.slides()) {
    auto it = s.partition.find(meta.maceration_id);
    if (it != s.partition.end() && it->second == p) out.push_back(meta.slide_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Review

struct ReviewDecision {
  enum class Kind { accept, adjust, reject };
  std::string annotation_id;
  Kind kind = Kind::accept;
  std::optional<BBox> bbox;
  std::optional<std::string> genus;
  /// When set, the record must currently carry this version.
  std::optional<int> expected_version;
  std::string reviewer;
};

inline std::string to_string(ReviewDecision::Kind k) {
  switch (k) {
    case ReviewDecision::Kind::accept: return "accept";
    case ReviewDecision::Kind::adjust: return "adjust";
    case ReviewDecision::Kind::reject: return "reject";
  }
  return "?";
}

inline ReviewDecision::Kind parse_decision_kind(const std::string& s) {
  if (s == "accept") return ReviewDecision::Kind::accept;
  if (s == "adjust") return ReviewDecision::Kind::adjust;
  if (s == "reject") return ReviewDecision::Kind::reject;
  throw Error("parse", "unknown review action '" + s + "'");
}

/// Applies decisions in order. All are validated before any is applied, so
/// a failing batch leaves the index untouched. Each change bumps the version
/// and appends an audit entry; nothing is deleted.
inline void merge_review(DatasetIndex& index, const std::vector<ReviewDecision>& decisions,
                         const GenusCatalog* catalog = nullptr,
                         const std::string& timestamp = {}) {
  std::map<std::string, int> version;
  for (const auto& d : decisions) {
    const Annotation* a = index.find(d.annotation_id);
    if (!a) throw Error("not_found", "unknown annotation '" + d.annotation_id + "'");
    int v = version.count(d.annotation_id) ? version[d.annotation_id] : a->version;
    if (d.expected_version && *d.expected_version != v)
      throw Error("conflict", "annotation " + d.annotation_id + " is at version " +
                                  std::to_string(v) + ", not " +
                                  std::to_string(*d.expected_version));
    if (d.kind == ReviewDecision::Kind::reject && a->source != Source::predicted)
      throw Error("invalid", "only predictions can be rejected: " + d.annotation_id);
    if (d.kind == ReviewDecision::Kind::adjust) {
      if (!d.bbox && !d.genus) throw Error("invalid", "adjust without changes: " + d.annotation_id);
      if (d.bbox) {
        const auto& meta = index.slide(a->slide_id);
        if (!d.bbox->valid() || d.bbox->x_min < 0 || d.bbox->y_min < 0 ||
            d.bbox->x_max > meta.width_px || d.bbox->y_max > meta.height_px)
          throw Error("invalid_bbox", "bbox outside slide for " + d.annotation_id);
      }
      if (d.genus && catalog && !catalog->contains(*d.genus))
        throw Error("unknown_genus", "unknown genus '" + *d.genus + "'");
    }
    version[d.annotation_id] = v + 1;
  }
  for (const auto& d : decisions) {
    Annotation* a = index.find_mut(d.annotation_id);
    const int from = a->version;
    switch (d.kind) {
      case ReviewDecision::Kind::accept:
      case ReviewDecision::Kind::adjust:
        if (d.bbox) a->bbox = *d.bbox;
        if (d.genus) a->genus = *d.genus;
        a->source = a->source == Source::human ? Source::human : Source::corrected;
        a->review = Review::accepted;
        a->confidence.reset();
        break;
      case ReviewDecision::Kind::reject:
        a->review = Review::rejected;
        break;
    }
    ++a->version;
    a->validate();
    nlohmann::json entry{{"annotation_id", a->annotation_id},
                         {"action", to_string(d.kind)},
                         {"from_version", from},
                         {"to_version", a->version}};
    if (!d.reviewer.empty()) entry["reviewer"] = d.reviewer;
    if (!timestamp.empty()) entry["timestamp"] = timestamp;
    index.record_audit(entry);
  }
}

// ---------------------------------------------------------------------------
// JSON records
//
// Annotation: {"annotation_id", "slide_id", "bbox": [x_min, y_min, x_max,
// y_max], "genus": string|null, "confidence": number|null, "source",
// "review", "version"}.
// Correction: {"annotation_id", "expected_version", "action", "bbox"?,
// "genus"?, "reviewer"?}.

inline nlohmann::json bbox_to_json(const BBox& b) {
  return nlohmann::json::array({b.x_min, b.y_min, b.x_max, b.y_max});
}

inline BBox bbox_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("parse", "bbox must be an array of 4 integers");
  for (const auto& v : j)
    if (!v.is_number_integer()) throw Error("parse", "bbox must be an array of 4 integers");
  return {j[0].get<std::int64_t>(), j[1].get<std::int64_t>(), j[2].get<std::int64_t>(),
          j[3].get<std::int64_t>()};
}

inline nlohmann::json annotation_to_json(const Annotation& a) {
  return {{"annotation_id", a.annotation_id},
          {"slide_id", a.slide_id},
          {"bbox", bbox_to_json(a.bbox)},
          {"genus", a.genus ? nlohmann::json(*a.genus) : nlohmann::json(nullptr)},
          {"confidence", a.confidence ? nlohmann::json(*a.confidence) : nlohmann::json(nullptr)},
          {"source", to_string(a.source)},
          {"review", to_string(a.review)},
          {"version", a.version}};
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
  try {
    Annotation a;
    a.annotation_id = j.at("annotation_id").get<std::string>();
    a.slide_id = j.at("slide_id").get<std::string>();
    a.bbox = bbox_from_json(j.at("bbox"));
    if (j.contains("genus") && !j["genus"].is_null()) a.genus = j["genus"].get<std::string>();
    if (j.contains("confidence") && !j["confidence"].is_null())
      a.confidence = j["confidence"].get<double>();
    a.source = parse_source(j.value("source", std::string("human")));
    a.review = parse_review(j.value("review", std::string("accepted")));
    a.version = j.value("version", 1);
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", std::string("annotation record: ") + e.what());
  }
}

inline nlohmann::json decision_to_json(const ReviewDecision& d) {
  nlohmann::json j{{"annotation_id", d.annotation_id}, {"action", to_string(d.kind)}};
  if (d.expected_version) j["expected_version"] = *d.expected_version;
  if (d.bbox) j["bbox"] = bbox_to_json(*d.bbox);
  if (d.genus) j["genus"] = *d.genus;
  if (!d.reviewer.empty()) j["reviewer"] = d.reviewer;
  return j;
}

inline ReviewDecision decision_from_json(const nlohmann::json& j) {
  try {
    ReviewDecision d;
    d.annotation_id = j.at("annotation_id").get<std::string>();
    d.kind = parse_decision_kind(j.at("action").get<std::string>());
    if (j.contains("expected_version") && !j["expected_version"].is_null())
      d.expected_version = j["expected_version"].get<int>();
    if (j.contains("bbox") && !j["bbox"].is_null()) d.bbox = bbox_from_json(j["bbox"]);
    if (j.contains("genus") && !j["genus"].is_null()) d.genus = j["genus"].get<std::string>();
    d.reviewer = j.value("reviewer", std::string{});
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", std::string("correction record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Statistics

struct GenusStats {
  std::string genus;
  std::size_t images = 0;
  std::size_t vessels = 0;
};

/// Accepted annotations per genus, by descending vessel count (ties by name).
inline std::vector<GenusStats> stats(const DatasetIndex& index) {
  std::map<std::string, GenusStats> m;
  for (const auto& s : index.slides()) {
    std::set<std::string> seen;
    for (const auto& a : index.annotations(s.slide_id)) {
      if (a.review != Review::accepted) continue;
      auto g = index.genus_of(a);
      if (!g) continue;
      auto& e = m[*g];
      e.genus = *g;
      ++e.vessels;
      if (seen.insert(*g).second) ++e.images;
    }
  }
  std::vector<GenusStats> out;
  for (auto& [_, e] : m) out.push_back(e);
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.vessels > b.vessels; });
  return out;
}

}  // namespace vesselid
