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

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vesselid/dataset.hpp"

namespace vesselid {
namespace {

SlideMeta slide_meta(const std::string& id, const std::string& mac, const std::string& genus) {
  SlideMeta s;
  s.slide_id = id;
  s.maceration_id = mac;
  s.genus = genus;
  s.width_px = 5000;
  s.height_px = 4000;
  return s;
}

Annotation human(const std::string& id, const std::string& slide, BBox b) {
  Annotation a;
  a.annotation_id = id;
  a.slide_id = slide;
  a.bbox = b;
  return a;
}

/// One slide per maceration with `counts[m]` accepted boxes each.
void add_genus(DatasetIndex& idx, const std::string& genus, const std::vector<int>& counts) {
  for (std::size_t m = 0; m < counts.size(); ++m) {
    auto sid = genus + "-s" + std::to_string(m);
    idx.add_slide(slide_meta(sid, genus + "-m" + std::to_string(m), genus));
    for (int k = 0; k < counts[m]; ++k)
      idx.add_annotation(human(sid + "-a" + std::to_string(k), sid, {k, k, k + 10, k + 10}));
  }
}

TEST(AnnotationFile, RoundTrip) {
  std::vector<Annotation> anns{human("a1", "s", {10, 20, 110, 220})};
  anns[0].genus = "Fagus";
  Annotation p;
  p.annotation_id = "p7";
  p.slide_id = "s";
  p.bbox = {5, 5, 50, 60};
  p.confidence = 0.1 + 0.2;  // not exactly representable in short decimal
  p.source = Source::predicted;
  p.review = Review::pending;
  p.version = 3;
  anns.push_back(p);
  std::stringstream ss;
  write_annotations(ss, anns);
  EXPECT_NE(ss.str().find("a1,10 20 110 220,Fagus,-,human,accepted,1"), std::string::npos);
  EXPECT_EQ(read_annotations(ss, "s"), anns);
}

TEST(AnnotationFile, RejectsMalformedLines) {
  std::istringstream few("a1,1 2 3 4,-,-,human,accepted\n");
  EXPECT_THROW(read_annotations(few, "s"), Error);
  std::istringstream bad_box("a1,1 2 x 4,-,-,human,accepted,1\n");
  EXPECT_THROW(read_annotations(bad_box, "s"), Error);
  std::istringstream bad_state("a1,1 2 3 4,-,0.5,human,accepted,1\n");
  EXPECT_THROW(read_annotations(bad_state, "s"), Error);
  std::istringstream bad_source("a1,1 2 3 4,-,-,robot,accepted,1\n");
  EXPECT_THROW(read_annotations(bad_source, "s"), Error);
}

TEST(DatasetIndex, SaveLoadRoundTrip) {
  auto dir = testing::scratch_dir("dataset_roundtrip");
  DatasetIndex idx;
  add_genus(idx, "Fagus", {3, 2});
  add_predictions(idx, "Fagus-s0", {{{1, 1, 9, 9}, 0.75}});
  idx.save(dir);
  auto back = DatasetIndex::load(dir);
  ASSERT_EQ(back.slides().size(), 2u);
  EXPECT_EQ(back.annotations("Fagus-s0"), idx.annotations("Fagus-s0"));
  EXPECT_EQ(back.macerations(), idx.macerations());
  EXPECT_TRUE(std::filesystem::exists(dir / "annotations" / "Fagus-s1.csv"));
}

TEST(DatasetIndex, Invariants) {
  DatasetIndex idx;
  EXPECT_THROW(idx.add_slide(slide_meta("s", "", "Fagus")), Error);
  idx.add_slide(slide_meta("s", "m", "Fagus"));
  EXPECT_THROW(idx.add_slide(slide_meta("s", "m", "Fagus")), Error);
  EXPECT_THROW(idx.add_annotation(human("a", "nope", {0, 0, 1, 1})), Error);
  idx.add_annotation(human("a", "s", {0, 0, 1, 1}));
  EXPECT_THROW(idx.add_annotation(human("a", "s", {0, 0, 1, 1})), Error);
}

TEST(Split, ThreeMacerationsGoOnePerPartition) {
  DatasetIndex idx;
  add_genus(idx, "Fagus", {10, 20, 30});
  add_genus(idx, "Hevea", {5, 5, 50});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = split(idx, {1.0 / 3, 1.0 / 3, 1.0 / 3}, seed);
    EXPECT_EQ(s.partition.size(), 6u);
    for (auto p : {Partition::train, Partition::val, Partition::test}) {
      auto macs = s.macerations_in(p);
      ASSERT_EQ(macs.size(), 2u);
      EXPECT_NE(macs[0].substr(0, 5), macs[1].substr(0, 5));  // one per genus
    }
  }
}

TEST(Split, TooFewMacerationsNamesGenus) {
  DatasetIndex idx;
  add_genus(idx, "Fagus", {10, 20, 30});
  add_genus(idx, "Salix", {10, 20});
  try {
    split(idx, {0.6, 0.2, 0.2}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("Salix"), std::string::npos);
  }
  EXPECT_THROW(split(idx, {0.5, 0.2, 0.2}, 1), Error);
}

TEST(Split, SingleGenusMatchesExhaustiveOracle) {
  const std::vector<int> counts{12, 40, 7, 33, 25, 18, 50, 9, 21, 30};
  DatasetIndex idx;
  add_genus(idx, "Fagus", counts);
  const std::array<double, 3> ratios{0.6, 0.2, 0.2};
  auto s = split(idx, ratios, 3);
  std::array<int, 3> nmac{};
  std::array<double, 3> got{};
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (std::size_t m = 0; m < counts.size(); ++m) {
    int p = static_cast<int>(s.partition.at("Fagus-m" + std::to_string(m)));
    ++nmac[p];
    got[p] += counts[m];
  }
  EXPECT_EQ(nmac, (std::array<int, 3>{6, 2, 2}));
  auto dev = [&](const std::array<double, 3>& a) {
    double d = 0;
    for (int p = 0; p < 3; ++p) d = std::max(d, std::abs(a[p] / total - ratios[p]));
    return d;
  };
  // Every 6/2/2 assignment.
  double best = 1e9;
  const int n = static_cast<int>(counts.size());
  for (int mask = 0; mask < (1 << n); ++mask) {
    if (__builtin_popcount(mask) != 6) continue;
    std::vector<int> rest;
    for (int i = 0; i < n; ++i)
      if (!(mask >> i & 1)) rest.push_back(i);
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) {
        std::array<double, 3> sums{};
        for (int i = 0; i < n; ++i)
          if (mask >> i & 1) sums[0] += counts[i];
        sums[1] = counts[rest[a]] + counts[rest[b]];
        sums[2] = total - sums[0] - sums[1];
        best = std::min(best, dev(sums));
      }
  }
  EXPECT_NEAR(dev(got), best, 1e-12);
}

TEST(Split, DeterministicAndDisjointAcrossSeeds) {
  auto cat = GenusCatalog::default_catalog();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    DatasetIndex idx;
    std::map<std::string, int> nmac;
    for (const auto& g : cat.names()) {
      std::vector<int> counts(3 + rng() % 8);
      for (auto& c : counts) c = 20 + static_cast<int>(rng() % 181);
      nmac[g] = static_cast<int>(counts.size());
      add_genus(idx, g, counts);
    }
    auto a = split(idx, {0.6, 0.2, 0.2}, seed);
    auto b = split(idx, {0.6, 0.2, 0.2}, seed);
    EXPECT_EQ(a.partition, b.partition);
    EXPECT_EQ(a.partition.size(), idx.macerations().size());
    // Per-genus composition of train and val.
    std::map<std::string, std::array<double, 3>> per;
    std::array<double, 3> tot{};
    for (const auto& s : idx.slides()) {
      int p = static_cast<int>(a.partition.at(s.maceration_id));
      double n = static_cast<double>(idx.annotations(s.slide_id).size());
      per[*s.genus][p] += n;
      tot[p] += n;
    }
    for (const auto& [g, v] : per) {
      for (int p = 0; p < 3; ++p) EXPECT_GT(v[p], 0) << g;
      if (nmac[g] >= 4) {
        EXPECT_LE(std::abs(v[0] / tot[0] - v[1] / tot[1]), 0.05) << g;
      }
    }
  }
}

TEST(Split, JsonRoundTrip) {
  DatasetIndex idx;
  add_genus(idx, "Fagus", {1, 2, 3, 4});
  auto s = split(idx, {0.5, 0.25, 0.25}, 9);
  auto back = SplitAssignment::from_json(nlohmann::json::parse(s.to_json().dump()));
  EXPECT_EQ(back.partition, s.partition);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(slides_in(idx, s, Partition::train).size(), 2u);
}

class Review : public ::testing::Test {
 protected:
  void SetUp() override {
    idx.add_slide(slide_meta("s", "m", "Fagus"));
    std::vector<Detection> dets;
    for (int i = 0; i < 10; ++i) dets.push_back({{i * 100, 0, i * 100 + 50, 50}, 0.5 + i * 0.01});
    ids = add_predictions(idx, "s", dets);
  }
  DatasetIndex idx;
  std::vector<std::string> ids;
};

TEST_F(Review, AcceptAllMakesCorrected) {
  std::vector<ReviewDecision> ds;
  for (const auto& id : ids) ds.push_back({id, ReviewDecision::Kind::accept, {}, {}, {}, {}});
  merge_review(idx, ds);
  for (const auto& a : idx.annotations("s")) {
    EXPECT_EQ(a.source, Source::corrected);
    EXPECT_EQ(a.review, vesselid::Review::accepted);
    EXPECT_EQ(a.version, 2);
    EXPECT_FALSE(a.confidence.has_value());
  }
  EXPECT_EQ(idx.training_export("s").size(), 10u);
  EXPECT_EQ(idx.audit_log().size(), 10u);
}

TEST_F(Review, RejectAllEmptiesTrainingExport) {
  std::vector<ReviewDecision> ds;
  for (const auto& id : ids) ds.push_back({id, ReviewDecision::Kind::reject, {}, {}, {}, {}});
  merge_review(idx, ds);
  EXPECT_TRUE(idx.training_export("s").empty());
  EXPECT_EQ(idx.hard_negatives("s").size(), 10u);
  EXPECT_EQ(idx.annotations("s").size(), 10u);  // nothing deleted
}

TEST_F(Review, AdjustRoundTripsThroughFiles) {
  auto dir = testing::scratch_dir("review_adjust");
  BBox moved = idx.find(ids[3])->bbox;
  moved.x_max += 10;
  merge_review(idx, {{ids[3], ReviewDecision::Kind::adjust, moved, std::string("Hevea"), 1, {}}});
  idx.save(dir);
  auto back = DatasetIndex::load(dir);
  const auto* a = back.find(ids[3]);
  ASSERT_NE(a, nullptr);
  EXPECT_EQ(a->bbox, moved);
  EXPECT_EQ(a->version, 2);
  EXPECT_EQ(a->genus, "Hevea");
  EXPECT_EQ(back.training_export("s").size(), 1u);
  // Untouched predictions stay pending.
  EXPECT_EQ(back.find(ids[0])->review, vesselid::Review::pending);
  EXPECT_EQ(back.audit_log().size(), 1u);
}

TEST_F(Review, ErrorsLeaveIndexUntouched) {
  const auto before = idx.annotations("s");
  EXPECT_THROW(merge_review(idx, {{ids[0], ReviewDecision::Kind::accept, {}, {}, {}, {}},
                                  {"ghost", ReviewDecision::Kind::accept, {}, {}, {}, {}}}),
               Error);
  EXPECT_THROW(merge_review(idx, {{ids[0], ReviewDecision::Kind::accept, {}, {}, 2, {}}}), Error);
  EXPECT_THROW(merge_review(idx, {{ids[0], ReviewDecision::Kind::adjust, BBox{0, 0, 6000, 10}, {}, {}, {}}}),
               Error);
  EXPECT_EQ(idx.annotations("s"), before);
  // Replaying a decision against a record that moved on is a conflict.
  merge_review(idx, {{ids[1], ReviewDecision::Kind::accept, {}, {}, 1, {}}});
  try {
    merge_review(idx, {{ids[1], ReviewDecision::Kind::reject, {}, {}, 1, {}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "conflict");
  }
}

TEST(Stats, Examples) {
  EXPECT_TRUE(stats(DatasetIndex{}).empty());
  DatasetIndex idx;
  add_genus(idx, "Fagus", {100, 50});
  add_genus(idx, "Hevea", {5});
  auto ids = add_predictions(idx, "Hevea-s0", {{{0, 0, 5, 5}, 0.9}, {{0, 0, 6, 6}, 0.8}});
  merge_review(idx, {{ids[0], ReviewDecision::Kind::reject, {}, {}, {}, {}},
                     {ids[1], ReviewDecision::Kind::accept, {}, {}, {}, {}}});
  auto st = stats(idx);
  ASSERT_EQ(st.size(), 2u);
  EXPECT_EQ(st[0].genus, "Fagus");
  EXPECT_EQ(st[0].images, 2u);
  EXPECT_EQ(st[0].vessels, 150u);
  EXPECT_EQ(st[1].vessels, 6u);  // rejected one excluded
}

}  // namespace
}  // namespace vesselid
