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

#include <fstream>
#include <sstream>
#include <thread>

#include "test_util.hpp"
#include "vesselid/pipeline.hpp"
#include "vesselid/service.hpp"

namespace vesselid {
namespace {

using nlohmann::json;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Dataset with slide "S" (10 pending predictions with genera) and slide "E"
/// (no annotations), built once and copied for every test.
const std::filesystem::path& template_dataset() {
  static const std::filesystem::path root = [] {
    auto dir = testing::scratch_dir("service_template");
    auto j = json::parse(R"({
      "seed": 8,
      "synth": {"profile_scale": 0.25, "slides": [
        {"slide_id": "S", "maceration_id": "Sm", "width_px": 1400, "height_px": 1000,
         "genus_mix": {"Fagus": 0.5, "Hevea": 0.5}, "element_count": 10,
         "max_iou": 0.0, "min_gap_px": 8, "annotate": false},
        {"slide_id": "E", "maceration_id": "Em", "width_px": 600, "height_px": 400,
         "genus_mix": {"Fagus": 1.0}, "element_count": 2, "annotate": false}]}
    })");
    auto cfg = RunConfig::from_json(j);
    cfg.dataset = dir / "ds";
    std::ostringstream log;
    cmd_synth(cfg, log);
    auto index = DatasetIndex::load(cfg.dataset);
    std::ifstream t(cfg.dataset / "truth" / "S.csv");
    std::vector<Detection> dets;
    std::vector<std::optional<std::string>> genera;
    for (const auto& a : read_annotations(t, "S")) {
      dets.push_back({a.bbox, 0.9});
      genera.push_back(a.genus);
    }
    add_predictions(index, "S", dets, genera);
    index.save(cfg.dataset);
    return cfg.dataset;
  }();
  return root;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = testing::scratch_dir(std::string("service_") +
                                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::copy(template_dataset(), root_, std::filesystem::copy_options::recursive);
    service_ = std::make_unique<AnnotateService>(root_, GenusCatalog::default_catalog());
    service_->bind(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }

  void TearDown() override {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  httplib::Result get(const std::string& path) { return client_->Get(path); }

  httplib::Result post(const std::string& path, const json& body) {
    return client_->Post(path, body.dump(), "application/json");
  }

  json annotations(const std::string& query = "") {
    auto r = get("/slides/S/annotations" + query);
    EXPECT_EQ(r->status, 200);
    return json::parse(r->body);
  }

  static json decision(const json& a, const std::string& action) {
    return {{"annotation_id", a["annotation_id"]},
            {"action", action},
            {"expected_version", a["version"]}};
  }

  std::filesystem::path root_;
  std::unique_ptr<AnnotateService> service_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(ServiceTest, ListsSlidesWithPyramidGeometry) {
  auto r = get("/slides");
  ASSERT_EQ(r->status, 200);
  auto slides = json::parse(r->body);
  ASSERT_EQ(slides.size(), 2u);
  auto s = json::parse(get("/slides/S")->body);
  EXPECT_EQ(s["width_px"], 1400);
  EXPECT_EQ(s["annotation_count"], 10);
  EXPECT_GE(s["levels"].size(), 1u);
  EXPECT_EQ(s["levels"][0]["factor"], 1);
  EXPECT_EQ(get("/slides/nope")->status, 404);
}

TEST_F(ServiceTest, TileBytesMatchTheStoredFile) {
  const auto& meta = service_->index().slide("S");
  (void)meta;
  auto c = SlideContainer::open(root_ / service_->index().container_path("S"));
  for (int l = 0; l < c.level_count(); ++l) {
    auto r = get("/slides/S/tiles/0/" + std::to_string(l) + "/0_0");
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    EXPECT_NE(r->get_header_value("Cache-Control").find("immutable"), std::string::npos);
    EXPECT_EQ(r->body, slurp(c.tile_path(0, l, 0, 0)));
    EXPECT_EQ(get("/slides/S/tiles/0/" + std::to_string(l) + "/0_0")->body, r->body);
  }
  EXPECT_EQ(get("/slides/S/tiles/0/" + std::to_string(c.level_count()) + "/0_0")->status, 404);
  EXPECT_EQ(get("/slides/S/tiles/0/0/999_0")->status, 404);
  EXPECT_EQ(get("/slides/S/tiles/9/0/0_0")->status, 404);
  EXPECT_EQ(get("/slides/S/tiles/0/0/a_b")->status, 404);
}

TEST_F(ServiceTest, FiltersAndEmptySlides) {
  EXPECT_EQ(annotations().size(), 10u);
  EXPECT_EQ(annotations("?source=predicted&review=pending").size(), 10u);
  EXPECT_EQ(annotations("?source=human").size(), 0u);
  auto e = get("/slides/E/annotations");
  ASSERT_EQ(e->status, 200);
  EXPECT_EQ(json::parse(e->body), json::array());
  EXPECT_EQ(get("/slides/S/annotations?review=maybe")->status, 400);
  EXPECT_EQ(get("/slides/X/annotations")->status, 404);
}

TEST_F(ServiceTest, AcceptBumpsVersionAndLeavesPendingFilter) {
  auto first = annotations()[0];
  ASSERT_EQ(first["version"], 1);
  auto r = post("/slides/S/corrections", decision(first, "accept"));
  ASSERT_EQ(r->status, 200) << r->body;
  auto after = json::parse(r->body);
  EXPECT_EQ(after["version"], 2);
  EXPECT_EQ(after["review"], "accepted");
  EXPECT_EQ(after["source"], "corrected");
  for (const auto& a : annotations("?review=pending"))
    EXPECT_NE(a["annotation_id"], first["annotation_id"]);
  EXPECT_EQ(annotations("?review=pending").size(), 9u);
  EXPECT_EQ(DatasetIndex::load(root_).find(first["annotation_id"])->version, 2);
}

TEST_F(ServiceTest, StaleVersionConflictsWithoutChange) {
  auto first = annotations()[0];
  auto stale = decision(first, "reject");
  stale["expected_version"] = 7;
  const auto before = slurp(root_ / "index.json");
  auto r = post("/slides/S/corrections", stale);
  EXPECT_EQ(r->status, 409);
  auto body = json::parse(r->body);
  EXPECT_EQ(body["code"], "conflict");
  EXPECT_EQ(body["current"], first);
  EXPECT_EQ(annotations()[0], first);
  EXPECT_EQ(slurp(root_ / "index.json"), before);
}

TEST_F(ServiceTest, InvalidCorrectionsAreRejected) {
  auto first = annotations()[0];
  auto d = decision(first, "adjust");
  d["bbox"] = {0, 0, 1500, 10};
  EXPECT_EQ(post("/slides/S/corrections", d)->status, 422);
  d["bbox"] = {10, 10, 5, 20};
  EXPECT_EQ(post("/slides/S/corrections", d)->status, 422);
  auto g = decision(first, "adjust");
  g["genus"] = "Quercus";
  EXPECT_EQ(post("/slides/S/corrections", g)->status, 422);
  auto unknown = decision(first, "accept");
  unknown["annotation_id"] = "S-p999";
  EXPECT_EQ(post("/slides/S/corrections", unknown)->status, 404);
  EXPECT_EQ(post("/slides/X/corrections", decision(first, "accept"))->status, 404);
  EXPECT_EQ(post("/slides/E/corrections", decision(first, "accept"))->status, 404);
  auto no_version = decision(first, "accept");
  no_version.erase("expected_version");
  EXPECT_EQ(post("/slides/S/corrections", no_version)->status, 400);
  EXPECT_EQ(client_->Post("/slides/S/corrections", "{", "application/json")->status, 400);
  EXPECT_EQ(annotations()[0], first);
}

TEST_F(ServiceTest, ConcurrentConflictingCorrectionsLetExactlyOneThrough) {
  auto first = annotations()[0];
  std::vector<int> status(2);
  std::vector<std::thread> threads;
  for (int k = 0; k < 2; ++k)
    threads.emplace_back([&, k] {
      httplib::Client c("127.0.0.1", port_);
      status[k] = c.Post("/slides/S/corrections",
                         decision(first, k == 0 ? "accept" : "reject").dump(), "application/json")
                      ->status;
    });
  for (auto& t : threads) t.join();
  std::sort(status.begin(), status.end());
  EXPECT_EQ(status, (std::vector<int>{200, 409}));
  EXPECT_EQ(annotations()[0]["version"], 2);
}

TEST_F(ServiceTest, ReviewRoundTripAsTheFrontEndDrivesIt) {
  const auto audit_before = DatasetIndex::load(root_).audit_log().size();
  auto list = annotations("?source=predicted&review=pending");
  ASSERT_EQ(list.size(), 10u);
  for (int k = 0; k < 8; ++k)
    ASSERT_EQ(post("/slides/S/corrections", decision(list[k], "accept"))->status, 200);
  auto adjust = decision(list[8], "adjust");
  auto box = list[8]["bbox"];
  box[2] = box[2].get<int>() + 10;
  adjust["bbox"] = box;
  auto adj = post("/slides/S/corrections", adjust);
  ASSERT_EQ(adj->status, 200) << adj->body;
  EXPECT_EQ(json::parse(adj->body)["bbox"], box);
  ASSERT_EQ(post("/slides/S/corrections", decision(list[9], "reject"))->status, 200);
  auto replay = post("/slides/S/corrections", decision(list[0], "accept"));
  EXPECT_EQ(replay->status, 409);

  EXPECT_EQ(annotations("?review=accepted").size(), 9u);
  EXPECT_EQ(annotations("?review=rejected").size(), 1u);
  EXPECT_EQ(annotations("?review=pending").size(), 0u);

  // Persisted state agrees with what the API served.
  auto index = DatasetIndex::load(root_);
  EXPECT_EQ(index.find(list[8]["annotation_id"])->bbox, bbox_from_json(box));
  const auto& log = index.audit_log();
  ASSERT_EQ(log.size(), audit_before + 10);
  EXPECT_NE(log.back().find("T"), std::string::npos);
}

TEST_F(ServiceTest, ExportReturnsParseableAnnotationFiles) {
  auto list = annotations();
  ASSERT_EQ(post("/slides/S/corrections", decision(list[0], "accept"))->status, 200);
  auto all = post("/export", {{"slide_id", "S"}});
  ASSERT_EQ(all->status, 200);
  EXPECT_EQ(all->get_header_value("Content-Type"), "text/csv");
  std::istringstream in(all->body);
  EXPECT_EQ(read_annotations(in, "S").size(), 10u);
  auto accepted = post("/export", {{"slide_id", "S"}, {"accepted_only", true}});
  std::istringstream in2(accepted->body);
  auto rows = read_annotations(in2, "S");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].annotation_id, list[0]["annotation_id"]);
  auto summary = post("/export", json::object());
  ASSERT_EQ(summary->status, 200);
  EXPECT_EQ(json::parse(summary->body)["slides"], 2);
  EXPECT_EQ(post("/export", {{"slide_id", "X"}})->status, 404);
}

TEST_F(ServiceTest, ReadsHaveNoSideEffects) {
  const auto index_before = slurp(root_ / "index.json");
  const auto audit_before = slurp(root_ / "audit.log");
  for (int k = 0; k < 3; ++k) {
    get("/slides");
    get("/slides/S");
    get("/slides/S/annotations?review=pending");
    get("/slides/S/tiles/0/0/0_0");
    get("/slides/nope");
  }
  EXPECT_EQ(slurp(root_ / "index.json"), index_before);
  EXPECT_EQ(slurp(root_ / "audit.log"), audit_before);
  EXPECT_EQ(get("/nothing/here")->status, 404);
}

}  // namespace
}  // namespace vesselid
