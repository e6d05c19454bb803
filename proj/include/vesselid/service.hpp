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

// HTTP API for the review front end.
//
//   GET  /slides
//   GET  /slides/{id}
//   GET  /slides/{id}/tiles/{plane}/{level}/{x}_{y}
//   GET  /slides/{id}/annotations?source=&review=
//   POST /slides/{id}/corrections
//   POST /export
//
// Errors are {"code", "message"} with 400, 404, 409 or 422.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vesselid/core.hpp"
#include "vesselid/dataset.hpp"
#include "vesselid/png_io.hpp"
#include "vesselid/slide_store.hpp"

namespace vesselid {

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

class AnnotateService {
 public:
  /// `persist` writes the index back after every accepted correction.
  AnnotateService(std::filesystem::path root, GenusCatalog catalog, bool persist = true)
      : root_(std::move(root)),
        catalog_(std::move(catalog)),
        persist_(persist),
        index_(DatasetIndex::load(root_)) {}

  /// Transport-independent dispatch; `path` excludes the query string.
  HttpResponse handle(const std::string& method, const std::string& path,
                      const std::map<std::string, std::string>& query,
                      const std::string& body) {
    try {
      const auto parts = split_path(path);
      if (method == "GET") {
        std::shared_lock lock(mutex_);
        if (parts.size() == 1 && parts[0] == "slides") return list_slides();
        if (parts.size() == 2 && parts[0] == "slides") return get_slide(parts[1]);
        if (parts.size() == 3 && parts[0] == "slides" && parts[2] == "annotations")
          return list_annotations(parts[1], query);
        if (parts.size() == 6 && parts[0] == "slides" && parts[2] == "tiles")
          return get_tile(parts[1], parts[3], parts[4], parts[5]);
      } else if (method == "POST") {
        std::unique_lock lock(mutex_);
        if (parts.size() == 3 && parts[0] == "slides" && parts[2] == "corrections")
          return submit_correction(parts[1], body);
        if (parts.size() == 1 && parts[0] == "export") return export_annotations(body);
      }
      return error(404, "not_found", "no route for " + method + " " + path);
    } catch (const Error& e) {
      return error(status_for(e.code()), e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, "parse", e.what());
    }
  }

  void bind(httplib::Server& server) {
    auto forward = [this](const char* method) {
      return [this, method](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> query;
        for (const auto& [k, v] : req.params) query.emplace(k, v);
        auto r = handle(method, req.path, query, req.body);
        res.status = r.status;
        if (r.content_type == "image/png")
          res.set_header("Cache-Control", "public, max-age=31536000, immutable");
        res.set_content(r.body, r.content_type);
      };
    };
    server.Get(R"(/.*)", forward("GET"));
    server.Post(R"(/.*)", forward("POST"));
  }

  const DatasetIndex& index() const { return index_; }

 private:
  static std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> out;
    std::stringstream ss(path);
    for (std::string seg; std::getline(ss, seg, '/');)
      if (!seg.empty()) out.push_back(seg);
    return out;
  }

  static int status_for(const std::string& code) {
    if (code == "not_found") return 404;
    if (code == "conflict") return 409;
    if (code == "invalid_bbox" || code == "unknown_genus" || code == "invalid") return 422;
    return 400;
  }

  static HttpResponse error(int status, const std::string& code, const std::string& message) {
    return {status, "application/json",
            nlohmann::json{{"code", code}, {"message", message}}.dump()};
  }

  static HttpResponse json(const nlohmann::json& j, int status = 200) {
    return {status, "application/json", j.dump()};
  }

  static std::int64_t parse_int(const std::string& s) {
    if (s.empty() || s.size() > 18 || s.find_first_not_of("0123456789") != std::string::npos)
      throw Error("not_found", "bad tile coordinate '" + s + "'");
    return std::stoll(s);
  }

  static std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  SlideContainer container(const std::string& id) const {
    const auto rel = index_.container_path(id);
    if (rel.empty()) throw Error("not_found", "slide " + id + " has no tiles");
    std::filesystem::path p(rel);
    return SlideContainer::open(p.is_absolute() ? p : root_ / p);
  }

  HttpResponse list_slides() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& m : index_.slides()) out.push_back(meta_to_json(m));
    return json(out);
  }

  HttpResponse get_slide(const std::string& id) const {
    auto j = meta_to_json(index_.slide(id));
    const auto& anns = index_.annotations(id);
    j["annotation_count"] = anns.size();
    if (!index_.container_path(id).empty()) {
      auto c = container(id);
      j["tile_size"] = c.tile_size();
      nlohmann::json levels = nlohmann::json::array();
      for (int l = 0; l < c.level_count(); ++l)
        levels.push_back(nlohmann::json{{"level", l},
                                        {"factor", c.levels()[l]},
                                        {"width_px", c.level_width(l)},
                                        {"height_px", c.level_height(l)},
                                        {"tiles_x", c.tiles_x(l)},
                                        {"tiles_y", c.tiles_y(l)}});
      j["levels"] = levels;
    }
    return json(j);
  }

  HttpResponse get_tile(const std::string& id, const std::string& plane, const std::string& level,
                        const std::string& xy) const {
    index_.slide(id);
    const auto us = xy.find('_');
    if (us == std::string::npos) throw Error("not_found", "tile name must be {x}_{y}");
    auto c = container(id);
    const auto p = parse_int(plane), l = parse_int(level);
    const auto x = parse_int(xy.substr(0, us)), y = parse_int(xy.substr(us + 1));
    if (p > 1000 || l > 1000 || !c.has_tile(static_cast<int>(p), static_cast<int>(l), x, y))
      throw Error("not_found", "no tile " + plane + "/" + level + "/" + xy + " on slide " + id);
    return {200, "image/png",
            read_file_bytes(c.tile_path(static_cast<int>(p), static_cast<int>(l), x, y).string())};
  }

  HttpResponse list_annotations(const std::string& id,
                                const std::map<std::string, std::string>& query) const {
    std::optional<Source> source;
    std::optional<Review> review;
    try {
      if (auto it = query.find("source"); it != query.end() && !it->second.empty())
        source = parse_source(it->second);
      if (auto it = query.find("review"); it != query.end() && !it->second.empty())
        review = parse_review(it->second);
    } catch (const Error& e) {
      throw Error("bad_filter", e.what());
    }
    std::vector<const Annotation*> hits;
    for (const auto& a : index_.annotations(id))
      if ((!source || a.source == *source) && (!review || a.review == *review)) hits.push_back(&a);
    std::sort(hits.begin(), hits.end(),
              [](const auto* a, const auto* b) { return a->annotation_id < b->annotation_id; });
    nlohmann::json out = nlohmann::json::array();
    for (const auto* a : hits) out.push_back(annotation_to_json(*a));
    return json(out);
  }

  HttpResponse submit_correction(const std::string& id, const std::string& body) {
    index_.slide(id);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error("parse", std::string("correction body: ") + e.what());
    }
    auto d = decision_from_json(j);
    if (!d.expected_version) throw Error("parse", "expected_version is required");
    const Annotation* a = index_.find(d.annotation_id);
    if (!a || a->slide_id != id)
      throw Error("not_found", "no annotation '" + d.annotation_id + "' on slide " + id);
    if (*d.expected_version != a->version) {
      auto r = error(409, "conflict",
                     "annotation " + d.annotation_id + " is at version " +
                         std::to_string(a->version) + ", not " +
                         std::to_string(*d.expected_version));
      auto e = nlohmann::json::parse(r.body);
      e["current"] = annotation_to_json(*a);
      r.body = e.dump();
      return r;
    }
    merge_review(index_, {d}, &catalog_, utc_now());
    if (persist_) index_.save(root_);
    return json(annotation_to_json(*index_.find(d.annotation_id)));
  }

  /// Commits the index. With {"slide_id"} the response is that slide's
  /// annotation file; "accepted_only" limits it to training records.
  HttpResponse export_annotations(const std::string& body) {
    nlohmann::json j = body.empty() ? nlohmann::json::object() : nlohmann::json::parse(body);
    index_.save(root_);
    if (!j.contains("slide_id"))
      return json({{"saved", true}, {"slides", index_.slides().size()}});
    const auto id = j["slide_id"].get<std::string>();
    index_.slide(id);
    std::ostringstream os;
    write_annotations(os, j.value("accepted_only", false) ? index_.training_export(id)
                                                          : index_.annotations(id));
    return {200, "text/csv", os.str()};
  }

  std::filesystem::path root_;
  GenusCatalog catalog_;
  bool persist_;
  DatasetIndex index_;
  mutable std::shared_mutex mutex_;
};

/// Blocks serving the dataset until the process is stopped.
inline void serve(const std::filesystem::path& root, const GenusCatalog& catalog,
                  const std::string& host, int port, std::ostream& log) {
  AnnotateService service(root, catalog);
  httplib::Server server;
  service.bind(server);
  log << "serving " << root.string() << " on http://" << host << ':' << port << '\n';
  if (!server.listen(host, port)) throw Error("io", "cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace vesselid
