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

// vesselid command-line tool. Logs go to stderr, the command summary to
// stdout as JSON. Failures print one JSON line {"error": {"code", "message"}}
// on stderr and exit with status 1, or 2 for usage errors.

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vesselid/pipeline.hpp"
#include "vesselid/service.hpp"

namespace {

void print_error(const std::string& code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"code", code}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  using namespace vesselid;
  CLI::App app{"Vessel element detection and classification toolkit"};
  app.require_subcommand(1);
  std::string config_file, out_dir, dataset;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Run seed (overrides the config)");
  app.add_option("--out", out_dir, "Output directory (overrides the config)");
  app.add_option("--dataset", dataset, "Dataset root (overrides the config)");

  using Command = std::function<nlohmann::json(const RunConfig&, std::ostream&)>;
  const std::map<std::string, std::pair<std::string, Command>> commands{
      {"ingest", {"Import slides from PNG planes into the dataset", cmd_ingest}},
      {"synth", {"Generate synthetic slides with ground truth", cmd_synth}},
      {"split", {"Assign macerations to train/val/test", cmd_split}},
      {"augment", {"Write augmented training samples", cmd_augment}},
      {"detect", {"Detect vessel elements on every slide", cmd_detect}},
      {"classify", {"Classify detections and report genus presence", cmd_classify}},
      {"evaluate", {"Score predictions against the evaluation partition", cmd_evaluate}},
      {"report", {"Rebuild genus-presence reports and dataset statistics", cmd_report}},
      {"loop", {"Run one predict-review-refit iteration", cmd_loop}},
  };
  for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.first);
  auto* serve_cmd = app.add_subcommand("serve", "Serve the review API over HTTP");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve_cmd->add_option("--host", host, "Listen address");
  serve_cmd->add_option("--port", port, "Listen port")->check(CLI::Range(1, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    print_error("usage", e.what());
    return 2;
  }

  try {
    RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::load(config_file);
    if (seed) cfg.seed = *seed;
    if (!dataset.empty()) cfg.dataset = dataset;
    if (!out_dir.empty()) cfg.out = out_dir;
    cfg.validate();
    if (serve_cmd->parsed()) {
      serve(cfg.dataset, cfg.catalog, host, port, std::cerr);
      return 0;
    }
    for (const auto& [name, entry] : commands) {
      if (!app.got_subcommand(name)) continue;
      std::cout << entry.second(cfg, std::cerr).dump(2) << '\n';
    }
    return 0;
  } catch (const Error& e) {
    print_error(e.code(), e.what());
  } catch (const std::exception& e) {
    print_error("internal", e.what());
  }
  return 1;
}
