/*
 * Copyright 2026 The kcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// kcaps: train, attack, detect and report.
// Failures print one JSON error record on stderr and exit nonzero.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kcaps/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string dataset_root;
  std::optional<std::size_t> subset_per_class;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_checkpoint) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  auto* ck = cmd->add_option("--checkpoint", f.checkpoint, "model checkpoint (.kcaps)");
  if (needs_checkpoint) ck->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--dataset-root", f.dataset_root, "directory holding the dataset files");
  cmd->add_option("--subset-per-class", f.subset_per_class, "examples per class; 0 keeps all");
}

kcaps::ExperimentConfig resolve(const CommonFlags& f) {
  kcaps::ExperimentConfig cfg = kcaps::ExperimentConfig::load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.dataset_root.empty()) cfg.data.root = f.dataset_root;
#ifdef KCAPS_DEFAULT_DATA_ROOT
  if (cfg.data.root.empty() && cfg.data.name == "mnist") cfg.data.root = KCAPS_DEFAULT_DATA_ROOT;
#endif
  if (f.subset_per_class) cfg.data.subset_per_class = *f.subset_per_class;
  cfg.validate();
  return cfg;
}

int fail(const std::string& command, const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", type}, {"command", command}, {"message", message}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule networks with a Gaussian-process head: training, FGSM attacks and detection"};
  app.require_subcommand(1);

  CommonFlags train_f, attack_f, detect_f;
  bool resume = false;
  std::size_t stop_after = 0;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints plus a log");
  add_common(train_cmd, train_f, false);
  train_cmd->add_flag("--resume", resume, "continue from <out>/last.kcaps");
  train_cmd->add_option("--stop-after", stop_after, "stop after this many epochs in this invocation");

  std::string surrogate;
  auto* attack_cmd = app.add_subcommand("attack", "FGSM epsilon sweep in white- and black-box mode");
  add_common(attack_cmd, attack_f, true);
  attack_cmd->add_option("--surrogate", surrogate, "surrogate checkpoint for black-box mode");

  std::string attacks_dir;
  auto* detect_cmd = app.add_subcommand("detect", "score clean and perturbed inputs, ROC/AUC and histograms");
  add_common(detect_cmd, detect_f, true);
  detect_cmd->add_option("--attacks", attacks_dir, "directory with attack artifacts (default: --out)");

  std::string report_root;
  auto* report_cmd = app.add_subcommand("report", "aggregate run directories into summary tables");
  report_cmd->add_option("--out", report_root, "directory containing one subdirectory per run")
      ->required()
      ->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("parse", "usage", e.what(), 2);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "train") {
      const kcaps::ExperimentConfig cfg = resolve(train_f);
      const kcaps::Splits data = kcaps::load_splits(cfg.data);
      kcaps::TrainOptions opts;
      opts.resume = resume;
      opts.stop_after = stop_after;
      opts.log = &std::cout;
      const kcaps::TrainSummary s = kcaps::train(cfg, data, train_f.out, opts);
      std::cout << json{{"command", "train"},
                        {"best_accuracy", s.best_accuracy},
                        {"best_epoch", s.best_epoch},
                        {"epochs", s.history.size()},
                        {"early_stopped", s.early_stopped},
                        {"config_hash", cfg.hash()},
                        {"seed", cfg.seed}}
                       .dump()
                << std::endl;
    } else if (command == "attack") {
      kcaps::ExperimentConfig cfg = resolve(attack_f);
      if (!surrogate.empty()) cfg.attack.surrogate_checkpoint = surrogate;
      const kcaps::Splits data = kcaps::load_splits(cfg.data);
      const auto rows = kcaps::run_attack(cfg, attack_f.checkpoint, data.test, attack_f.out);
      json j = json::array();
      for (const auto& r : rows) {
        j.push_back({{"epsilon", r.epsilon}, {"mode", kcaps::attack_mode_name(r.mode)}, {"accuracy", r.accuracy}});
      }
      std::cout << json{{"command", "attack"}, {"rows", j}, {"config_hash", cfg.hash()}, {"seed", cfg.seed}}.dump()
                << std::endl;
    } else if (command == "detect") {
      const kcaps::ExperimentConfig cfg = resolve(detect_f);
      const kcaps::Splits data = kcaps::load_splits(cfg.data);
      const fs::path adir = attacks_dir.empty() ? fs::path(detect_f.out) : fs::path(attacks_dir);
      const auto s = kcaps::run_detect(cfg, detect_f.checkpoint, data.test, adir, detect_f.out);
      std::cout << json{{"command", "detect"}, {"auc", s.auc.at("table")}, {"clean", s.clean}}.dump() << std::endl;
    } else if (command == "report") {
      std::cout << kcaps::run_report(report_root).dump(2) << std::endl;
    }
  } catch (const kcaps::ConfigError& e) {
    return fail(command, "config", e.what(), 3);
  } catch (const kcaps::DataError& e) {
    return fail(command, "data", e.what(), 4);
  } catch (const kcaps::TrainingDiverged& e) {
    return fail(command, "diverged", e.what(), 5);
  } catch (const std::exception& e) {
    return fail(command, "runtime", e.what(), 1);
  }
  return 0;
}
