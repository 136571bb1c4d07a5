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

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kcaps/attacks.hpp"
#include "kcaps/data.hpp"
#include "kcaps/detection.hpp"
#include "kcaps/models.hpp"

namespace kcaps {

struct DataConfig {
  std::string name = "mnist";
  std::string root;
  std::size_t subset_per_class = 200;  // 0 keeps every example
  int max_shift = 4;
};

struct OptimConfig {
  double lr = 1e-2;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  std::size_t patience = 5;  // epochs without a test-accuracy gain before stopping
};

struct AttackConfig {
  std::vector<double> epsilons = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  std::vector<AttackMode> modes = {AttackMode::kWhite, AttackMode::kBlack};
  std::optional<AttackLoss> loss;  // unset selects the model default
  std::string surrogate_checkpoint;
  double detect_epsilon = 0.3;  // epsilon of the AUC summary table
  double far = 0.05;
  std::size_t histogram_bins = 30;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  OptimConfig optim;
  AttackConfig attack;
  /// "features" sets Z from capsule features after the warm-up epoch;
  /// "random" keeps the Gaussian initialisation.
  std::string inducing_init = "features";
  std::uint64_t seed = 1;

  /// Defaults for `kind`; the surrogate trains 10 epochs at lr 1e-3.
  static ExperimentConfig defaults(ModelKind kind, const std::string& dataset = "mnist");
  /// Missing keys take the defaults of the named model kind; unknown keys throw.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// FNV-1a of the canonical JSON without the seed, as 16 hex digits.
  std::string hash() const;
  void validate() const;

  AttackLoss attack_loss() const { return attack.loss.value_or(default_attack_loss(model.kind)); }
  std::uint64_t eval_seed() const { return seed ^ 0x5eed0e7a1ULL; }
  std::uint64_t attack_seed() const { return seed ^ 0xa77ac4ULL; }
};

struct Splits {
  Dataset train;
  Dataset test;
};
Splits load_splits(const DataConfig& data);
/// Normalized evaluation tensor of a whole dataset.
Tensor eval_images(const Dataset& data);

std::unique_ptr<Model> build_model(const ExperimentConfig& cfg, std::uint64_t init_seed);
/// Rebuilds the model recorded in a checkpoint written by train().
std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint,
                                  ExperimentConfig* recorded = nullptr);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean batch objective
  double classification = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double test_accuracy = 0.0;
  double seconds = 0.0;
};
nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

struct TrainOptions {
  bool resume = false;         // continue from <out>/last.kcaps when present
  std::size_t stop_after = 0;  // run at most this many epochs in this call; 0 = no limit
  std::ostream* log = nullptr;
};

struct TrainSummary {
  std::vector<EpochRecord> history;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  bool finished = false;  // epoch budget or early stop reached
};

/// Trains into `out`: best.kcaps, last.kcaps, config.json and train_log.json.
/// Non-finite losses or Cholesky failure throw TrainingDiverged and leave the
/// last good checkpoint in place.
TrainSummary train(const ExperimentConfig& cfg, const Splits& data, const std::filesystem::path& out,
                   const TrainOptions& opts = {});

/// Writes sweep.csv and attack_<mode>.kcaps artifacts into `out`.
std::vector<SweepRow> run_attack(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                 const Dataset& test, const std::filesystem::path& out);

struct DetectionSummary {
  nlohmann::json auc;  // AUC per detector row and attack mode
  nlohmann::json thresholds;
  nlohmann::json clean;  // accuracy and clean-set score averages
};

/// Reads attack artifacts from `attack_dir`; writes roc.csv, histograms.csv,
/// auc.json, thresholds.json and clean_scores.json into `out`.
DetectionSummary run_detect(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                            const Dataset& test, const std::filesystem::path& attack_dir,
                            const std::filesystem::path& out);

/// Aggregates every run directory below `root` into table1.{json,csv},
/// table2.json and curves.csv. Missing pieces become explicit nulls.
nlohmann::json run_report(const std::filesystem::path& root);

/// Row names of the AUC table.
std::vector<std::string> auc_table_rows();

}  // namespace kcaps
