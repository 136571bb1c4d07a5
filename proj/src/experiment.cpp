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

#include "kcaps/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "kcaps/ops.hpp"
#include "kcaps/optim.hpp"

namespace kcaps {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

json conv_to_json(const ConvSpec& c) {
  return json::array({c.in_channels, c.out_channels, c.kernel_size, c.stride, c.padding});
}

ConvSpec conv_from_json(const json& j) {
  if (!j.is_array() || j.size() != 5) {
    throw ConfigError("conv specs are [in_channels, out_channels, kernel, stride, padding]");
  }
  const auto v = j.get<std::vector<std::size_t>>();
  return ConvSpec{v[0], v[1], v[2], v[3], v[4]};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string run_model_name(const ExperimentConfig& cfg) { return model_kind_name(cfg.model.kind); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::defaults(ModelKind kind, const std::string& dataset) {
  ExperimentConfig c;
  c.data.name = dataset;
  c.model = ModelConfig::for_dataset(kind, DatasetSpec::by_name(dataset));
  if (kind == ModelKind::kSurrogate) {
    c.optim.lr = 1e-3;
    c.optim.epochs = 10;
  }
  return c;
}

json ExperimentConfig::to_json() const {
  json m;
  m["kind"] = model_kind_name(model.kind);
  if (model.kind != ModelKind::kSurrogate) {
    const CapsNetConfig& cc = model.capsnet;
    json stem = json::array();
    for (const ConvSpec& s : cc.stem) stem.push_back(conv_to_json(s));
    m["stem"] = stem;
    m["primary"] = conv_to_json(cc.primary);
    m["primary_dim"] = cc.primary_dim;
    m["capsule_dim"] = cc.capsule_dim;
    m["routing_iterations"] = cc.routing_iterations;
    m["unrolled_routing"] = cc.unrolled_routing;
    m["init_std"] = cc.init_std;
    m["conv_init_std"] = cc.conv_init_std;
  }
  if (model.uses_decoder()) {
    m["decoder_hidden"] = model.decoder_hidden;
    m["decoder_init_std"] = model.decoder_init_std;
    m["recon_weight"] = model.recon_weight;
  }
  if (model.uses_gp()) {
    m["num_inducing"] = model.num_inducing;
    m["mc_train"] = model.mc_train;
    m["mc_eval"] = model.mc_eval;
    m["inducing_init"] = inducing_init;
    m["inducing_init_std"] = model.inducing_init_std;
    m["gamma_init"] = model.gamma_init;
  }
  json modes = json::array();
  for (AttackMode a : attack.modes) modes.push_back(attack_mode_name(a));
  return json{
      {"seed", seed},
      {"dataset",
       {{"name", data.name}, {"root", data.root}, {"subset_per_class", data.subset_per_class},
        {"max_shift", data.max_shift}}},
      {"model", m},
      {"optim",
       {{"lr", optim.lr}, {"epochs", optim.epochs}, {"batch_size", optim.batch_size},
        {"patience", optim.patience}}},
      {"attack",
       {{"epsilons", attack.epsilons},
        {"modes", modes},
        {"loss", attack.loss ? attack_loss_name(*attack.loss) : "default"},
        {"surrogate_checkpoint", attack.surrogate_checkpoint},
        {"detect_epsilon", attack.detect_epsilon},
        {"far", attack.far},
        {"histogram_bins", attack.histogram_bins}}},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, {"seed", "dataset", "model", "optim", "attack"}, "config");
  const json model = j.value("model", json::object());
  check_keys(model,
             {"kind", "stem", "primary", "primary_dim", "capsule_dim", "routing_iterations",
              "unrolled_routing", "init_std", "conv_init_std", "decoder_hidden", "decoder_init_std", "recon_weight",
              "num_inducing", "mc_train", "mc_eval", "inducing_init", "inducing_init_std", "gamma_init"},
             "model");
  const json data = j.value("dataset", json::object());
  check_keys(data, {"name", "root", "subset_per_class", "max_shift"}, "dataset");
  std::string dataset_name = "mnist";
  read(data, "name", dataset_name);
  std::string kind_name = "kcn";
  read(model, "kind", kind_name);
  const ModelKind kind = parse_model_kind(kind_name);

  ExperimentConfig c = defaults(kind, dataset_name);
  read(j, "seed", c.seed);
  read(data, "root", c.data.root);
  read(data, "subset_per_class", c.data.subset_per_class);
  read(data, "max_shift", c.data.max_shift);

  // Settings that do not apply to a model kind are rejected, not ignored.
  auto forbid = [&](std::initializer_list<const char*> keys, const std::string& why) {
    for (const char* k : keys) {
      if (model.contains(k)) throw ConfigError("model." + std::string(k) + " is not allowed: " + why);
    }
  };
  if (!c.model.uses_decoder()) {
    forbid({"decoder_hidden", "decoder_init_std", "recon_weight"}, kind_name + " has no decoder");
  }
  if (!c.model.uses_gp()) {
    forbid({"num_inducing", "mc_train", "mc_eval", "inducing_init", "inducing_init_std", "gamma_init"},
           kind_name + " has no GP head");
  }
  if (kind == ModelKind::kSurrogate) {
    forbid({"stem", "primary", "primary_dim", "capsule_dim", "routing_iterations", "unrolled_routing",
            "init_std", "conv_init_std"},
           "the surrogate has a fixed architecture");
  }
  CapsNetConfig& cc = c.model.capsnet;
  if (model.contains("stem")) {
    cc.stem.clear();
    for (const json& s : model.at("stem")) cc.stem.push_back(conv_from_json(s));
  }
  if (model.contains("primary")) cc.primary = conv_from_json(model.at("primary"));
  read(model, "primary_dim", cc.primary_dim);
  read(model, "capsule_dim", cc.capsule_dim);
  read(model, "routing_iterations", cc.routing_iterations);
  read(model, "unrolled_routing", cc.unrolled_routing);
  read(model, "init_std", cc.init_std);
  read(model, "conv_init_std", cc.conv_init_std);
  read(model, "decoder_hidden", c.model.decoder_hidden);
  read(model, "decoder_init_std", c.model.decoder_init_std);
  read(model, "recon_weight", c.model.recon_weight);
  read(model, "num_inducing", c.model.num_inducing);
  read(model, "mc_train", c.model.mc_train);
  read(model, "mc_eval", c.model.mc_eval);
  read(model, "inducing_init", c.inducing_init);
  read(model, "inducing_init_std", c.model.inducing_init_std);
  read(model, "gamma_init", c.model.gamma_init);

  const json optim = j.value("optim", json::object());
  check_keys(optim, {"lr", "epochs", "batch_size", "patience"}, "optim");
  read(optim, "lr", c.optim.lr);
  read(optim, "epochs", c.optim.epochs);
  read(optim, "batch_size", c.optim.batch_size);
  read(optim, "patience", c.optim.patience);

  const json attack = j.value("attack", json::object());
  check_keys(attack,
             {"epsilons", "modes", "loss", "surrogate_checkpoint", "detect_epsilon", "far",
              "histogram_bins"},
             "attack");
  read(attack, "epsilons", c.attack.epsilons);
  if (attack.contains("modes")) {
    c.attack.modes.clear();
    for (const json& m : attack.at("modes")) c.attack.modes.push_back(parse_attack_mode(m.get<std::string>()));
  }
  std::string loss = "default";
  read(attack, "loss", loss);
  if (loss != "default") c.attack.loss = parse_attack_loss(loss);
  read(attack, "surrogate_checkpoint", c.attack.surrogate_checkpoint);
  read(attack, "detect_epsilon", c.attack.detect_epsilon);
  read(attack, "far", c.attack.far);
  read(attack, "histogram_bins", c.attack.histogram_bins);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_json(read_json(path)); }

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("seed");
  j["dataset"].erase("root");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

void ExperimentConfig::validate() const {
  DatasetSpec::by_name(data.name);
  if (data.max_shift < 0) throw ConfigError("dataset.max_shift must be >= 0");
  model.validate();
  if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be >= 1");
  if (optim.epochs == 0) throw ConfigError("optim.epochs must be >= 1");
  if (inducing_init != "features" && inducing_init != "random") {
    throw ConfigError("model.inducing_init must be 'features' or 'random'");
  }
  validate_epsilon_grid(attack.epsilons);
  if (std::find(attack.epsilons.begin(), attack.epsilons.end(), attack.detect_epsilon) ==
      attack.epsilons.end()) {
    throw ConfigError("attack.detect_epsilon must be one of attack.epsilons");
  }
  if (!(attack.far > 0.0 && attack.far <= 1.0)) throw ConfigError("attack.far must lie in (0, 1]");
  if (attack.histogram_bins == 0) throw ConfigError("attack.histogram_bins must be >= 1");
  if (attack.loss == AttackLoss::kClassificationRecon && !model.uses_decoder()) {
    throw ConfigError("attack.loss classification+reconstruction needs a decoder");
  }
}

// ---------------------------------------------------------------------------
// Data and models

Splits load_splits(const DataConfig& data) {
  if (data.root.empty()) throw ConfigError("dataset.root is not set");
  Splits s{load_dataset(data.name, data.root, true), load_dataset(data.name, data.root, false)};
  if (data.subset_per_class > 0) {
    s.train = subset_per_class(s.train, data.subset_per_class);
    s.test = subset_per_class(s.test, data.subset_per_class);
  }
  return s;
}

Tensor eval_images(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(data, idx, BatchMode::kEval, 0, nullptr);
}

std::unique_ptr<Model> build_model(const ExperimentConfig& cfg, std::uint64_t init_seed) {
  Rng rng(init_seed);
  return std::make_unique<Model>(cfg.model, DatasetSpec::by_name(cfg.data.name), rng);
}

std::unique_ptr<Model> load_model(const fs::path& checkpoint, ExperimentConfig* recorded) {
  const Checkpoint ck = Checkpoint::load(checkpoint);
  if (!ck.meta.contains("config")) {
    throw std::runtime_error(checkpoint.string() + " carries no model configuration");
  }
  const ExperimentConfig cfg = ExperimentConfig::from_json(ck.meta.at("config"));
  auto model = build_model(cfg, cfg.seed);
  model->load_parameters(ck);
  if (recorded) *recorded = cfg;
  return model;
}

json to_json(const EpochRecord& r) {
  return json{{"epoch", r.epoch},     {"loss", r.loss},
              {"classification", r.classification}, {"recon", r.recon},
              {"kl", r.kl},           {"test_accuracy", r.test_accuracy},
              {"seconds", r.seconds}};
}

EpochRecord epoch_record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.loss = j.at("loss").get<double>();
  r.classification = j.at("classification").get<double>();
  r.recon = j.at("recon").get<double>();
  r.kl = j.at("kl").get<double>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

// ---------------------------------------------------------------------------
// Training

namespace {

json history_json(const std::vector<EpochRecord>& h) {
  json a = json::array();
  for (const EpochRecord& r : h) a.push_back(to_json(r));
  return a;
}

void write_train_log(const ExperimentConfig& cfg, const TrainSummary& s, const fs::path& out,
                     const std::string& diverged = "") {
  json j{{"config_hash", cfg.hash()},       {"seed", cfg.seed},
         {"model", run_model_name(cfg)},    {"dataset", cfg.data.name},
         {"history", history_json(s.history)}, {"best_accuracy", s.best_accuracy},
         {"best_epoch", s.best_epoch},      {"early_stopped", s.early_stopped},
         {"finished", s.finished},          {"eval_seed", cfg.eval_seed()}};
  if (!diverged.empty()) j["diverged"] = diverged;
  write_json(out / "train_log.json", j);
}

}  // namespace

TrainSummary train(const ExperimentConfig& cfg, const Splits& data, const fs::path& out,
                   const TrainOptions& opts) {
  cfg.validate();
  if (data.train.size() == 0 || data.test.size() == 0) throw DataError("train: empty dataset split");
  fs::create_directories(out);
  write_json(out / "config.json", cfg.to_json());

  auto model = build_model(cfg, cfg.seed);
  Adam opt(model->parameters(), AdamOptions{cfg.optim.lr});
  Rng rng(cfg.seed ^ 0x7a3b1e55ULL);
  TrainSummary sum;
  std::size_t since_best = 0, start = 1;

  const fs::path last = out / "last.kcaps", best = out / "best.kcaps";
  if (opts.resume && fs::exists(last)) {
    const Checkpoint ck = Checkpoint::load(last);
    if (ck.meta.value("config_hash", "") != cfg.hash()) {
      throw ConfigError("cannot resume: " + last.string() + " was written by a different config");
    }
    model->load_parameters(ck);
    opt.load_state(ck);
    rng.set_state(ck.meta.at("rng").get<std::string>());
    for (const json& r : ck.meta.at("history")) sum.history.push_back(epoch_record_from_json(r));
    sum.best_accuracy = ck.meta.at("best_accuracy").get<double>();
    sum.best_epoch = ck.meta.at("best_epoch").get<std::size_t>();
    sum.early_stopped = ck.meta.at("early_stopped").get<bool>();
    since_best = ck.meta.at("since_best").get<std::size_t>();
    start = ck.meta.at("epoch").get<std::size_t>() + 1;
  }

  const Tensor test_x = eval_images(data.test);
  const std::size_t n = data.train.size(), bs = cfg.optim.batch_size;
  std::size_t ran = 0;
  for (std::size_t epoch = start; epoch <= cfg.optim.epochs && !sum.early_stopped; ++epoch) {
    if (opts.stop_after > 0 && ran == opts.stop_after) break;
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      const std::vector<std::size_t> perm = rng.permutation(n);
      std::size_t batches = 0;
      for (std::size_t lo = 0; lo < n; lo += bs) {
        const std::span<const std::size_t> idx(perm.data() + lo, std::min(bs, n - lo));
        const Tensor x = make_batch(data.train, idx, BatchMode::kTrain, cfg.data.max_shift, &rng);
        const std::vector<int> y = data.train.gather_labels(idx);
        opt.zero_grad();
        Graph g;
        LossParts parts;
        Var loss = model->loss(g, g.constant(x), y, n, rng, &parts);
        if (!std::isfinite(parts.total)) throw NumericError("non-finite training loss");
        g.backward(loss);
        opt.step();
        rec.loss += parts.total;
        rec.classification += parts.classification;
        rec.recon += parts.recon;
        rec.kl += parts.kl;
        ++batches;
      }
      for (double* v : {&rec.loss, &rec.classification, &rec.recon, &rec.kl}) *v /= static_cast<double>(batches);
      // Warm-up epoch done: place Z on features of random training images.
      if (epoch == 1 && model->has_gp() && cfg.inducing_init == "features") {
        const std::vector<std::size_t> pick = rng.permutation(n);
        const std::size_t m = model->gp().num_inducing();
        if (m > n) throw ConfigError("num_inducing exceeds the training set size");
        const std::span<const std::size_t> idx(pick.data(), m);
        model->init_inducing_from(make_batch(data.train, idx, BatchMode::kEval, 0, nullptr));
      }
      rec.test_accuracy = accuracy(*model, test_x, data.test.labels, cfg.eval_seed());
    } catch (const NumericError& e) {
      write_train_log(cfg, sum, out, std::string("epoch ") + std::to_string(epoch) + ": " + e.what());
      throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    } catch (const op::NotPositiveDefinite& e) {
      write_train_log(cfg, sum, out, std::string("epoch ") + std::to_string(epoch) + ": " + e.what());
      throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    sum.history.push_back(rec);
    ++ran;

    const bool improved = sum.best_epoch == 0 || rec.test_accuracy > sum.best_accuracy;
    if (improved) {
      sum.best_accuracy = rec.test_accuracy;
      sum.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.optim.patience && cfg.optim.patience > 0) {
      sum.early_stopped = true;
    }
    sum.finished = sum.early_stopped || epoch == cfg.optim.epochs;

    Checkpoint ck;
    ck.meta = json{{"kind", "model"},         {"config", cfg.to_json()},
                   {"config_hash", cfg.hash()}, {"seed", cfg.seed},
                   {"model", run_model_name(cfg)}, {"epoch", epoch},
                   {"test_accuracy", rec.test_accuracy}};
    model->save_parameters(ck);
    if (improved) ck.save(best);
    opt.save_state(ck);
    ck.meta["rng"] = rng.state();
    ck.meta["history"] = history_json(sum.history);
    ck.meta["best_accuracy"] = sum.best_accuracy;
    ck.meta["best_epoch"] = sum.best_epoch;
    ck.meta["since_best"] = since_best;
    ck.meta["early_stopped"] = sum.early_stopped;
    ck.save(last);
    write_train_log(cfg, sum, out);

    if (opts.log) {
      *opts.log << run_model_name(cfg) << " epoch " << epoch << " loss " << rec.loss << " cls "
                << rec.classification << " recon " << rec.recon << " kl " << rec.kl << " test_acc "
                << rec.test_accuracy << " (" << std::fixed << std::setprecision(1) << rec.seconds
                << "s)" << std::defaultfloat << std::setprecision(6) << std::endl;
    }
  }
  if (sum.early_stopped || (!sum.history.empty() && sum.history.back().epoch == cfg.optim.epochs)) {
    sum.finished = true;
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Attacks

namespace {

std::unique_ptr<Model> load_matching(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  ExperimentConfig rec;
  auto model = load_model(checkpoint, &rec);
  if (rec.model.kind != cfg.model.kind) {
    throw ConfigError("checkpoint " + checkpoint.string() + " holds a " + model_kind_name(rec.model.kind) +
                      " model but the config asks for " + model_kind_name(cfg.model.kind));
  }
  if (rec.data.name != cfg.data.name) {
    throw ConfigError("checkpoint dataset " + rec.data.name + " differs from config dataset " + cfg.data.name);
  }
  return model;
}

fs::path attack_artifact(const fs::path& dir, AttackMode mode) {
  return dir / ("attack_" + attack_mode_name(mode) + ".kcaps");
}

json run_meta(const ExperimentConfig& cfg) {
  return json{{"config_hash", cfg.hash()}, {"seed", cfg.seed}, {"model", run_model_name(cfg)}};
}

std::vector<int> labels_of(const Dataset& d) { return d.labels; }

}  // namespace

std::vector<SweepRow> run_attack(const ExperimentConfig& cfg, const fs::path& checkpoint,
                                 const Dataset& test, const fs::path& out) {
  cfg.validate();
  auto model = load_matching(cfg, checkpoint);
  std::unique_ptr<Model> surrogate;
  const bool black = std::find(cfg.attack.modes.begin(), cfg.attack.modes.end(), AttackMode::kBlack) !=
                     cfg.attack.modes.end();
  if (black) {
    if (cfg.attack.surrogate_checkpoint.empty()) {
      throw ConfigError("black-box attacks need attack.surrogate_checkpoint");
    }
    if (!fs::exists(cfg.attack.surrogate_checkpoint)) {
      throw ConfigError("surrogate checkpoint not found: " + cfg.attack.surrogate_checkpoint);
    }
    ExperimentConfig rec;
    surrogate = load_model(cfg.attack.surrogate_checkpoint, &rec);
    if (rec.model.kind != ModelKind::kSurrogate) {
      throw ConfigError(cfg.attack.surrogate_checkpoint + " is not a surrogate checkpoint");
    }
  }
  fs::create_directories(out);
  const Tensor x = eval_images(test);
  const std::vector<int> labels = labels_of(test);
  std::vector<SweepRow> rows;
  for (AttackMode mode : cfg.attack.modes) {
    AttackBatch a;
    a.mode = mode;
    a.labels = labels;
    a.indices.resize(labels.size());
    std::iota(a.indices.begin(), a.indices.end(), std::size_t{0});
    const Model& source = mode == AttackMode::kWhite ? *model : *surrogate;
    a.source_model = model_kind_name(source.kind());
    a.loss = mode == AttackMode::kWhite ? cfg.attack_loss() : AttackLoss::kClassification;
    a.sign = attack_signs(source, x, labels, a.loss, cfg.attack_seed());
    a.save(attack_artifact(out, mode), run_meta(cfg));
    const auto part = epsilon_sweep(*model, x, a, cfg.attack.epsilons, cfg.eval_seed());
    rows.insert(rows.end(), part.begin(), part.end());
  }
  write_sweep_csv(out / "sweep.csv", rows, cfg.hash(), cfg.seed);
  return rows;
}

// ---------------------------------------------------------------------------
// Detection

std::vector<std::string> auc_table_rows() { return {"capsnet-l2", "kcn-l2", "kcn-entropy", "kcn-gp-entropy"}; }

DetectionSummary run_detect(const ExperimentConfig& cfg, const fs::path& checkpoint, const Dataset& test,
                            const fs::path& attack_dir, const fs::path& out) {
  cfg.validate();
  auto model = load_matching(cfg, checkpoint);
  const std::vector<Signal> signals = available_signals(*model);
  if (signals.empty()) throw ConfigError(run_model_name(cfg) + " produces no detection signal");
  std::vector<AttackBatch> attacks;
  for (AttackMode mode : cfg.attack.modes) {
    const fs::path p = attack_artifact(attack_dir, mode);
    if (!fs::exists(p)) throw ConfigError("missing attack artifact " + p.string() + "; run attack first");
    attacks.push_back(AttackBatch::load(p));
  }
  fs::create_directories(out);
  const Tensor x = eval_images(test);
  const std::string hash = cfg.hash(), name = run_model_name(cfg);
  for (const AttackBatch& a : attacks) {
    if (a.sign.shape() != x.shape() || a.labels != test.labels) {
      throw ConfigError("attack artifact does not match the evaluation set");
    }
  }

  const ScoreSet clean = score_images(*model, x, cfg.eval_seed());
  DetectionSummary s;
  {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) correct += clean.predicted[i] == test.labels[i];
    auto mean = [](const std::vector<double>& v) -> json {
      if (v.empty()) return nullptr;
      return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    s.clean = run_meta(cfg);
    s.clean["dataset"] = cfg.data.name;
    s.clean["n_examples"] = test.size();
    s.clean["accuracy"] = static_cast<double>(correct) / static_cast<double>(test.size());
    s.clean["avg_l2"] = mean(clean.l2);
    s.clean["avg_entropy"] = mean(clean.entropy);
    s.clean["averaged_over"] = "clean test set";
  }

  std::ofstream roc_csv(out / "roc.csv"), hist_csv(out / "histograms.csv");
  roc_csv << "model,signal,mode,epsilon,threshold,fpr,tpr,config_hash,seed\n" << std::setprecision(10);
  hist_csv << "model,signal,mode,epsilon,perturbed,bin,lo,hi,count,config_hash,seed\n" << std::setprecision(10);

  json table = json::object();
  for (const std::string& row : auc_table_rows()) table[row] = json{{"white", nullptr}, {"black", nullptr}};
  json by_eps = json::object(), thresholds = json::array();
  for (const AttackBatch& a : attacks) {
    const std::string mode = attack_mode_name(a.mode);
    for (double eps : cfg.attack.epsilons) {
      const ScoreSet pert = score_images(*model, a.perturbed(x, eps), cfg.eval_seed());
      for (Signal sig : signals) {
        const std::string row = name + "-" + signal_name(sig);
        const std::vector<double>& neg = clean.get(sig);
        const std::vector<double>& pos = pert.get(sig);
        const RocCurve curve = roc(neg, pos);
        for (const RocPoint& p : curve.points) {
          roc_csv << name << ',' << signal_name(sig) << ',' << mode << ',' << eps << ',' << p.threshold << ','
                  << p.fpr << ',' << p.tpr << ',' << hash << ',' << cfg.seed << '\n';
        }
        by_eps[row][mode].push_back(json{{"epsilon", eps}, {"auc", curve.auc}});
        if (eps == cfg.attack.detect_epsilon) table[row][mode] = curve.auc;

        // Pooled range so clean and perturbed bins line up.
        std::vector<double> pooled(neg);
        pooled.insert(pooled.end(), pos.begin(), pos.end());
        const auto [mn, mx] = std::minmax_element(pooled.begin(), pooled.end());
        for (int flag = 0; flag < 2; ++flag) {
          const Histogram h = histogram(flag ? pos : neg, cfg.attack.histogram_bins, *mn, *mx);
          const double w = (h.hi - h.lo) / static_cast<double>(h.counts.size());
          for (std::size_t b = 0; b < h.counts.size(); ++b) {
            hist_csv << name << ',' << signal_name(sig) << ',' << mode << ',' << eps << ',' << flag << ','
                     << b << ',' << h.lo + w * static_cast<double>(b) << ','
                     << h.lo + w * static_cast<double>(b + 1) << ',' << h.counts[b] << ',' << hash << ','
                     << cfg.seed << '\n';
          }
        }

        const double t = threshold_at_far(neg, cfg.attack.far);
        auto frac_above = [t](const std::vector<double>& v) {
          return static_cast<double>(std::count_if(v.begin(), v.end(), [t](double z) { return z > t; })) /
                 static_cast<double>(v.size());
        };
        thresholds.push_back(json{{"signal", signal_name(sig)},
                                  {"mode", mode},
                                  {"epsilon", eps},
                                  {"target_far", cfg.attack.far},
                                  {"threshold", t},
                                  {"clean_far", frac_above(neg)},
                                  {"detection_rate", frac_above(pos)}});
      }
    }
  }
  s.auc = run_meta(cfg);
  s.auc["epsilon"] = cfg.attack.detect_epsilon;
  s.auc["table"] = table;
  s.auc["by_epsilon"] = by_eps;
  s.thresholds = run_meta(cfg);
  s.thresholds["thresholds"] = thresholds;
  write_json(out / "auc.json", s.auc);
  write_json(out / "thresholds.json", s.thresholds);
  write_json(out / "clean_scores.json", s.clean);
  return s;
}

// ---------------------------------------------------------------------------
// Report

json run_report(const fs::path& root) {
  if (!fs::is_directory(root)) throw ConfigError("report: " + root.string() + " is not a directory");
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "config.json")) runs.push_back(e.path());
  }
  std::sort(runs.begin(), runs.end());

  const std::vector<std::string> table_models{"capsnet", "kcn", "kcn-gp"};
  json rows = json::object();
  for (const std::string& m : table_models) {
    rows[m] = json{{"model", m},          {"dataset", nullptr},     {"accuracy", nullptr},
                   {"avg_entropy", nullptr}, {"avg_l2", nullptr},   {"run", nullptr},
                   {"config_hash", nullptr}, {"seed", nullptr},     {"missing", true}};
  }
  json table2 = json::object();
  for (const std::string& r : auc_table_rows()) table2[r] = json{{"white", nullptr}, {"black", nullptr}};
  std::ostringstream curves;
  curves << "epsilon,mode,model,accuracy,n_examples,config_hash,seed\n";
  double detect_eps = -1.0;

  for (const fs::path& run : runs) {
    const ExperimentConfig cfg = ExperimentConfig::load(run / "config.json");
    const std::string m = run_model_name(cfg);
    if (fs::exists(run / "sweep.csv")) {
      std::ifstream in(run / "sweep.csv");
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (!line.empty()) curves << line << '\n';
      }
    }
    if (!rows.contains(m)) continue;
    json& r = rows[m];
    r["run"] = run.filename().string();
    r["dataset"] = cfg.data.name;
    r["config_hash"] = cfg.hash();
    r["seed"] = cfg.seed;
    r["missing"] = false;
    if (fs::exists(run / "train_log.json")) r["accuracy"] = read_json(run / "train_log.json").at("best_accuracy");
    if (fs::exists(run / "clean_scores.json")) {
      const json c = read_json(run / "clean_scores.json");
      r["accuracy"] = c.at("accuracy");
      r["avg_entropy"] = c.at("avg_entropy");
      r["avg_l2"] = c.at("avg_l2");
    }
    if (fs::exists(run / "auc.json")) {
      const json a = read_json(run / "auc.json");
      detect_eps = a.at("epsilon").get<double>();
      for (const auto& [row, cols] : a.at("table").items()) {
        for (const char* mode : {"white", "black"}) {
          if (!cols.at(mode).is_null()) table2[row][mode] = cols.at(mode);
        }
      }
    }
  }

  json t1 = json::array();
  std::ostringstream csv;
  csv << std::setprecision(10) << "model,dataset,accuracy,avg_entropy,avg_l2,run,config_hash,seed\n";
  auto cell = [](const json& v) -> std::string {
    if (v.is_null()) return "";
    if (v.is_string()) return v.get<std::string>();
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
  };
  for (const std::string& m : table_models) {
    const json& r = rows[m];
    t1.push_back(r);
    csv << m << ',' << cell(r["dataset"]) << ',' << cell(r["accuracy"]) << ',' << cell(r["avg_entropy"])
        << ',' << cell(r["avg_l2"]) << ',' << cell(r["run"]) << ',' << cell(r["config_hash"]) << ','
        << cell(r["seed"]) << '\n';
  }
  const json table1{{"rows", t1}, {"averaged_over", "clean test set"}};
  json t2{{"rows", table2}};
  t2["epsilon"] = detect_eps >= 0.0 ? json(detect_eps) : json(nullptr);
  write_json(root / "table1.json", table1);
  write_json(root / "table2.json", t2);
  std::ofstream(root / "table1.csv") << csv.str();
  std::ofstream(root / "curves.csv") << curves.str();
  return json{{"table1", table1}, {"table2", t2}};
}

}  // namespace kcaps
