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

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kcaps/capsnet.hpp"
#include "kcaps/checkpoint.hpp"
#include "kcaps/data.hpp"
#include "kcaps/decoder.hpp"
#include "kcaps/svgp.hpp"

namespace kcaps {

enum class ModelKind { kCapsNet, kKcn, kKcnGp, kSurrogate };

/// "capsnet", "kcn", "kcn-gp" or "surrogate".
std::string model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

enum class AttackLoss { kClassification, kClassificationRecon };
std::string attack_loss_name(AttackLoss loss);
AttackLoss parse_attack_loss(const std::string& name);
/// Margin plus reconstruction for CapsNet; the classification term alone otherwise.
AttackLoss default_attack_loss(ModelKind kind);

struct ModelConfig {
  ModelKind kind = ModelKind::kKcn;
  CapsNetConfig capsnet = CapsNetConfig::mnist();
  std::vector<std::size_t> decoder_hidden = {512, 1024};
  double decoder_init_std = 0.0;  // 0 selects He scaling
  double recon_weight = 100.0;
  std::size_t num_inducing = 70;
  std::size_t mc_train = 10;
  std::size_t mc_eval = 64;
  double inducing_init_std = 0.1;
  /// Initial kernel gamma; 0 selects 1 / feature_dim.
  double gamma_init = 0.25;

  /// Defaults for `kind` on images shaped like `data`.
  static ModelConfig for_dataset(ModelKind kind, const DatasetSpec& data);
  void validate() const;
  bool uses_decoder() const { return kind == ModelKind::kKcn || kind == ModelKind::kCapsNet; }
  bool uses_gp() const { return kind == ModelKind::kKcn || kind == ModelKind::kKcnGp; }
};

/// Scalar components of the last training loss.
struct LossParts {
  double total = 0.0;
  double classification = 0.0;  // -E[log lik], margin or cross-entropy, summed over the batch
  double recon = 0.0;            // mean per-pixel squared error
  double kl = 0.0;
};

struct ModelOutput {
  std::vector<int> predicted;
  Tensor probs;     // [N, Nc]; empty for CapsNet
  Tensor capsules;  // [N, Nc, k]; empty for the surrogate
};

/// Two-conv CNN used as the black-box attack surrogate.
class SurrogateCnn {
 public:
  SurrogateCnn(const DatasetSpec& data, std::size_t num_classes, ParameterStore& store, Rng& rng,
               const std::string& prefix = "cnn");
  /// Logits [N, Nc].
  Var forward(Graph& g, const Var& x) const;

 private:
  Parameter* w1_;
  Parameter* b1_;
  Parameter* w2_;
  Parameter* b2_;
  Parameter* fc_w_;
  Parameter* fc_b_;
};

class Model {
 public:
  Model(ModelConfig config, const DatasetSpec& data, Rng& rng);

  ModelKind kind() const { return config_.kind; }
  const ModelConfig& config() const { return config_; }
  const DatasetSpec& data_spec() const { return data_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  bool has_decoder() const { return decoder_ != nullptr; }
  bool has_gp() const { return gp_ != nullptr; }
  SvgpHead& gp();

  /// Objective to minimize on a normalized batch:
  ///   kcn      -ELBO + w * recon
  ///   kcn-gp   -ELBO
  ///   capsnet  sum margin + w * recon
  ///   surrogate sum cross-entropy
  /// Reconstruction masks the true class.
  Var loss(Graph& g, const Var& x, std::span<const int> labels, std::size_t dataset_size,
           Rng& rng, LossParts* parts = nullptr) const;

  /// White-box attack objective (to increase).
  Var attack_loss(Graph& g, const Var& x, std::span<const int> labels, AttackLoss variant,
                  Rng& rng) const;
  /// d attack_loss / dx with parameters frozen.
  Tensor input_gradient(const Tensor& x, std::span<const int> labels, AttackLoss variant,
                        Rng& rng) const;

  /// Output capsules [N, Nc, k] (not for the surrogate).
  Var capsules(Graph& g, const Var& x) const;
  /// Batched inference in chunks of `batch`; MC draws come from `rng`.
  ModelOutput predict(const Tensor& x, Rng& rng, std::size_t batch = 256) const;
  /// Decoder output for capsules masked by `classes`.
  Tensor reconstruct(const Tensor& capsules, std::span<const int> classes) const;

  /// Sets Z from the flattened capsule features of `x` ([M, C, H, W]).
  void init_inducing_from(const Tensor& x);

  void save_parameters(Checkpoint& ck) const { ck.put_parameters(store_); }
  void load_parameters(const Checkpoint& ck) { ck.load_parameters(store_); }

 private:
  ModelConfig config_;
  DatasetSpec data_;
  ParameterStore store_;
  std::unique_ptr<CapsNet> capsnet_;
  std::unique_ptr<Decoder> decoder_;
  std::unique_ptr<SvgpHead> gp_;
  std::unique_ptr<SurrogateCnn> cnn_;
};

/// Fraction of correct predictions with MC draws from Rng(eval_seed).
double accuracy(const Model& model, const Tensor& x, std::span<const int> labels,
                std::uint64_t eval_seed, std::size_t batch = 256);

}  // namespace kcaps
