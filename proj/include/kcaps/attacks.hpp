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
#include <span>
#include <string>
#include <vector>

#include "kcaps/checkpoint.hpp"
#include "kcaps/models.hpp"

namespace kcaps {

enum class AttackMode { kWhite, kBlack };
std::string attack_mode_name(AttackMode mode);
AttackMode parse_attack_mode(const std::string& name);

/// Elementwise sign with sign(0) = 0.
Tensor sign_of(const Tensor& t);
/// x + eps * sign(grad); no clipping. Requires eps >= 0.
Tensor fgsm(const Tensor& grad, const Tensor& x, double eps);

/// sign(d loss / dx) of `source` over normalized images, in chunks of `batch`.
/// Gradient noise (KCN) comes from Rng(grad_seed).
Tensor attack_signs(const Model& source, const Tensor& x, std::span<const int> labels,
                    AttackLoss loss, std::uint64_t grad_seed, std::size_t batch = 128);

/// FGSM through the target's own loss.
Tensor white_box_attack(const Model& model, const Tensor& x, std::span<const int> labels, double eps,
                        AttackLoss loss, std::uint64_t grad_seed, std::size_t batch = 128);
/// FGSM through the surrogate's cross-entropy.
Tensor black_box_attack(const Model& surrogate, const Tensor& x, std::span<const int> labels,
                        double eps, std::uint64_t grad_seed, std::size_t batch = 128);

/// Perturbation pattern shared by every epsilon of one sweep:
/// x_adv(eps) = x + eps * sign.
struct AttackBatch {
  AttackMode mode = AttackMode::kWhite;
  std::string source_model;  // model whose gradient produced `sign`
  AttackLoss loss = AttackLoss::kClassification;
  std::vector<std::size_t> indices;  // positions in the evaluation set
  std::vector<int> labels;
  Tensor sign;  // values in {-1, 0, 1}, shaped like the images

  Tensor perturbed(const Tensor& x, double eps) const { return fgsm(sign, x, eps); }
  /// Stores `sign` as i8 plus labels and indices.
  void save(const std::filesystem::path& path, const nlohmann::json& meta = {}) const;
  static AttackBatch load(const std::filesystem::path& path);
};

struct SweepRow {
  double epsilon = 0.0;
  AttackMode mode = AttackMode::kWhite;
  std::string model;
  double accuracy = 0.0;
  std::size_t n_examples = 0;
};

/// Throws unless the grid is nonempty, ascending, starts at 0 and eps <= 1.
void validate_epsilon_grid(std::span<const double> grid);

/// Accuracy of `target` on x + eps * attack.sign for every eps of `grid`.
std::vector<SweepRow> epsilon_sweep(const Model& target, const Tensor& x, const AttackBatch& attack,
                                    std::span<const double> grid, std::uint64_t eval_seed);

/// CSV with columns epsilon,mode,model,accuracy,n_examples,config_hash,seed.
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows,
                     const std::string& config_hash, std::uint64_t seed);

}  // namespace kcaps
