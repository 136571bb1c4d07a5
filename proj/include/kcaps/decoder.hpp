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

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kcaps/capsnet.hpp"
#include "kcaps/graph.hpp"
#include "kcaps/rng.hpp"
#include "kcaps/tensor.hpp"

namespace kcaps {

/// Fully connected decoder k*Nc -> hidden... -> C*H*W, ReLU on hidden layers.
struct DecoderSpec {
  std::size_t num_classes = 10;
  std::size_t capsule_dim = 16;
  std::vector<std::size_t> hidden = {512, 1024};
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;

  std::size_t input_size() const { return num_classes * capsule_dim; }
  std::size_t output_size() const { return channels * height * width; }
  void validate() const;
};

/// Flattened [Nc*k] vector holding only capsule `cls`.
Tensor mask_capsules(const CapsuleSet& caps, int cls);
/// caps [N, Nc, k] -> [N, Nc*k] keeping capsule classes[n] of row n.
Var mask_capsules(const Var& caps, std::span<const int> classes);

class Decoder {
 public:
  /// Weights ~ N(0, init_std^2), biases zero; init_std = 0 selects He
  /// scaling sqrt(2 / fan_in) per layer.
  Decoder(DecoderSpec spec, ParameterStore& store, Rng& rng, double init_std = 0.0,
          const std::string& prefix = "decoder");

  /// masked [N, Nc*k] -> images [N, C, H, W].
  Var decode(Graph& g, const Var& masked) const;
  const DecoderSpec& spec() const { return spec_; }

 private:
  DecoderSpec spec_;
  std::vector<Parameter*> weights_;
  std::vector<Parameter*> biases_;
};

/// Mean squared difference over all elements.
double recon_error(const Tensor& x, const Tensor& x_hat);
Var recon_error(const Var& x, const Var& x_hat);
/// Per-example mean squared difference of [N, ...] batches.
std::vector<double> recon_error_per_example(const Tensor& x, const Tensor& x_hat);

/// Writes images [N, 1 or 3, H, W] as a binary PGM/PPM grid, min-max scaled.
void write_image_grid(const std::filesystem::path& path, const Tensor& images, std::size_t columns);

}  // namespace kcaps
