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

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kcaps/graph.hpp"
#include "kcaps/rng.hpp"
#include "kcaps/tensor.hpp"

namespace kcaps {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Square-kernel convolution layer geometry.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_size = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// floor((in + 2p - k) / s) + 1; throws ConfigError when it would be < 1.
  std::size_t output_size(std::size_t in) const;
  void validate() const;
};

/// Output capsules of one example: Nc vectors of dimension k, each of norm < 1.
struct CapsuleSet {
  Tensor vectors;  // [Nc, k]

  std::size_t num_classes() const { return vectors.dim(0); }
  std::size_t dim() const { return vectors.dim(1); }
  std::vector<double> norms() const;
  /// Row `index` of a batched [N, Nc, k] capsule tensor.
  static CapsuleSet from_batch(const Tensor& batch, std::size_t index);
};

struct CapsNetConfig {
  std::size_t in_channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::vector<ConvSpec> stem;
  /// One of the parallel capsule convolutions; there are `primary_dim` of them.
  ConvSpec primary;
  std::size_t primary_dim = 8;
  std::size_t num_classes = 10;
  std::size_t capsule_dim = 16;
  int routing_iterations = 3;
  /// Backpropagate through every routing iteration instead of only the last.
  bool unrolled_routing = false;
  /// Routing weights ~ N(0, init_std^2). 0.3 puts initial output capsule
  /// norms near 0.4, inside the responsive range of squash.
  double init_std = 0.3;
  /// Conv weights ~ N(0, conv_init_std^2); 0 selects He scaling sqrt(2 / fan_in).
  double conv_init_std = 0.0;

  static CapsNetConfig mnist();
  /// CIFAR-10 and SVHN share this geometry.
  static CapsNetConfig rgb32();

  /// Throws ConfigError on inconsistent channels or spatial underflow.
  void validate() const;
  /// Spatial size (h, w) after the stem.
  std::pair<std::size_t, std::size_t> stem_output() const;
  /// Number of primary capsules N_p.
  std::size_t num_primary() const;
};

/// Coupling coefficients c[n, i, j] recorded at each routing iteration.
struct RoutingTrace {
  std::vector<Tensor> coupling;  // each [N, N_p, Nc]
};

/// Dynamic routing by agreement.
/// u [N, N_p, d], weight [N_p, Nc, d, k] -> v [N, Nc, k] with
/// u_hat[n,i,j,:] = sum_d u[n,i,d] * weight[i,j,d,:]. Unless `unrolled`, the
/// logit updates run off the tape and the final coupling enters as a constant.
Var dynamic_routing(const Var& u, const Var& weight, int iterations, bool unrolled = false,
                    RoutingTrace* trace = nullptr);

/// Capsule feature extractor: conv stem -> primary capsules -> routing.
class CapsNet {
 public:
  /// Registers parameters under `prefix` in `store`.
  CapsNet(CapsNetConfig config, ParameterStore& store, Rng& rng,
          const std::string& prefix = "caps");

  /// images [N, C, H, W] -> output capsules [N, Nc, k].
  Var forward(Graph& g, const Var& images, RoutingTrace* trace = nullptr) const;
  Var conv_stem(Graph& g, const Var& images) const;
  /// features [N, C', h, w] -> squashed primaries [N, N_p, d].
  Var primary_capsules(Graph& g, const Var& features) const;

  const CapsNetConfig& config() const { return config_; }

 private:
  CapsNetConfig config_;
  std::vector<Parameter*> stem_w_;
  std::vector<Parameter*> stem_b_;
  Parameter* primary_w_ = nullptr;
  Parameter* primary_b_ = nullptr;
  Parameter* routing_w_ = nullptr;
};

inline constexpr double kMarginPositive = 0.9;
inline constexpr double kMarginNegative = 0.1;
inline constexpr double kMarginDownWeight = 0.5;

/// Margin loss of one capsule set with exact norms.
double margin_loss(const CapsuleSet& caps, int label);
/// Batched margin loss summed over examples; norms use sqrt(|v|^2 + 1e-9).
Var margin_loss(const Var& caps, std::span<const int> labels);

}  // namespace kcaps
