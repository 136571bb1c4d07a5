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

#include "kcaps/capsnet.hpp"

#include <algorithm>
#include <cmath>

#include "kcaps/ops.hpp"

namespace kcaps {

// ---------------------------------------------------------------------------
// ConvSpec

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0) throw ConfigError("ConvSpec: channel counts must be positive");
  if (kernel_size < 1) throw ConfigError("ConvSpec: kernel_size must be >= 1");
  if (stride < 1) throw ConfigError("ConvSpec: stride must be >= 1");
}

std::size_t ConvSpec::output_size(std::size_t in) const {
  validate();
  if (in + 2 * padding < kernel_size) {
    throw ConfigError("ConvSpec: input " + std::to_string(in) + " with padding " +
                      std::to_string(padding) + " is smaller than kernel " +
                      std::to_string(kernel_size));
  }
  return (in + 2 * padding - kernel_size) / stride + 1;
}

// ---------------------------------------------------------------------------
// CapsuleSet

std::vector<double> CapsuleSet::norms() const {
  std::vector<double> out(num_classes());
  for (std::size_t j = 0; j < num_classes(); ++j) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim(); ++d) s += vectors[j * dim() + d] * vectors[j * dim() + d];
    out[j] = std::sqrt(s);
  }
  return out;
}

CapsuleSet CapsuleSet::from_batch(const Tensor& batch, std::size_t index) {
  if (batch.rank() != 3) throw ShapeError("CapsuleSet: expected [N,Nc,k], got " + shape_str(batch.shape()));
  if (index >= batch.dim(0)) throw std::out_of_range("CapsuleSet: index out of range");
  const std::size_t per = batch.dim(1) * batch.dim(2);
  return {Tensor({batch.dim(1), batch.dim(2)},
                 std::vector<double>(batch.data() + index * per, batch.data() + (index + 1) * per))};
}

// ---------------------------------------------------------------------------
// CapsNetConfig

CapsNetConfig CapsNetConfig::mnist() {
  CapsNetConfig c;
  c.in_channels = 1;
  c.height = c.width = 28;
  c.stem = {{1, 12, 4, 2, 3}, {12, 16, 3, 2, 1}};
  c.primary = {16, 32, 8, 2, 0};
  return c;
}

CapsNetConfig CapsNetConfig::rgb32() {
  CapsNetConfig c;
  c.in_channels = 3;
  c.height = c.width = 32;
  c.stem = {{3, 64, 4, 2, 1}, {64, 64, 3, 2, 1}};
  c.primary = {64, 32, 8, 2, 0};
  return c;
}

std::pair<std::size_t, std::size_t> CapsNetConfig::stem_output() const {
  std::size_t h = height, w = width;
  for (const ConvSpec& s : stem) {
    h = s.output_size(h);
    w = s.output_size(w);
  }
  return {h, w};
}

std::size_t CapsNetConfig::num_primary() const {
  const auto [h, w] = stem_output();
  return primary.out_channels * primary.output_size(h) * primary.output_size(w);
}

void CapsNetConfig::validate() const {
  if (stem.empty()) throw ConfigError("capsnet: stem needs at least one conv layer");
  std::size_t channels = in_channels;
  for (std::size_t l = 0; l < stem.size(); ++l) {
    if (stem[l].in_channels != channels) {
      throw ConfigError("capsnet: stem layer " + std::to_string(l) + " expects " +
                        std::to_string(stem[l].in_channels) + " input channels, gets " +
                        std::to_string(channels));
    }
    channels = stem[l].out_channels;
  }
  if (primary.in_channels != channels) {
    throw ConfigError("capsnet: primary capsules expect " + std::to_string(primary.in_channels) +
                      " channels, stem produces " + std::to_string(channels));
  }
  if (primary_dim == 0 || num_classes == 0 || capsule_dim == 0) {
    throw ConfigError("capsnet: capsule dimensions must be positive");
  }
  if (routing_iterations < 1) throw ConfigError("capsnet: routing_iterations must be >= 1");
  if (!(init_std > 0.0)) throw ConfigError("capsnet: init_std must be positive");
  if (!(conv_init_std >= 0.0)) throw ConfigError("capsnet: conv_init_std must be >= 0");
  num_primary();  // spatial underflow check
}

// ---------------------------------------------------------------------------
// Routing

namespace {

// In-place squash of each length-k row, matching op::squash.
void squash_rows(std::vector<double>& s, std::size_t k, double eps = 1e-9) {
  for (std::size_t r = 0; r < s.size() / k; ++r) {
    double n2 = 0.0;
    for (std::size_t d = 0; d < k; ++d) n2 += s[r * k + d] * s[r * k + d];
    const double f = n2 / ((1.0 + n2) * std::sqrt(n2 + eps));
    for (std::size_t d = 0; d < k; ++d) s[r * k + d] *= f;
  }
}

Tensor softmax_last(const Tensor& b, std::size_t nc) {
  Tensor c(b.shape());
  for (std::size_t r = 0; r < b.numel() / nc; ++r) {
    double m = b[r * nc];
    for (std::size_t j = 1; j < nc; ++j) m = std::max(m, b[r * nc + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < nc; ++j) z += (c[r * nc + j] = std::exp(b[r * nc + j] - m));
    for (std::size_t j = 0; j < nc; ++j) c[r * nc + j] /= z;
  }
  return c;
}

}  // namespace

Var dynamic_routing(const Var& u, const Var& weight, int iterations, bool unrolled,
                    RoutingTrace* trace) {
  if (iterations < 1) throw std::invalid_argument("dynamic_routing: iterations must be >= 1");
  if (u.shape().size() != 3 || weight.shape().size() != 4 || weight.shape()[0] != u.shape()[1] ||
      weight.shape()[2] != u.shape()[2]) {
    throw ShapeError("dynamic_routing: u " + shape_str(u.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t n = u.shape()[0], np = u.shape()[1], d = u.shape()[2];
  const std::size_t nc = weight.shape()[1], k = weight.shape()[3];

  Var up = op::permute(u, {1, 0, 2});                                           // [Np,N,d]
  Var wr = op::reshape(op::permute(weight, {0, 2, 1, 3}), {np, d, nc * k});     // [Np,d,Nc*k]
  Var uhat = op::permute(op::reshape(op::bmm(up, wr), {np, n, nc, k}), {1, 0, 2, 3});  // [N,Np,Nc,k]

  if (unrolled) {
    Graph& g = u.graph();
    Var b = g.constant(Tensor({n, np, nc}));
    Var v;
    for (int it = 0; it < iterations; ++it) {
      Var c = op::softmax(b, 2);
      if (trace) trace->coupling.push_back(c.value());
      v = op::squash(op::sum(op::mul(op::reshape(c, {n, np, nc, 1}), uhat), 1));
      if (it + 1 < iterations) {
        b = op::add(b, op::sum(op::mul(uhat, op::reshape(v, {n, 1, nc, k})), 3));
      }
    }
    return v;
  }

  const Tensor& uh = uhat.value();
  Tensor b({n, np, nc});
  Tensor c;
  for (int it = 0;; ++it) {
    c = softmax_last(b, nc);
    if (trace) trace->coupling.push_back(c);
    if (it + 1 == iterations) break;
    std::vector<double> v(n * nc * k, 0.0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < np; ++i)
        for (std::size_t j = 0; j < nc; ++j) {
          const double cij = c[(s * np + i) * nc + j];
          const double* src = uh.data() + ((s * np + i) * nc + j) * k;
          double* dst = v.data() + (s * nc + j) * k;
          for (std::size_t q = 0; q < k; ++q) dst[q] += cij * src[q];
        }
    squash_rows(v, k);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < np; ++i)
        for (std::size_t j = 0; j < nc; ++j) {
          const double* a = uh.data() + ((s * np + i) * nc + j) * k;
          const double* vj = v.data() + (s * nc + j) * k;
          double dot = 0.0;
          for (std::size_t q = 0; q < k; ++q) dot += a[q] * vj[q];
          b[(s * np + i) * nc + j] += dot;
        }
  }
  Var cv = u.graph().constant(c.reshaped({n, np, nc, 1}));
  return op::squash(op::sum(op::mul(cv, uhat), 1));
}

// ---------------------------------------------------------------------------
// CapsNet

CapsNet::CapsNet(CapsNetConfig config, ParameterStore& store, Rng& rng, const std::string& prefix)
    : config_(std::move(config)) {
  config_.validate();
  const double sd = config_.init_std;
  auto conv_sd = [&](const ConvSpec& s) {
    if (config_.conv_init_std > 0.0) return config_.conv_init_std;
    return std::sqrt(2.0 / static_cast<double>(s.in_channels * s.kernel_size * s.kernel_size));
  };
  for (std::size_t l = 0; l < config_.stem.size(); ++l) {
    const ConvSpec& s = config_.stem[l];
    const std::string base = prefix + ".conv" + std::to_string(l + 1);
    stem_w_.push_back(&store.add(base + ".w", rng.normal_tensor(
                                                  {s.out_channels, s.in_channels, s.kernel_size, s.kernel_size}, conv_sd(s))));
    stem_b_.push_back(&store.add(base + ".b", Tensor({s.out_channels})));
  }
  const ConvSpec& p = config_.primary;
  // The parallel capsule convs share one weight tensor: output channel
  // q * out_channels + c belongs to capsule conv q.
  primary_w_ = &store.add(prefix + ".primary.w",
                          rng.normal_tensor({config_.primary_dim * p.out_channels, p.in_channels,
                                             p.kernel_size, p.kernel_size}, conv_sd(p)));
  primary_b_ = &store.add(prefix + ".primary.b", Tensor({config_.primary_dim * p.out_channels}));
  routing_w_ = &store.add(prefix + ".routing.w",
                          rng.normal_tensor({config_.num_primary(), config_.num_classes,
                                             config_.primary_dim, config_.capsule_dim}, sd));
}

Var CapsNet::conv_stem(Graph& g, const Var& images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != config_.in_channels) {
    throw ShapeError("capsnet: expected [N," + std::to_string(config_.in_channels) +
                     ",H,W] images, got " + shape_str(s));
  }
  Var x = images;
  for (std::size_t l = 0; l < config_.stem.size(); ++l) {
    const ConvSpec& c = config_.stem[l];
    x = op::conv2d(x, g.param(*stem_w_[l]), g.param(*stem_b_[l]), {c.stride, c.padding});
    if (l + 1 < config_.stem.size()) x = op::relu(x);
  }
  return x;
}

Var CapsNet::primary_capsules(Graph& g, const Var& features) const {
  const ConvSpec& p = config_.primary;
  Var y = op::conv2d(features, g.param(*primary_w_), g.param(*primary_b_), {p.stride, p.padding});
  const std::size_t n = y.shape()[0], h = y.shape()[2], w = y.shape()[3];
  const std::size_t d = config_.primary_dim;
  y = op::reshape(y, {n, d, p.out_channels, h, w});
  y = op::permute(y, {0, 2, 3, 4, 1});
  return op::squash(op::reshape(y, {n, p.out_channels * h * w, d}));
}

Var CapsNet::forward(Graph& g, const Var& images, RoutingTrace* trace) const {
  Var u = primary_capsules(g, conv_stem(g, images));
  return dynamic_routing(u, g.param(*routing_w_), config_.routing_iterations,
                         config_.unrolled_routing, trace);
}

// ---------------------------------------------------------------------------
// Margin loss

double margin_loss(const CapsuleSet& caps, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= caps.num_classes()) {
    throw std::out_of_range("margin_loss: label " + std::to_string(label) + " out of range");
  }
  const std::vector<double> norms = caps.norms();
  double loss = 0.0;
  for (std::size_t j = 0; j < norms.size(); ++j) {
    if (static_cast<int>(j) == label) {
      const double h = std::max(0.0, kMarginPositive - norms[j]);
      loss += h * h;
    } else {
      const double h = std::max(0.0, norms[j] - kMarginNegative);
      loss += kMarginDownWeight * h * h;
    }
  }
  return loss;
}

Var margin_loss(const Var& caps, std::span<const int> labels) {
  const Shape& s = caps.shape();
  if (s.size() != 3 || s[0] != labels.size()) {
    throw ShapeError("margin_loss: capsules " + shape_str(s) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = s[0], nc = s[1];
  Tensor pos({n, nc}), negw({n, nc});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= nc) {
      throw std::out_of_range("margin_loss: label " + std::to_string(labels[i]) + " out of range");
    }
    for (std::size_t j = 0; j < nc; ++j) negw[i * nc + j] = kMarginDownWeight;
    pos[i * nc + labels[i]] = 1.0;
    negw[i * nc + labels[i]] = 0.0;
  }
  Graph& g = caps.graph();
  Var len = op::l2norm(caps, -1, 1e-9);
  Var up = op::square(op::relu(op::add_scalar(op::neg(len), kMarginPositive)));
  Var down = op::square(op::relu(op::add_scalar(len, -kMarginNegative)));
  return op::sum(op::add(op::mul(g.constant(pos), up), op::mul(g.constant(negw), down)));
}

}  // namespace kcaps
