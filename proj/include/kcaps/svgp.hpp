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
#include <string>
#include <vector>

#include "kcaps/graph.hpp"
#include "kcaps/rng.hpp"
#include "kcaps/tensor.hpp"

namespace kcaps {

// Sparse variational GP classifier: Nc latent functions share one RBF kernel
// and one inducing set Z; class c has q(u_c) = N(m_c, L_c L_c^T).

/// exp(-gamma * |a_n - b_m|^2) for rows of a [N,D] and b [M,D].
Tensor rbf_kernel(const Tensor& a, const Tensor& b, double gamma);
/// gamma is a [1] node.
Var rbf_kernel(const Var& a, const Var& b, const Var& gamma);

struct JitterPolicy {
  double initial = 1e-6;
  double max = 1e-2;
};

/// Smallest jitter initial * 2^k <= max for which K + jitter*I factors.
/// Throws NotPositiveDefinite when none does.
double choose_jitter(const Tensor& k, const JitterPolicy& policy = {});

/// Graph handles to the variational state. When `whitened`, mean and chol
/// describe v with u = L_zz v, so q(u_c) = N(L_zz m_c, L_zz L_c L_c^T L_zz^T).
struct SvgpState {
  Var gamma;    // [1], positive
  Var inducing; // [M, D]
  Var mean;     // [Nc, M]
  Var chol;     // [Nc, M, M], lower with positive diagonal
  bool whitened = false;
};

/// Per-example latent marginals, both [N, Nc].
struct GaussianMarginals {
  Var mean;
  Var var;
};

/// mu = K_xz K_zz^-1 m_c and
/// var = k_xx - diag(K_xz (K_zz^-1 - K_zz^-1 S_c K_zz^-1) K_zx),
/// with K_zz replaced by K_zz + jitter*I. Whitened states use the
/// equivalent mu = A^T m_c, var = k_xx - |A|^2 + |L_c^T A|^2, A = L_zz^-1 K_zx.
GaussianMarginals posterior_marginals(const Var& features, const SvgpState& q,
                                      const JitterPolicy& policy = {});

/// Sum over classes of KL(N(m_c, S_c) || N(0, K_zz)); for whitened states
/// the prior is N(0, I), which gives the same value for the implied q(u).
Var kl_to_prior(const SvgpState& q, const JitterPolicy& policy = {});

/// Monte Carlo expected log softmax likelihood, summed over the batch.
/// `eps` is [S, N, Nc] standard normal noise.
Var expected_log_likelihood(const GaussianMarginals& f, std::span<const int> labels,
                            const Tensor& eps);

/// E - (N_batch / dataset_size) * KL with noise drawn from `rng`.
Var elbo(const Var& features, std::span<const int> labels, const SvgpState& q,
         std::size_t mc_samples, std::size_t dataset_size, Rng& rng,
         const JitterPolicy& policy = {});
/// Same bound with caller-supplied noise, for shared-randomness comparisons.
Var elbo(const Var& features, std::span<const int> labels, const SvgpState& q,
         const Tensor& eps, std::size_t dataset_size, const JitterPolicy& policy = {});

/// Average softmax over `mc_samples` draws from the marginals; [N, Nc].
Tensor predict_probs(const Tensor& mean, const Tensor& var, std::size_t mc_samples, Rng& rng);

/// -sum p ln p with 0 ln 0 = 0.
double predictive_entropy(std::span<const double> probs);
/// Argmax, lowest index on ties.
int predict_class(std::span<const double> probs);

/// Trainable head owning the variational parameters in a ParameterStore:
/// <prefix>.log_gamma [1], .inducing [M,D], .var_mean [Nc,M] and
/// .var_chol_raw [Nc,M,M] (strict lower part plus log diagonal).
class SvgpHead {
 public:
  SvgpHead(std::size_t feature_dim, std::size_t num_inducing, std::size_t num_classes,
           ParameterStore& store, Rng& rng, double inducing_init_std = 0.1,
           const std::string& prefix = "gp", double gamma_init = 0.0);

  SvgpState state(Graph& g) const;
  /// Overwrites Z with the given [M, D] rows.
  void set_inducing(const Tensor& z);
  /// Requires gamma > 0.
  void set_gamma(double gamma);

  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t num_inducing() const { return num_inducing_; }
  std::size_t num_classes() const { return num_classes_; }
  JitterPolicy jitter;
  /// Zero-mean identity-covariance init is then q(u) = prior.
  bool whitened = true;

 private:
  std::size_t feature_dim_, num_inducing_, num_classes_;
  Parameter* log_gamma_;
  Parameter* inducing_;
  Parameter* var_mean_;
  Parameter* var_chol_raw_;
};

}  // namespace kcaps
