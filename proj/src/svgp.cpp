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

#include "kcaps/svgp.hpp"

#include <algorithm>
#include <cmath>

#include "kcaps/ops.hpp"

namespace kcaps {

Tensor rbf_kernel(const Tensor& a, const Tensor& b, double gamma) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("rbf_kernel: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (gamma < 0.0) throw std::invalid_argument("rbf_kernel: gamma must be non-negative");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  Tensor k({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < d; ++q) {
        const double t = a[i * d + q] - b[j * d + q];
        s += t * t;
      }
      k[i * m + j] = std::exp(-gamma * s);
    }
  return k;
}

Var rbf_kernel(const Var& a, const Var& b, const Var& gamma) {
  if (gamma.shape() != Shape{1}) throw ShapeError("rbf_kernel: gamma must be [1]");
  return op::exp(op::neg(op::mul(gamma, op::sq_dist(a, b))));
}

double choose_jitter(const Tensor& k, const JitterPolicy& policy) {
  const std::size_t m = k.dim(0);
  for (double jitter = policy.initial;; jitter *= 2.0) {
    Tensor kj = k;
    for (std::size_t i = 0; i < m; ++i) kj[i * m + i] += jitter;
    try {
      op::detail::cholesky_factor(kj);
      return jitter;
    } catch (const op::NotPositiveDefinite&) {
      if (jitter * 2.0 > policy.max) throw;
    }
  }
}

namespace {

Tensor eye(std::size_t m, double scale = 1.0) {
  Tensor t({m, m});
  for (std::size_t i = 0; i < m; ++i) t[i * m + i] = scale;
  return t;
}

void check_state(const SvgpState& q) {
  const Shape& z = q.inducing.shape();
  const Shape& mean = q.mean.shape();
  const Shape& l = q.chol.shape();
  if (z.size() != 2 || mean.size() != 2 || mean[1] != z[0] || l.size() != 3 || l[0] != mean[0] ||
      l[1] != z[0] || l[2] != z[0]) {
    throw ShapeError("svgp: inconsistent state Z " + shape_str(z) + ", m " + shape_str(mean) +
                     ", L " + shape_str(l));
  }
}

// Cholesky factor of K_zz + jitter * I.
Var inducing_factor(const SvgpState& q, const JitterPolicy& policy) {
  Graph& g = q.inducing.graph();
  Var kzz = rbf_kernel(q.inducing, q.inducing, q.gamma);
  const double jitter = choose_jitter(kzz.value(), policy);
  return op::cholesky(op::add(kzz, g.constant(eye(q.inducing.shape()[0], jitter))));
}

}  // namespace

GaussianMarginals posterior_marginals(const Var& features, const SvgpState& q,
                                      const JitterPolicy& policy) {
  check_state(q);
  if (features.shape().size() != 2 || features.shape()[1] != q.inducing.shape()[1]) {
    throw ShapeError("posterior_marginals: features " + shape_str(features.shape()) +
                     " vs inducing " + shape_str(q.inducing.shape()));
  }
  const std::size_t n = features.shape()[0];
  const std::size_t nc = q.mean.shape()[0], m = q.mean.shape()[1];
  Var lz = inducing_factor(q, policy);
  Var kzx = op::permute(rbf_kernel(features, q.inducing, q.gamma), {1, 0});  // [M,N]
  Var a = op::trisolve(lz, kzx);                                             // Lz^-1 Kzx
  // Projection carrying q into function space: Kzz^-1 Kzx, or Lz^-1 Kzx when whitened.
  Var b = q.whitened ? a : op::trisolve(lz, a, true);
  Var mean = op::matmul(op::permute(b, {1, 0}), op::permute(q.mean, {1, 0}));  // [N,Nc]

  Var lt = op::reshape(op::permute(q.chol, {0, 2, 1}), {nc * m, m});  // stacked L_c^T
  Var ltb = op::reshape(op::matmul(lt, b), {nc, m, n});
  Var explained = op::permute(op::sum(op::square(ltb), 1), {1, 0});  // [N,Nc]
  Var reduced = op::reshape(op::sum(op::square(a), 0), {n, 1});     // [N,1]
  Var var = op::add(op::add_scalar(op::neg(reduced), 1.0), explained);
  return {mean, var};
}

Var kl_to_prior(const SvgpState& q, const JitterPolicy& policy) {
  check_state(q);
  Graph& g = q.inducing.graph();
  const std::size_t nc = q.mean.shape()[0], m = q.mean.shape()[1];
  Var ldiag = op::sum(op::mul(q.chol, g.constant(eye(m).reshaped({1, m, m}))), 2);  // [Nc,M]
  Var logdet_s = op::scale(op::sum(op::log(ldiag)), 2.0);
  if (q.whitened) {
    Var total = op::sub(op::add(op::sum(op::square(q.chol)), op::sum(op::square(q.mean))), logdet_s);
    return op::scale(op::add_scalar(total, -static_cast<double>(nc * m)), 0.5);
  }
  Var lz = inducing_factor(q, policy);
  // tr(K^-1 S_c) = |Lz^-1 L_c|_F^2 summed over classes in one solve.
  Var lstack = op::reshape(op::permute(q.chol, {1, 0, 2}), {m, nc * m});
  Var trace = op::sum(op::square(op::trisolve(lz, lstack)));
  Var maha = op::sum(op::square(op::trisolve(lz, op::permute(q.mean, {1, 0}))));
  Var logdet_k = op::scale(op::sum(op::log(op::diag(lz))), 2.0 * static_cast<double>(nc));
  Var total = op::add(op::add(trace, maha), op::sub(logdet_k, logdet_s));
  return op::scale(op::add_scalar(total, -static_cast<double>(nc * m)), 0.5);
}

Var expected_log_likelihood(const GaussianMarginals& f, std::span<const int> labels,
                            const Tensor& eps) {
  const Shape& s = f.mean.shape();
  if (s.size() != 2 || f.var.shape() != s) throw ShapeError("expected_log_likelihood: bad marginals");
  const std::size_t n = s[0], nc = s[1];
  if (labels.size() != n) throw ShapeError("expected_log_likelihood: label count mismatch");
  if (eps.rank() != 3 || eps.dim(1) != n || eps.dim(2) != nc || eps.dim(0) == 0) {
    throw ShapeError("expected_log_likelihood: noise must be [S," + std::to_string(n) + "," +
                     std::to_string(nc) + "], got " + shape_str(eps.shape()));
  }
  Tensor onehot({1, n, nc});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= nc) {
      throw std::out_of_range("elbo: label " + std::to_string(labels[i]) + " out of range");
    }
    onehot[i * nc + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Graph& g = f.mean.graph();
  Var sd = op::sqrt(op::add_scalar(op::relu(f.var), 1e-12));
  Var draws = op::add(op::reshape(f.mean, {1, n, nc}),
                      op::mul(op::reshape(sd, {1, n, nc}), g.constant(eps)));
  Var ll = op::sum(op::mul(op::log_softmax(draws, 2), g.constant(std::move(onehot))));
  return op::scale(ll, 1.0 / static_cast<double>(eps.dim(0)));
}

Var elbo(const Var& features, std::span<const int> labels, const SvgpState& q,
         const Tensor& eps, std::size_t dataset_size, const JitterPolicy& policy) {
  if (dataset_size == 0) throw std::invalid_argument("elbo: dataset_size must be positive");
  GaussianMarginals f = posterior_marginals(features, q, policy);
  Var e = expected_log_likelihood(f, labels, eps);
  const double w = static_cast<double>(labels.size()) / static_cast<double>(dataset_size);
  return op::sub(e, op::scale(kl_to_prior(q, policy), w));
}

Var elbo(const Var& features, std::span<const int> labels, const SvgpState& q,
         std::size_t mc_samples, std::size_t dataset_size, Rng& rng, const JitterPolicy& policy) {
  if (mc_samples == 0) throw std::invalid_argument("elbo: mc_samples must be >= 1");
  const Tensor eps = rng.normal_tensor({mc_samples, labels.size(), q.mean.shape()[0]});
  return elbo(features, labels, q, eps, dataset_size, policy);
}

Tensor predict_probs(const Tensor& mean, const Tensor& var, std::size_t mc_samples, Rng& rng) {
  if (mean.rank() != 2 || var.shape() != mean.shape()) throw ShapeError("predict_probs: bad marginals");
  if (mc_samples == 0) throw std::invalid_argument("predict_probs: mc_samples must be >= 1");
  const std::size_t n = mean.dim(0), nc = mean.dim(1);
  Tensor probs({n, nc});
  std::vector<double> f(nc);
  for (std::size_t s = 0; s < mc_samples; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < nc; ++j) {
        f[j] = mean[i * nc + j] + std::sqrt(std::max(var[i * nc + j], 0.0)) * rng.normal();
        mx = std::max(mx, f[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < nc; ++j) z += (f[j] = std::exp(f[j] - mx));
      for (std::size_t j = 0; j < nc; ++j) probs[i * nc + j] += f[j] / z;
    }
  }
  for (double& p : probs.values()) p /= static_cast<double>(mc_samples);
  return probs;
}

double predictive_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

int predict_class(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("predict_class: empty row");
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

// ---------------------------------------------------------------------------
// SvgpHead

SvgpHead::SvgpHead(std::size_t feature_dim, std::size_t num_inducing, std::size_t num_classes,
                   ParameterStore& store, Rng& rng, double inducing_init_std,
                   const std::string& prefix, double gamma_init)
    : feature_dim_(feature_dim), num_inducing_(num_inducing), num_classes_(num_classes) {
  if (feature_dim == 0 || num_inducing == 0 || num_classes == 0) {
    throw std::invalid_argument("SvgpHead: dimensions must be positive");
  }
  if (!(gamma_init >= 0.0)) throw std::invalid_argument("SvgpHead: gamma_init must be >= 0");
  const double gamma = gamma_init > 0.0 ? gamma_init : 1.0 / static_cast<double>(feature_dim);
  log_gamma_ = &store.add(prefix + ".log_gamma", Tensor({1}, {std::log(gamma)}));
  inducing_ = &store.add(prefix + ".inducing",
                         rng.normal_tensor({num_inducing, feature_dim}, inducing_init_std));
  var_mean_ = &store.add(prefix + ".var_mean", Tensor({num_classes, num_inducing}));
  var_chol_raw_ = &store.add(prefix + ".var_chol_raw", Tensor({num_classes, num_inducing, num_inducing}));
}

SvgpState SvgpHead::state(Graph& g) const {
  return {op::exp(g.param(*log_gamma_)), g.param(*inducing_), g.param(*var_mean_),
          op::lower_exp_diag(g.param(*var_chol_raw_)), whitened};
}

void SvgpHead::set_inducing(const Tensor& z) {
  if (z.shape() != inducing_->value.shape()) {
    throw ShapeError("set_inducing: expected " + shape_str(inducing_->value.shape()) + ", got " +
                     shape_str(z.shape()));
  }
  inducing_->value = z;
}

void SvgpHead::set_gamma(double gamma) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("set_gamma: gamma must be positive");
  log_gamma_->value[0] = std::log(gamma);
}

}  // namespace kcaps
