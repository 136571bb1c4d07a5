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

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "kcaps/gradcheck.hpp"
#include "kcaps/ops.hpp"
#include "kcaps/optim.hpp"
#include "kcaps/svgp.hpp"

using namespace kcaps;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Tensor uniform_tensor(Rng& rng, const Shape& shape, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

MatrixXd to_matrix(const Tensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  MatrixXd m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = t[offset + i * cols + j];
  return m;
}

MatrixXd dense_rbf(const MatrixXd& a, const MatrixXd& b, double gamma) {
  MatrixXd k(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) k(i, j) = std::exp(-gamma * (a.row(i) - b.row(j)).squaredNorm());
  return k;
}

// Random lower factor with diagonal in [0.5, 1.5].
Tensor random_chol(Rng& rng, std::size_t nc, std::size_t m) {
  Tensor l({nc, m, m});
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j <= i; ++j)
        l[(c * m + i) * m + j] = i == j ? 0.5 + rng.uniform() : 0.6 * (2.0 * rng.uniform() - 1.0);
  return l;
}

SvgpState constant_state(Graph& g, double gamma, const Tensor& z, const Tensor& m, const Tensor& l) {
  return {g.constant(Tensor({1}, {gamma})), g.constant(z), g.constant(m), g.constant(l)};
}

// Probabilists' Gauss-Hermite rule by Golub-Welsch: E[h(x)], x ~ N(0,1).
struct Quadrature {
  std::vector<double> nodes, weights;
};
Quadrature gauss_hermite(int n) {
  MatrixXd j = MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) j(i, i - 1) = j(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(j);
  Quadrature q;
  for (int i = 0; i < n; ++i) {
    q.nodes.push_back(es.eigenvalues()(i));
    q.weights.push_back(es.eigenvectors()(0, i) * es.eigenvectors()(0, i));
  }
  return q;
}

double log_softmax2(double a, double b, int label) {
  const double m = std::max(a, b);
  const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
  return (label == 0 ? a : b) - lse;
}

}  // namespace

TEST_CASE("rbf kernel examples") {
  const Tensor a({1, 2}, {0.0, 0.0}), b({1, 2}, {1.0, 1.0});
  CHECK(rbf_kernel(a, b, 0.5)[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  Rng rng(1);
  const Tensor x = uniform_tensor(rng, {4, 3});
  const Tensor kxx = rbf_kernel(x, x, 2.7);
  for (std::size_t i = 0; i < 4; ++i) CHECK(kxx[i * 4 + i] == 1.0);
  const Tensor ones = rbf_kernel(x, uniform_tensor(rng, {3, 3}), 0.0);
  for (double v : ones.values()) CHECK(v == 1.0);
  CHECK_THROWS_AS(rbf_kernel(x, Tensor({2, 2}), 1.0), ShapeError);

  Graph g;
  const Tensor y = uniform_tensor(rng, {5, 3});
  Var k = rbf_kernel(g.constant(x), g.constant(y), g.constant(Tensor({1}, {0.7})));
  CHECK(max_abs_diff(k.value(), rbf_kernel(x, y, 0.7)) < 1e-15);
}

TEST_CASE("kernel matrices are positive semidefinite") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(10 + seed);
    const Tensor a = uniform_tensor(rng, {25, 3}, 2.0);
    const double gamma = 0.1 + 3.0 * rng.uniform();
    const MatrixXd k = to_matrix(rbf_kernel(a, a, gamma), 0, 25, 25);
    CHECK((k - k.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(k);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("posterior marginals match a dense explicit-inverse evaluation") {
  // The oracle runs in extended precision so its own rounding stays well
  // below the tolerance even for ill-conditioned Kzz.
  using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  auto to_long = [](const Tensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
    MatL m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m(i, j) = t[offset + i * cols + j];
    return m;
  };
  auto rbf_long = [](const MatL& a, const MatL& b, long double gamma) {
    MatL k(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < b.rows(); ++j) k(i, j) = std::exp(-gamma * (a.row(i) - b.row(j)).squaredNorm());
    return k;
  };
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(4), d = 1 + rng.below(3), nc = 1 + rng.below(3);
    const double gamma = 0.3 + 1.5 * rng.uniform();
    const Tensor x = uniform_tensor(rng, {n, d}, 1.5), z = uniform_tensor(rng, {m, d}, 1.5);
    const Tensor mean = uniform_tensor(rng, {nc, m}), chol = random_chol(rng, nc, m);

    Graph g;
    const SvgpState q = constant_state(g, gamma, z, mean, chol);
    const GaussianMarginals f = posterior_marginals(g.constant(x), q);

    const long double jitter = choose_jitter(rbf_kernel(z, z, gamma));
    const MatL X = to_long(x, 0, n, d), Z = to_long(z, 0, m, d);
    const MatL kinv = (rbf_long(Z, Z, gamma) + jitter * MatL::Identity(m, m)).inverse();
    const MatL kxz = rbf_long(X, Z, gamma);
    for (std::size_t c = 0; c < nc; ++c) {
      const MatL mc = to_long(mean, c * m, 1, m).transpose();
      const MatL lc = to_long(chol, c * m * m, m, m);
      const MatL s = lc * lc.transpose();
      const MatL mu = kxz * kinv * mc;
      const MatL cov = rbf_long(X, X, gamma) - kxz * (kinv - kinv * s * kinv) * kxz.transpose();
      for (std::size_t i = 0; i < n; ++i) {
        const double mu_ref = static_cast<double>(mu(i, 0)), var_ref = static_cast<double>(cov(i, i));
        // Scaled by max(1, |ref|): ill-conditioned draws reach |var| ~ 1e4.
        worst = std::max(worst, std::abs(f.mean.value()[i * nc + c] - mu_ref) / std::max(1.0, std::abs(mu_ref)));
        worst = std::max(worst, std::abs(f.var.value()[i * nc + c] - var_ref) / std::max(1.0, std::abs(var_ref)));
        CHECK(f.var.value()[i * nc + c] > 0.0);
      }
    }
  }
  MESSAGE("worst deviation from dense oracle: " << worst);
  CHECK(worst < 1e-8);
}

TEST_CASE("inducing points at the inputs with S = Kzz recover the prior marginals") {
  Rng rng(2);
  const std::size_t n = 4, nc = 2;
  const double gamma = 0.8;
  const Tensor x = uniform_tensor(rng, {n, 2}, 2.0);
  const Tensor mean = uniform_tensor(rng, {nc, n});
  const Tensor kzz = rbf_kernel(x, x, gamma);
  const Tensor l = op::detail::cholesky_factor(kzz);
  Tensor chol({nc, n, n});
  for (std::size_t c = 0; c < nc; ++c) std::copy(l.data(), l.data() + n * n, chol.data() + c * n * n);
  Graph g;
  const GaussianMarginals f = posterior_marginals(g.constant(x), constant_state(g, gamma, x, mean, chol));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < nc; ++c) {
      CHECK(f.mean.value()[i * nc + c] == doctest::Approx(mean[c * n + i]).epsilon(1e-4));
      CHECK(f.var.value()[i * nc + c] == doctest::Approx(1.0).epsilon(1e-4));
    }

  Graph g0;
  const GaussianMarginals f0 =
      posterior_marginals(g0.constant(x), constant_state(g0, gamma, x, Tensor({nc, n}), chol));
  for (double v : f0.mean.value().values()) CHECK(v == 0.0);
}

TEST_CASE("kl to prior: toy value, zero at the prior, dense oracle, non-negative") {
  {
    Graph g;
    Var kl = kl_to_prior(constant_state(g, 1.0, Tensor({1, 1}), Tensor({1, 1}, {1.0}), Tensor({1, 1, 1}, {1.0})));
    CHECK(kl.value().item() == doctest::Approx(0.5).epsilon(1e-5));
  }
  Rng rng(3);
  const std::size_t m = 4, nc = 3;
  const Tensor z = uniform_tensor(rng, {m, 2}, 2.0);
  const double gamma = 0.9, jitter = choose_jitter(rbf_kernel(z, z, gamma));
  {
    Tensor kzz = rbf_kernel(z, z, gamma);
    for (std::size_t i = 0; i < m; ++i) kzz[i * m + i] += jitter;
    const Tensor l = op::detail::cholesky_factor(kzz);
    Tensor chol({nc, m, m});
    for (std::size_t c = 0; c < nc; ++c) std::copy(l.data(), l.data() + m * m, chol.data() + c * m * m);
    Graph g;
    CHECK(std::abs(kl_to_prior(constant_state(g, gamma, z, Tensor({nc, m}), chol)).value().item()) < 1e-10);
  }
  const MatrixXd K = dense_rbf(to_matrix(z, 0, m, 2), to_matrix(z, 0, m, 2), gamma) + jitter * MatrixXd::Identity(m, m);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng r(300 + seed);
    const Tensor mean = uniform_tensor(r, {nc, m}, 2.0), chol = random_chol(r, nc, m);
    Graph g;
    const double kl = kl_to_prior(constant_state(g, gamma, z, mean, chol)).value().item();
    double expect = 0.0;
    for (std::size_t c = 0; c < nc; ++c) {
      const MatrixXd lc = to_matrix(chol, c * m * m, m, m);
      const MatrixXd s = lc * lc.transpose();
      const VectorXd mc = to_matrix(mean, c * m, 1, m).transpose();
      expect += 0.5 * ((K.inverse() * s).trace() + mc.dot(K.inverse() * mc) - static_cast<double>(m) +
                       std::log(K.determinant()) - std::log(s.determinant()));
    }
    CHECK(kl >= 0.0);
    CHECK(kl == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("expected log likelihood: degenerate variance and batch duplication") {
  Rng rng(4);
  const std::size_t n = 3, nc = 4;
  const Tensor mu = uniform_tensor(rng, {n, nc}, 3.0);
  const std::vector<int> y{1, 3, 0};
  Graph g;
  const Var e = expected_log_likelihood({g.constant(mu), g.constant(Tensor({n, nc}))}, y,
                                        Tensor({5, n, nc}));
  // Random noise is scaled by the 1e-6 standard-deviation floor.
  const Var e_noisy = expected_log_likelihood({g.constant(mu), g.constant(Tensor({n, nc}))}, y,
                                              rng.normal_tensor({5, n, nc}));
  double expect = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY, z = 0.0;
    for (std::size_t j = 0; j < nc; ++j) mx = std::max(mx, mu[i * nc + j]);
    for (std::size_t j = 0; j < nc; ++j) z += std::exp(mu[i * nc + j] - mx);
    expect += mu[i * nc + static_cast<std::size_t>(y[i])] - mx - std::log(z);
  }
  CHECK(e.value().item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(e_noisy.value().item() - expect) < 1e-4);

  const Tensor var = uniform_tensor(rng, {n, nc}, 0.5);
  Tensor var_pos = var;
  for (double& v : var_pos.values()) v = std::abs(v) + 0.1;
  const Tensor eps = rng.normal_tensor({7, n, nc});
  Tensor mu2({2 * n, nc}), var2({2 * n, nc}), eps2({7, 2 * n, nc});
  for (std::size_t k = 0; k < 2; ++k) {
    std::copy(mu.data(), mu.data() + n * nc, mu2.data() + k * n * nc);
    std::copy(var_pos.data(), var_pos.data() + n * nc, var2.data() + k * n * nc);
    for (std::size_t s = 0; s < 7; ++s)
      std::copy(eps.data() + s * n * nc, eps.data() + (s + 1) * n * nc, eps2.data() + (s * 2 + k) * n * nc);
  }
  const std::vector<int> y2{1, 3, 0, 1, 3, 0};
  Graph h;
  const double one = expected_log_likelihood({h.constant(mu), h.constant(var_pos)}, y, eps).value().item();
  const double two = expected_log_likelihood({h.constant(mu2), h.constant(var2)}, y2, eps2).value().item();
  CHECK(two == doctest::Approx(2.0 * one).epsilon(1e-12));
  CHECK_THROWS_AS(expected_log_likelihood({h.constant(mu), h.constant(var_pos)}, std::vector<int>{0, 4, 0}, eps),
                  std::out_of_range);
}

TEST_CASE("elbo lower-bounds the quadrature log marginal likelihood") {
  // Two classes, two points: log p(y) = log E_f[prod_n softmax(f_n)[y_n]]
  // with f_c ~ N(0, Kxx) independently, integrated over R^4.
  const Quadrature gh = gauss_hermite(30);
  Rng rng(5);
  const std::size_t n = 2, m = 2, nc = 2;
  const double gamma = 0.5;
  const Tensor x({n, 1}, {-0.7, 0.9});
  const std::vector<int> y{0, 1};
  const MatrixXd kxx = dense_rbf(to_matrix(x, 0, n, 1), to_matrix(x, 0, n, 1), gamma);
  const MatrixXd lx = kxx.llt().matrixL();
  double py = 0.0;
  const std::size_t q = gh.nodes.size();
  for (std::size_t a = 0; a < q; ++a)
    for (std::size_t b = 0; b < q; ++b)
      for (std::size_t c = 0; c < q; ++c)
        for (std::size_t d = 0; d < q; ++d) {
          const double f00 = lx(0, 0) * gh.nodes[a];
          const double f10 = lx(1, 0) * gh.nodes[a] + lx(1, 1) * gh.nodes[b];
          const double f01 = lx(0, 0) * gh.nodes[c];
          const double f11 = lx(1, 0) * gh.nodes[c] + lx(1, 1) * gh.nodes[d];
          const double lik = std::exp(log_softmax2(f00, f01, y[0]) + log_softmax2(f10, f11, y[1]));
          py += gh.weights[a] * gh.weights[b] * gh.weights[c] * gh.weights[d] * lik;
        }
  const double log_py = std::log(py);

  for (std::uint64_t trial = 0; trial < 6; ++trial) {
    Rng r(50 + trial);
    const Tensor z = uniform_tensor(r, {m, 1}, 1.5);
    Tensor mean = uniform_tensor(r, {nc, m}, trial == 0 ? 0.0 : 1.5);
    Tensor chol = random_chol(r, nc, m);
    const std::size_t samples = 20000;
    const Tensor eps = r.normal_tensor({samples, n, nc});
    Graph g;
    const SvgpState st = constant_state(g, gamma, z, mean, chol);
    const double bound = elbo(g.constant(x), y, st, eps, n).value().item();

    // Standard error from the per-sample likelihood sums.
    const GaussianMarginals f = posterior_marginals(g.constant(x), st);
    std::vector<double> per(samples, 0.0);
    for (std::size_t s = 0; s < samples; ++s)
      for (std::size_t i = 0; i < n; ++i) {
        const double f0 = f.mean.value()[i * nc] + std::sqrt(f.var.value()[i * nc]) * eps[(s * n + i) * nc];
        const double f1 = f.mean.value()[i * nc + 1] + std::sqrt(f.var.value()[i * nc + 1]) * eps[(s * n + i) * nc + 1];
        per[s] += log_softmax2(f0, f1, y[i]);
      }
    double mean_per = 0.0, sq = 0.0;
    for (double v : per) mean_per += v / samples;
    for (double v : per) sq += (v - mean_per) * (v - mean_per);
    const double se = std::sqrt(sq / (samples - 1) / samples);
    MESSAGE("elbo " << bound << " vs log p(y) " << log_py << " (se " << se << ")");
    CHECK(bound <= log_py + 3.0 * se);
  }

  // An optimised q (gamma held fixed) approaches the bound from below.
  ParameterStore store;
  SvgpHead head(1, n, nc, store, rng);
  head.set_inducing(x);
  store.get("gp.log_gamma").value[0] = std::log(gamma);
  Adam adam(store, {.lr = 0.05});
  for (int step = 0; step < 400; ++step) {
    adam.zero_grad();
    Graph g;
    g.backward(op::neg(elbo(g.constant(x), y, head.state(g), 16, n, rng)));
    store.get("gp.log_gamma").grad.fill(0.0);
    adam.step();
  }
  const std::size_t samples = 40000;
  const Tensor eps = rng.normal_tensor({samples, n, nc});
  Graph g;
  const SvgpState st = head.state(g);
  const double bound = elbo(g.constant(x), y, st, eps, n).value().item();
  const GaussianMarginals f = posterior_marginals(g.constant(x), st);
  std::vector<double> per(samples, 0.0);
  for (std::size_t s = 0; s < samples; ++s)
    for (std::size_t i = 0; i < n; ++i) {
      const double f0 = f.mean.value()[i * nc] + std::sqrt(f.var.value()[i * nc]) * eps[(s * n + i) * nc];
      const double f1 = f.mean.value()[i * nc + 1] + std::sqrt(f.var.value()[i * nc + 1]) * eps[(s * n + i) * nc + 1];
      per[s] += log_softmax2(f0, f1, y[i]);
    }
  double mean_per = 0.0, sq = 0.0;
  for (double v : per) mean_per += v / samples;
  for (double v : per) sq += (v - mean_per) * (v - mean_per);
  const double se = std::sqrt(sq / (samples - 1) / samples);
  MESSAGE("optimised elbo " << bound << " vs log p(y) " << log_py << " (se " << se << ")");
  CHECK(bound <= log_py + 3.0 * se);
  CHECK(bound > log_py - 0.1);
}

TEST_CASE("predict_probs converges to the quadrature expectation") {
  const Quadrature gh = gauss_hermite(40);
  const Tensor mean({2, 2}, {0.4, -0.3, 1.2, 1.0});
  const Tensor var({2, 2}, {0.8, 1.5, 0.2, 2.0});
  Rng rng(6);
  const std::size_t samples = 200000;
  const Tensor p = predict_probs(mean, var, samples, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    double expect = 0.0;
    for (std::size_t a = 0; a < gh.nodes.size(); ++a)
      for (std::size_t b = 0; b < gh.nodes.size(); ++b) {
        const double f0 = mean[i * 2] + std::sqrt(var[i * 2]) * gh.nodes[a];
        const double f1 = mean[i * 2 + 1] + std::sqrt(var[i * 2 + 1]) * gh.nodes[b];
        expect += gh.weights[a] * gh.weights[b] / (1.0 + std::exp(f1 - f0));
      }
    // A probability has variance <= 1/4, so 4 / (2 sqrt(S)) bounds 4 SE.
    CHECK(std::abs(p[i * 2] - expect) < 2.0 / std::sqrt(static_cast<double>(samples)));
    CHECK(p[i * 2] + p[i * 2 + 1] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("predict_probs rows are distributions and degenerate means are decisive") {
  Rng rng(7);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor mean = uniform_tensor(rng, {8, 10}, 20.0);
    Tensor var = uniform_tensor(rng, {8, 10}, 5.0);
    for (double& v : var.values()) v = std::abs(v);
    const Tensor p = predict_probs(mean, var, 16, rng);
    for (std::size_t i = 0; i < 8; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 10; ++j) {
        CHECK(p[i * 10 + j] >= 0.0);
        s += p[i * 10 + j];
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  Tensor mean({1, 10});
  mean[0] = 10.0;
  const Tensor p = predict_probs(mean, Tensor({1, 10}, 1e-12), 8, rng);
  CHECK(p[0] > 0.999);
}

TEST_CASE("predictive entropy and class prediction examples") {
  CHECK(predictive_entropy(std::vector<double>{0, 1, 0}) == 0.0);
  CHECK(predictive_entropy(std::vector<double>(10, 0.1)) == doctest::Approx(std::log(10.0)));
  CHECK(predictive_entropy(std::vector<double>{0.5, 0.5}) == doctest::Approx(std::numbers::ln2));
  CHECK(predict_class(std::vector<double>{0.1, 0.8, 0.1}) == 1);
  CHECK(predict_class(std::vector<double>{0.5, 0.5}) == 0);
  // Invariant under strictly monotone transforms.
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> row(6), mapped(6);
    for (std::size_t j = 0; j < 6; ++j) {
      row[j] = rng.uniform();
      mapped[j] = std::exp(3.0 * row[j]) - 7.0;
    }
    CHECK(predict_class(row) == predict_class(mapped));
  }
}

TEST_CASE("elbo gradients in gamma, Z, m and L match finite differences with shared noise") {
  ParameterStore store;
  Rng rng(9);
  const std::size_t d = 3, m = 4, nc = 3, n = 5;
  SvgpHead head(d, m, nc, store, rng, 0.8);
  store.get("gp.var_mean").value = uniform_tensor(rng, {nc, m});
  Tensor raw = uniform_tensor(rng, {nc, m, m}, 0.4);
  store.get("gp.var_chol_raw").value = raw;
  store.get("gp.log_gamma").value = Tensor({1}, {std::log(0.7)});
  const Tensor x = uniform_tensor(rng, {n, d});
  const std::vector<int> y{0, 2, 1, 1, 0};
  const Tensor eps = rng.normal_tensor({10, n, nc});
  auto loss = [&](Graph& g) {
    return op::neg(elbo(g.constant(x), y, head.state(g), eps, 40));
  };
  for (bool whitened : {true, false}) {
    head.whitened = whitened;
    INFO("whitened " << whitened);
    for (const char* name : {"gp.log_gamma", "gp.inducing", "gp.var_mean", "gp.var_chol_raw"}) {
      GradCheckResult r = finite_diff_check(store, loss, name, 1e-3);
      INFO(name << ": " << r.detail);
      CHECK(r.pass);
      CHECK(r.checked > 0);
    }
    // The KL term alone is deterministic and held to the tighter bound.
    auto kl = [&](Graph& g) { return kl_to_prior(head.state(g)); };
    GradCheckResult r = finite_diff_check_all(store, kl, 1e-4);
    INFO(r.detail);
    CHECK(r.pass);
  }
}

TEST_CASE("whitened state equals the unwhitened state it implies") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(700 + seed);
    const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(5), d = 1 + rng.below(3), nc = 1 + rng.below(3);
    const double gamma = 0.3 + 1.5 * rng.uniform();
    const Tensor x = uniform_tensor(rng, {n, d}, 1.5), z = uniform_tensor(rng, {m, d}, 1.5);
    const Tensor mw = uniform_tensor(rng, {nc, m}), lw = random_chol(rng, nc, m);
    // m_u = Lz m_w and L_u = Lz L_w, with Lz the jittered factor used inside.
    Tensor kzz = rbf_kernel(z, z, gamma);
    const double jitter = choose_jitter(kzz);
    for (std::size_t i = 0; i < m; ++i) kzz[i * m + i] += jitter;
    const MatrixXd lz = to_matrix(op::detail::cholesky_factor(kzz), 0, m, m);
    Tensor mu({nc, m}), lu({nc, m, m});
    for (std::size_t c = 0; c < nc; ++c) {
      const VectorXd mc = lz * to_matrix(mw, c * m, 1, m).transpose();
      const MatrixXd lc = lz * to_matrix(lw, c * m * m, m, m);
      for (std::size_t i = 0; i < m; ++i) {
        mu[c * m + i] = mc(static_cast<Eigen::Index>(i));
        for (std::size_t j = 0; j < m; ++j)
          lu[(c * m + i) * m + j] = lc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
    }
    Graph g;
    SvgpState white = constant_state(g, gamma, z, mw, lw);
    white.whitened = true;
    const SvgpState plain = constant_state(g, gamma, z, mu, lu);
    const GaussianMarginals fw = posterior_marginals(g.constant(x), white);
    const GaussianMarginals fp = posterior_marginals(g.constant(x), plain);
    for (std::size_t i = 0; i < n * nc; ++i) {
      CHECK(fw.mean.value()[i] == doctest::Approx(fp.mean.value()[i]).epsilon(1e-7).scale(1.0));
      CHECK(fw.var.value()[i] == doctest::Approx(fp.var.value()[i]).epsilon(1e-7).scale(1.0));
    }
    const double klw = kl_to_prior(white).value().item(), klp = kl_to_prior(plain).value().item();
    CHECK(klw >= 0.0);
    CHECK(klw == doctest::Approx(klp).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("head initialisation and jitter policy") {
  ParameterStore store;
  Rng rng(10);
  SvgpHead head(160, 70, 10, store, rng);
  CHECK(store.get("gp.log_gamma").value[0] == doctest::Approx(-std::log(160.0)));
  CHECK(store.get("gp.inducing").value.shape() == Shape{70, 160});
  for (double v : store.get("gp.var_mean").value.values()) CHECK(v == 0.0);
  Graph g;
  const Tensor l = head.state(g).chol.value();
  for (std::size_t c = 0; c < 10; ++c)
    for (std::size_t i = 0; i < 70; ++i)
      for (std::size_t j = 0; j < 70; ++j) CHECK(l[(c * 70 + i) * 70 + j] == (i == j ? 1.0 : 0.0));
  CHECK(head.whitened);
  CHECK(kl_to_prior(head.state(g)).value().item() == 0.0);  // q(u) starts at the prior
  CHECK_THROWS_AS(head.set_inducing(Tensor({3, 3})), ShapeError);

  // Duplicate inducing rows make Kzz singular; jitter restores definiteness.
  Tensor k({2, 2}, 1.0);
  CHECK(choose_jitter(k) == 1e-6);
  CHECK_THROWS_AS(choose_jitter(Tensor({2, 2}, {-1.0, 0.0, 0.0, 1.0})), op::NotPositiveDefinite);
}
