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

#include "kcaps/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

namespace kcaps::op {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::string two(const Shape& a, const Shape& b) {
  return shape_str(a) + " vs " + shape_str(b);
}

Graph& graph_of(const Var& a) { return a.graph(); }

// Iterates over every element of `out`, yielding offsets into operands of
// shape `a` and `b` broadcast against it.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b,
                        F&& f) {
  const std::size_t n = shape_numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (a == out && shape_numel(b) == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
    return;
  }
  if (b == out && shape_numel(a) == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
    return;
  }
  const std::size_t r = out.size();
  auto strides_for = [&](const Shape& s) {
    std::vector<std::size_t> st(r, 0);
    std::size_t acc = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t d = s.size() - 1 - k;
      const std::size_t od = r - 1 - k;
      st[od] = s[d] == 1 ? 0 : acc;
      acc *= s[d];
    }
    return st;
  };
  const auto sa = strides_for(a);
  const auto sb = strides_for(b);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ao, bo);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ao += sa[d];
      bo += sb[d];
      if (idx[d] < out[d]) break;
      ao -= sa[d] * out[d];
      bo -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

Tensor permute_tensor(const Tensor& t, const std::vector<std::size_t>& axes) {
  const Shape& in = t.shape();
  const std::size_t r = in.size();
  Shape out(r);
  std::vector<std::size_t> in_strides(r), st(r);
  std::size_t acc = 1;
  for (std::size_t d = r; d-- > 0;) {
    in_strides[d] = acc;
    acc *= in[d];
  }
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    st[i] = in_strides[axes[i]];
  }
  Tensor res(out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  const double* src = t.data();
  double* dst = res.data();
  const std::size_t n = t.numel();
  for (std::size_t i = 0; i < n; ++i) {
    dst[i] = src[off];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += st[d];
      if (idx[d] < out[d]) break;
      off -= st[d] * out[d];
      idx[d] = 0;
    }
  }
  return res;
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <class Fwd, class Deriv>
Var unary(const char* name, const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = fwd(x[i]);
  return graph_of(a).record(
      name, std::move(y), {a}, [deriv](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        if (!g.requires_grad(in)) return;
        const Tensor& x = g.value(in);
        const Tensor& y = g.value(self);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          gx[i] += gy[i] * deriv(x[i], y[i]);
        }
      });
}

enum class BinKind { kAdd, kSub, kMul, kDiv };

Var binary(const char* name, BinKind kind, const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape out = detail::broadcast_shape(av.shape(), bv.shape(), name);
  Tensor y(out);
  const double* pa = av.data();
  const double* pb = bv.data();
  double* py = y.data();
  switch (kind) {
    case BinKind::kAdd:
      for_each_broadcast(out, av.shape(), bv.shape(),
                         [&](auto i, auto ia, auto ib) { py[i] = pa[ia] + pb[ib]; });
      break;
    case BinKind::kSub:
      for_each_broadcast(out, av.shape(), bv.shape(),
                         [&](auto i, auto ia, auto ib) { py[i] = pa[ia] - pb[ib]; });
      break;
    case BinKind::kMul:
      for_each_broadcast(out, av.shape(), bv.shape(),
                         [&](auto i, auto ia, auto ib) { py[i] = pa[ia] * pb[ib]; });
      break;
    case BinKind::kDiv:
      for_each_broadcast(out, av.shape(), bv.shape(),
                         [&](auto i, auto ia, auto ib) { py[i] = pa[ia] / pb[ib]; });
      break;
  }
  return graph_of(a).record(
      name, std::move(y), {a, b}, [kind](Graph& g, std::size_t self) {
        const std::size_t ia_id = g.input_id(self, 0);
        const std::size_t ib_id = g.input_id(self, 1);
        const bool need_a = g.requires_grad(ia_id);
        const bool need_b = g.requires_grad(ib_id);
        const Tensor& av = g.value(ia_id);
        const Tensor& bv = g.value(ib_id);
        const Tensor& gy = g.grad(self);
        const Shape& out = g.value(self).shape();
        double* ga = need_a ? g.grad_buffer(ia_id).data() : nullptr;
        double* gb = need_b ? g.grad_buffer(ib_id).data() : nullptr;
        const double* pa = av.data();
        const double* pb = bv.data();
        const double* pg = gy.data();
        for_each_broadcast(out, av.shape(), bv.shape(),
                           [&](auto i, auto ia, auto ib) {
                             const double gi = pg[i];
                             switch (kind) {
                               case BinKind::kAdd:
                                 if (ga) ga[ia] += gi;
                                 if (gb) gb[ib] += gi;
                                 break;
                               case BinKind::kSub:
                                 if (ga) ga[ia] += gi;
                                 if (gb) gb[ib] -= gi;
                                 break;
                               case BinKind::kMul:
                                 if (ga) ga[ia] += gi * pb[ib];
                                 if (gb) gb[ib] += gi * pa[ia];
                                 break;
                               case BinKind::kDiv:
                                 if (ga) ga[ia] += gi / pb[ib];
                                 if (gb) gb[ib] -= gi * pa[ia] / (pb[ib] * pb[ib]);
                                 break;
                             }
                           });
      });
}

void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " +
                       shape_str(a.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// detail

namespace detail {

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  long ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(ax);
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      shape_fail(op, "cannot broadcast " + two(a, b));
    }
    out[r - 1 - k] = std::max(da, db);
  }
  return out;
}

Tensor sum_to_shape(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor out(shape);
  const double* pg = g.data();
  double* po = out.data();
  for_each_broadcast(g.shape(), shape, g.shape(),
                     [&](auto i, auto io, auto) { po[io] += pg[i]; });
  return out;
}

Tensor cholesky_factor(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    shape_fail("cholesky", "expected a square matrix, got " +
                               shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0);
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) throw NotPositiveDefinite(j + 1, d);
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.5 * (a[i * n + j] + a[j * n + i]);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

}  // namespace detail

NotPositiveDefinite::NotPositiveDefinite(std::size_t minor, double pivot)
    : std::runtime_error("cholesky: matrix is not positive definite (leading "
                         "minor of order " +
                         std::to_string(minor) + " has pivot " +
                         std::to_string(pivot) + ")"),
      minor_(minor),
      pivot_(pivot) {}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) { return binary("add", BinKind::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary("sub", BinKind::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary("mul", BinKind::kMul, a, b); }
Var div(const Var& a, const Var& b) { return binary("div", BinKind::kDiv, a, b); }

Var neg(const Var& a) {
  return unary("neg", a, [](double x) { return -x; },
               [](double, double) { return -1.0; });
}

Var scale(const Var& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; },
               [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; },
               [](double, double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  return graph_of(a).record("sum", Tensor::scalar(s), {a},
                            [](Graph& g, std::size_t self) {
                              const std::size_t in = g.input_id(self, 0);
                              const double gs = g.grad(self)[0];
                              Tensor& gx = g.grad_buffer(in);
                              for (double& v : gx.values()) v += gs;
                            });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().numel();
  if (n == 0) shape_fail("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum(const Var& a, int axis, bool keepdim) {
  const Tensor& x = a.value();
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "sum");
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape out = x.shape();
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<long>(ax));
    if (out.empty()) out = {1};
  }
  Tensor y(out);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < sp.len; ++l) {
      const double* src = x.data() + (o * sp.len + l) * sp.inner;
      double* dst = y.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return graph_of(a).record(
      "sum_axis", std::move(y), {a}, [sp](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t l = 0; l < sp.len; ++l) {
            double* dst = gx.data() + (o * sp.len + l) * sp.inner;
            const double* src = gy.data() + o * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

Var mean(const Var& a, int axis, bool keepdim) {
  const std::size_t ax = detail::normalize_axis(axis, a.value().rank(), "mean");
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.value().dim(ax)));
}

Var softmax(const Var& a, int axis) {
  const Tensor& x = a.value();
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit sp = split_at(x.shape(), ax);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, x[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(x[base + l * sp.inner] - m);
        y[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) y[base + l * sp.inner] /= z;
    }
  }
  return graph_of(a).record(
      "softmax", std::move(y), {a}, [sp](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& y = g.value(self);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              dot += gy[k] * y[k];
            }
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              gx[k] += y[k] * (gy[k] - dot);
            }
          }
        }
      });
}

Var log_softmax(const Var& a, int axis) {
  const Tensor& x = a.value();
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "log_softmax");
  const AxisSplit sp = split_at(x.shape(), ax);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, x[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(x[base + l * sp.inner] - m);
      const double lse = m + std::log(z);
      for (std::size_t l = 0; l < sp.len; ++l) {
        y[base + l * sp.inner] = x[base + l * sp.inner] - lse;
      }
    }
  }
  return graph_of(a).record(
      "log_softmax", std::move(y), {a}, [sp](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& y = g.value(self);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double total = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) total += gy[base + l * sp.inner];
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              gx[k] += gy[k] - std::exp(y[k]) * total;
            }
          }
        }
      });
}

Var l2norm(const Var& a, int axis, double eps) {
  const Tensor& x = a.value();
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "l2norm");
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape out = x.shape();
  out.erase(out.begin() + static_cast<long>(ax));
  if (out.empty()) out = {1};
  Tensor y(out);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double s = eps;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double v = x[(o * sp.len + l) * sp.inner + i];
        s += v * v;
      }
      y[o * sp.inner + i] = std::sqrt(s);
    }
  }
  return graph_of(a).record(
      "l2norm", std::move(y), {a}, [sp](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& x = g.value(in);
        const Tensor& y = g.value(self);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const double n = y[o * sp.inner + i];
            if (n == 0.0) continue;
            const double c = gy[o * sp.inner + i] / n;
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = (o * sp.len + l) * sp.inner + i;
              gx[k] += c * x[k];
            }
          }
        }
      });
}

Var squash(const Var& a, double eps) {
  const Tensor& x = a.value();
  if (x.rank() == 0) shape_fail("squash", "scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = x.data() + r * d;
    double n2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) n2 += s[k] * s[k];
    const double f = n2 / ((1.0 + n2) * std::sqrt(n2 + eps));
    for (std::size_t k = 0; k < d; ++k) y[r * d + k] = f * s[k];
  }
  return graph_of(a).record(
      "squash", std::move(y), {a}, [d, rows, eps](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& x = g.value(in);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* s = x.data() + r * d;
          const double* gv = gy.data() + r * d;
          double n2 = 0.0, gs = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            n2 += s[k] * s[k];
            gs += gv[k] * s[k];
          }
          const double n = std::sqrt(n2 + eps);
          const double f = n2 / ((1.0 + n2) * n);
          // df/d(n2), written to stay finite at n2 = 0.
          const double df = 1.0 / ((1.0 + n2) * n) - f / (1.0 + n2) -
                            0.5 * f / (n2 + eps);
          for (std::size_t k = 0; k < d; ++k) {
            gx[r * d + k] += f * gv[k] + 2.0 * df * gs * s[k];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    shape_fail("reshape", "cannot view " + two(a.shape(), shape));
  }
  return graph_of(a).record(
      "reshape", a.value().reshaped(std::move(shape)), {a},
      [](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gy[i];
      });
}

Var permute(const Var& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.value().rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) {
    shape_fail("permute", "axes list of length " + std::to_string(axes.size()) +
                              " for " + shape_str(a.shape()));
  }
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) {
      shape_fail("permute", "invalid axis order for " + shape_str(a.shape()));
    }
    seen[ax] = true;
  }
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[axes[i]] = i;
  return graph_of(a).record(
      "permute", permute_tensor(a.value(), axes), {a},
      [inverse](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        g.accumulate(in, permute_tensor(g.grad(self), inverse));
      });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
  Shape out = first;
  out[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) ok = false;
    }
    if (!ok) shape_fail("concat", "incompatible " + two(first, s));
    lens.push_back(s[ax]);
    out[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out, ax);
  Tensor y(out);
  std::size_t start = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = parts[k].value();
    const std::size_t chunk = lens[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.data() + o * chunk, chunk,
                  y.data() + o * sp.len * sp.inner + start * sp.inner);
    }
    start += lens[k];
  }
  return graph_of(parts[0]).record(
      "concat", std::move(y), parts, [sp, lens](Graph& g, std::size_t self) {
        const Tensor& gy = g.grad(self);
        std::size_t start = 0;
        for (std::size_t k = 0; k < lens.size(); ++k) {
          const std::size_t in = g.input_id(self, k);
          const std::size_t chunk = lens[k] * sp.inner;
          if (g.requires_grad(in)) {
            Tensor& gx = g.grad_buffer(in);
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const double* src = gy.data() + o * sp.len * sp.inner + start * sp.inner;
              double* dst = gx.data() + o * chunk;
              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
          }
          start += lens[k];
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t n = a.value().dim(0), k = a.value().dim(1);
  const std::size_t m = b.value().dim(1);
  if (b.value().dim(0) != k) shape_fail("matmul", two(a.shape(), b.shape()));
  Tensor y({n, m});
  MatMap(y.data(), n, m).noalias() =
      ConstMatMap(a.value().data(), n, k) * ConstMatMap(b.value().data(), k, m);
  return graph_of(a).record(
      "matmul", std::move(y), {a, b}, [n, k, m](Graph& g, std::size_t self) {
        const std::size_t ia = g.input_id(self, 0), ib = g.input_id(self, 1);
        ConstMatMap gy(g.grad(self).data(), n, m);
        if (g.requires_grad(ia)) {
          MatMap(g.grad_buffer(ia).data(), n, k).noalias() +=
              gy * ConstMatMap(g.value(ib).data(), k, m).transpose();
        }
        if (g.requires_grad(ib)) {
          MatMap(g.grad_buffer(ib).data(), k, m).noalias() +=
              ConstMatMap(g.value(ia).data(), n, k).transpose() * gy;
        }
      });
}

Var bmm(const Var& a, const Var& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t bs = a.value().dim(0), n = a.value().dim(1),
                    k = a.value().dim(2), m = b.value().dim(2);
  if (b.value().dim(0) != bs || b.value().dim(1) != k) {
    shape_fail("bmm", two(a.shape(), b.shape()));
  }
  Tensor y({bs, n, m});
  for (std::size_t i = 0; i < bs; ++i) {
    MatMap(y.data() + i * n * m, n, m).noalias() =
        ConstMatMap(a.value().data() + i * n * k, n, k) *
        ConstMatMap(b.value().data() + i * k * m, k, m);
  }
  return graph_of(a).record(
      "bmm", std::move(y), {a, b}, [bs, n, k, m](Graph& g, std::size_t self) {
        const std::size_t ia = g.input_id(self, 0), ib = g.input_id(self, 1);
        const bool need_a = g.requires_grad(ia), need_b = g.requires_grad(ib);
        const double* gy = g.grad(self).data();
        for (std::size_t i = 0; i < bs; ++i) {
          ConstMatMap gyi(gy + i * n * m, n, m);
          if (need_a) {
            MatMap(g.grad_buffer(ia).data() + i * n * k, n, k).noalias() +=
                gyi * ConstMatMap(g.value(ib).data() + i * k * m, k, m).transpose();
          }
          if (need_b) {
            MatMap(g.grad_buffer(ib).data() + i * k * m, k, m).noalias() +=
                ConstMatMap(g.value(ia).data() + i * n * k, n, k).transpose() * gyi;
          }
        }
      });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.value().dim(0), in = x.value().dim(1);
  const std::size_t out = weight.value().dim(0);
  if (weight.value().dim(1) != in || bias.value().numel() != out) {
    shape_fail("linear", "input " + shape_str(x.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " +
                             shape_str(bias.shape()));
  }
  Tensor y({n, out});
  MatMap ym(y.data(), n, out);
  ym.noalias() = ConstMatMap(x.value().data(), n, in) *
                 ConstMatMap(weight.value().data(), out, in).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(),
                                                        static_cast<long>(out));
  return graph_of(x).record(
      "linear", std::move(y), {x, weight, bias},
      [n, in, out](Graph& g, std::size_t self) {
        const std::size_t ix = g.input_id(self, 0), iw = g.input_id(self, 1),
                          ib = g.input_id(self, 2);
        ConstMatMap gy(g.grad(self).data(), n, out);
        if (g.requires_grad(ix)) {
          MatMap(g.grad_buffer(ix).data(), n, in).noalias() +=
              gy * ConstMatMap(g.value(iw).data(), out, in);
        }
        if (g.requires_grad(iw)) {
          MatMap(g.grad_buffer(iw).data(), out, in).noalias() +=
              gy.transpose() * ConstMatMap(g.value(ix).data(), n, in);
        }
        if (g.requires_grad(ib)) {
          Eigen::Map<Eigen::RowVectorXd>(g.grad_buffer(ib).data(),
                                         static_cast<long>(out)) +=
              gy.colwise().sum();
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  std::size_t c, h, w, o, k, stride, pad, ho, wo;
};

void im2col(const double* img, const ConvGeom& g, double* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] =
                inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                             static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeom& g, double* img) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias,
           Conv2dOptions opts) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3] || bias.value().numel() != ws[0]) {
    shape_fail("conv2d", "input " + shape_str(xs) + ", weight " + shape_str(ws) +
                             ", bias " + shape_str(bias.shape()));
  }
  if (opts.stride == 0) shape_fail("conv2d", "stride must be >= 1");
  ConvGeom geo{xs[1], xs[2], xs[3], ws[0], ws[2], opts.stride, opts.padding, 0, 0};
  if (xs[2] + 2 * opts.padding < geo.k || xs[3] + 2 * opts.padding < geo.k) {
    shape_fail("conv2d", "kernel " + std::to_string(geo.k) +
                             " larger than padded input " + shape_str(xs));
  }
  geo.ho = (geo.h + 2 * geo.pad - geo.k) / geo.stride + 1;
  geo.wo = (geo.w + 2 * geo.pad - geo.k) / geo.stride + 1;
  const std::size_t n = xs[0];
  const std::size_t ck = geo.c * geo.k * geo.k;
  const std::size_t plane = geo.ho * geo.wo;
  Tensor y({n, geo.o, geo.ho, geo.wo});
  std::vector<double> col(ck * plane);
  ConstMatMap wm(weight.value().data(), geo.o, ck);
  Eigen::Map<const Eigen::VectorXd> bv(bias.value().data(), static_cast<long>(geo.o));
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.value().data() + i * geo.c * geo.h * geo.w, geo, col.data());
    MatMap out(y.data() + i * geo.o * plane, geo.o, plane);
    out.noalias() = wm * ConstMatMap(col.data(), ck, plane);
    out.colwise() += bv;
  }
  return graph_of(x).record(
      "conv2d", std::move(y), {x, weight, bias},
      [geo, n, ck, plane](Graph& g, std::size_t self) {
        const std::size_t ix = g.input_id(self, 0), iw = g.input_id(self, 1),
                          ib = g.input_id(self, 2);
        const bool need_x = g.requires_grad(ix), need_w = g.requires_grad(iw),
                   need_b = g.requires_grad(ib);
        const double* gy = g.grad(self).data();
        ConstMatMap wm(g.value(iw).data(), geo.o, ck);
        std::vector<double> col(ck * plane), dcol(ck * plane);
        for (std::size_t i = 0; i < n; ++i) {
          ConstMatMap gyi(gy + i * geo.o * plane, geo.o, plane);
          if (need_w) {
            im2col(g.value(ix).data() + i * geo.c * geo.h * geo.w, geo, col.data());
            MatMap(g.grad_buffer(iw).data(), geo.o, ck).noalias() +=
                gyi * ConstMatMap(col.data(), ck, plane).transpose();
          }
          if (need_b) {
            Eigen::Map<Eigen::VectorXd>(g.grad_buffer(ib).data(),
                                        static_cast<long>(geo.o)) +=
                gyi.rowwise().sum();
          }
          if (need_x) {
            MatMap(dcol.data(), ck, plane).noalias() = wm.transpose() * gyi;
            col2im(dcol.data(), geo,
                   g.grad_buffer(ix).data() + i * geo.c * geo.h * geo.w);
          }
        }
      });
}

Var maxpool2d(const Var& x, std::size_t window) {
  require_rank("maxpool2d", x, 4);
  const Shape& xs = x.shape();
  if (window == 0 || xs[2] < window || xs[3] < window) {
    shape_fail("maxpool2d", "window " + std::to_string(window) + " on " +
                                shape_str(xs));
  }
  const std::size_t ho = xs[2] / window, wo = xs[3] / window;
  const std::size_t planes = xs[0] * xs[1];
  Tensor y({xs[0], xs[1], ho, wo});
  std::vector<std::size_t> argmax(y.numel());
  const double* src = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * xs[2] * xs[3] + oy * window * xs[3] + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t k =
                p * xs[2] * xs[3] + (oy * window + dy) * xs[3] + ox * window + dx;
            if (src[k] > src[best]) best = k;
          }
        }
        const std::size_t o = (p * ho + oy) * wo + ox;
        y[o] = src[best];
        argmax[o] = best;
      }
    }
  }
  return graph_of(x).record(
      "maxpool2d", std::move(y), {x},
      [argmax = std::move(argmax)](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gy[o];
      });
}

// ---------------------------------------------------------------------------
// Factorizations

Var cholesky(const Var& a) {
  Tensor l = detail::cholesky_factor(a.value());
  const std::size_t n = l.dim(0);
  return graph_of(a).record(
      "cholesky", std::move(l), {a}, [n](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        ConstMatMap lm(g.value(self).data(), n, n);
        ConstMatMap gl(g.grad(self).data(), n, n);
        // P = Phi(L^T Lbar): lower triangle with halved diagonal.
        RowMat p = (lm.transpose() * gl).triangularView<Eigen::Lower>();
        p.diagonal() *= 0.5;
        const auto lt = lm.triangularView<Eigen::Lower>();
        // S = L^{-T} P L^{-1}
        RowMat x = lt.transpose().solve(p);
        RowMat s = lt.transpose().solve(x.transpose()).transpose();
        MatMap(g.grad_buffer(in).data(), n, n) += 0.5 * (s + s.transpose());
      });
}

Var trisolve(const Var& lower, const Var& b, bool transpose) {
  require_rank("trisolve", lower, 2);
  require_rank("trisolve", b, 2);
  const std::size_t m = lower.value().dim(0);
  if (lower.value().dim(1) != m || b.value().dim(0) != m) {
    shape_fail("trisolve", two(lower.shape(), b.shape()));
  }
  const std::size_t k = b.value().dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    if (lower.value()[i * m + i] == 0.0) {
      throw NumericError("trisolve: singular triangular matrix (zero at " +
                         std::to_string(i) + ")");
    }
  }
  ConstMatMap lm(lower.value().data(), m, m);
  Tensor x({m, k});
  MatMap xm(x.data(), m, k);
  xm = ConstMatMap(b.value().data(), m, k);
  if (transpose) {
    lm.transpose().triangularView<Eigen::Upper>().solveInPlace(xm);
  } else {
    lm.triangularView<Eigen::Lower>().solveInPlace(xm);
  }
  return graph_of(lower).record(
      "trisolve", std::move(x), {lower, b},
      [m, k, transpose](Graph& g, std::size_t self) {
        const std::size_t il = g.input_id(self, 0), ib = g.input_id(self, 1);
        ConstMatMap lm(g.value(il).data(), m, m);
        ConstMatMap xm(g.value(self).data(), m, k);
        RowMat bbar = ConstMatMap(g.grad(self).data(), m, k);
        if (transpose) {
          lm.triangularView<Eigen::Lower>().solveInPlace(bbar);
        } else {
          lm.transpose().triangularView<Eigen::Upper>().solveInPlace(bbar);
        }
        if (g.requires_grad(ib)) MatMap(g.grad_buffer(ib).data(), m, k) += bbar;
        if (g.requires_grad(il)) {
          RowMat gl = transpose ? RowMat(-(xm * bbar.transpose()))
                                : RowMat(-(bbar * xm.transpose()));
          MatMap(g.grad_buffer(il).data(), m, m) +=
              RowMat(gl.triangularView<Eigen::Lower>());
        }
      });
}

Var diag(const Var& a) {
  require_rank("diag", a, 2);
  const std::size_t n = a.value().dim(0);
  if (a.value().dim(1) != n) shape_fail("diag", "non-square " + shape_str(a.shape()));
  Tensor d({n});
  for (std::size_t i = 0; i < n; ++i) d[i] = a.value()[i * n + i];
  return graph_of(a).record("diag", std::move(d), {a},
                            [n](Graph& g, std::size_t self) {
                              const std::size_t in = g.input_id(self, 0);
                              const Tensor& gy = g.grad(self);
                              Tensor& gx = g.grad_buffer(in);
                              for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += gy[i];
                            });
}

Var lower_exp_diag(const Var& raw) {
  const Tensor& r = raw.value();
  if (r.rank() < 2 || r.shape()[r.rank() - 1] != r.shape()[r.rank() - 2]) {
    shape_fail("lower_exp_diag", "expected [..., M, M], got " + shape_str(r.shape()));
  }
  const std::size_t m = r.shape().back();
  const std::size_t batches = r.numel() / (m * m);
  Tensor l(r.shape());
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < i; ++j) l[b * m * m + i * m + j] = r[b * m * m + i * m + j];
      l[b * m * m + i * m + i] = std::exp(r[b * m * m + i * m + i]);
    }
  }
  return graph_of(raw).record(
      "lower_exp_diag", std::move(l), {raw}, [m, batches](Graph& g, std::size_t self) {
        const std::size_t in = g.input_id(self, 0);
        const Tensor& y = g.value(self);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad_buffer(in);
        for (std::size_t b = 0; b < batches; ++b) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
              const std::size_t k = b * m * m + i * m + j;
              gx[k] += gy[k];
            }
            const std::size_t k = b * m * m + i * m + i;
            gx[k] += gy[k] * y[k];
          }
        }
      });
}

Var sq_dist(const Var& a, const Var& b) {
  require_rank("sq_dist", a, 2);
  require_rank("sq_dist", b, 2);
  const std::size_t n = a.value().dim(0), d = a.value().dim(1), m = b.value().dim(0);
  if (b.value().dim(1) != d) shape_fail("sq_dist", two(a.shape(), b.shape()));
  Tensor y({n, m});
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = pa[i * d + k] - pb[j * d + k];
        s += diff * diff;
      }
      y[i * m + j] = s;
    }
  }
  return graph_of(a).record(
      "sq_dist", std::move(y), {a, b}, [n, d, m](Graph& g, std::size_t self) {
        const std::size_t ia = g.input_id(self, 0), ib = g.input_id(self, 1);
        const bool need_a = g.requires_grad(ia), need_b = g.requires_grad(ib);
        const double* pa = g.value(ia).data();
        const double* pb = g.value(ib).data();
        const double* gy = g.grad(self).data();
        double* ga = need_a ? g.grad_buffer(ia).data() : nullptr;
        double* gb = need_b ? g.grad_buffer(ib).data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            const double c = 2.0 * gy[i * m + j];
            if (c == 0.0) continue;
            for (std::size_t k = 0; k < d; ++k) {
              const double diff = c * (pa[i * d + k] - pb[j * d + k]);
              if (ga) ga[i * d + k] += diff;
              if (gb) gb[j * d + k] -= diff;
            }
          }
        }
      });
}

Var detach(const Var& a) { return graph_of(a).constant(a.value()); }

}  // namespace kcaps::op
