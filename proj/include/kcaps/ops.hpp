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

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "kcaps/graph.hpp"

// Differentiable op vocabulary. Every op records one node on the graph of its
// first operand and throws ShapeError naming the op and the offending shapes.
namespace kcaps::op {

// Elementwise binary ops with numpy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);

/// Sum of all elements, shape [1].
Var sum(const Var& a);
/// Mean of all elements, shape [1].
Var mean(const Var& a);
/// Reduce one axis (negative axes count from the end).
Var sum(const Var& a, int axis, bool keepdim = false);
Var mean(const Var& a, int axis, bool keepdim = false);

Var softmax(const Var& a, int axis);
Var log_softmax(const Var& a, int axis);

/// sqrt(sum(a^2, axis) + eps); the reduced axis is dropped.
Var l2norm(const Var& a, int axis = -1, double eps = 0.0);
/// Capsule squashing along the last axis: (|s|^2 / (1 + |s|^2)) s / |s|,
/// with |s| = sqrt(|s|^2 + eps).
Var squash(const Var& a, double eps = 1e-9);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& axes);
Var concat(const std::vector<Var>& parts, int axis);

/// [n,k] x [k,m] -> [n,m].
Var matmul(const Var& a, const Var& b);
/// [b,n,k] x [b,k,m] -> [b,n,m].
Var bmm(const Var& a, const Var& b);
/// x [N,in] W [out,in] bias [out] -> x W^T + bias.
Var linear(const Var& x, const Var& weight, const Var& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
/// x [N,C,H,W], weight [O,C,k,k], bias [O] -> [N,O,H',W'].
Var conv2d(const Var& x, const Var& weight, const Var& bias,
           Conv2dOptions opts);
/// Non-overlapping max pooling with a square window.
Var maxpool2d(const Var& x, std::size_t window);

/// Raised when a matrix handed to cholesky() is not positive definite.
class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(std::size_t minor, double pivot);
  /// 1-based order of the smallest leading minor that is not positive.
  std::size_t minor() const { return minor_; }
  double pivot() const { return pivot_; }

 private:
  std::size_t minor_;
  double pivot_;
};

/// Lower Cholesky factor of the symmetric part (A + A^T) / 2.
Var cholesky(const Var& a);
/// Solves L X = B (or L^T X = B when `transpose` is set) for lower
/// triangular L [M,M] and B [M,K]. Only the lower triangle of L is read.
Var trisolve(const Var& lower, const Var& b, bool transpose = false);
/// Main diagonal of a square matrix.
Var diag(const Var& a);
/// Lower-triangular factor from an unconstrained [..., M, M] tensor: the
/// strict lower triangle is copied and the diagonal is exponentiated.
Var lower_exp_diag(const Var& raw);
/// Pairwise squared Euclidean distances between rows, [N,D] x [M,D] -> [N,M].
Var sq_dist(const Var& a, const Var& b);

/// Copy of `a` with no gradient path.
Var detach(const Var& a);

// Plain-tensor numerics shared with oracles and the no-grad routing loop.
namespace detail {
/// Lower Cholesky factor; throws NotPositiveDefinite.
Tensor cholesky_factor(const Tensor& a);
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);
/// Sums `g` down to `shape` (the inverse of broadcasting).
Tensor sum_to_shape(const Tensor& g, const Shape& shape);
std::size_t normalize_axis(int axis, std::size_t rank, const char* op);
}  // namespace detail

}  // namespace kcaps::op
