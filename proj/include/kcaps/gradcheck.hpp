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
#include <functional>
#include <string>

#include "kcaps/graph.hpp"

namespace kcaps {

/// Builds a scalar loss on a fresh graph. Called once for the analytic
/// gradient and twice per checked entry, so it must be deterministic.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Check at most this many entries per parameter (0 = all), chosen by seed.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  bool pass = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string detail;
};

/// Compares backward() against central differences for one parameter.
/// Relative error per entry is |a - n| / max(|a|, |n|, 1e-8). Never throws
/// for a failed comparison; the result carries the verdict.
GradCheckResult finite_diff_check(ParameterStore& store, const LossBuilder& loss,
                                  const std::string& param, double tolerance,
                                  const GradCheckOptions& opts = {});

/// Runs finite_diff_check over every parameter in the store and reports the
/// worst entry.
GradCheckResult finite_diff_check_all(ParameterStore& store,
                                      const LossBuilder& loss, double tolerance,
                                      const GradCheckOptions& opts = {});

}  // namespace kcaps
