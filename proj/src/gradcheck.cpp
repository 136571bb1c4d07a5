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

#include "kcaps/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

#include "kcaps/rng.hpp"

namespace kcaps {

namespace {

double evaluate(const LossBuilder& loss) {
  Graph g;
  return loss(g).value().item();
}

}  // namespace

GradCheckResult finite_diff_check(ParameterStore& store, const LossBuilder& loss,
                                  const std::string& param, double tolerance,
                                  const GradCheckOptions& opts) {
  GradCheckResult res;
  try {
    Parameter& p = store.get(param);
    if (p.value.numel() == 0) return res;

    store.zero_grad();
    {
      Graph g;
      Var out = loss(g);
      if (out.value().numel() != 1) {
        res.pass = false;
        res.detail = "loss is not scalar: " + shape_str(out.shape());
        return res;
      }
      g.backward(out);
    }
    const Tensor analytic = p.grad;

    std::vector<std::size_t> entries(p.value.numel());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (opts.max_entries && opts.max_entries < entries.size()) {
      Rng rng(opts.seed);
      auto perm = rng.permutation(entries.size());
      entries.assign(perm.begin(), perm.begin() + static_cast<long>(opts.max_entries));
    }

    for (std::size_t idx : entries) {
      const double saved = p.value[idx];
      p.value[idx] = saved + opts.step;
      const double up = evaluate(loss);
      p.value[idx] = saved - opts.step;
      const double down = evaluate(loss);
      p.value[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.detail = param + "[" + std::to_string(idx) + "]: analytic " +
                     std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
    res.pass = res.max_rel_error < tolerance;
  } catch (const std::exception& e) {
    res.pass = false;
    res.detail = e.what();
  }
  return res;
}

GradCheckResult finite_diff_check_all(ParameterStore& store,
                                      const LossBuilder& loss, double tolerance,
                                      const GradCheckOptions& opts) {
  GradCheckResult worst;
  for (Parameter* p : store.all()) {
    GradCheckResult r = finite_diff_check(store, loss, p->name, tolerance, opts);
    worst.checked += r.checked;
    if (!r.pass) worst.pass = false;
    if (r.max_rel_error >= worst.max_rel_error || (!r.pass && worst.detail.empty())) {
      worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
      worst.detail = r.detail;
    }
  }
  return worst;
}

}  // namespace kcaps
