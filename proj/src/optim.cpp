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

#include "kcaps/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kcaps {

Adam::Adam(ParameterStore& store, AdamOptions opts) : store_(store), opts_(opts) {
  if (!(opts_.lr > 0.0)) throw std::invalid_argument("Adam: learning rate must be > 0");
  for (const Parameter* p : store_.all()) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(opts_.beta1, t);
  const double c2 = 1.0 - std::pow(opts_.beta2, t);
  auto params = store_.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
      p.value[i] -= opts_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
    }
  }
}

void Adam::save_state(Checkpoint& ck) const {
  auto params = store_.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    ck.put("adam.m/" + params[k]->name, m_[k]);
    ck.put("adam.v/" + params[k]->name, v_[k]);
  }
  ck.meta["adam_steps"] = steps_;
}

void Adam::load_state(const Checkpoint& ck) {
  auto params = store_.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = ck.get("adam.m/" + params[k]->name);
    v_[k] = ck.get("adam.v/" + params[k]->name);
    if (m_[k].shape() != params[k]->value.shape()) {
      throw ShapeError("Adam::load_state: moment shape mismatch for " + params[k]->name);
    }
  }
  steps_ = ck.meta.at("adam_steps").get<std::uint64_t>();
}

}  // namespace kcaps
