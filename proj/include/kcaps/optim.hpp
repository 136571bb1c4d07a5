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
#include <vector>

#include "kcaps/checkpoint.hpp"
#include "kcaps/graph.hpp"

namespace kcaps {

struct AdamOptions {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction (the usual PyTorch defaults).
class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions opts);

  void step();
  void zero_grad() { store_.zero_grad(); }
  std::uint64_t steps() const { return steps_; }
  const AdamOptions& options() const { return opts_; }

  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  ParameterStore& store_;
  AdamOptions opts_;
  std::vector<Tensor> m_, v_;
  std::uint64_t steps_ = 0;
};

}  // namespace kcaps
