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

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kcaps/graph.hpp"

namespace kcaps {

/// Named tensors plus free-form metadata. On-disk layout (docs/checkpoint_format.md):
///
///   magic "KCAPSCK1" | u64 LE manifest length | manifest JSON | payload
///
/// The manifest lists {name, shape, dtype, offset, nbytes} per entry with
/// offsets relative to the payload start; payload values are little-endian
/// IEEE-754 "f64" (or "f32" on read) or two's-complement "i8".
class Checkpoint {
 public:
  enum class Dtype { kF64, kI8 };

  nlohmann::json meta = nlohmann::json::object();

  /// kI8 requires every value to be an integer in [-128, 127].
  void put(const std::string& name, Tensor value, Dtype dtype = Dtype::kF64);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  /// Adds every parameter under `prefix + name`.
  void put_parameters(const ParameterStore& store, const std::string& prefix = "");
  /// Copies matching entries into the store. Every store parameter must be
  /// present with an identical shape.
  void load_parameters(ParameterStore& store, const std::string& prefix = "") const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::vector<Dtype> dtypes_;
};

}  // namespace kcaps
