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
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kcaps/tensor.hpp"

namespace kcaps {

/// A named trainable leaf. `grad` accumulates across backward passes until
/// zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape()); }
};

/// Owns parameters with stable addresses, in insertion order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t total_values() const;

  void zero_grad();
  /// Order-sensitive hash of every parameter value; used to assert that a
  /// code path left the parameters untouched.
  std::uint64_t checksum() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

class Graph;

/// Handle to a node on a Graph tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Gradient of the last backward() seed with respect to this node.
  const Tensor& grad() const;
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var input(const std::string& name, Tensor value, bool requires_grad = false);
  Var param(Parameter& p);

  /// When frozen, param() records parameters as constants so backward never
  /// touches Parameter::grad.
  void set_frozen_parameters(bool frozen) { frozen_params_ = frozen; }
  bool frozen_parameters() const { return frozen_params_; }

  /// Appends an op node. Throws NumericError if `value` is not finite.
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward);

  void backward(const Var& loss);
  void backward(const Var& loss, const Tensor& seed);

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }
  Var named_input(const std::string& name) const;
  std::string op_name(std::size_t id) const { return nodes_.at(id).op; }
  void clear();

  // Accessors used by op backward rules.
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input_id(std::size_t id, std::size_t k) const {
    return nodes_[id].inputs[k];
  }
  /// grad(id) += g when the node requires a gradient.
  void accumulate(std::size_t id, const Tensor& g);
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  void check_owned(const Var& v, const char* what) const;

  std::deque<Node> nodes_;  // stable references while the tape grows
  std::map<std::string, std::size_t> inputs_;
  std::size_t visits_ = 0;
  bool frozen_params_ = false;
};

}  // namespace kcaps
