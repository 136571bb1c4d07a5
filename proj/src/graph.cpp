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

#include "kcaps/graph.hpp"

#include <cstring>
#include <stdexcept>

namespace kcaps {

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) {
    throw std::invalid_argument("ParameterStore: duplicate parameter '" + name +
                                "'");
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->zero_grad();
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
  }
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

bool ParameterStore::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::uint64_t ParameterStore::checksum() const {
  // FNV-1a over names and raw value bytes.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) {
    mix(p->name.data(), p->name.size());
    mix(p->value.data(), p->value.numel() * sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Var

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("Var: not attached to a graph");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(id_); }
const Tensor& Var::grad() const { return graph().grad(id_); }
bool Var::requires_grad() const { return graph().requires_grad(id_); }

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(const std::string& name, Tensor value, bool requires_grad) {
  if (inputs_.count(name)) {
    throw std::invalid_argument("Graph::input: duplicate input '" + name + "'");
  }
  Node n;
  n.op = "input:" + name;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  inputs_[name] = nodes_.size() - 1;
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(Parameter& p) {
  Node n;
  n.op = "param:" + p.name;
  n.value = p.value;
  if (!frozen_params_) {
    n.param = &p;
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::named_input(const std::string& name) const {
  auto it = inputs_.find(name);
  if (it == inputs_.end()) {
    throw std::out_of_range("Graph: no input named '" + name + "'");
  }
  return Var(const_cast<Graph*>(this), it->second);
}

void Graph::check_owned(const Var& v, const char* what) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw std::logic_error(std::string(what) +
                           ": variable does not belong to this graph (was "
                           "forward run on it?)");
  }
}

Var Graph::record(const char* op, Tensor value, const std::vector<Var>& inputs,
                  BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite output of shape " +
                       shape_str(value.shape()));
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    check_owned(in, op);
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.shape() != n.value.shape()) {
    // Lazily materialised zeros for nodes no gradient reached.
    const_cast<Node&>(n).grad = Tensor(n.value.shape());
  }
  return n.grad;
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw ShapeError("backward: gradient " + shape_str(g.shape()) +
                     " for node '" + n.op + "' of shape " +
                     shape_str(n.value.shape()));
  }
  Tensor& buf = grad_buffer(id);
  double* dst = buf.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < buf.numel(); ++i) dst[i] += src[i];
}

void Graph::backward(const Var& loss) {
  check_owned(loss, "backward");
  if (nodes_[loss.id_].value.numel() != 1) {
    throw ShapeError("backward: implicit seed needs a scalar loss, got " +
                     shape_str(nodes_[loss.id_].value.shape()));
  }
  backward(loss, Tensor(nodes_[loss.id_].value.shape(), 1.0));
}

void Graph::backward(const Var& loss, const Tensor& seed) {
  check_owned(loss, "backward");
  const std::size_t root = loss.id_;
  if (seed.shape() != nodes_[root].value.shape()) {
    throw ShapeError("backward: seed " + shape_str(seed.shape()) +
                     " does not match output " +
                     shape_str(nodes_[root].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  visits_ = 0;
  if (!nodes_[root].requires_grad) return;
  nodes_[root].grad = seed;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.param) {
      Tensor& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = Tensor(n.value.shape());
      for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

void Graph::clear() {
  nodes_.clear();
  inputs_.clear();
  visits_ = 0;
}

}  // namespace kcaps
