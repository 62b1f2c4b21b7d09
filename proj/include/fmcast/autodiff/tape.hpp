// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fmcast/tensor.hpp"

namespace fmcast {

template <class T>
struct Node {
  Tensor<T> value;
  const Tensor<T>* external = nullptr;  // leaves may alias caller-owned storage
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  const Tensor<T>& val() const noexcept { return external ? *external : value; }
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(val().shape());
    return grad;
  }
  /// Gradient buffer of input i, or null when that input needs no gradient.
  Tensor<T>* input_grad(std::size_t i) {
    auto& in = *inputs[i];
    return in.requires_grad ? &in.grad_buffer() : nullptr;
  }
  const Tensor<T>& input_val(std::size_t i) const { return inputs[i]->val(); }
};

/// Handle to a graph value.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->val(); }
  const Shape4& shape() const { return node_->val().shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  /// Accumulated gradient; zeros if the value never received one.
  Tensor<T> grad() const { return node_->grad.empty() ? Tensor<T>(value().shape()) : node_->grad; }
  bool valid() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records differentiable operations in creation order, which is a topological
/// order; backward walks it in reverse so every node is visited once. With
/// recording off nothing is retained and intermediate values are released as
/// soon as their handles go out of scope.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var<T>(std::move(n));
  }
  /// Constant that aliases `v`; `v` must outlive every use of the handle.
  Var<T> constant_ref(const Tensor<T>& v) {
    auto n = std::make_shared<Node<T>>();
    n->external = &v;
    return Var<T>(std::move(n));
  }
  Var<T> leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return register_leaf(std::move(n));
  }
  Var<T> leaf_ref(const Tensor<T>& v) {
    auto n = std::make_shared<Node<T>>();
    n->external = &v;
    return register_leaf(std::move(n));
  }

  /// Wraps an op result. The backward functor reads node.grad and accumulates
  /// into the inputs' gradient buffers.
  Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (recording_ && needs) {
      n->requires_grad = true;
      for (auto& in : inputs) n->inputs.push_back(in.node());
      n->backward = std::move(backward);
      nodes_.push_back(n);
    }
    return Var<T>(std::move(n));
  }

  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) fail(ErrorKind::Shape, "backward needs a scalar loss, got shape ", loss.shape());
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
  }

  /// Drops the recorded graph (parameter leaves keep their gradients only as
  /// long as a handle to them exists).
  void clear() { nodes_.clear(); }

 private:
  Var<T> register_leaf(std::shared_ptr<Node<T>> n) {
    n->requires_grad = recording_;
    if (recording_) nodes_.push_back(n);
    return Var<T>(std::move(n));
  }

  bool recording_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

}  // namespace fmcast
