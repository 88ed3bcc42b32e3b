// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major tensors that record a dynamic computation graph.
//
// A Tensor is a cheap shared handle onto an immutable node. Operations never
// mutate their inputs; they allocate a new node whose backward rule is itself
// written in terms of differentiable operations, so gradients obtained with
// create_graph=true can be differentiated again.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "textdistill/error.hpp"

namespace textdistill {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor;
template <class T>
class Graph;

namespace detail {

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

// Backward rule: given the node's own output handle and the incoming gradient,
// return one gradient per input (undefined where `needs[i]` is false).
template <class T>
using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>& self, const Tensor<T>& grad,
                                                        const std::vector<bool>& needs)>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<NodePtr<T>> inputs;
  std::function<void(Node&)> forward;
  BackwardFn<T> backward;
};

inline std::uint64_t next_seq() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

template <class T>
Graph<T>*& active_graph() {
  static thread_local Graph<T>* graph = nullptr;
  return graph;
}

}  // namespace detail

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw Error(Errc::ShapeMismatch, "shape " + shape_str(shape) + " holds " +
                                           std::to_string(numel_of(shape)) + " values, got " +
                                           std::to_string(values.size()));
    }
    for (T v : values) {
      if (!std::isfinite(v)) throw Error(Errc::NonFiniteResult, "non-finite value in tensor literal");
    }
    node_ = std::make_shared<detail::Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  std::vector<T> to_vector() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op_name() const { return node_->op; }
  bool is_leaf() const { return !node_->backward; }

  T item() const {
    if (numel() != 1) throw Error(Errc::NotScalar, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t flat) const { return node_->value[flat]; }

  /// A fresh leaf holding a copy of the values and no history.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->value, requires_grad);
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->value.begin(), node_->value.end()));
  }

  const detail::NodePtr<T>& node() const { return node_; }
  static Tensor from_node(detail::NodePtr<T> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  detail::NodePtr<T> node_;
};

/// Append-only record of the operation nodes built on this thread while the
/// graph is active and recording. Inputs always precede outputs, so replaying
/// the records in order re-derives every activation from the leaves.
template <class T>
class Graph {
 public:
  enum class Mode { Recording, Frozen };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(const detail::NodePtr<T>& node) {
    if (mode_ == Mode::Recording) nodes_.push_back(node);
  }

  void freeze() { mode_ = Mode::Frozen; }
  Mode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::NodePtr<T>>& nodes() const { return nodes_; }

  /// Re-executes every recorded forward rule in order; returns the number of
  /// nodes whose recomputed values differ bitwise from the stored ones.
  std::size_t replay() {
    std::size_t mismatched = 0;
    for (const auto& node : nodes_) {
      std::vector<T> before = node->value;
      node->forward(*node);
      if (std::memcmp(before.data(), node->value.data(), before.size() * sizeof(T)) != 0) ++mismatched;
    }
    return mismatched;
  }

 private:
  std::vector<detail::NodePtr<T>> nodes_;
  Mode mode_ = Mode::Recording;
};

/// Makes `graph` the recording target for this thread while alive.
template <class T>
class GraphScope {
 public:
  explicit GraphScope(Graph<T>& graph) : previous_(detail::active_graph<T>()) {
    detail::active_graph<T>() = &graph;
  }
  ~GraphScope() { detail::active_graph<T>() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<T>* previous_;
};

namespace detail {

template <class T>
void check_finite(const Node<T>& node) {
  for (T v : node.value) {
    if (!std::isfinite(v)) throw Error(Errc::NonFiniteResult, std::string("op ") + node.op);
  }
}

// Builds an operation node. `forward` fills node.value from node.inputs.
// History is kept only when grad mode is on and some input requires grad.
template <class T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> forward, BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->op = name;
  node->shape = std::move(shape);
  node->value.assign(numel_of(node->shape), T(0));
  node->seq = next_seq();
  bool track = false;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    track = track || in.requires_grad();
    node->inputs.push_back(in.node());
  }
  track = track && grad_mode();
  forward(*node);
  check_finite(*node);
  if (track) {
    node->requires_grad = true;
    node->forward = std::move(forward);
    node->backward = std::move(backward);
    if (auto* graph = active_graph<T>()) graph->record(node);
  } else {
    node->inputs.clear();
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

}  // namespace textdistill
