#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op that touches an
// input with requires_grad() produces a node that remembers its parents and
// a closure that pushes the output gradient back into them. A Graph is the
// topological order of those nodes as seen from a scalar loss; sweeping it
// once fills grad() on every reachable leaf and releases the closures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "icl_lab/errors.hpp"

namespace icl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  // Set once a backward sweep has passed through this node.
  bool swept = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty() && !swept; }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape.empty()) shape = {1};
    for (auto extent : shape) {
      if (extent == 0)
        throw DimensionError("tensor extents must be positive, got " +
                             to_string(shape));
    }
    if (numel(shape) != data.size())
      throw DimensionError("shape " + to_string(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto count = numel(shape.empty() ? Shape{1} : shape);
    return Tensor(std::move(shape), std::vector<T>(count, T(0)),
                  requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto count = numel(shape.empty() ? Shape{1} : shape);
    return Tensor(std::move(shape), std::vector<T>(count, value),
                  requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutable access is meant for leaves (parameters, inputs being built).
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (size() != 1)
      throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  T at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }

  // Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach() const {
    return Tensor(node_->shape, node_->data, false);
  }

  const NodePtr& node() const { return node_; }

  // Builds a non-leaf result. Records parents only when some input needs a
  // gradient, so inference on frozen tensors allocates no graph.
  static Tensor make_result(Shape shape, std::vector<T> data,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
#ifndef NDEBUG
    for (const T v : out.node_->data) {
      if (!std::isfinite(v)) {
        bool inputs_finite = true;
        for (const auto& in : inputs)
          for (const T u : in.data()) inputs_finite &= std::isfinite(u);
        if (inputs_finite)
          throw ContractError("non-finite value produced from finite inputs");
        break;
      }
    }
#endif
    const bool needs_grad =
        std::any_of(inputs.begin(), inputs.end(),
                    [](const Tensor& t) { return t.requires_grad(); });
    if (needs_grad) {
      out.node_->requires_grad = true;
      for (auto& in : inputs) {
        if (in.node_->swept && !in.node_->parents.empty())
          throw ReuseError("input belongs to a graph that was already swept");
        out.node_->parents.push_back(in.node_);
      }
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

 private:
  NodePtr node_;
};

// Topological order of every gradient-carrying node reachable from a loss.
template <typename T>
class Graph {
 public:
  using NodePtr = typename Tensor<T>::NodePtr;

  static Graph trace(const Tensor<T>& loss) {
    Graph g;
    g.root_ = loss.node();
    if (!loss.requires_grad()) return g;
    if (loss.node()->swept)
      throw ReuseError("graph producing this loss was already swept");
    // Iterative post-order DFS; parents precede children in order_.
    std::unordered_set<const detail::Node<T>*> seen;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        NodePtr parent = node->parents[next++];
        if (parent->requires_grad && seen.insert(parent.get()).second)
          stack.emplace_back(parent, 0);
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  std::size_t size() const { return order_.size(); }
  bool swept() const { return swept_; }

  // Positions of op nodes in order_; every parent index is smaller.
  bool is_topological() const {
    std::unordered_set<const detail::Node<T>*> placed;
    for (const auto& node : order_) {
      for (const auto& parent : node->parents)
        if (parent->requires_grad && !placed.count(parent.get())) return false;
      placed.insert(node.get());
    }
    return true;
  }

  void sweep() {
    if (swept_) throw ReuseError("backward called twice on the same graph");
    swept_ = true;
    if (order_.empty()) return;
    for (const auto& node : order_) {
      if (node->swept && !node->parents.empty())
        throw ReuseError("graph node was already swept by another backward");
    }
    auto& root_grad = root_->ensure_grad();
    root_grad[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto& node = **it;
      if (node.backward_fn) {
        for (auto& parent : node.parents)
          if (parent->requires_grad) parent->ensure_grad();
        node.backward_fn(node);
      }
    }
    // Interior nodes give up their closures and scratch gradients.
    for (const auto& node : order_) {
      if (!node->parents.empty()) {
        node->swept = true;
        node->backward_fn = nullptr;
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
    }
  }

 private:
  NodePtr root_;
  std::vector<NodePtr> order_;
  bool swept_ = false;
};

template <typename T>
void backward(const Tensor<T>& loss, Graph<T>& graph) {
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        to_string(loss.shape()));
  if (!loss.requires_grad())
    throw ContractError("loss does not depend on any requires_grad tensor");
  graph.sweep();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        to_string(loss.shape()));
  auto graph = Graph<T>::trace(loss);
  backward(loss, graph);
}

}  // namespace icl
