#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seamless/tensor.hpp"

namespace seamless {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
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

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Receives d(loss)/d(value) and accumulates into the parents.
  std::function<void(const Tensor&)> backward;

  void accumulate(const Tensor& g) {
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

/// Handle to a value in the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient after backward(); zeros if nothing flowed here.
  const Tensor& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }

  const NodePtr& node() const { return node_; }

  /// Builds an op output. When recording is off, or no input needs a
  /// gradient, the result is a detached constant.
  static Var make(Tensor value, std::vector<Var> inputs,
                  std::function<void(const Tensor&, std::span<const NodePtr>)> backward) {
    Var out(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const Var& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    std::vector<NodePtr> parents;
    parents.reserve(inputs.size());
    for (const Var& in : inputs) parents.push_back(in.node_);
    out.node_->parents = parents;
    out.node_->backward = [parents = std::move(parents),
                           fn = std::move(backward)](const Tensor& g) { fn(g, parents); };
    return out;
  }

  Var detach() const { return Var(value()); }

 private:
  NodePtr node_;
};

/// Reverse-mode sweep from a scalar. Gradients accumulate into leaves; the
/// recorded graph is released afterwards.
inline void backward(const Var& root) {
  if (!root.requires_grad()) return;
  if (root.value().size() != 1) throw ShapeError("backward() needs a scalar root");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad = Tensor(root.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad);
  }
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad = Tensor();
    }
  }
}

/// Adds g into a parent's gradient when that parent participates in backprop.
inline void accumulate_into(const NodePtr& parent, const Tensor& g) {
  if (parent->requires_grad) parent->accumulate(g);
}

}  // namespace seamless
