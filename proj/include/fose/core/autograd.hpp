#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fose/core/tensor.hpp"

namespace fose {

/// Reverse-mode value node. Vars are cheap handles onto a shared node; ops in
/// nn/ops.hpp build the tape only when some input requires gradients and
/// taping is enabled, so frozen-weight evaluation is a plain forward pass.
class Var {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;  // reads this->grad, accumulates into parents

    void accum(const Tensor& g) {
      if (!grad.defined()) {
        grad = g.clone();
      } else {
        for (int64_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
      }
    }
  };

  Var() = default;
  explicit Var(Tensor v, bool requires_grad = false) : n_(std::make_shared<Node>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  Tensor& value_mut() { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool has_grad() const { return n_->grad.defined(); }
  const Tensor& grad() const { return n_->grad; }
  void zero_grad() { n_->grad = Tensor(); }

  Var detach() const { return Var(n_->value, false); }

  std::shared_ptr<Node> node() const { return n_; }

  static Var from_node(std::shared_ptr<Node> n) {
    Var v;
    v.n_ = std::move(n);
    return v;
  }

  /// Backpropagate from this node. Seeds with ones (use on scalar losses).
  void backward() {
    Tensor seed(n_->value.shape(), 1.0);
    backward(seed);
  }

  void backward(const Tensor& seed) {
    n_->accum(seed);
    // iterative post-order over the tape
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backfn && node->grad.defined()) node->backfn(*node);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Scoped tape switch (frozen-model evaluation, samplers, validation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
};

/// True when an op over these inputs must record a backward closure.
inline bool tape_needed(std::initializer_list<const Var*> ins) {
  if (!grad_enabled()) return false;
  for (const Var* v : ins)
    if (v && v->defined() && v->requires_grad()) return true;
  return false;
}

/// Helper for op implementations: make the output node wired to parents.
/// Taped outputs are marked requires_grad so downstream ops keep taping.
inline Var make_op_output(Tensor value, std::vector<Var> parents,
                          std::function<void(Var::Node&)> backfn) {
  auto n = std::make_shared<Var::Node>();
  n->value = std::move(value);
  bool need = grad_enabled();
  if (need) {
    bool any = false;
    for (auto& p : parents)
      if (p.defined() && p.requires_grad()) any = true;
    need = any;
  }
  if (need) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backfn = std::move(backfn);
  }
  return Var::from_node(std::move(n));
}

}  // namespace fose
