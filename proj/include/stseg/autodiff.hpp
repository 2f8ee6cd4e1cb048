#pragma once

// Reverse-mode automatic differentiation over Tensor.
//
// Every op returns a Var whose node records its inputs and a backward closure.
// The graph is built dynamically on each forward pass and torn down by
// backward(); calling backward() twice on the same loss is an error.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stseg/tensor.hpp"

namespace stseg {

// Test hook: names of ops whose backward is deliberately corrupted. Used by
// the gradcheck sentinel tests to prove the harness catches broken gradients.
inline std::set<std::string>& injected_faults() {
  static std::set<std::string> faults;
  return faults;
}
inline bool fault_injected(const std::string& op) { return injected_faults().count(op) != 0; }

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <Real T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily for interior nodes
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape(), T{0});
    return grad;
  }
};

template <Real T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad_buffer();
  }
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Leaves only: the optimizer updates parameters in place.
  Tensor<T>& mutable_value() {
    if (!node_->leaf) throw Error("mutable_value() on a non-leaf variable");
    return node_->value;
  }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_->requires_grad; }

  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_->requires_grad) node_->grad_buffer().fill(T{0});
  }

  Var detached() const { return Var(node_->value); }

  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

/// Creates the result node of an op. Inputs and the closure are only retained
/// when recording is on and at least one input needs a gradient.
template <Real T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> inputs, std::string op,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  n->leaf = false;
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

/// Backpropagates from a scalar loss. Gradients accumulate into every
/// reachable leaf with requires_grad; interior nodes are released afterwards.
template <Real T>
void backward(const Var<T>& loss) {
  auto root = loss.node();
  if (!root) throw Error("backward() on an undefined variable");
  if (loss.value().size() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (root->consumed) throw Error("graph already consumed: double backward is unsupported");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order without deep recursion.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && !child->leaf && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
  for (Node<T>* n : order) {
    n->inputs.clear();
    n->backward = nullptr;
    n->grad = Tensor<T>();
    n->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops with the per-channel broadcast rule.

enum class Broadcast { none, channel, channel_spatial };

namespace detail {

// Decides how b lines up against a: equal shapes, b=[C] against [..,C,H,W],
// or b=[C,H,W] against [B,C,H,W].
inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::none;
  if (b.size() == 1 && a.size() >= 3 && a[a.size() - 3] == b[0]) return Broadcast::channel;
  if (b.size() == 3 && a.size() == 4 && a[1] == b[0] && a[2] == b[1] && a[3] == b[2])
    return Broadcast::channel_spatial;
  throw ShapeError(std::string(op) + ": cannot combine " + to_string(a) + " with " + to_string(b));
}

template <typename F>
void for_each_broadcast(const Shape& a, Broadcast kind, F&& f) {
  const std::size_t n = numel(a);
  if (kind == Broadcast::none) {
    for (std::size_t i = 0; i < n; ++i) f(i, i);
  } else if (kind == Broadcast::channel) {
    const std::size_t c = a[a.size() - 3];
    const std::size_t plane = a[a.size() - 2] * a[a.size() - 1];
    for (std::size_t i = 0; i < n; ++i) f(i, (i / plane) % c);
  } else {
    const std::size_t m = a[1] * a[2] * a[3];
    for (std::size_t i = 0; i < n; ++i) f(i, i % m);
  }
}

}  // namespace detail

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto kind = detail::broadcast_kind(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  detail::for_each_broadcast(a.shape(), kind, [&](std::size_t i, std::size_t j) { out[i] += bv[j]; });
  return make_result<T>(std::move(out), {a.node(), b.node()}, "add", [kind](Node<T>& self) {
    auto& ga = *self.inputs[0];
    auto& gb = *self.inputs[1];
    const auto& g = self.grad;
    if (ga.requires_grad) {
      auto& buf = ga.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }
    if (gb.requires_grad) {
      auto& buf = gb.grad_buffer();
      detail::for_each_broadcast(self.value.shape(), kind, [&](std::size_t i, std::size_t j) { buf[j] += g[i]; });
    }
  });
}

template <Real T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const auto kind = detail::broadcast_kind(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  detail::for_each_broadcast(a.shape(), kind, [&](std::size_t i, std::size_t j) { out[i] -= bv[j]; });
  return make_result<T>(std::move(out), {a.node(), b.node()}, "sub", [kind](Node<T>& self) {
    auto& ga = *self.inputs[0];
    auto& gb = *self.inputs[1];
    const auto& g = self.grad;
    if (ga.requires_grad) {
      auto& buf = ga.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }
    if (gb.requires_grad) {
      auto& buf = gb.grad_buffer();
      detail::for_each_broadcast(self.value.shape(), kind, [&](std::size_t i, std::size_t j) { buf[j] -= g[i]; });
    }
  });
}

/// Hadamard product.
template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto kind = detail::broadcast_kind(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  detail::for_each_broadcast(a.shape(), kind, [&](std::size_t i, std::size_t j) { out[i] *= bv[j]; });
  return make_result<T>(std::move(out), {a.node(), b.node()}, "mul", [kind](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto& g = self.grad;
    const auto& av = na.value;
    const auto& bv = nb.value;
    if (na.requires_grad) {
      auto& buf = na.grad_buffer();
      detail::for_each_broadcast(self.value.shape(), kind,
                                 [&](std::size_t i, std::size_t j) { buf[i] += g[i] * bv[j]; });
    }
    if (nb.requires_grad) {
      auto& buf = nb.grad_buffer();
      detail::for_each_broadcast(self.value.shape(), kind,
                                 [&](std::size_t i, std::size_t j) { buf[j] += g[i] * av[i]; });
    }
  });
}

template <Real T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <Real T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <Real T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}

/// a * s + c for scalar constants.
template <Real T>
Var<T> affine(const Var<T>& a, T s, T c = T{0}) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v * s + c;
  return make_result<T>(std::move(out), {a.node()}, "affine", [s](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i] * s;
  });
}

template <Real T>
Var<T> scale(const Var<T>& a, T s) {
  return affine(a, s);
}

// ---------------------------------------------------------------------------
// Activations

template <Real T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <Real T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = stable_sigmoid(v);
  return make_result<T>(std::move(out), {x.node()}, "sigmoid", [](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const T sign = fault_injected("sigmoid") ? T{-1} : T{1};
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const T s = self.value[i];
      buf[i] += sign * self.grad[i] * s * (T{1} - s);
    }
  });
}

template <Real T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = std::tanh(v);
  return make_result<T>(std::move(out), {x.node()}, "tanh", [](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const T sign = fault_injected("tanh") ? T{-1} : T{1};
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const T t = self.value[i];
      buf[i] += sign * self.grad[i] * (T{1} - t * t);
    }
  });
}

/// max(0, x); the derivative at exactly 0 is taken as 0.
template <Real T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return make_result<T>(std::move(out), {x.node()}, "relu", [](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& buf = in.grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i)
      if (in.value[i] > T{0}) buf[i] += self.grad[i];
  });
}

template <Real T>
Var<T> log(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) {
    if (!(v > T{0})) throw NumericError("log of non-positive value");
    v = std::log(v);
  }
  return make_result<T>(std::move(out), {x.node()}, "log", [](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& buf = in.grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i] / in.value[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <Real T>
Var<T> sum(const Var<T>& x) {
  return make_result<T>(Tensor<T>::scalar(x.value().sum()), {x.node()}, "sum", [](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const T g = self.grad[0];
    for (auto& v : buf.storage()) v += g;
  });
}

template <Real T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Σ x·w against a constant weight tensor; scalarizes outputs for gradient probes.
template <Real T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  if (w.shape() != x.shape()) throw ShapeError("weighted_sum: weight shape mismatch");
  T acc{0};
  for (std::size_t i = 0; i < w.size(); ++i) acc += x.value()[i] * w[i];
  return make_result<T>(Tensor<T>::scalar(acc), {x.node()}, "weighted_sum", [w](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g * w[i];
  });
}

}  // namespace stseg
