#pragma once

// Dense row-major tensors with a reverse-mode autodiff graph.
//
// A Tensor is a shared handle to a TensorImpl. Ops create a new impl that
// keeps strong references to its parents plus a closure implementing the
// backward rule; the graph is therefore a DAG owned from the output side and
// freed as soon as the last handle to the output goes away.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rfcnn/errors.hpp"
#include "rfcnn/random.hpp"

namespace rfcnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  Leaf,
  Add,
  Mul,
  Sum,
  Relu,
  Sigmoid,
  Conv2d,
  MaxPool2d,
  SumPool2d,
  BatchNorm2d,
  ChannelBias,
  GlobalAvgPool,
  Linear,
  BceWithLogits,
  ShakeCombine,
};

namespace detail {

/// Thread-local switch: when false, ops never attach graph nodes.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first backward touches the node
  bool requires_grad = false;
  OpKind op = OpKind::Leaf;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads `self.grad`, accumulates into parents' grads.
  std::function<void(TensorImpl& self)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
  }
};

}  // namespace detail

/// RAII guard that disables graph construction on this thread.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() : impl_(std::make_shared<Impl>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  static Tensor randn(Shape shape, RngStream& rng, T stddev = T{1}, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal()) * stddev;
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor uniform(Shape shape, RngStream& rng, T lo, T hi, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  const Shape& shape() const noexcept { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const noexcept { return impl_->shape.size(); }
  std::size_t numel() const noexcept { return impl_->data.size(); }

  std::span<T> data() noexcept { return impl_->data; }
  std::span<const T> data() const noexcept { return impl_->data; }
  std::vector<T>& values() noexcept { return impl_->data; }
  const std::vector<T>& values() const noexcept { return impl_->data; }

  bool has_grad() const noexcept { return !impl_->grad.empty(); }
  std::span<T> grad() noexcept { return impl_->grad; }
  std::span<const T> grad() const noexcept { return impl_->grad; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const noexcept { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }

  OpKind op() const noexcept { return impl_->op; }
  bool is_leaf() const noexcept { return !impl_->backward_fn; }

  /// Same data, no graph attachment.
  Tensor detach() const { return Tensor(shape(), values(), false); }

  const std::shared_ptr<Impl>& impl() const noexcept { return impl_; }
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<Impl> impl_;
};

namespace detail {

/// Builds an op result. Graph links are attached only when grad mode is on
/// and some parent requires grad.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, OpKind op,
                      std::vector<std::shared_ptr<TensorImpl<T>>> parents,
                      std::function<void(TensorImpl<T>&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  const bool needs = grad_enabled() && std::any_of(parents.begin(), parents.end(),
                                                   [](const auto& p) { return p->requires_grad; });
  if (needs) {
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(impl));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Leaf grads accumulate across
/// calls; interior grads are recomputed from scratch each time.
template <class T>
void backward(const Tensor<T>& root) {
  using Impl = detail::TensorImpl<T>;
  if (root.numel() != 1) throw ArgumentError("backward() needs a scalar root, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) throw ArgumentError("backward() root does not require grad");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Impl* n : order) {
    if (n->backward_fn) {
      n->grad.assign(n->data.size(), T{0});
    } else {
      n->ensure_grad();
    }
  }
  order.back()->grad[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace rfcnn
