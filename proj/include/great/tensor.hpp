// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace great {

using Shape = std::vector<std::size_t>;

/// Extent or layout disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid user configuration (image sizes, head counts, file contents).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values where finite ones were required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

// Backward rule: reads out.grad and accumulates into the inputs' grad slots.
using BackwardFn = std::function<void(const TensorImpl& out, std::span<const ImplPtr> inputs)>;

struct TapeNode {
  std::string_view op;
  std::vector<ImplPtr> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty: no gradient yet
  std::unique_ptr<TapeNode> node;
  std::uint64_t seq = 0;

  std::vector<double>& grad_slot() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{1};
  return counter;
}

inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}

/// Test hook: scales the incoming gradient of every node whose op matches.
struct BackwardFault {
  std::string op;
  double factor = 1.0;
};

inline const BackwardFault*& active_fault() {
  thread_local const BackwardFault* fault = nullptr;
  return fault;
}

}  // namespace detail

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Installs a backward fault for the current thread (gradient-check fault injection).
class ScopedBackwardFault {
 public:
  explicit ScopedBackwardFault(detail::BackwardFault fault) : fault_(std::move(fault)) {
    previous_ = detail::active_fault();
    detail::active_fault() = &fault_;
  }
  ~ScopedBackwardFault() { detail::active_fault() = previous_; }
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

 private:
  detail::BackwardFault fault_;
  const detail::BackwardFault* previous_ = nullptr;
};

/// Dense row-major float64 tensor handle.
///
/// Copies share storage. Data is immutable once constructed; only the
/// gradient slot changes (through backward() and zero_grad()). A tensor
/// produced by an operation on inputs that require gradients carries a
/// tape node describing how to propagate gradients back to those inputs.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->seq = detail::sequence_counter().fetch_add(1, std::memory_order_relaxed);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor eye(std::size_t n) {
    std::vector<double> data(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(data));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t size() const { return impl().data.size(); }
  std::span<const double> data() const { return impl().data; }
  double operator[](std::size_t i) const { return impl().data[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  bool on_tape() const { return impl().node != nullptr; }
  std::string_view op() const { return on_tape() ? impl().node->op : std::string_view("leaf"); }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }
  void zero_grad() const { impl_->grad.clear(); }

  /// Gradient as a tensor (zeros when absent).
  Tensor grad_tensor() const {
    return has_grad() ? Tensor(shape(), impl().grad) : Tensor::zeros(shape());
  }

  /// Same values, no tape history.
  Tensor detach(bool requires_grad = false) const { return Tensor(shape(), impl().data, requires_grad); }

  const detail::ImplPtr& impl_ptr() const { return impl_; }

  static Tensor from_impl(detail::ImplPtr impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  const detail::TensorImpl& impl() const {
    if (!impl_) throw std::logic_error("use of an undefined tensor");
    return *impl_;
  }

  detail::ImplPtr impl_;
};

namespace detail {

/// Builds an op result, recording a tape node when any input requires grad.
inline Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                          std::vector<Tensor> inputs, BackwardFn backward) {
  bool track = no_grad_depth() == 0 &&
               std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  Tensor out(std::move(shape), std::move(data), track);
  if (track) {
    auto node = std::make_unique<TapeNode>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.impl_ptr());
    node->backward = std::move(backward);
    out.impl_ptr()->node = std::move(node);
  }
  return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss.
///
/// Nodes are visited once each in decreasing creation order, which is the
/// reverse of forward execution. Gradients accumulate into every tensor that
/// requires grad, leaves included; repeated calls keep accumulating.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss");
  }
  if (!loss.on_tape()) {
    throw std::logic_error("backward() called on a tensor with no recorded operations");
  }

  std::vector<detail::TensorImpl*> order;
  std::vector<detail::TensorImpl*> stack{loss.impl_ptr().get()};
  std::unordered_set<const detail::TensorImpl*> seen;
  while (!stack.empty()) {
    detail::TensorImpl* t = stack.back();
    stack.pop_back();
    if (!t->node || !seen.insert(t).second) continue;
    order.push_back(t);
    for (const auto& in : t->node->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->seq > b->seq; });

  loss.impl_ptr()->grad_slot()[0] += 1.0;
  const detail::BackwardFault* fault = detail::active_fault();
  for (detail::TensorImpl* t : order) {
    if (t->grad.empty()) continue;
    if (fault && t->node->op == fault->op) {
      for (double& g : t->grad) g *= fault->factor;
    }
    t->node->backward(*t, t->node->inputs);
  }
}

}  // namespace great
