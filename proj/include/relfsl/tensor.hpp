// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap shared handle. Every primitive in ops.hpp produces a new
// tensor and, when gradient recording is enabled and some input requires a
// gradient, attaches a Node holding the inputs and a backward rule. Calling
// backward() on a scalar replays the recorded nodes in reverse topological
// order, accumulating gradients into every tensor that requires one.

#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relfsl/error.hpp"

namespace relfsl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct BackwardContext;

template <typename T>
using BackwardFn = std::function<void(BackwardContext<T>&)>;

template <typename T>
struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T>
struct BackwardContext {
  const std::vector<T>& grad_out;
  std::span<const std::shared_ptr<TensorImpl<T>>> inputs;

  const std::vector<T>& input_data(std::size_t i) const { return inputs[i]->data; }
  const Shape& input_shape(std::size_t i) const { return inputs[i]->shape; }
  /// Gradient buffer of input i, or nullptr when that input is not tracked.
  std::vector<T>* input_grad(std::size_t i) const {
    return inputs[i]->requires_grad ? &inputs[i]->grad_buffer() : nullptr;
  }
};

}  // namespace detail

// Gradient recording is a per-thread switch; evaluation workers disable it.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Keeps freed activation buffers in the process heap (glibc) so that
// training steps reuse them instead of faulting in fresh pages. Process-wide;
// intended for executables.
void retain_freed_memory();

// When on, every primitive scans its output and throws NumericError on NaN.
void set_nan_check(bool enabled);
bool nan_check_enabled();

// Smallest distance to a non-differentiable point seen by kinked primitives
// (relu: |x|; maxpool: gap between the window max and runner-up) while a
// KinkMonitor is active on this thread.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  double margin() const;
  static bool active();
  static void observe(double margin);

 private:
  bool previous_active_;
  double previous_margin_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_string(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const T> data() const { return impl().data; }
  const std::vector<T>& values() const { return impl().data; }

  /// Writable view of a leaf's values (parameters, buffers). Forbidden on
  /// tensors produced by a recorded primitive.
  std::span<T> mutable_data() {
    if (impl().node) throw ContractError("cannot mutate a tensor produced by a recorded operation");
    return impl().data;
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_string(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag) {
    if (impl().node) throw ContractError("requires_grad can only be set on leaf tensors");
    impl().requires_grad = flag;
  }
  bool is_leaf() const { return impl().node == nullptr; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  void zero_grad() { impl().grad.clear(); }

  /// Copy of the values with no history.
  Tensor detach() const { return from_data(shape(), impl().data, false); }

  std::string_view op_name() const { return impl().node ? impl().node->op : std::string_view("leaf"); }

  // Internal access for primitives and the tape.
  const std::shared_ptr<detail::TensorImpl<T>>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  detail::TensorImpl<T>& impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename U, typename T>
Tensor<U> tensor_cast(const Tensor<T>& t, bool requires_grad = false) {
  std::vector<U> out(t.numel());
  auto src = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
  return Tensor<U>::from_data(t.shape(), std::move(out), requires_grad);
}

namespace detail {

template <typename T>
void scan_nan(std::string_view op, const std::vector<T>& data);

}  // namespace detail

/// Builds a primitive's output and records its node when needed.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op,
                      std::vector<Tensor<T>> inputs, detail::BackwardFn<T> backward) {
  if (nan_check_enabled()) detail::scan_nan(op, data);
  auto out = Tensor<T>::from_data(std::move(shape), std::move(data));
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    auto node = std::make_shared<detail::Node<T>>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
    node->backward = std::move(backward);
    out.impl_ptr()->requires_grad = true;
    out.impl_ptr()->node = std::move(node);
  }
  return out;
}

/// The recorded operations reachable from a tensor, in topological order
/// (inputs before consumers). Each node appears once.
template <typename T>
struct ComputationRecord {
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> order;

  std::vector<std::string_view> op_names() const {
    std::vector<std::string_view> names;
    names.reserve(order.size());
    for (const auto& impl : order) names.push_back(impl->node->op);
    return names;
  }
};

template <typename T>
ComputationRecord<T> computation_record(const Tensor<T>& root);

/// Populates .grad on every tracked tensor that the scalar `loss` depends on.
template <typename T>
void backward(const Tensor<T>& loss);

extern template ComputationRecord<float> computation_record(const Tensor<float>&);
extern template ComputationRecord<double> computation_record(const Tensor<double>&);
extern template void backward(const Tensor<float>&);
extern template void backward(const Tensor<double>&);

}  // namespace relfsl
