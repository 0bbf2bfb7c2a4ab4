// SPDX-License-Identifier: Apache-2.0

#include "relfsl/tensor.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace relfsl {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_kink_active = false;
thread_local double t_kink_margin = std::numeric_limits<double>::infinity();
std::atomic<bool> g_nan_check{false};

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void set_nan_check(bool enabled) { g_nan_check.store(enabled); }
bool nan_check_enabled() { return g_nan_check.load(std::memory_order_relaxed); }

KinkMonitor::KinkMonitor() : previous_active_(t_kink_active), previous_margin_(t_kink_margin) {
  t_kink_active = true;
  t_kink_margin = std::numeric_limits<double>::infinity();
}

KinkMonitor::~KinkMonitor() {
  t_kink_active = previous_active_;
  t_kink_margin = previous_margin_;
}

double KinkMonitor::margin() const { return t_kink_margin; }
bool KinkMonitor::active() { return t_kink_active; }
void KinkMonitor::observe(double margin) { t_kink_margin = std::min(t_kink_margin, margin); }

namespace detail {

template <typename T>
void scan_nan(std::string_view op, const std::vector<T>& data) {
  for (auto v : data) {
    if (std::isnan(v)) throw NumericError("NaN produced by " + std::string(op));
  }
}

template void scan_nan(std::string_view, const std::vector<float>&);
template void scan_nan(std::string_view, const std::vector<double>&);

}  // namespace detail

template <typename T>
ComputationRecord<T> computation_record(const Tensor<T>& root) {
  using Impl = detail::TensorImpl<T>;
  ComputationRecord<T> record;
  if (!root.defined() || !root.impl_ptr()->node) return record;

  // Iterative post-order DFS.
  std::unordered_set<const Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack;
  stack.emplace_back(root.impl_ptr(), 0);
  visited.insert(root.impl_ptr().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& inputs = impl->node->inputs;
    if (next < inputs.size()) {
      auto child = inputs[next++];
      if (child->node && visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      record.order.push_back(impl);
      stack.pop_back();
    }
  }
  return record;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not depend on tracked inputs");

  auto record = computation_record(loss);
  loss.impl_ptr()->grad_buffer()[0] += T{1};
  for (auto it = record.order.rbegin(); it != record.order.rend(); ++it) {
    auto& impl = **it;
    if (impl.grad.empty()) continue;
    detail::BackwardContext<T> ctx{impl.grad, impl.node->inputs};
    impl.node->backward(ctx);
  }
}

template ComputationRecord<float> computation_record(const Tensor<float>&);
template ComputationRecord<double> computation_record(const Tensor<double>&);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace relfsl
