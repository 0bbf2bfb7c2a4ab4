// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of backward rules.
//
// The operation under test is reduced to a scalar through a fixed random
// projection, L(x) = sum(op(x) * R), so that every output element contributes.
// Analytic gradients come from backward() at the requested precision. The
// numeric reference is a central difference of L evaluated in 64-bit at the
// same (precision-rounded) point, so in 32-bit mode the check measures the
// float backward rule rather than float round-off in the reference.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "relfsl/ops.hpp"
#include "relfsl/tensor.hpp"

namespace relfsl {

enum class Precision { f32, f64 };

struct GradcheckOptions {
  Precision precision = Precision::f64;
  double epsilon = 1e-5;
  double tolerance = 1e-6;
  int max_resamples = 20;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  int resampled = 0;        // degenerate sample points that were redrawn
  std::size_t checked = 0;  // gradient entries compared
};

inline double gradcheck_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> as_leaves(const std::vector<Tensor<double>>& xs, bool requires_grad) {
  std::vector<Tensor<T>> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(tensor_cast<T>(x, requires_grad));
  return out;
}

// <r, (op(x+) - op(x-)) / (2 eps)>, differenced per output element so that
// outputs untouched by the perturbation cancel exactly.
template <typename Op>
double projected_difference(Op& op, std::vector<Tensor<double>>& xs, std::size_t input, std::size_t element,
                            double epsilon, const std::vector<double>& projection) {
  NoGradGuard guard;
  auto values = xs[input].mutable_data();
  const double original = values[element];
  values[element] = original + epsilon;
  const auto plus = op(xs);
  values[element] = original - epsilon;
  const auto minus = op(xs);
  values[element] = original;
  auto p = plus.data(), m = minus.data();
  long double total = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) {
    total += static_cast<long double>(p[i] - m[i]) * projection[i];
  }
  return static_cast<double>(total / (2.0L * epsilon));
}

template <typename T, typename Op>
std::vector<std::vector<double>> analytic_gradients(Op& op, const std::vector<Tensor<double>>& xs,
                                                    const std::vector<double>& projection, const Shape& out_shape) {
  auto leaves = as_leaves<T>(xs, true);
  auto out = op(leaves);
  auto weights = tensor_cast<T>(Tensor<double>::from_data(out_shape, projection));
  backward(ops::sum(ops::mul(out, weights)));
  std::vector<std::vector<double>> grads;
  for (const auto& leaf : leaves) {
    std::vector<double> g(leaf.numel(), 0.0);
    if (leaf.has_grad()) {
      auto src = leaf.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(src[i]);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// A 32-bit backward cannot resolve a gradient entry far below the largest
// entry of the same input to 1e-4 relative, so such points count as degenerate.
inline constexpr double kFloatConditioning = 1e-3;

// Returns the max relative error, or a negative value when the point is
// within 10 * epsilon of a kink or (32-bit) badly conditioned.
template <typename Op>
double check_point(Op& op, std::vector<Tensor<double>> xs, const GradcheckOptions& opt, std::uint64_t seed,
                   std::size_t& checked) {
  if (opt.precision == Precision::f32) {
    for (auto& x : xs) x = tensor_cast<double>(tensor_cast<float>(x));
  }
  Shape out_shape;
  {
    NoGradGuard guard;
    KinkMonitor monitor;
    auto out = op(xs);
    if (monitor.margin() < 10.0 * opt.epsilon) return -1.0;
    out_shape = out.shape();
  }
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> projection(shape_numel(out_shape));
  for (auto& r : projection) r = normal(rng);
  if (opt.precision == Precision::f32) {
    for (auto& r : projection) r = static_cast<double>(static_cast<float>(r));
  }

  std::vector<std::vector<double>> numeric(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    numeric[i].resize(xs[i].numel());
    double largest = 0.0;
    for (std::size_t e = 0; e < xs[i].numel(); ++e) {
      numeric[i][e] = projected_difference(op, xs, i, e, opt.epsilon, projection);
      largest = std::max(largest, std::abs(numeric[i][e]));
    }
    if (opt.precision == Precision::f32) {
      for (double n : numeric[i]) {
        if (n != 0.0 && std::abs(n) < kFloatConditioning * largest) return -1.0;
      }
    }
  }

  auto analytic = opt.precision == Precision::f32 ? analytic_gradients<float>(op, xs, projection, out_shape)
                                                  : analytic_gradients<double>(op, xs, projection, out_shape);
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t e = 0; e < xs[i].numel(); ++e) {
      worst = std::max(worst, gradcheck_rel_error(analytic[i][e], numeric[i][e]));
      ++checked;
    }
  }
  return worst;
}

}  // namespace detail

/// Checks `op` at a fixed point. `op` must be callable with
/// std::vector<Tensor<float>> and std::vector<Tensor<double>>.
template <typename Op>
GradcheckReport gradcheck(Op op, const std::vector<Tensor<double>>& inputs, const GradcheckOptions& opt,
                          std::uint64_t seed = 0) {
  GradcheckReport report;
  std::vector<Tensor<double>> xs;
  for (const auto& x : inputs) xs.push_back(x.detach());
  const double err = detail::check_point(op, xs, opt, seed, report.checked);
  if (err < 0) {
    report.max_rel_error = std::numeric_limits<double>::infinity();
    report.pass = false;
    return report;
  }
  report.max_rel_error = err;
  report.pass = err <= opt.tolerance;
  return report;
}

/// Checks `op` at points drawn by `generate(rng)`, redrawing degenerate
/// points (counted in `resampled`).
template <typename Op, typename Gen>
GradcheckReport gradcheck_sampled(Op op, Gen generate, std::uint64_t seed, const GradcheckOptions& opt) {
  GradcheckReport report;
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt <= opt.max_resamples; ++attempt) {
    std::vector<Tensor<double>> xs = generate(rng);
    const double err = detail::check_point(op, xs, opt, seed + static_cast<std::uint64_t>(attempt), report.checked);
    if (err < 0) {
      ++report.resampled;
      continue;
    }
    report.max_rel_error = err;
    report.pass = err <= opt.tolerance;
    return report;
  }
  report.max_rel_error = std::numeric_limits<double>::infinity();
  return report;
}

}  // namespace relfsl
