// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every function here is pure with respect to its
// inputs (batchnorm2d additionally updates the running-statistics buffers in
// training mode), registers a backward rule, and is covered by the gradcheck
// suite.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "relfsl/tensor.hpp"

namespace relfsl::ops {

// Elementwise (shapes must match exactly; there is no broadcasting).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> shift(const Tensor<T>& x, double offset);

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// Same product, every output summed over k in increasing order, so
// matmul_ordered(B^T, A^T) is exactly the transpose of matmul_ordered(A, B).
template <typename T>
Tensor<T> matmul_ordered(const Tensor<T>& a, const Tensor<T>& b);
// [B,M,K] x [B,K,N] -> [B,M,N]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);  // 2-D only

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Rows of x (axis 0) picked by `indices`; repeated indices allowed.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> indices);
/// Rows [begin, end) of x along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// Cross-correlation. x [B,C_in,H,W], weight [C_out,C_in,kh,kw], bias [C_out]
/// or undefined. Output [B,C_out,(H+2p-kh)/s+1,(W+2p-kw)/s+1].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

/// Per-channel normalization over (B,H,W). In training mode uses batch
/// statistics and folds them into the running buffers:
/// running = momentum * running + (1 - momentum) * batch (unbiased variance).
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, bool training, double momentum = 0.9, double eps = 1e-5);

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// 2x2 window, stride 2, floor on odd sizes. x [B,C,H,W].
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);  // -> [1]
template <typename T>
Tensor<T> mean(const Tensor<T>& x);  // -> [1]
template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis);  // drops `axis`
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

/// x / max(||x||_2, eps) along `axis`.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, double eps = 1e-8);

/// Channel-wise products of every position with its d x d neighbourhood,
/// zero outside the map. x [B,C,H,W] -> [B,C,d,d,H,W] with
/// out[b,c,i,j,h,w] = x[b,c,h,w] * x[b,c,h+i-r,w+j-r], r = (d-1)/2.
template <typename T>
Tensor<T> neighbor_products(const Tensor<T>& x, std::size_t window);

}  // namespace relfsl::ops
