// SPDX-License-Identifier: Apache-2.0
//
// Self-correlational representation (SCR) and cross-correlational attention
// (CCA). Functions take batched maps; a rank-3 [C,H,W] argument is treated as
// a batch of one where noted.
//
// Correlation tensors are laid out [P, H_q, W_q, H_s, W_s], one slice per
// query-support pair.

#pragma once

#include <array>
#include <optional>
#include <random>
#include <vector>

#include "relfsl/nn.hpp"
#include "relfsl/routing.hpp"

namespace relfsl {

// ---------------------------------------------------------------- SCR

/// Z [B,C,H,W] (or [C,H,W]) -> R [B,C,d,d,H,W] (or [C,d,d,H,W]) with
/// R[c,i,j,h,w] = Zn[c,h,w] * Zn[c,h+i-r,w+j-r], Zn channel-normalized, zero
/// outside the map.
template <typename T>
Tensor<T> self_correlation(const Tensor<T>& z, std::size_t window);

template <typename T>
struct ScrParams {
  std::size_t channels = 0;
  std::size_t window = 0;
  Tensor<T> reduce;  // [C/4, C, 1, 1]
  BatchNorm2d<T> reduce_bn;
  std::vector<Tensor<T>> window_convs;  // (d-1)/2 x [C/4, C/4, 3, 3], unpadded
  std::vector<BatchNorm2d<T>> window_bns;
  Tensor<T> expand;       // [C, C/4, 1, 1]
  Tensor<T> expand_bias;  // [C]

  /// Random stack; the last convolution starts at zero so F = Z initially.
  static ScrParams make(std::size_t channels, std::size_t window, std::mt19937_64& rng);
  std::size_t hidden() const { return reduce.dim(0); }
  void collect(NamedTensors<T>& params, NamedTensors<T>& buffers) const;
};

/// F = Z + g(R). g convolves each position's C x d x d correlation block down
/// to C x 1 x 1 through a C/4 bottleneck.
template <typename T>
Tensor<T> scr_transform(const Tensor<T>& r, const Tensor<T>& z, ScrParams<T>& params, bool training);

// ---------------------------------------------------------------- CCA

/// Cosine similarity of every query position with every support position.
/// F_q [C,H,W], F_s [C,H,W] -> [H_q,W_q,H_s,W_s].
template <typename T>
Tensor<T> cross_correlation(const Tensor<T>& fq, const Tensor<T>& fs);

/// All pairs (query i, support j), pair index i * N_s + j.
/// F_q [N_q,C,H,W], F_s [N_s,C,H,W] -> [N_q*N_s, H,W,H,W].
template <typename T>
Tensor<T> cross_correlation_pairs(const Tensor<T>& fq, const Tensor<T>& fs);

template <typename T>
struct MatchingParams {
  std::size_t channels = 0;
  // Block 0: query plane 1 -> 1, support plane 1 -> c.
  // Block 1: query plane c -> 1, support plane 1 -> 1.
  // All 3x3 with padding 1 and bias; ReLU between the blocks.
  std::array<Tensor<T>, 2> q_weight, q_bias, s_weight, s_bias;

  /// C' = C: block 0 carries +C and -C in channels 0 and 1, block 1 recombines them.
  static MatchingParams identity(std::size_t channels);
  /// identity() plus N(0, noise^2) on every weight.
  static MatchingParams make(std::size_t channels, double noise, std::mt19937_64& rng);
  void collect(NamedTensors<T>& params) const;
};

/// [P,Hq,Wq,Hs,Ws] (or [Hq,Wq,Hs,Ws]) -> same shape.
template <typename T>
Tensor<T> convolutional_matching(const Tensor<T>& correlation, const MatchingParams<T>& params);

/// Support positions routed to each query position and vice versa.
struct PairRouting {
  RegionGrid grid;
  RoutingIndex query_side;    // query regions -> support regions
  RoutingIndex support_side;  // support regions -> query regions
};

template <typename T>
struct AttentionMaps {
  Tensor<T> a_q;  // [P,Hq,Wq]
  Tensor<T> a_s;  // [P,Hs,Ws]
};

/// m_q = mean of C' over the (routed) support positions, A_q = softmax(m_q / t)
/// over query positions; A_s likewise with roles swapped. `routing` holds
/// one entry per pair or is empty for the dense mean.
template <typename T>
AttentionMaps<T> co_attention_maps(const Tensor<T>& refined, const std::vector<PairRouting>& routing,
                                   double temperature);

/// Routing for every (query i, support j) pair from 1x1 projections of the
/// features. q_proj, k_proj [C,d]; region descriptors are the mean projected
/// tokens. Computed without gradient.
template <typename T>
std::vector<PairRouting> route_pairs(const Tensor<T>& fq, const Tensor<T>& fs, const Tensor<T>& q_proj,
                                     const Tensor<T>& k_proj, std::size_t grid, std::size_t k);

/// Uniform maps (every entry 1 / (H W)).
template <typename T>
AttentionMaps<T> uniform_attention_maps(std::size_t pairs, std::size_t height, std::size_t width);

/// embedding[p,c] = sum_hw A[p,h,w] F[p,c,h,w]. F [P,C,H,W], A [P,H,W] -> [P,C]
/// (rank-3 F and rank-2 A give [C]).
template <typename T>
Tensor<T> attention_pool(const Tensor<T>& features, const Tensor<T>& attention);

}  // namespace relfsl
