// SPDX-License-Identifier: Apache-2.0
//
// Bi-level routing attention: region partition, region affinity, top-k
// routing, token attention over the gathered regions, and MAC accounting.
// Tokens of an H x W map are numbered in raster order, t = h * W + w.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "relfsl/tensor.hpp"

namespace relfsl {

struct RegionGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t grid = 0;  // regions per side

  std::size_t num_tokens() const { return height * width; }
  std::size_t num_regions() const { return grid * grid; }
  std::size_t region_height() const { return height / grid; }
  std::size_t region_width() const { return width / grid; }
  std::size_t tokens_per_region() const { return region_height() * region_width(); }
  std::size_t region_of(std::size_t token) const;
  /// Member tokens of a region in raster order.
  std::vector<std::size_t> tokens_of(std::size_t region) const;
};

/// Throws ContractError listing the valid grids when `grid` does not divide both sides.
RegionGrid make_region_grid(std::size_t height, std::size_t width, std::size_t grid);

/// Per query region, the k selected key regions, ascending.
struct RoutingIndex {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::size_t key_regions = 0;
  std::vector<std::size_t> indices;  // rows * k

  std::size_t at(std::size_t row, std::size_t j) const { return indices[row * k + j]; }
};

template <typename T>
struct RegionPartition {
  Tensor<T> tokens;       // [grid^2, tokens_per_region, C]
  Tensor<T> descriptors;  // [grid^2, C], mean of member tokens
};

/// F [C,H,W] tiled into grid x grid regions.
template <typename T>
RegionPartition<T> partition_regions(const Tensor<T>& features, std::size_t grid);

/// Q_r [R_q,C] x K_r [R_s,C]^T -> [R_q,R_s].
template <typename T>
Tensor<T> region_affinity(const Tensor<T>& query_regions, const Tensor<T>& key_regions);

/// k largest entries per row; ties go to the lower index.
template <typename T>
RoutingIndex topk_routing(const Tensor<T>& affinity, std::size_t k);

/// softmax(Q K^T / sqrt(d)) V with Q [N_q,d], K [N_s,d], V [N_s,d_v].
template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// Each query token attends only to the tokens of the key regions routed to
/// its own region.
template <typename T>
Tensor<T> routed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const RoutingIndex& routing,
                           const RegionGrid& query_grid, const RegionGrid& key_grid);

struct MacCount {
  std::uint64_t vanilla = 0;
  std::uint64_t routed = 0;

  double ratio() const { return static_cast<double>(vanilla) / static_cast<double>(routed); }
};

/// vanilla = 2 n_q n_s d; routed = 2 R^2 d + 2 n_q (k * tokens_per_region) d
/// with R = grid^2 regions on each side and tokens_per_region = n_s / R.
MacCount flop_count(std::uint64_t n_q, std::uint64_t n_s, std::uint64_t d, std::uint64_t grid, std::uint64_t k);

}  // namespace relfsl
