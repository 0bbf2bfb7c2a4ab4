// SPDX-License-Identifier: Apache-2.0

#include "relfsl/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "relfsl/error.hpp"
#include "relfsl/ops.hpp"

namespace relfsl {

std::size_t RegionGrid::region_of(std::size_t token) const {
  const std::size_t h = token / width, w = token % width;
  return (h / region_height()) * grid + w / region_width();
}

std::vector<std::size_t> RegionGrid::tokens_of(std::size_t region) const {
  const std::size_t rh = region_height(), rw = region_width();
  const std::size_t r0 = (region / grid) * rh, c0 = (region % grid) * rw;
  std::vector<std::size_t> out;
  out.reserve(rh * rw);
  for (std::size_t i = 0; i < rh; ++i) {
    for (std::size_t j = 0; j < rw; ++j) out.push_back((r0 + i) * width + c0 + j);
  }
  return out;
}

RegionGrid make_region_grid(std::size_t height, std::size_t width, std::size_t grid) {
  if (grid == 0 || height % grid != 0 || width % grid != 0) {
    std::string valid;
    for (std::size_t g = 1; g <= std::min(height, width); ++g) {
      if (height % g == 0 && width % g == 0) valid += (valid.empty() ? "" : ", ") + std::to_string(g);
    }
    throw ContractError("grid " + std::to_string(grid) + " does not divide a " + std::to_string(height) + "x" +
                        std::to_string(width) + " map; valid grids: " + valid);
  }
  return {height, width, grid};
}

template <typename T>
RegionPartition<T> partition_regions(const Tensor<T>& features, std::size_t grid) {
  if (features.rank() != 3) throw ShapeError("partition_regions: expected [C,H,W], got " + shape_string(features.shape()));
  const std::size_t C = features.dim(0), H = features.dim(1), W = features.dim(2);
  const auto g = make_region_grid(H, W, grid);
  const std::size_t rh = g.region_height(), rw = g.region_width();
  auto x = ops::reshape(features, {C, grid, rh, grid, rw});
  x = ops::permute(x, {1, 3, 2, 4, 0});
  auto tokens = ops::reshape(x, {grid * grid, rh * rw, C});
  auto descriptors = ops::mean(tokens, 1);
  return {tokens, descriptors};
}

template <typename T>
Tensor<T> region_affinity(const Tensor<T>& query_regions, const Tensor<T>& key_regions) {
  if (query_regions.rank() != 2 || key_regions.rank() != 2 || query_regions.dim(1) != key_regions.dim(1)) {
    throw ShapeError("region_affinity: incompatible region descriptors " + shape_string(query_regions.shape()) +
                     " and " + shape_string(key_regions.shape()));
  }
  return ops::matmul(query_regions, ops::transpose(key_regions));
}

template <typename T>
RoutingIndex topk_routing(const Tensor<T>& affinity, std::size_t k) {
  if (affinity.rank() != 2) throw ShapeError("topk_routing: expected [R_q,R_s], got " + shape_string(affinity.shape()));
  const std::size_t rows = affinity.dim(0), cols = affinity.dim(1);
  if (k < 1 || k > cols) {
    throw ContractError("topk_routing: k = " + std::to_string(k) + " outside [1, " + std::to_string(cols) + "]");
  }
  RoutingIndex out{rows, k, cols, {}};
  out.indices.reserve(rows * k);
  auto a = affinity.data();
  std::vector<std::size_t> order(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(order.begin(), order.end(), 0);
    const T* row = a.data() + r * cols;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t x, std::size_t y) { return row[x] > row[y]; });
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    out.indices.insert(out.indices.end(), chosen.begin(), chosen.end());
  }
  return out;
}

template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: incompatible Q " + shape_string(q.shape()) + ", K " + shape_string(k.shape()) +
                     ", V " + shape_string(v.shape()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  auto weights = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), scale), 1);
  return ops::matmul(weights, v);
}

template <typename T>
Tensor<T> routed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const RoutingIndex& routing,
                           const RegionGrid& query_grid, const RegionGrid& key_grid) {
  if (q.rank() != 2 || q.dim(0) != query_grid.num_tokens() || k.rank() != 2 || k.dim(0) != key_grid.num_tokens()) {
    throw ShapeError("routed_attention: token counts do not match the region grids (Q " + shape_string(q.shape()) +
                     ", K " + shape_string(k.shape()) + ")");
  }
  if (routing.rows != query_grid.num_regions() || routing.key_regions != key_grid.num_regions()) {
    throw ContractError("routed_attention: routing index does not match the region grids");
  }
  std::vector<Tensor<T>> outputs;
  std::vector<std::size_t> order;  // query token of each output row
  for (std::size_t r = 0; r < routing.rows; ++r) {
    std::vector<std::size_t> gathered;
    for (std::size_t j = 0; j < routing.k; ++j) {
      const std::size_t region = routing.at(r, j);
      if (region >= key_grid.num_regions()) throw ContractError("routed_attention: routing index out of range");
      auto members = key_grid.tokens_of(region);
      gathered.insert(gathered.end(), members.begin(), members.end());
    }
    const auto queries = query_grid.tokens_of(r);
    auto kg = ops::index_select(k, std::span<const std::size_t>(gathered));
    auto vg = ops::index_select(v, std::span<const std::size_t>(gathered));
    auto qr = ops::index_select(q, std::span<const std::size_t>(queries));
    outputs.push_back(vanilla_attention(qr, kg, vg));
    order.insert(order.end(), queries.begin(), queries.end());
  }
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
  return ops::index_select(ops::concat(outputs, 0), std::span<const std::size_t>(inverse));
}

MacCount flop_count(std::uint64_t n_q, std::uint64_t n_s, std::uint64_t d, std::uint64_t grid, std::uint64_t k) {
  const std::uint64_t regions = grid * grid;
  if (grid == 0 || n_q % regions != 0 || n_s % regions != 0) {
    throw ContractError("flop_count: grid^2 must divide the token counts");
  }
  if (k < 1 || k > regions) throw ContractError("flop_count: k must lie in [1, grid^2]");
  const std::uint64_t tokens_per_region = n_s / regions;
  MacCount out;
  out.vanilla = 2 * n_q * n_s * d;
  out.routed = 2 * regions * regions * d + 2 * n_q * (k * tokens_per_region) * d;
  return out;
}

#define RELFSL_INSTANTIATE(T)                                                                                 \
  template RegionPartition<T> partition_regions(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> region_affinity(const Tensor<T>&, const Tensor<T>&);                                    \
  template RoutingIndex topk_routing(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> vanilla_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> routed_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const RoutingIndex&, \
                                      const RegionGrid&, const RegionGrid&);

RELFSL_INSTANTIATE(float)
RELFSL_INSTANTIATE(double)

}  // namespace relfsl
