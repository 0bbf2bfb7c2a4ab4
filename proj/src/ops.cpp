// SPDX-License-Identifier: Apache-2.0

#include <array>
#include "relfsl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gemm.hpp"

namespace relfsl::ops {

namespace {

using acc_t = double;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op, const char* what) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(x.shape()));
  }
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](detail::BackwardContext<T>& ctx) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = ctx.input_grad(k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
    if (auto* g = ctx.input_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= ctx.grad_out[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](detail::BackwardContext<T>& ctx) {
    const auto& x = ctx.input_data(0);
    const auto& y = ctx.input_data(1);
    if (auto* g = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * y[i];
    }
    if (auto* g = ctx.input_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * f;
  return make_result<T>(x.shape(), std::move(out), "scale", {x}, [f](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * f;
    }
  });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& x, double offset) {
  const T o = static_cast<T>(offset);
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + o;
  return make_result<T>(x.shape(), std::move(out), "shift", {x}, [](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
  });
}

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::gemm(a.data().data(), false, b.data().data(), false, out.data(), m, n, k, false);
  return make_result<T>({m, n}, std::move(out), "matmul", {a, b}, [m, n, k](detail::BackwardContext<T>& ctx) {
    const T* go = ctx.grad_out.data();
    if (auto* g = ctx.input_grad(0)) detail::gemm(go, false, ctx.input_data(1).data(), true, g->data(), m, k, n, true);
    if (auto* g = ctx.input_grad(1)) detail::gemm(ctx.input_data(0).data(), true, go, false, g->data(), k, n, m, true);
  });
}

template <typename T>
Tensor<T> matmul_ordered(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_ordered", "lhs");
  require_rank(b, 2, "matmul_ordered", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul_ordered: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::gemm_ordered(a.data().data(), b.data().data(), out.data(), m, n, k);
  return make_result<T>({m, n}, std::move(out), "matmul_ordered", {a, b}, [m, n, k](detail::BackwardContext<T>& ctx) {
    const T* go = ctx.grad_out.data();
    if (auto* g = ctx.input_grad(0)) detail::gemm(go, false, ctx.input_data(1).data(), true, g->data(), m, k, n, true);
    if (auto* g = ctx.input_grad(1)) detail::gemm(ctx.input_data(0).data(), true, go, false, g->data(), k, n, m, true);
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 3, "bmm", "lhs");
  require_rank(b, 3, "bmm", "rhs");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    throw ShapeError("bmm: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(a.data().data() + i * m * k, false, b.data().data() + i * k * n, false, out.data() + i * m * n, m,
                 n, k, false);
  }
  return make_result<T>({batch, m, n}, std::move(out), "bmm", {a, b},
                        [batch, m, n, k](detail::BackwardContext<T>& ctx) {
                          const T* go = ctx.grad_out.data();
                          auto* ga = ctx.input_grad(0);
                          auto* gb = ctx.input_grad(1);
                          const T* av = ctx.input_data(0).data();
                          const T* bv = ctx.input_data(1).data();
                          for (std::size_t i = 0; i < batch; ++i) {
                            if (ga) {
                              detail::gemm(go + i * m * n, false, bv + i * k * n, true, ga->data() + i * m * k, m, k,
                                           n, true);
                            }
                            if (gb) {
                              detail::gemm(av + i * m * k, true, go + i * m * n, false, gb->data() + i * k * n, k, n,
                                           m, true);
                            }
                          }
                        });
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), "reshape", {x}, [](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
  });
}

namespace {

// Offset into the input for every output element of a permutation.
std::vector<std::size_t> permutation_offsets(const Shape& in_shape, const std::vector<std::size_t>& axes,
                                             Shape& out_shape) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  out_shape.resize(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> offsets(total);
  std::vector<std::size_t> index(rank, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < total; ++o) {
    offsets[o] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++index[d];
      offset += strides[d];
      if (index[d] < out_shape[d]) break;
      offset -= strides[d] * index[d];
      index[d] = 0;
    }
  }
  return offsets;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw ShapeError("permute: expected " + std::to_string(rank) + " axes");
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape;
  auto offsets = std::make_shared<std::vector<std::size_t>>(permutation_offsets(x.shape(), axes, out_shape));
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = v[(*offsets)[o]];
  return make_result<T>(std::move(out_shape), std::move(out), "permute", {x},
                        [offsets](detail::BackwardContext<T>& ctx) {
                          if (auto* g = ctx.input_grad(0)) {
                            for (std::size_t o = 0; o < offsets->size(); ++o) (*g)[(*offsets)[o]] += ctx.grad_out[o];
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x, 2, "transpose", "input");
  return permute(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw ShapeError("concat: shape mismatch " + shape_string(first) + " vs " + shape_string(p.shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  auto split = split_at(out_shape, axis, "concat");
  std::vector<T> out(shape_numel(out_shape));
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * split.inner;
    auto v = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy(v.begin() + static_cast<std::ptrdiff_t>(o * w), v.begin() + static_cast<std::ptrdiff_t>((o + 1) * w),
                out.begin() + static_cast<std::ptrdiff_t>(o * split.n * split.inner + start));
    }
    widths->push_back(w);
    start += w;
  }
  const std::size_t row = split.n * split.inner;
  const std::size_t outer = split.outer;
  return make_result<T>(std::move(out_shape), std::move(out), "concat", parts,
                        [widths, row, outer](detail::BackwardContext<T>& ctx) {
                          std::size_t begin = 0;
                          for (std::size_t k = 0; k < widths->size(); ++k) {
                            const std::size_t w = (*widths)[k];
                            if (auto* g = ctx.input_grad(k)) {
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t i = 0; i < w; ++i) (*g)[o * w + i] += ctx.grad_out[o * row + begin + i];
                              }
                            }
                            begin += w;
                          }
                        });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("index_select: empty index list");
  const std::size_t rows = x.dim(0);
  const std::size_t row = x.numel() / rows;
  for (auto i : indices) {
    if (i >= rows) {
      throw ContractError("index_select: index " + std::to_string(i) + " out of range for " + std::to_string(rows) +
                          " rows");
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<T> out(indices.size() * row);
  auto v = x.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(indices[r] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  return make_result<T>(std::move(out_shape), std::move(out), "index_select", {x},
                        [idx, row](detail::BackwardContext<T>& ctx) {
                          if (auto* g = ctx.input_grad(0)) {
                            for (std::size_t r = 0; r < idx->size(); ++r) {
                              for (std::size_t i = 0; i < row; ++i) (*g)[(*idx)[r] * row + i] += ctx.grad_out[r * row + i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) throw ContractError("slice_rows: invalid range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(x, std::span<const std::size_t>(idx));
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t spatial() const { return h_out * w_out; }
};

constexpr std::size_t kIm2colBudget = std::size_t{1} << 22;  // elements per column buffer

// Output columns [ow_begin, ow_end) read input columns inside the map for
// kernel column j; the rest of the row is padding.
struct ColumnRange {
  std::size_t begin, end;
};

inline ColumnRange valid_columns(const ConvGeometry& g, std::size_t j) {
  // iw = ow * stride + j - pad must lie in [0, w)
  const auto lo = static_cast<std::ptrdiff_t>(g.pad) - static_cast<std::ptrdiff_t>(j);
  std::size_t begin = lo <= 0 ? 0 : (static_cast<std::size_t>(lo) + g.stride - 1) / g.stride;
  const auto hi = static_cast<std::ptrdiff_t>(g.w) + static_cast<std::ptrdiff_t>(g.pad) - static_cast<std::ptrdiff_t>(j);
  std::size_t end = hi <= 0 ? 0 : std::min(g.w_out, (static_cast<std::size_t>(hi) - 1) / g.stride + 1);
  begin = std::min(begin, g.w_out);
  end = std::max(end, begin);
  return {begin, end};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t b0, std::size_t nb, T* cols) {
  const std::size_t L = g.spatial();
  const std::size_t width = nb * L;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((ci * g.kh + i) * g.kw + j) * width;
        const auto cr = valid_columns(g, j);
        for (std::size_t bl = 0; bl < nb; ++bl) {
          const T* plane = x + ((b0 + bl) * g.c_in + ci) * g.h * g.w;
          T* dst = row + bl * L;
          for (std::size_t oh = 0; oh < g.h_out; ++oh) {
            T* out = dst + oh * g.w_out;
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill_n(out, g.w_out, T{0});
              continue;
            }
            const T* line = plane + static_cast<std::size_t>(ih) * g.w;
            const std::size_t first = cr.begin * g.stride + j - g.pad;  // input column of output cr.begin
            std::fill(out, out + cr.begin, T{0});
            if (g.stride == 1) {
              std::copy(line + first, line + first + (cr.end - cr.begin), out + cr.begin);
            } else {
              for (std::size_t ow = cr.begin; ow < cr.end; ++ow) out[ow] = line[first + (ow - cr.begin) * g.stride];
            }
            std::fill(out + cr.end, out + g.w_out, T{0});
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, std::size_t b0, std::size_t nb, T* dx) {
  const std::size_t L = g.spatial();
  const std::size_t width = nb * L;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((ci * g.kh + i) * g.kw + j) * width;
        const auto cr = valid_columns(g, j);
        for (std::size_t bl = 0; bl < nb; ++bl) {
          T* plane = dx + ((b0 + bl) * g.c_in + ci) * g.h * g.w;
          const T* src = row + bl * L;
          for (std::size_t oh = 0; oh < g.h_out; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* line = plane + static_cast<std::size_t>(ih) * g.w;
            const std::size_t first = cr.begin * g.stride + j - g.pad;
            const T* in = src + oh * g.w_out;
            for (std::size_t ow = cr.begin; ow < cr.end; ++ow) line[first + (ow - cr.begin) * g.stride] += in[ow];
          }
        }
      }
    }
  }
}

std::size_t chunk_images(const ConvGeometry& g) {
  const std::size_t per_image = g.patch() * g.spatial();
  return std::clamp<std::size_t>(kIm2colBudget / std::max<std::size_t>(per_image, 1), 1, g.batch);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input channels of input " + shape_string(x.shape()) + " and weight " +
                     shape_string(weight.shape()) + " differ");
  }
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " does not match weight " +
                     shape_string(weight.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_string(weight.shape()) + " larger than padded input " +
                     shape_string(x.shape()));
  }
  g.h_out = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.w_out = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t L = g.spatial();
  const std::size_t K = g.patch();
  const std::size_t chunk = chunk_images(g);
  std::vector<T> out(g.batch * g.c_out * L);
  std::vector<T> cols(K * chunk * L);
  std::vector<T> y(g.c_out * chunk * L);
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.batch - b0);
    im2col(xv, g, b0, nb, cols.data());
    detail::gemm(wv, false, cols.data(), false, y.data(), g.c_out, nb * L, K, false);
    for (std::size_t bl = 0; bl < nb; ++bl) {
      for (std::size_t co = 0; co < g.c_out; ++co) {
        const T bco = has_bias ? bias.data()[co] : T{0};
        const T* src = y.data() + co * nb * L + bl * L;
        T* dst = out.data() + ((b0 + bl) * g.c_out + co) * L;
        for (std::size_t l = 0; l < L; ++l) dst[l] = src[l] + bco;
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>({g.batch, g.c_out, g.h_out, g.w_out}, std::move(out), "conv2d", std::move(inputs),
                        [g, has_bias](detail::BackwardContext<T>& ctx) {
                          const std::size_t L = g.spatial();
                          const std::size_t K = g.patch();
                          auto* gx = ctx.input_grad(0);
                          auto* gw = ctx.input_grad(1);
                          auto* gb = has_bias ? ctx.input_grad(2) : nullptr;
                          const T* go = ctx.grad_out.data();
                          if (gb) {
                            for (std::size_t b = 0; b < g.batch; ++b) {
                              for (std::size_t co = 0; co < g.c_out; ++co) {
                                acc_t s = 0;
                                const T* src = go + (b * g.c_out + co) * L;
                                for (std::size_t l = 0; l < L; ++l) s += src[l];
                                (*gb)[co] += static_cast<T>(s);
                              }
                            }
                          }
                          if (!gx && !gw) return;
                          const std::size_t chunk = chunk_images(g);
                          std::vector<T> cols(K * chunk * L);
                          std::vector<T> dy(g.c_out * chunk * L);
                          const T* xv = ctx.input_data(0).data();
                          const T* wv = ctx.input_data(1).data();
                          for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
                            const std::size_t nb = std::min(chunk, g.batch - b0);
                            for (std::size_t co = 0; co < g.c_out; ++co) {
                              for (std::size_t bl = 0; bl < nb; ++bl) {
                                std::copy_n(go + ((b0 + bl) * g.c_out + co) * L, L, dy.data() + co * nb * L + bl * L);
                              }
                            }
                            if (gw) {
                              im2col(xv, g, b0, nb, cols.data());
                              detail::gemm(dy.data(), false, cols.data(), true, gw->data(), g.c_out, K, nb * L, true);
                            }
                            if (gx) {
                              detail::gemm(wv, true, dy.data(), false, cols.data(), K, nb * L, g.c_out, false);
                              col2im_add(cols.data(), g, b0, nb, gx->data());
                            }
                          }
                        });
}

// ---------------------------------------------------------------- batchnorm

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, bool training, double momentum, double eps) {
  require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : std::array<const Tensor<T>*, 4>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != C) {
      throw ShapeError("batchnorm2d: per-channel tensor " + shape_string(p->shape()) + " does not match input " +
                       shape_string(x.shape()));
    }
  }
  const std::size_t count = B * HW;
  if (training && count < 2) throw ContractError("batchnorm2d: training mode needs more than one value per channel");

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  for (std::size_t c = 0; c < C; ++c) {
    acc_t mu = 0, var = 0;
    if (training) {
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = xv.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) mu += p[i];
      }
      mu /= static_cast<acc_t>(count);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = xv.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const acc_t unbiased = var / static_cast<acc_t>(count - 1);
      var /= static_cast<acc_t>(count);
      rm[c] = static_cast<T>(momentum * rm[c] + (1.0 - momentum) * mu);
      rv[c] = static_cast<T>(momentum * rv[c] + (1.0 - momentum) * unbiased);
    } else {
      mu = rm[c];
      var = rv[c];
    }
    const acc_t is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = static_cast<T>(is);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t base = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const acc_t xh = (xv[base + i] - mu) * is;
        (*xhat)[base + i] = static_cast<T>(xh);
        out[base + i] = static_cast<T>(gv[c] * xh + bv[c]);
      }
    }
  }
  return make_result<T>(x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
                        [xhat, inv_std, B, C, HW, training](detail::BackwardContext<T>& ctx) {
                          const auto& go = ctx.grad_out;
                          const auto& gv = ctx.input_data(1);
                          auto* gx = ctx.input_grad(0);
                          auto* gg = ctx.input_grad(1);
                          auto* gbeta = ctx.input_grad(2);
                          const acc_t n = static_cast<acc_t>(B * HW);
                          for (std::size_t c = 0; c < C; ++c) {
                            acc_t sum_g = 0, sum_gx = 0;
                            for (std::size_t b = 0; b < B; ++b) {
                              const std::size_t base = (b * C + c) * HW;
                              for (std::size_t i = 0; i < HW; ++i) {
                                sum_g += go[base + i];
                                sum_gx += static_cast<acc_t>(go[base + i]) * (*xhat)[base + i];
                              }
                            }
                            if (gg) (*gg)[c] += static_cast<T>(sum_gx);
                            if (gbeta) (*gbeta)[c] += static_cast<T>(sum_g);
                            if (!gx) continue;
                            const acc_t k = static_cast<acc_t>(gv[c]) * (*inv_std)[c];
                            for (std::size_t b = 0; b < B; ++b) {
                              const std::size_t base = (b * C + c) * HW;
                              for (std::size_t i = 0; i < HW; ++i) {
                                acc_t d = go[base + i];
                                if (training) d -= (sum_g + (*xhat)[base + i] * sum_gx) / n;
                                (*gx)[base + i] += static_cast<T>(k * d);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto v = x.data();
  if (KinkMonitor::active()) {
    double margin = std::numeric_limits<double>::infinity();
    for (auto e : v) margin = std::min(margin, std::abs(static_cast<double>(e)));
    KinkMonitor::observe(margin);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > T{0} ? v[i] : T{0};
  return make_result<T>(x.shape(), std::move(out), "relu", {x}, [](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      const auto& v = ctx.input_data(0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (v[i] > T{0}) (*g)[i] += ctx.grad_out[i];
      }
    }
  });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  require_rank(x, 4, "maxpool2d", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw ShapeError("maxpool2d: input too small " + shape_string(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto v = x.data();
  const bool monitor = KinkMonitor::active();
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t plane = bc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = plane + (2 * oh) * W + 2 * ow;
        double runner_up = -std::numeric_limits<double>::infinity();
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = plane + (2 * oh + dy) * W + 2 * ow + dx;
            if (idx == best) continue;
            if (v[idx] > v[best]) {
              runner_up = v[best];
              best = idx;
            } else {
              runner_up = std::max(runner_up, static_cast<double>(v[idx]));
            }
          }
        }
        const std::size_t o = (bc * Ho + oh) * Wo + ow;
        out[o] = v[best];
        (*argmax)[o] = best;
        // Exact ties come from clamped inputs (zeros after a ReLU) and do not move apart.
        if (monitor && static_cast<double>(v[best]) != runner_up) {
          margin = std::min(margin, static_cast<double>(v[best]) - runner_up);
        }
      }
    }
  }
  if (monitor) KinkMonitor::observe(margin);
  return make_result<T>({B, C, Ho, Wo}, std::move(out), "maxpool2d", {x}, [argmax](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      for (std::size_t o = 0; o < argmax->size(); ++o) (*g)[(*argmax)[o]] += ctx.grad_out[o];
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "softmax");
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      acc_t mx = -std::numeric_limits<acc_t>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max<acc_t>(mx, v[base + i * s.inner]);
      acc_t total = 0;
      for (std::size_t i = 0; i < s.n; ++i) total += std::exp(static_cast<acc_t>(v[base + i * s.inner]) - mx);
      for (std::size_t i = 0; i < s.n; ++i) {
        out[base + i * s.inner] = static_cast<T>(std::exp(static_cast<acc_t>(v[base + i * s.inner]) - mx) / total);
      }
    }
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), "softmax", {x}, [y, s](detail::BackwardContext<T>& ctx) {
    auto* g = ctx.input_grad(0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        acc_t dot = 0;
        for (std::size_t i = 0; i < s.n; ++i) {
          dot += static_cast<acc_t>(ctx.grad_out[base + i * s.inner]) * (*y)[base + i * s.inner];
        }
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          (*g)[k] += static_cast<T>((*y)[k] * (ctx.grad_out[k] - dot));
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "log_softmax");
  std::vector<T> out(x.numel());
  auto probs = std::make_shared<std::vector<T>>(x.numel());
  auto v = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      acc_t mx = -std::numeric_limits<acc_t>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max<acc_t>(mx, v[base + i * s.inner]);
      acc_t total = 0;
      for (std::size_t i = 0; i < s.n; ++i) total += std::exp(static_cast<acc_t>(v[base + i * s.inner]) - mx);
      const acc_t lse = mx + std::log(total);
      for (std::size_t i = 0; i < s.n; ++i) {
        const std::size_t k = base + i * s.inner;
        out[k] = static_cast<T>(v[k] - lse);
        (*probs)[k] = static_cast<T>(std::exp(v[k] - lse));
      }
    }
  }
  return make_result<T>(x.shape(), std::move(out), "log_softmax", {x}, [probs, s](detail::BackwardContext<T>& ctx) {
    auto* g = ctx.input_grad(0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        acc_t total = 0;
        for (std::size_t i = 0; i < s.n; ++i) total += ctx.grad_out[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          (*g)[k] += static_cast<T>(ctx.grad_out[k] - (*probs)[k] * total);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  acc_t s = 0;
  for (auto v : x.data()) s += v;
  return make_result<T>({1}, {static_cast<T>(s)}, "sum", {x}, [](detail::BackwardContext<T>& ctx) {
    if (auto* g = ctx.input_grad(0)) {
      for (auto& e : *g) e += ctx.grad_out[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "sum");
  std::vector<T> out(s.outer * s.inner);
  auto v = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      acc_t total = 0;
      for (std::size_t i = 0; i < s.n; ++i) total += v[(o * s.n + i) * s.inner + in];
      out[o * s.inner + in] = static_cast<T>(total);
    }
  }
  return make_result<T>(drop_axis(x.shape(), axis), std::move(out), "sum_axis", {x},
                        [s](detail::BackwardContext<T>& ctx) {
                          auto* g = ctx.input_grad(0);
                          if (!g) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t i = 0; i < s.n; ++i) {
                              for (std::size_t in = 0; in < s.inner; ++in) {
                                (*g)[(o * s.n + i) * s.inner + in] += ctx.grad_out[o * s.inner + in];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const auto n = split_at(x.shape(), axis, "mean").n;
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, double eps) {
  const auto s = split_at(x.shape(), axis, "l2_normalize");
  std::vector<T> out(x.numel());
  auto denom = std::make_shared<std::vector<acc_t>>(s.outer * s.inner);
  auto clipped = std::make_shared<std::vector<bool>>(s.outer * s.inner);
  auto v = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      acc_t sq = 0;
      for (std::size_t i = 0; i < s.n; ++i) sq += static_cast<acc_t>(v[base + i * s.inner]) * v[base + i * s.inner];
      const acc_t norm = std::sqrt(sq);
      const acc_t d = std::max(norm, eps);
      (*denom)[o * s.inner + in] = d;
      (*clipped)[o * s.inner + in] = norm <= eps;
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = static_cast<T>(v[base + i * s.inner] / d);
    }
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), "l2_normalize", {x},
                        [y, denom, clipped, s](detail::BackwardContext<T>& ctx) {
                          auto* g = ctx.input_grad(0);
                          if (!g) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t in = 0; in < s.inner; ++in) {
                              const std::size_t base = o * s.n * s.inner + in;
                              const acc_t d = (*denom)[o * s.inner + in];
                              acc_t dot = 0;
                              if (!(*clipped)[o * s.inner + in]) {
                                for (std::size_t i = 0; i < s.n; ++i) {
                                  dot += static_cast<acc_t>(ctx.grad_out[base + i * s.inner]) * (*y)[base + i * s.inner];
                                }
                              }
                              for (std::size_t i = 0; i < s.n; ++i) {
                                const std::size_t k = base + i * s.inner;
                                (*g)[k] += static_cast<T>((ctx.grad_out[k] - (*y)[k] * dot) / d);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- self-correlation

template <typename T>
Tensor<T> neighbor_products(const Tensor<T>& x, std::size_t window) {
  require_rank(x, 4, "neighbor_products", "input");
  if (window % 2 == 0) throw ContractError("neighbor_products: window must be odd, got " + std::to_string(window));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  const std::size_t d = window;
  std::vector<T> out(B * C * d * d * H * W, T{0});
  auto v = x.data();
  auto visit = [=](auto&& fn) {
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          for (std::size_t h = 0; h < H; ++h) {
            const auto nh = static_cast<std::ptrdiff_t>(h + i) - r;
            if (nh < 0 || nh >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t w = 0; w < W; ++w) {
              const auto nw = static_cast<std::ptrdiff_t>(w + j) - r;
              if (nw < 0 || nw >= static_cast<std::ptrdiff_t>(W)) continue;
              const std::size_t o = (((bc * d + i) * d + j) * H + h) * W + w;
              fn(o, bc * H * W + h * W + w, bc * H * W + static_cast<std::size_t>(nh) * W + static_cast<std::size_t>(nw));
            }
          }
        }
      }
    }
  };
  visit([&](std::size_t o, std::size_t a, std::size_t b) { out[o] = v[a] * v[b]; });
  return make_result<T>({B, C, d, d, H, W}, std::move(out), "neighbor_products", {x},
                        [visit](detail::BackwardContext<T>& ctx) {
                          auto* g = ctx.input_grad(0);
                          if (!g) return;
                          const auto& v = ctx.input_data(0);
                          visit([&](std::size_t o, std::size_t a, std::size_t b) {
                            (*g)[a] += ctx.grad_out[o] * v[b];
                            (*g)[b] += ctx.grad_out[o] * v[a];
                          });
                        });
}

// ---------------------------------------------------------------- instantiations

#define RELFSL_INSTANTIATE_OPS(T)                                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> scale(const Tensor<T>&, double);                                                          \
  template Tensor<T> shift(const Tensor<T>&, double);                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> matmul_ordered(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                                              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                       \
  template Tensor<T> index_select(const Tensor<T>&, std::span<const std::size_t>);                             \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);   \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                 bool, double, double);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                                   \
  template Tensor<T> maxpool2d(const Tensor<T>&);                                                              \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                   \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                                   \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                                       \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                                      \
  template Tensor<T> l2_normalize(const Tensor<T>&, std::size_t, double);                                      \
  template Tensor<T> neighbor_products(const Tensor<T>&, std::size_t);

RELFSL_INSTANTIATE_OPS(float)
RELFSL_INSTANTIATE_OPS(double)

#undef RELFSL_INSTANTIATE_OPS

}  // namespace relfsl::ops
