// SPDX-License-Identifier: Apache-2.0

#include "relfsl/relational.hpp"

#include <cmath>

#include "relfsl/error.hpp"
#include "relfsl/ops.hpp"

namespace relfsl {

namespace {

template <typename T>
Tensor<T> as_batch(const Tensor<T>& x, std::size_t batched_rank) {
  if (x.rank() == batched_rank) return x;
  if (x.rank() + 1 == batched_rank) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return ops::reshape(x, s);
  }
  throw ShapeError("expected rank " + std::to_string(batched_rank - 1) + " or " + std::to_string(batched_rank) +
                   ", got " + shape_string(x.shape()));
}

template <typename T>
Tensor<T> unbatch(const Tensor<T>& x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return ops::reshape(x, s);
}

template <typename T>
Tensor<T> center_tap(Shape shape, const std::vector<std::pair<std::size_t, std::size_t>>& ones,
                     const std::vector<T>& values) {
  auto t = Tensor<T>::zeros(shape, true);
  auto d = t.mutable_data();
  const std::size_t in = shape[1];
  for (std::size_t i = 0; i < ones.size(); ++i) {
    d[((ones[i].first * in + ones[i].second) * 3 + 1) * 3 + 1] = values[i];
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> self_correlation(const Tensor<T>& z, std::size_t window) {
  if (window % 2 == 0) throw ContractError("self_correlation: window must be odd, got " + std::to_string(window));
  const bool single = z.rank() == 3;
  auto x = as_batch(z, 4);
  if (window > 2 * std::min(x.dim(2), x.dim(3)) - 1) {
    throw ContractError("self_correlation: window " + std::to_string(window) + " too large for " +
                        shape_string(z.shape()));
  }
  auto r = ops::neighbor_products(ops::l2_normalize(x, 1), window);
  return single ? unbatch(r) : r;
}

template <typename T>
ScrParams<T> ScrParams<T>::make(std::size_t channels, std::size_t window, std::mt19937_64& rng) {
  if (window % 2 == 0 || window < 3) throw ContractError("SCR window must be odd and >= 3");
  ScrParams p;
  p.channels = channels;
  p.window = window;
  const std::size_t hidden = std::max<std::size_t>(1, channels / 4);
  p.reduce = kaiming_normal<T>({hidden, channels, 1, 1}, channels, rng);
  p.reduce_bn = BatchNorm2d<T>::make(hidden);
  for (std::size_t i = 0; i < (window - 1) / 2; ++i) {
    p.window_convs.push_back(kaiming_normal<T>({hidden, hidden, 3, 3}, hidden * 9, rng));
    p.window_bns.push_back(BatchNorm2d<T>::make(hidden));
  }
  p.expand = Tensor<T>::zeros({channels, hidden, 1, 1}, true);
  p.expand_bias = Tensor<T>::zeros({channels}, true);
  return p;
}

template <typename T>
void ScrParams<T>::collect(NamedTensors<T>& params, NamedTensors<T>& buffers) const {
  params.emplace_back("scr.reduce.weight", reduce);
  reduce_bn.collect("scr.reduce_bn", params, buffers);
  for (std::size_t i = 0; i < window_convs.size(); ++i) {
    params.emplace_back("scr.window" + std::to_string(i) + ".weight", window_convs[i]);
    window_bns[i].collect("scr.window" + std::to_string(i) + "_bn", params, buffers);
  }
  params.emplace_back("scr.expand.weight", expand);
  params.emplace_back("scr.expand.bias", expand_bias);
}

template <typename T>
Tensor<T> scr_transform(const Tensor<T>& r, const Tensor<T>& z, ScrParams<T>& params, bool training) {
  const bool single = z.rank() == 3;
  auto zb = as_batch(z, 4);
  auto rb = as_batch(r, 6);
  const std::size_t B = zb.dim(0), C = zb.dim(1), H = zb.dim(2), W = zb.dim(3), d = params.window;
  if (rb.shape() != Shape{B, C, d, d, H, W} || C != params.channels) {
    throw ShapeError("scr_transform: correlation " + shape_string(r.shape()) + " does not match features " +
                     shape_string(z.shape()) + " and window " + std::to_string(d));
  }
  auto x = ops::reshape(ops::permute(rb, {0, 4, 5, 1, 2, 3}), {B * H * W, C, d, d});
  x = ops::relu(params.reduce_bn.forward(ops::conv2d(x, params.reduce, Tensor<T>{}, 1, 0), training));
  for (std::size_t i = 0; i < params.window_convs.size(); ++i) {
    x = ops::relu(params.window_bns[i].forward(ops::conv2d(x, params.window_convs[i], Tensor<T>{}, 1, 0), training));
  }
  x = ops::conv2d(x, params.expand, params.expand_bias, 1, 0);
  auto g = ops::permute(ops::reshape(x, {B, H, W, C}), {0, 3, 1, 2});
  auto f = ops::add(zb, g);
  return single ? unbatch(f) : f;
}

template <typename T>
Tensor<T> cross_correlation_pairs(const Tensor<T>& fq, const Tensor<T>& fs) {
  if (fq.rank() != 4 || fs.rank() != 4 || fq.dim(1) != fs.dim(1)) {
    throw ShapeError("cross_correlation: channel mismatch between " + shape_string(fq.shape()) + " and " +
                     shape_string(fs.shape()));
  }
  const std::size_t nq = fq.dim(0), ns = fs.dim(0), C = fq.dim(1);
  const std::size_t hq = fq.dim(2), wq = fq.dim(3), hs = fs.dim(2), ws = fs.dim(3);
  auto q = ops::reshape(ops::permute(ops::reshape(ops::l2_normalize(fq, 1), {nq, C, hq * wq}), {0, 2, 1}),
                        {nq * hq * wq, C});
  auto s = ops::reshape(ops::permute(ops::l2_normalize(fs, 1), {1, 0, 2, 3}), {C, ns * hs * ws});
  auto m = ops::reshape(ops::matmul_ordered(q, s), {nq, hq * wq, ns, hs * ws});
  return ops::reshape(ops::permute(m, {0, 2, 1, 3}), {nq * ns, hq, wq, hs, ws});
}

template <typename T>
Tensor<T> cross_correlation(const Tensor<T>& fq, const Tensor<T>& fs) {
  if (fq.rank() != 3 || fs.rank() != 3) {
    throw ShapeError("cross_correlation: expected [C,H,W] maps, got " + shape_string(fq.shape()) + " and " +
                     shape_string(fs.shape()));
  }
  return unbatch(cross_correlation_pairs(as_batch(fq, 4), as_batch(fs, 4)));
}

template <typename T>
MatchingParams<T> MatchingParams<T>::identity(std::size_t channels) {
  if (channels < 2) throw ContractError("matching needs at least 2 channels");
  MatchingParams p;
  p.channels = channels;
  p.q_weight[0] = center_tap<T>({1, 1, 3, 3}, {{0, 0}}, {T{1}});
  p.s_weight[0] = center_tap<T>({channels, 1, 3, 3}, {{0, 0}, {1, 0}}, {T{1}, T{-1}});
  p.q_weight[1] = center_tap<T>({1, channels, 3, 3}, {{0, 0}, {0, 1}}, {T{1}, T{-1}});
  p.s_weight[1] = center_tap<T>({1, 1, 3, 3}, {{0, 0}}, {T{1}});
  p.q_bias[0] = Tensor<T>::zeros({1}, true);
  p.s_bias[0] = Tensor<T>::zeros({channels}, true);
  p.q_bias[1] = Tensor<T>::zeros({1}, true);
  p.s_bias[1] = Tensor<T>::zeros({1}, true);
  return p;
}

template <typename T>
MatchingParams<T> MatchingParams<T>::make(std::size_t channels, double noise, std::mt19937_64& rng) {
  auto p = identity(channels);
  std::normal_distribution<double> normal(0.0, noise);
  for (auto* ws : {&p.q_weight, &p.s_weight}) {
    for (auto& w : *ws) {
      for (auto& v : w.mutable_data()) v += static_cast<T>(normal(rng));
    }
  }
  return p;
}

template <typename T>
void MatchingParams<T>::collect(NamedTensors<T>& params) const {
  for (std::size_t b = 0; b < 2; ++b) {
    const std::string prefix = "cca.match.block" + std::to_string(b);
    params.emplace_back(prefix + ".q_conv.weight", q_weight[b]);
    params.emplace_back(prefix + ".q_conv.bias", q_bias[b]);
    params.emplace_back(prefix + ".s_conv.weight", s_weight[b]);
    params.emplace_back(prefix + ".s_conv.bias", s_bias[b]);
  }
}

template <typename T>
Tensor<T> convolutional_matching(const Tensor<T>& correlation, const MatchingParams<T>& params) {
  const bool single = correlation.rank() == 4;
  auto c = as_batch(correlation, 5);
  const std::size_t P = c.dim(0), hq = c.dim(1), wq = c.dim(2), hs = c.dim(3), ws = c.dim(4);
  // x holds [P, Hq, Wq, ch, Hs, Ws]; the permutation below swaps the two planes.
  const std::vector<std::size_t> swap{0, 4, 5, 3, 1, 2};
  auto x = ops::reshape(c, {P, hq, wq, 1, hs, ws});
  std::size_t ch = 1;
  for (std::size_t b = 0; b < 2; ++b) {
    auto y = ops::reshape(ops::permute(x, swap), {P * hs * ws, ch, hq, wq});
    y = ops::conv2d(y, params.q_weight[b], params.q_bias[b], 1, 1);
    ch = params.q_weight[b].dim(0);
    y = ops::permute(ops::reshape(y, {P, hs, ws, ch, hq, wq}), swap);
    y = ops::conv2d(ops::reshape(y, {P * hq * wq, ch, hs, ws}), params.s_weight[b], params.s_bias[b], 1, 1);
    ch = params.s_weight[b].dim(0);
    x = ops::reshape(y, {P, hq, wq, ch, hs, ws});
    if (b == 0) x = ops::relu(x);
  }
  auto out = ops::reshape(x, {P, hq, wq, hs, ws});
  return single ? unbatch(out) : out;
}

template <typename T>
AttentionMaps<T> co_attention_maps(const Tensor<T>& refined, const std::vector<PairRouting>& routing,
                                   double temperature) {
  if (!(temperature > 0)) throw ContractError("co_attention_maps: temperature must be > 0");
  const bool single = refined.rank() == 4;
  auto c = as_batch(refined, 5);
  const std::size_t P = c.dim(0), hq = c.dim(1), wq = c.dim(2), hs = c.dim(3), ws = c.dim(4);
  const std::size_t nq = hq * wq, ns = hs * ws;
  auto flat = ops::reshape(c, {P, nq, ns});
  Tensor<T> mq, ms;
  if (routing.empty()) {
    mq = ops::mean(flat, 2);
    ms = ops::mean(flat, 1);
  } else {
    if (routing.size() != P) throw ContractError("co_attention_maps: one routing entry per pair required");
    std::vector<T> wq_mask(P * nq * ns, T{0}), ws_mask(P * nq * ns, T{0});
    for (std::size_t p = 0; p < P; ++p) {
      const auto& r = routing[p];
      if (r.grid.num_tokens() != nq || nq != ns) {
        throw ContractError("co_attention_maps: routing grid does not match the correlation tensor");
      }
      const auto& g = r.grid;
      for (const auto* side : {&r.query_side, &r.support_side}) {
        if (side->rows != g.num_regions()) throw ContractError("co_attention_maps: routing index has wrong row count");
        for (auto idx : side->indices) {
          if (idx >= g.num_regions()) throw ContractError("co_attention_maps: routing index out of range");
        }
      }
      T* mq_p = wq_mask.data() + p * nq * ns;
      T* ms_p = ws_mask.data() + p * nq * ns;
      for (std::size_t t = 0; t < nq; ++t) {
        const std::size_t region = g.region_of(t);
        std::vector<std::size_t> members;
        for (std::size_t j = 0; j < r.query_side.k; ++j) {
          auto m = g.tokens_of(r.query_side.at(region, j));
          members.insert(members.end(), m.begin(), m.end());
        }
        for (auto s : members) mq_p[t * ns + s] = static_cast<T>(1.0 / static_cast<double>(members.size()));
        members.clear();
        for (std::size_t j = 0; j < r.support_side.k; ++j) {
          auto m = g.tokens_of(r.support_side.at(region, j));
          members.insert(members.end(), m.begin(), m.end());
        }
        // support token t attends over query tokens `members`
        for (auto q : members) ms_p[q * ns + t] = static_cast<T>(1.0 / static_cast<double>(members.size()));
      }
    }
    mq = ops::sum(ops::mul(flat, Tensor<T>::from_data({P, nq, ns}, std::move(wq_mask))), 2);
    ms = ops::sum(ops::mul(flat, Tensor<T>::from_data({P, nq, ns}, std::move(ws_mask))), 1);
  }
  const double inv_t = 1.0 / temperature;
  auto aq = ops::reshape(ops::softmax(ops::scale(mq, inv_t), 1), {P, hq, wq});
  auto as = ops::reshape(ops::softmax(ops::scale(ms, inv_t), 1), {P, hs, ws});
  if (single) return {unbatch(aq), unbatch(as)};
  return {aq, as};
}

template <typename T>
std::vector<PairRouting> route_pairs(const Tensor<T>& fq, const Tensor<T>& fs, const Tensor<T>& q_proj,
                                     const Tensor<T>& k_proj, std::size_t grid, std::size_t k) {
  NoGradGuard guard;
  if (fq.rank() != 4 || fs.rank() != 4 || fq.shape() != Shape{fq.dim(0), fs.dim(1), fs.dim(2), fs.dim(3)}) {
    throw ShapeError("route_pairs: mismatched feature maps " + shape_string(fq.shape()) + " and " +
                     shape_string(fs.shape()));
  }
  const std::size_t C = fq.dim(1), H = fq.dim(2), W = fq.dim(3);
  if (q_proj.shape() != k_proj.shape() || q_proj.rank() != 2 || q_proj.dim(0) != C) {
    throw ShapeError("route_pairs: projections " + shape_string(q_proj.shape()) + " do not match " +
                     std::to_string(C) + " channels");
  }
  const auto g = make_region_grid(H, W, grid);
  // Region descriptors of the projected tokens, per image.
  auto describe = [&](const Tensor<T>& f, const Tensor<T>& proj) {
    const std::size_t n = f.dim(0);
    auto tokens = ops::reshape(ops::permute(f, {0, 2, 3, 1}), {n * H * W, C});
    auto projected = ops::reshape(ops::matmul(tokens, proj), {n, H * W, proj.dim(1)});
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < n; ++i) {
      auto img = ops::reshape(ops::slice_rows(projected, i, i + 1), {H * W, proj.dim(1)});
      auto map = ops::reshape(ops::permute(img, {1, 0}), {proj.dim(1), H, W});
      out.push_back(partition_regions(map, grid).descriptors);
    }
    return out;
  };
  const auto q_as_query = describe(fq, q_proj), q_as_key = describe(fq, k_proj);
  const auto s_as_query = describe(fs, q_proj), s_as_key = describe(fs, k_proj);
  std::vector<PairRouting> out;
  out.reserve(fq.dim(0) * fs.dim(0));
  for (std::size_t i = 0; i < fq.dim(0); ++i) {
    for (std::size_t j = 0; j < fs.dim(0); ++j) {
      out.push_back({g, topk_routing(region_affinity(q_as_query[i], s_as_key[j]), k),
                     topk_routing(region_affinity(s_as_query[j], q_as_key[i]), k)});
    }
  }
  return out;
}

template <typename T>
AttentionMaps<T> uniform_attention_maps(std::size_t pairs, std::size_t height, std::size_t width) {
  const T u = static_cast<T>(1.0 / static_cast<double>(height * width));
  return {Tensor<T>::full({pairs, height, width}, u), Tensor<T>::full({pairs, height, width}, u)};
}

template <typename T>
Tensor<T> attention_pool(const Tensor<T>& features, const Tensor<T>& attention) {
  const bool single = features.rank() == 3;
  auto f = as_batch(features, 4);
  auto a = as_batch(attention, 3);
  const std::size_t P = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  if (a.shape() != Shape{P, H, W}) {
    throw ShapeError("attention_pool: attention " + shape_string(attention.shape()) + " does not match features " +
                     shape_string(features.shape()));
  }
  auto out = ops::reshape(ops::bmm(ops::reshape(f, {P, C, H * W}), ops::reshape(a, {P, H * W, 1})), {P, C});
  return single ? unbatch(out) : out;
}

#define RELFSL_INSTANTIATE(T)                                                                                       \
  template Tensor<T> self_correlation(const Tensor<T>&, std::size_t);                                              \
  template struct ScrParams<T>;                                                                                    \
  template Tensor<T> scr_transform(const Tensor<T>&, const Tensor<T>&, ScrParams<T>&, bool);                       \
  template Tensor<T> cross_correlation(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> cross_correlation_pairs(const Tensor<T>&, const Tensor<T>&);                                  \
  template struct MatchingParams<T>;                                                                               \
  template Tensor<T> convolutional_matching(const Tensor<T>&, const MatchingParams<T>&);                           \
  template AttentionMaps<T> co_attention_maps(const Tensor<T>&, const std::vector<PairRouting>&, double);          \
  template std::vector<PairRouting> route_pairs(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                                const Tensor<T>&, std::size_t, std::size_t);                       \
  template AttentionMaps<T> uniform_attention_maps(std::size_t, std::size_t, std::size_t);                         \
  template Tensor<T> attention_pool(const Tensor<T>&, const Tensor<T>&);

RELFSL_INSTANTIATE(float)
RELFSL_INSTANTIATE(double)

}  // namespace relfsl
