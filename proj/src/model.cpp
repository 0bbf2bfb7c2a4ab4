// SPDX-License-Identifier: Apache-2.0

#include "relfsl/model.hpp"

#include <cmath>

#include "relfsl/error.hpp"
#include "relfsl/head.hpp"
#include "relfsl/ops.hpp"

namespace relfsl {

namespace {

constexpr double kMatchingNoise = 0.01;

template <typename T>
Tensor<T> projection(std::size_t channels, std::mt19937_64& rng) {
  const std::size_t d = std::max<std::size_t>(1, channels / 4);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(channels)));
  std::vector<T> w(channels * d);
  for (auto& v : w) v = static_cast<T>(normal(rng));
  return Tensor<T>::from_data({channels, d}, std::move(w), true);
}

template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& f) {
  return ops::mean(ops::reshape(f, {f.dim(0), f.dim(1), f.dim(2) * f.dim(3)}), 2);
}

}  // namespace

template <typename T>
FslModel<T>::FslModel(const ModelConfig& config, std::uint64_t seed) : FslModel(config, std::mt19937_64(seed)) {}

template <typename T>
FslModel<T>::FslModel(const ModelConfig& config, std::mt19937_64 rng)
    : config_(config),
      encoder_(config.encoder, rng),
      scr_(ScrParams<T>::make(config.encoder.channels, config.relational.scr_window, rng)),
      matching_(MatchingParams<T>::make(config.relational.match_channels, kMatchingNoise, rng)) {
  q_proj_ = projection<T>(config.encoder.channels, rng);
  k_proj_ = projection<T>(config.encoder.channels, rng);
  v_proj_ = projection<T>(config.encoder.channels, rng);
}

template <typename T>
NamedTensors<T> FslModel<T>::parameters() const {
  NamedTensors<T> params, buffers;
  encoder_.collect(params, buffers);
  scr_.collect(params, buffers);
  matching_.collect(params);
  params.emplace_back("route.q_proj.weight", q_proj_);
  params.emplace_back("route.k_proj.weight", k_proj_);
  params.emplace_back("route.v_proj.weight", v_proj_);
  return params;
}

template <typename T>
NamedTensors<T> FslModel<T>::buffers() const {
  NamedTensors<T> params, buffers;
  encoder_.collect(params, buffers);
  scr_.collect(params, buffers);
  return buffers;
}

template <typename T>
NamedTensors<T> FslModel<T>::state() const {
  auto out = parameters();
  for (auto& b : buffers()) out.push_back(std::move(b));
  return out;
}

template <typename T>
void FslModel<T>::reset_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto* p : {&q_proj_, &k_proj_, &v_proj_}) {
    auto fresh = projection<T>(config_.encoder.channels, rng);
    std::copy(fresh.data().begin(), fresh.data().end(), p->mutable_data().begin());
  }
}

template <typename T>
Tensor<T> FslModel<T>::refine(const Tensor<T>& z, bool training) {
  if (!config_.relational.scr_enabled) return z;
  return scr_transform(self_correlation(z, config_.relational.scr_window), z, scr_, training);
}

template <typename T>
AttentionMaps<T> FslModel<T>::attention(const Tensor<T>& support, const Tensor<T>& query) {
  const std::size_t pairs = query.dim(0) * support.dim(0);
  const auto& routing = config_.routing;
  if (routing.mode == AttentionMode::none) return uniform_attention_maps<T>(pairs, query.dim(2), query.dim(3));
  auto refined = convolutional_matching(cross_correlation_pairs(query, support), matching_);
  std::vector<PairRouting> routes;
  if (routing.mode == AttentionMode::routed) {
    routes = route_pairs(query, support, q_proj_, k_proj_, routing.grid, routing.top_k);
  }
  return co_attention_maps(refined, routes, config_.relational.attention_temperature);
}

template <typename T>
EpisodeOutput<T> FslModel<T>::classify(const Tensor<T>& support, const Tensor<T>& query, std::size_t n_way,
                                       std::size_t k_shot) {
  if (support.dim(0) != n_way * k_shot) {
    throw ShapeError("classify: " + std::to_string(support.dim(0)) + " support maps for a " + std::to_string(n_way) +
                     "-way " + std::to_string(k_shot) + "-shot episode");
  }
  const double tau = config_.head.temperature;
  EpisodeOutput<T> out;
  if (!config_.relational.cca_enabled) {
    std::vector<std::int64_t> labels(n_way * k_shot);
    for (std::size_t j = 0; j < labels.size(); ++j) labels[j] = static_cast<std::int64_t>(j / k_shot);
    out.logits = classify_episode(spatial_mean(query), spatial_mean(support), labels, tau);
    return out;
  }
  const std::size_t nq = query.dim(0), ns = support.dim(0), C = query.dim(1), H = query.dim(2), W = query.dim(3);
  out.maps = attention(support, query);
  std::vector<std::size_t> qi, si;
  qi.reserve(nq * ns);
  si.reserve(nq * ns);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ns; ++j) {
      qi.push_back(i);
      si.push_back(j);
    }
  }
  auto qf = ops::reshape(ops::index_select(query, std::span<const std::size_t>(qi)), {nq * ns, C, H, W});
  auto sf = ops::reshape(ops::index_select(support, std::span<const std::size_t>(si)), {nq * ns, C, H, W});
  auto q_emb = ops::reshape(attention_pool(qf, out.maps.a_q), {nq, ns, C});
  auto s_emb = ops::reshape(attention_pool(sf, out.maps.a_s), {nq, ns, C});
  out.logits = classify_pairs(q_emb, s_emb, n_way, k_shot, tau);
  return out;
}

template <typename T>
EpisodeOutput<T> FslModel<T>::forward(const Episode& episode, bool training) {
  const std::size_t ns = episode.support_images.dim(0);
  auto z = encoder_.encode(episode_batch<T>(episode), training).features;
  auto f = refine(z, training);
  const std::size_t k_shot = ns / episode.n_way();
  return classify(ops::slice_rows(f, 0, ns), ops::slice_rows(f, ns, f.dim(0)), episode.n_way(), k_shot);
}

template <typename T>
Tensor<T> episode_batch(const Episode& episode) {
  auto s = episode.support_images.data();
  auto q = episode.query_images.data();
  std::vector<T> data;
  data.reserve(s.size() + q.size());
  for (float v : s) data.push_back(static_cast<T>(v));
  for (float v : q) data.push_back(static_cast<T>(v));
  Shape shape = episode.support_images.shape();
  shape[0] += episode.query_images.dim(0);
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template class FslModel<float>;
template class FslModel<double>;
template Tensor<float> episode_batch(const Episode&);
template Tensor<double> episode_batch(const Episode&);

}  // namespace relfsl
