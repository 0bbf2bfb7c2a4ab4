// SPDX-License-Identifier: Apache-2.0
//
// Cosine metric head and episodic loss.

#pragma once

#include <cstdint>
#include <vector>

#include "relfsl/tensor.hpp"

namespace relfsl {

inline constexpr double kHeadTemperature = 0.1;

/// logits[i,c] = cos(query[i], prototype[c]) / temperature, prototype[c] the
/// mean of the support embeddings labelled c. query [Nq,C], support [N*K,C].
template <typename T>
Tensor<T> classify_episode(const Tensor<T>& query, const Tensor<T>& support,
                           const std::vector<std::int64_t>& support_labels, double temperature = kHeadTemperature);

/// Pair form: query_pairs[i,j] and support_pairs[i,j] are the pooled
/// embeddings of query i and support j (label-major, j = c*K + k) under their
/// co-attention pair. q_c and s_c average the K pairs of class c;
/// logits[i,c] = cos(q_c, s_c) / temperature. Inputs [Nq, N*K, C].
template <typename T>
Tensor<T> classify_pairs(const Tensor<T>& query_pairs, const Tensor<T>& support_pairs, std::size_t n_way,
                         std::size_t k_shot, double temperature = kHeadTemperature);

/// Mean softmax cross-entropy. logits [Nq,N].
template <typename T>
Tensor<T> episode_loss(const Tensor<T>& logits, const std::vector<std::int64_t>& labels);

/// Row-wise argmax, ties to the lower class.
template <typename T>
std::vector<std::int64_t> predict(const Tensor<T>& logits);

double accuracy(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& labels);

}  // namespace relfsl
