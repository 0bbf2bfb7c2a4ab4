// SPDX-License-Identifier: Apache-2.0
//
// The full classifier: Conv4 encoder -> SCR -> CCA (correlation, matching,
// routed co-attention) -> attention-pooled pair embeddings -> cosine head.

#pragma once

#include <cstdint>

#include "relfsl/config.hpp"
#include "relfsl/data.hpp"
#include "relfsl/encoder.hpp"
#include "relfsl/relational.hpp"

namespace relfsl {

template <typename T>
struct EpisodeOutput {
  Tensor<T> logits;  // [Nq, N]
  AttentionMaps<T> maps;  // per pair, pair index i * (N*K) + j; undefined when CCA is off
};

template <typename T>
class FslModel {
 public:
  FslModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Conv4Encoder<T>& encoder() { return encoder_; }
  ScrParams<T>& scr() { return scr_; }
  MatchingParams<T>& matching() { return matching_; }
  Tensor<T>& q_proj() { return q_proj_; }
  Tensor<T>& k_proj() { return k_proj_; }
  Tensor<T>& v_proj() { return v_proj_; }

  /// Trainable tensors, checkpoint order.
  NamedTensors<T> parameters() const;
  /// Batchnorm running statistics.
  NamedTensors<T> buffers() const;
  /// parameters() followed by buffers().
  NamedTensors<T> state() const;

  /// Re-draws the routing projections, keeping encoder, SCR and CCA.
  void reset_head(std::uint64_t seed);

  /// Z -> F (identity when SCR is disabled). [B,C,5,5].
  Tensor<T> refine(const Tensor<T>& z, bool training);

  /// Classifies every query against the episode support set from refined
  /// features. Supports are label-major (K per class).
  EpisodeOutput<T> classify(const Tensor<T>& support, const Tensor<T>& query, std::size_t n_way,
                            std::size_t k_shot);

  /// Co-attention maps for every (query, support) pair of feature maps.
  AttentionMaps<T> attention(const Tensor<T>& support, const Tensor<T>& query);

  /// Preprocessed images -> logits, encoding support and query in one batch.
  EpisodeOutput<T> forward(const Episode& episode, bool training);

 private:
  FslModel(const ModelConfig& config, std::mt19937_64 rng);

  ModelConfig config_;
  Conv4Encoder<T> encoder_;
  ScrParams<T> scr_;
  MatchingParams<T> matching_;
  Tensor<T> q_proj_, k_proj_, v_proj_;
};

/// Episode images as the model's scalar type, support rows first.
template <typename T>
Tensor<T> episode_batch(const Episode& episode);

extern template class FslModel<float>;
extern template class FslModel<double>;

}  // namespace relfsl
