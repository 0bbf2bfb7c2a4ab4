// SPDX-License-Identifier: Apache-2.0
//
// Conv4 backbone and cross-task interpolation.
//
// Layer l of the encoder denotes the hidden representation after l blocks:
// layer 0 is the (preprocessed) input, layer 4 the final 5x5 feature map.

#pragma once

#include <array>
#include <optional>
#include <random>

#include "relfsl/config.hpp"
#include "relfsl/nn.hpp"

namespace relfsl {

inline constexpr std::size_t kEncoderBlocks = 4;
inline constexpr std::size_t kFeatureSize = 5;  // 84 -> 42 -> 21 -> 10 -> 5

template <typename T>
struct ConvBlock {
  Tensor<T> weight;  // [C_out, C_in, 3, 3], no bias (batchnorm follows)
  BatchNorm2d<T> bn;
};

template <typename T>
class Conv4Encoder {
 public:
  struct Output {
    Tensor<T> features;  // [B, channels, 5, 5]
    Tensor<T> hidden;    // layer `capture_layer`, when requested
  };

  Conv4Encoder(const EncoderConfig& config, std::mt19937_64& rng);

  const EncoderConfig& config() const { return config_; }

  /// Full pass over a preprocessed [B,3,84,84] batch.
  Output encode(const Tensor<T>& batch, bool training, std::optional<std::size_t> capture_layer = std::nullopt);

  /// Runs blocks [begin, end): maps a layer-`begin` hidden to layer `end`.
  Tensor<T> forward_range(const Tensor<T>& hidden, std::size_t begin, std::size_t end, bool training);

  void collect(NamedTensors<T>& params, NamedTensors<T>& buffers) const;

  std::array<ConvBlock<T>, kEncoderBlocks>& blocks() { return blocks_; }

 private:
  EncoderConfig config_;
  std::array<ConvBlock<T>, kEncoderBlocks> blocks_;
};

/// Hidden representations of one task at some encoder layer.
template <typename T>
struct TaskHidden {
  Tensor<T> support;
  Tensor<T> query;
};

/// lambda ~ Beta(alpha, beta), drawn as X / (X + Y) with X ~ Gamma(alpha), Y ~ Gamma(beta).
double sample_lambda(const InterpolationConfig& config, std::mt19937_64& rng);

/// Uniform over layers {0, ..., 4}.
std::size_t sample_interpolation_layer(std::mt19937_64& rng);

/// lambda * task_i + (1 - lambda) * task_j, separately for support and query.
template <typename T>
TaskHidden<T> interpolate_tasks(const TaskHidden<T>& task_i, const TaskHidden<T>& task_j, double lambda);

/// Uniformly random permutation of 0..n-1 with no fixed point (n >= 2).
std::vector<std::size_t> random_derangement(std::size_t n, std::mt19937_64& rng);

extern template class Conv4Encoder<float>;
extern template class Conv4Encoder<double>;

}  // namespace relfsl
