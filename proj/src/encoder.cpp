// SPDX-License-Identifier: Apache-2.0

#include "relfsl/encoder.hpp"

#include <numeric>

#include "relfsl/data.hpp"
#include "relfsl/error.hpp"

namespace relfsl {

template <typename T>
Conv4Encoder<T>::Conv4Encoder(const EncoderConfig& config, std::mt19937_64& rng) : config_(config) {
  if (config.channels == 0) throw ContractError("Conv4Encoder: channels must be positive");
  std::size_t in = 3;
  for (auto& block : blocks_) {
    block.weight = kaiming_normal<T>({config.channels, in, 3, 3}, in * 9, rng);
    block.bn = BatchNorm2d<T>::make(config.channels);
    in = config.channels;
  }
}

template <typename T>
typename Conv4Encoder<T>::Output Conv4Encoder<T>::encode(const Tensor<T>& batch, bool training,
                                                         std::optional<std::size_t> capture_layer) {
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != kInputSize || batch.dim(3) != kInputSize) {
    throw ShapeError("encode: expected [B,3,84,84], got " + shape_string(batch.shape()));
  }
  if (capture_layer && *capture_layer > kEncoderBlocks) throw ContractError("encode: capture_layer must be in 0..4");
  Output out;
  Tensor<T> h = batch;
  if (capture_layer && *capture_layer == 0) out.hidden = h;
  for (std::size_t l = 0; l < kEncoderBlocks; ++l) {
    h = forward_range(h, l, l + 1, training);
    if (capture_layer && *capture_layer == l + 1) out.hidden = h;
  }
  out.features = h;
  return out;
}

template <typename T>
Tensor<T> Conv4Encoder<T>::forward_range(const Tensor<T>& hidden, std::size_t begin, std::size_t end, bool training) {
  if (begin > end || end > kEncoderBlocks) throw ContractError("forward_range: invalid layer range");
  Tensor<T> h = hidden;
  for (std::size_t l = begin; l < end; ++l) {
    auto& block = blocks_[l];
    h = ops::conv2d(h, block.weight, Tensor<T>{}, 1, 1);
    h = block.bn.forward(h, training);
    h = ops::relu(h);
    h = ops::maxpool2d(h);
  }
  return h;
}

template <typename T>
void Conv4Encoder<T>::collect(NamedTensors<T>& params, NamedTensors<T>& buffers) const {
  for (std::size_t l = 0; l < kEncoderBlocks; ++l) {
    const std::string prefix = "encoder.block" + std::to_string(l);
    params.emplace_back(prefix + ".conv.weight", blocks_[l].weight);
    blocks_[l].bn.collect(prefix + ".bn", params, buffers);
  }
}

double sample_lambda(const InterpolationConfig& config, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(config.alpha, 1.0);
  std::gamma_distribution<double> gb(config.beta, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y <= 0.0) return 0.5;
  return std::clamp(x / (x + y), 0.0, 1.0);
}

std::size_t sample_interpolation_layer(std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(0, kEncoderBlocks)(rng);
}

template <typename T>
TaskHidden<T> interpolate_tasks(const TaskHidden<T>& task_i, const TaskHidden<T>& task_j, double lambda) {
  if (task_i.support.shape() != task_j.support.shape() || task_i.query.shape() != task_j.query.shape()) {
    throw ShapeError("interpolate_tasks: task shapes differ (support " + shape_string(task_i.support.shape()) +
                     " vs " + shape_string(task_j.support.shape()) + ", query " + shape_string(task_i.query.shape()) +
                     " vs " + shape_string(task_j.query.shape()) + ")");
  }
  auto mix = [lambda](const Tensor<T>& a, const Tensor<T>& b) {
    return ops::add(ops::scale(a, lambda), ops::scale(b, 1.0 - lambda));
  };
  return {mix(task_i.support, task_j.support), mix(task_i.query, task_j.query)};
}

std::vector<std::size_t> random_derangement(std::size_t n, std::mt19937_64& rng) {
  if (n < 2) throw ContractError("random_derangement: need at least two items");
  std::vector<std::size_t> perm(n);
  for (;;) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (std::size_t i = 0; i < n; ++i) fixed = fixed || perm[i] == i;
    if (!fixed) return perm;
  }
}

template class Conv4Encoder<float>;
template class Conv4Encoder<double>;
template TaskHidden<float> interpolate_tasks(const TaskHidden<float>&, const TaskHidden<float>&, double);
template TaskHidden<double> interpolate_tasks(const TaskHidden<double>&, const TaskHidden<double>&, double);

}  // namespace relfsl
