// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "relfsl/ops.hpp"
#include "relfsl/tensor.hpp"

namespace relfsl {

/// Named handles into a model's state. The tensors alias the model's own.
template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// He-normal initialisation, std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(normal(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNorm2d make(std::size_t channels) {
    return {Tensor<T>::full({channels}, T{1}, true), Tensor<T>::zeros({channels}, true),
            Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T{1})};
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return ops::batchnorm2d(x, gamma, beta, running_mean, running_var, training);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    params.emplace_back(prefix + ".weight", gamma);
    params.emplace_back(prefix + ".bias", beta);
    buffers.emplace_back(prefix + ".running_mean", running_mean);
    buffers.emplace_back(prefix + ".running_var", running_var);
  }
};

}  // namespace relfsl
