// SPDX-License-Identifier: Apache-2.0

#include "relfsl/head.hpp"

#include "relfsl/error.hpp"
#include "relfsl/ops.hpp"

namespace relfsl {

namespace {

template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& q, const Tensor<T>& s, std::size_t axis, double temperature) {
  if (!(temperature > 0)) throw ContractError("head temperature must be > 0");
  auto sim = ops::sum(ops::mul(ops::l2_normalize(q, axis), ops::l2_normalize(s, axis)), axis);
  return ops::scale(sim, 1.0 / temperature);
}

}  // namespace

template <typename T>
Tensor<T> classify_episode(const Tensor<T>& query, const Tensor<T>& support,
                           const std::vector<std::int64_t>& support_labels, double temperature) {
  if (query.rank() != 2 || support.rank() != 2 || query.dim(1) != support.dim(1)) {
    throw ShapeError("classify_episode: embeddings " + shape_string(query.shape()) + " and " +
                     shape_string(support.shape()) + " are incompatible");
  }
  if (support_labels.size() != support.dim(0)) throw ShapeError("classify_episode: one label per support row required");
  std::int64_t max_label = -1;
  for (auto l : support_labels) {
    if (l < 0) throw ContractError("classify_episode: negative label");
    max_label = std::max(max_label, l);
  }
  const std::size_t n_way = static_cast<std::size_t>(max_label + 1);
  const std::size_t nq = query.dim(0), C = query.dim(1);
  std::vector<Tensor<T>> prototypes;
  for (std::size_t c = 0; c < n_way; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < support_labels.size(); ++j) {
      if (support_labels[j] == static_cast<std::int64_t>(c)) rows.push_back(j);
    }
    if (rows.empty()) throw ContractError("classify_episode: class " + std::to_string(c) + " has no support items");
    prototypes.push_back(ops::reshape(ops::mean(ops::index_select(support, std::span<const std::size_t>(rows)), 0),
                                      {1, C}));
  }
  auto protos = ops::concat(prototypes, 0);  // [N,C]
  std::vector<std::size_t> q_rows, p_rows;
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t c = 0; c < n_way; ++c) {
      q_rows.push_back(i);
      p_rows.push_back(c);
    }
  }
  auto q = ops::reshape(ops::index_select(query, std::span<const std::size_t>(q_rows)), {nq, n_way, C});
  auto p = ops::reshape(ops::index_select(protos, std::span<const std::size_t>(p_rows)), {nq, n_way, C});
  return cosine_logits(q, p, 2, temperature);
}

template <typename T>
Tensor<T> classify_pairs(const Tensor<T>& query_pairs, const Tensor<T>& support_pairs, std::size_t n_way,
                         std::size_t k_shot, double temperature) {
  if (query_pairs.rank() != 3 || query_pairs.shape() != support_pairs.shape() ||
      query_pairs.dim(1) != n_way * k_shot) {
    throw ShapeError("classify_pairs: expected matching [Nq, N*K, C] inputs, got " +
                     shape_string(query_pairs.shape()) + " and " + shape_string(support_pairs.shape()));
  }
  const std::size_t nq = query_pairs.dim(0), C = query_pairs.dim(2);
  auto q = ops::mean(ops::reshape(query_pairs, {nq, n_way, k_shot, C}), 2);
  auto s = ops::mean(ops::reshape(support_pairs, {nq, n_way, k_shot, C}), 2);
  return cosine_logits(q, s, 2, temperature);
}

template <typename T>
Tensor<T> episode_loss(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("episode_loss: logits " + shape_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  std::vector<T> onehot(n * classes, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ContractError("episode_loss: label " + std::to_string(labels[i]) + " outside 0.." +
                          std::to_string(classes - 1));
    }
    onehot[i * classes + static_cast<std::size_t>(labels[i])] = T{1};
  }
  auto picked = ops::sum(ops::mul(ops::log_softmax(logits, 1), Tensor<T>::from_data({n, classes}, std::move(onehot))));
  return ops::scale(picked, -1.0 / static_cast<double>(n));
}

template <typename T>
std::vector<std::int64_t> predict(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  auto d = logits.data();
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (d[i * classes + c] > d[i * classes + best]) best = c;
    }
    out[i] = static_cast<std::int64_t>(best);
  }
  return out;
}

double accuracy(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw ContractError("accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

#define RELFSL_INSTANTIATE(T)                                                                                    \
  template Tensor<T> classify_episode(const Tensor<T>&, const Tensor<T>&, const std::vector<std::int64_t>&,     \
                                      double);                                                                  \
  template Tensor<T> classify_pairs(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, double);      \
  template Tensor<T> episode_loss(const Tensor<T>&, const std::vector<std::int64_t>&);                          \
  template std::vector<std::int64_t> predict(const Tensor<T>&);

RELFSL_INSTANTIATE(float)
RELFSL_INSTANTIATE(double)

}  // namespace relfsl
