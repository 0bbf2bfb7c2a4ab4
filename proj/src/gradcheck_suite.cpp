// SPDX-License-Identifier: Apache-2.0

#include "relfsl/gradcheck_suite.hpp"

#include <chrono>

#include "relfsl/head.hpp"
#include "relfsl/relational.hpp"
#include "relfsl/routing.hpp"

namespace relfsl {

namespace {

using Inputs = std::vector<Tensor<double>>;

template <typename V>
using scalar_of = typename V::value_type::value_type;

Tensor<double> randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor<double>::from_data(std::move(shape), std::move(v));
}

Tensor<double> positive(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from_data(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> constant(Shape shape, std::vector<double> values) {
  std::vector<T> v(values.begin(), values.end());
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename Op, typename Gen>
GradcheckCase make_case(std::string name, Op op, Gen gen) {
  return {std::move(name), [op, gen](std::uint64_t seed, const GradcheckOptions& options) {
            return gradcheck_sampled(op, gen, seed, options);
          }};
}

template <typename Gen>
GradcheckCase unary(std::string name, Gen gen, auto fn) {
  return make_case(
      std::move(name), [fn](const auto& xs) { return fn(xs[0]); }, gen);
}

auto shaped(Shape shape, double stddev = 1.0) {
  return [shape, stddev](std::mt19937_64& rng) { return Inputs{randn(shape, rng, stddev)}; };
}

auto shaped2(Shape a, Shape b) {
  return [a, b](std::mt19937_64& rng) { return Inputs{randn(a, rng), randn(b, rng)}; };
}

// Joins the two co-attention maps into one output.
template <typename T>
Tensor<T> joined(const AttentionMaps<T>& maps) {
  return ops::concat<T>({ops::reshape(maps.a_q, {maps.a_q.numel()}), ops::reshape(maps.a_s, {maps.a_s.numel()})}, 0);
}

template <typename T>
MatchingParams<T> matching_from(const std::vector<Tensor<T>>& xs, std::size_t first, std::size_t channels) {
  MatchingParams<T> p;
  p.channels = channels;
  for (std::size_t b = 0; b < 2; ++b) {
    p.q_weight[b] = xs[first + 4 * b];
    p.q_bias[b] = xs[first + 4 * b + 1];
    p.s_weight[b] = xs[first + 4 * b + 2];
    p.s_bias[b] = xs[first + 4 * b + 3];
  }
  return p;
}

Inputs matching_inputs(std::size_t channels, std::mt19937_64& rng) {
  return {randn({1, 1, 3, 3}, rng, 0.5),        randn({1}, rng, 0.1), randn({channels, 1, 3, 3}, rng, 0.5),
          randn({channels}, rng, 0.1),          randn({1, channels, 3, 3}, rng, 0.5), randn({1}, rng, 0.1),
          randn({1, 1, 3, 3}, rng, 0.5),        randn({1}, rng, 0.1)};
}

std::vector<PairRouting> fixed_routing(std::size_t nq, std::size_t ns, std::size_t channels, std::size_t side,
                                       std::size_t grid, std::size_t k) {
  std::mt19937_64 rng(1234);
  auto fq = randn({nq, channels, side, side}, rng);
  auto fs = randn({ns, channels, side, side}, rng);
  auto qp = randn({channels, 2}, rng);
  auto kp = randn({channels, 2}, rng);
  return route_pairs(fq, fs, qp, kp, grid, k);
}

}  // namespace

GradcheckOptions suite_options(Precision precision) {
  GradcheckOptions o;
  o.precision = precision;
  o.epsilon = 1e-5;
  o.tolerance = precision == Precision::f32 ? 1e-4 : 1e-6;
  return o;
}

bool GradcheckSummary::pass() const {
  for (const auto& r : results) {
    if (!r.report.pass) return false;
  }
  return !results.empty();
}

std::vector<GradcheckCase> gradcheck_cases() {
  std::vector<GradcheckCase> cases;
  auto push = [&](GradcheckCase c) { cases.push_back(std::move(c)); };

  push(make_case("add", [](const auto& xs) { return ops::add(xs[0], xs[1]); }, shaped2({3, 4}, {3, 4})));
  push(make_case("sub", [](const auto& xs) { return ops::sub(xs[0], xs[1]); }, shaped2({3, 4}, {3, 4})));
  push(make_case("mul", [](const auto& xs) { return ops::mul(xs[0], xs[1]); }, shaped2({3, 4}, {3, 4})));
  push(unary("scale", shaped({3, 4}), [](const auto& x) { return ops::scale(x, -1.7); }));
  push(unary("shift", shaped({3, 4}), [](const auto& x) { return ops::shift(x, 0.3); }));
  push(make_case("matmul", [](const auto& xs) { return ops::matmul(xs[0], xs[1]); }, shaped2({3, 4}, {4, 5})));
  push(make_case("matmul_ordered", [](const auto& xs) { return ops::matmul_ordered(xs[0], xs[1]); },
                 shaped2({5, 3}, {3, 40})));
  push(make_case("bmm", [](const auto& xs) { return ops::bmm(xs[0], xs[1]); }, shaped2({2, 3, 4}, {2, 4, 3})));
  push(unary("transpose", shaped({3, 5}), [](const auto& x) { return ops::transpose(x); }));
  push(unary("reshape_permute", shaped({2, 3, 4}),
             [](const auto& x) { return ops::permute(ops::reshape(x, {2, 3, 2, 2}), {3, 0, 2, 1}); }));
  push(make_case(
      "concat", [](const auto& xs) { return ops::concat<scalar_of<std::decay_t<decltype(xs)>>>({xs[0], xs[1]}, 1); },
      shaped2({2, 3, 2}, {2, 1, 2})));
  push(unary("index_select", shaped({4, 3}), [](const auto& x) {
    const std::vector<std::size_t> idx{2, 0, 2, 1, 3};
    return ops::index_select(x, std::span<const std::size_t>(idx));
  }));
  push(unary("slice_rows", shaped({5, 3}), [](const auto& x) { return ops::slice_rows(x, 1, 4); }));
  push(make_case(
      "conv2d",
      [](const auto& xs) { return ops::conv2d(xs[0], xs[1], xs[2], 1, 1); },
      [](std::mt19937_64& rng) { return Inputs{randn({2, 3, 5, 5}, rng), randn({4, 3, 3, 3}, rng), randn({4}, rng)}; }));
  push(make_case(
      "conv2d_stride2",
      [](const auto& xs) {
        using T = scalar_of<std::decay_t<decltype(xs)>>;
        return ops::conv2d(xs[0], xs[1], Tensor<T>(), 2, 0);
      },
      shaped2({2, 2, 7, 7}, {3, 2, 3, 3})));
  push(make_case(
      "batchnorm2d_train",
      [](const auto& xs) {
        using T = scalar_of<std::decay_t<decltype(xs)>>;
        auto rm = Tensor<T>::zeros({2});
        auto rv = Tensor<T>::full({2}, T{1});
        return ops::batchnorm2d(xs[0], xs[1], xs[2], rm, rv, true);
      },
      [](std::mt19937_64& rng) { return Inputs{randn({3, 2, 3, 3}, rng), positive({2}, rng), randn({2}, rng)}; }));
  push(make_case(
      "batchnorm2d_eval",
      [](const auto& xs) {
        using T = scalar_of<std::decay_t<decltype(xs)>>;
        auto rm = constant<T>({2}, {0.25, -0.5});
        auto rv = constant<T>({2}, {0.75, 1.5});
        return ops::batchnorm2d(xs[0], xs[1], xs[2], rm, rv, false);
      },
      [](std::mt19937_64& rng) { return Inputs{randn({2, 2, 3, 3}, rng), positive({2}, rng), randn({2}, rng)}; }));
  push(unary("relu", shaped({4, 5}), [](const auto& x) { return ops::relu(x); }));
  push(unary("maxpool2d", shaped({2, 2, 5, 5}), [](const auto& x) { return ops::maxpool2d(x); }));
  push(unary("softmax", shaped({3, 5}, 2.0), [](const auto& x) { return ops::softmax(x, 1); }));
  push(unary("softmax_axis0", shaped({4, 3}, 2.0), [](const auto& x) { return ops::softmax(x, 0); }));
  push(unary("log_softmax", shaped({3, 5}, 2.0), [](const auto& x) { return ops::log_softmax(x, 1); }));
  push(unary("sum", shaped({3, 4}), [](const auto& x) { return ops::sum(x); }));
  push(unary("mean", shaped({3, 4}), [](const auto& x) { return ops::mean(x); }));
  push(unary("sum_axis", shaped({2, 3, 4}), [](const auto& x) { return ops::sum(x, 1); }));
  push(unary("mean_axis", shaped({2, 3, 4}), [](const auto& x) { return ops::mean(x, 2); }));
  push(unary("l2_normalize", shaped({2, 4, 3}), [](const auto& x) { return ops::l2_normalize(x, 1); }));
  push(unary("neighbor_products", shaped({1, 2, 4, 4}), [](const auto& x) { return ops::neighbor_products(x, 3); }));

  push(unary("self_correlation", shaped({2, 4, 4, 4}), [](const auto& x) { return self_correlation(x, 3); }));
  push(make_case(
      "scr_transform",
      [](const auto& xs) {
        using T = scalar_of<std::decay_t<decltype(xs)>>;
        ScrParams<T> p;
        p.channels = 8;
        p.window = 5;
        p.reduce = xs[1];
        p.reduce_bn = {xs[2], xs[3], Tensor<T>::zeros({2}), Tensor<T>::full({2}, T{1})};
        for (std::size_t i = 0; i < 2; ++i) {
          p.window_convs.push_back(xs[4 + 3 * i]);
          p.window_bns.push_back({xs[5 + 3 * i], xs[6 + 3 * i], Tensor<T>::zeros({2}), Tensor<T>::full({2}, T{1})});
        }
        p.expand = xs[10];
        p.expand_bias = xs[11];
        return scr_transform(self_correlation(xs[0], 5), xs[0], p, true);
      },
      [](std::mt19937_64& rng) {
        Inputs in{randn({2, 8, 3, 3}, rng), randn({2, 8, 1, 1}, rng, 0.5), positive({2}, rng), randn({2}, rng, 0.3)};
        for (int i = 0; i < 2; ++i) {
          in.push_back(randn({2, 2, 3, 3}, rng, 0.5));
          in.push_back(positive({2}, rng));
          in.push_back(randn({2}, rng, 0.3));
        }
        in.push_back(randn({8, 2, 1, 1}, rng, 0.5));
        in.push_back(randn({8}, rng, 0.1));
        return in;
      }));
  push(make_case("cross_correlation", [](const auto& xs) { return cross_correlation(xs[0], xs[1]); },
                 shaped2({4, 3, 3}, {4, 3, 3})));
  push(make_case("cross_correlation_pairs", [](const auto& xs) { return cross_correlation_pairs(xs[0], xs[1]); },
                 shaped2({2, 4, 2, 3}, {3, 4, 2, 3})));
  push(make_case(
      "convolutional_matching",
      [](const auto& xs) { return convolutional_matching(xs[0], matching_from(xs, 1, 3)); },
      [](std::mt19937_64& rng) {
        Inputs in{randn({2, 3, 3, 3, 3}, rng)};
        for (auto& t : matching_inputs(3, rng)) in.push_back(std::move(t));
        return in;
      }));
  push(unary("co_attention_dense", shaped({2, 3, 3, 3, 3}),
             [](const auto& x) { return joined(co_attention_maps(x, {}, 2.0)); }));
  push(unary("co_attention_routed", shaped({6, 4, 4, 4, 4}), [routing = fixed_routing(2, 3, 3, 4, 2, 2)](const auto& x) {
    return joined(co_attention_maps(x, routing, 2.0));
  }));
  push(make_case("attention_pool", [](const auto& xs) { return attention_pool(xs[0], xs[1]); },
                 shaped2({2, 3, 3, 3}, {2, 3, 3})));
  push(make_case(
      "vanilla_attention", [](const auto& xs) { return vanilla_attention(xs[0], xs[1], xs[2]); },
      [](std::mt19937_64& rng) { return Inputs{randn({4, 3}, rng), randn({5, 3}, rng), randn({5, 2}, rng)}; }));
  push(make_case(
      "routed_attention",
      [](const auto& xs) {
        const auto grid = make_region_grid(4, 4, 2);
        RoutingIndex routing{4, 2, 4, {0, 3, 1, 2, 0, 1, 2, 3}};
        return routed_attention(xs[0], xs[1], xs[2], routing, grid, grid);
      },
      [](std::mt19937_64& rng) { return Inputs{randn({16, 3}, rng), randn({16, 3}, rng), randn({16, 2}, rng)}; }));
  push(make_case(
      "classify_episode",
      [](const auto& xs) { return classify_episode(xs[0], xs[1], {0, 1, 1, 2}, 0.1); },
      shaped2({4, 5}, {4, 5})));
  push(make_case("classify_pairs", [](const auto& xs) { return classify_pairs(xs[0], xs[1], 2, 2, 0.1); },
                 shaped2({3, 4, 5}, {3, 4, 5})));
  push(unary("episode_loss", shaped({4, 3}, 2.0), [](const auto& x) { return episode_loss(x, {0, 2, 1, 2}); }));
  push(make_case(
      "conv_bn_relu_net",
      [](const auto& xs) {
        using T = scalar_of<std::decay_t<decltype(xs)>>;
        Tensor<T> none;
        auto rm = Tensor<T>::zeros({3});
        auto rv = Tensor<T>::full({3}, T{1});
        auto h = ops::relu(ops::batchnorm2d(ops::conv2d(xs[0], xs[1], none, 1, 1), xs[2], xs[3], rm, rv, true));
        auto rm2 = Tensor<T>::zeros({3});
        auto rv2 = Tensor<T>::full({3}, T{1});
        h = ops::relu(ops::batchnorm2d(ops::conv2d(h, xs[4], none, 1, 1), xs[5], xs[6], rm2, rv2, true));
        return ops::maxpool2d(h);
      },
      [](std::mt19937_64& rng) {
        return Inputs{randn({2, 2, 4, 4}, rng), randn({3, 2, 3, 3}, rng, 0.5), positive({3}, rng), randn({3}, rng, 0.3),
                      randn({3, 3, 3, 3}, rng, 0.5), positive({3}, rng), randn({3}, rng, 0.3)};
      }));
  return cases;
}

GradcheckSummary run_gradcheck_suite(Precision precision, std::size_t seeds,
                                     const std::function<void(const GradcheckResult&)>& on_result) {
  const auto start = std::chrono::steady_clock::now();
  const auto options = suite_options(precision);
  GradcheckSummary summary;
  for (const auto& c : gradcheck_cases()) {
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      GradcheckResult r{c.name, seed, c.run(seed, options)};
      if (on_result) on_result(r);
      summary.results.push_back(std::move(r));
    }
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

}  // namespace relfsl
