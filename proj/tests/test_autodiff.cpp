// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "relfsl/gradcheck.hpp"
#include "relfsl/gradcheck_suite.hpp"
#include "relfsl/ops.hpp"
#include "gemm.hpp"

using namespace relfsl;

namespace {

Tensor<double> from(const oracle::Vec& v, Shape shape, bool grad = false) {
  return Tensor<double>::from_data(std::move(shape), v, grad);
}

double max_abs_diff(std::span<const double> a, const oracle::Vec& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_SUITE("tensor-autodiff") {
  TEST_CASE("shape validation") {
    CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>::zeros({2, 0}), ShapeError);
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({3, 2});
    CHECK_THROWS_AS(ops::add(a, b), ShapeError);
    CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  }

  TEST_CASE("backward through a shared subexpression") {
    auto x = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5}, true);
    auto y = ops::mul(x, x);                    // x^2
    auto loss = ops::sum(ops::add(y, ops::scale(x, 3.0)));  // sum x^2 + 3x
    backward(loss);
    REQUIRE(x.has_grad());
    CHECK(x.grad()[0] == doctest::Approx(5.0));
    CHECK(x.grad()[1] == doctest::Approx(-1.0));
    CHECK(x.grad()[2] == doctest::Approx(4.0));
  }

  TEST_CASE("record lists each node once in topological order") {
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
    auto y = ops::relu(x);
    auto z = ops::sum(ops::mul(y, y));
    auto names = computation_record(z).op_names();
    REQUIRE(names.size() == 3);
    CHECK(names.front() == "relu");
    CHECK(names.back() == "sum");
  }

  TEST_CASE("no-grad guard suppresses recording") {
    auto x = Tensor<float>::from_data({2}, {1, 2}, true);
    {
      NoGradGuard guard;
      CHECK_FALSE(grad_enabled());
      auto y = ops::scale(x, 2.0);
      CHECK(y.is_leaf());
      CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK_FALSE(ops::scale(x, 2.0).is_leaf());
  }

  TEST_CASE("recorded outputs are immutable") {
    auto x = Tensor<float>::from_data({2}, {1, 2}, true);
    auto y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(y.mutable_data(), ContractError);
    CHECK_THROWS_AS(y.set_requires_grad(false), ContractError);
  }

  TEST_CASE("nan check names the producing op") {
    set_nan_check(true);
    auto big = Tensor<float>::from_data({1}, {INFINITY});
    CHECK_THROWS_AS(ops::mul(big, Tensor<float>::zeros({1})), NumericError);
    set_nan_check(false);
    CHECK_NOTHROW(ops::mul(big, Tensor<float>::zeros({1})));
  }

  TEST_CASE("relu subgradient at zero is zero") {
    auto x = Tensor<double>::from_data({3}, {-1.0, 0.0, 2.0}, true);
    backward(ops::sum(ops::relu(x)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 1.0);
  }

  TEST_CASE("gradcheck rejects a wrong backward rule") {
    // Forward x^2, backward claims 3x.
    auto bad_square = [](const auto& xs) {
      using T = typename std::decay_t<decltype(xs[0])>::value_type;
      const auto& x = xs[0];
      std::vector<T> out(x.numel());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * x.data()[i];
      return make_result<T>(x.shape(), std::move(out), "bad_square", {x}, [](detail::BackwardContext<T>& ctx) {
        if (auto* g = ctx.input_grad(0)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * T(3) * ctx.input_data(0)[i];
        }
      });
    };
    auto x = Tensor<double>::from_data({4}, {0.3, -0.7, 1.1, 0.9});
    auto report = gradcheck(bad_square, {x}, suite_options(Precision::f64));
    CHECK_FALSE(report.pass);
    CHECK(report.max_rel_error > 0.1);
  }

  TEST_CASE("kink monitor reports relu margins") {
    KinkMonitor monitor;
    auto x = Tensor<double>::from_data({3}, {-0.5, 0.02, 1.0});
    ops::relu(x);
    CHECK(monitor.margin() == doctest::Approx(0.02));
  }

  TEST_CASE("conv2d matches the nested-loop oracle") {
    std::mt19937_64 rng(11);
    for (int instance = 0; instance < 10; ++instance) {
      const std::size_t B = 1 + instance % 2, Ci = 2 + instance % 3, H = 5 + instance % 4, W = 6, Co = 3;
      const std::size_t stride = 1 + instance % 2, pad = instance % 2;
      auto x = oracle::random_vec(B * Ci * H * W, rng);
      auto w = oracle::random_vec(Co * Ci * 9, rng);
      auto b = oracle::random_vec(Co, rng);
      auto got = ops::conv2d(from(x, {B, Ci, H, W}), from(w, {Co, Ci, 3, 3}), from(b, {Co}), stride, pad);
      auto want = oracle::conv2d(x, w, b, B, Ci, H, W, Co, 3, 3, stride, pad);
      CHECK(max_abs_diff(got.data(), want) <= 1e-5);
    }
  }

  TEST_CASE("matmul matches the nested-loop oracle") {
    std::mt19937_64 rng(12);
    for (int instance = 0; instance < 10; ++instance) {
      const std::size_t n = 1 + instance, k = 3 + 2 * instance, m = 2 + instance % 5;
      auto a = oracle::random_vec(n * k, rng);
      auto b = oracle::random_vec(k * m, rng);
      auto got = ops::matmul(from(a, {n, k}), from(b, {k, m}));
      CHECK(max_abs_diff(got.data(), oracle::matmul(a, b, n, k, m)) <= 1e-5);
    }
  }

  TEST_CASE("float matmul agrees with the double oracle") {
    std::mt19937_64 rng(13);
    auto a = oracle::random_vec(7 * 9, rng);
    auto b = oracle::random_vec(9 * 4, rng);
    auto got = ops::matmul(tensor_cast<float>(from(a, {7, 9})), tensor_cast<float>(from(b, {9, 4})));
    auto want = oracle::matmul(a, b, 7, 9, 4);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) <= 1e-5);
  }

  TEST_CASE("ordered matmul matches the oracle and transposes exactly") {
    std::mt19937_64 rng(14);
    for (int instance = 0; instance < 10; ++instance) {
      const std::size_t n = 3 + 7 * instance, k = 1 + 3 * instance, m = 5 + 11 * instance;
      auto a = oracle::random_vec(n * k, rng);
      auto b = oracle::random_vec(k * m, rng);
      auto ab = ops::matmul_ordered(from(a, {n, k}), from(b, {k, m}));
      CHECK(max_abs_diff(ab.data(), oracle::matmul(a, b, n, k, m)) <= 1e-12);
      auto af = tensor_cast<float>(from(a, {n, k})), bf = tensor_cast<float>(from(b, {k, m}));
      auto fwd = ops::matmul_ordered(af, bf);
      auto rev = ops::matmul_ordered(ops::transpose(bf), ops::transpose(af));
      bool exact = true;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) exact = exact && fwd.data()[i * m + j] == rev.data()[j * n + i];
      CHECK(exact);
    }
  }

  TEST_CASE("matmul results do not depend on buffer alignment") {
    std::mt19937_64 rng(15);
    const std::size_t shapes[][3] = {{1, 7, 9}, {5, 1, 3}, {4, 5, 6}, {3, 8, 2}, {16, 12, 9}, {40, 33, 17}, {75, 64, 25}, {1, 300, 45}, {300, 1, 45}, {2, 200, 30}, {1, 1, 64}};
    for (const auto& s : shapes) {
      const std::size_t m = s[0], n = s[1], k = s[2];
      for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
          auto a = oracle::random_vec(m * k, rng), b = oracle::random_vec(k * n, rng);
          std::vector<double> first;
          for (std::size_t offset = 0; offset < 8; ++offset) {
            std::vector<double> abuf(offset, 0.0), bbuf(offset + 3, 0.0), cbuf(offset + 5, 0.0);
            abuf.insert(abuf.end(), a.begin(), a.end());
            bbuf.insert(bbuf.end(), b.begin(), b.end());
            cbuf.resize(offset + 5 + m * n, 0.25);
            detail::gemm(abuf.data() + offset, ta, bbuf.data() + offset + 3, tb, cbuf.data() + offset + 5, m, n, k,
                         true);
            std::vector<double> c(cbuf.begin() + offset + 5, cbuf.end());
            if (offset == 0) {
              first = c;
              oracle::Vec opa(m * k), opb(k * n);
              for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < k; ++j) opa[i * k + j] = ta ? a[j * m + i] : a[i * k + j];
              for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < n; ++j) opb[i * n + j] = tb ? b[j * k + i] : b[i * n + j];
              auto want = oracle::matmul(opa, opb, m, k, n);
              for (auto& w : want) w += 0.25;
              CHECK(max_abs_diff(c, want) <= 1e-12);
            } else {
              CHECK(c == first);
            }
          }
        }
      }
    }
  }

  TEST_CASE("maxpool and batchnorm match their oracles") {
    std::mt19937_64 rng(14);
    for (int instance = 0; instance < 10; ++instance) {
      const std::size_t B = 2, C = 3, H = 4 + instance % 3, W = 6;
      auto x = oracle::random_vec(B * C * H * W, rng);
      auto pooled = ops::maxpool2d(from(x, {B, C, H, W}));
      CHECK(max_abs_diff(pooled.data(), oracle::maxpool2x2(x, B * C, H, W)) <= 1e-12);

      auto g = oracle::random_vec(C, rng, 0.5, 1.5);
      auto b = oracle::random_vec(C, rng);
      auto rm = Tensor<double>::zeros({C});
      auto rv = Tensor<double>::full({C}, 1.0);
      auto y = ops::batchnorm2d(from(x, {B, C, H, W}), from(g, {C}), from(b, {C}), rm, rv, true);
      CHECK(max_abs_diff(y.data(), oracle::batchnorm_train(x, g, b, B, C, H * W)) <= 1e-5);
    }
  }

  TEST_CASE("batchnorm running statistics use momentum 0.9 and unbiased variance") {
    auto x = Tensor<double>::from_data({2, 1, 1, 2}, {1.0, 3.0, 5.0, 7.0});
    auto g = Tensor<double>::full({1}, 1.0), b = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::zeros({1});
    auto rv = Tensor<double>::full({1}, 1.0);
    ops::batchnorm2d(x, g, b, rm, rv, true);
    CHECK(rm.item() == doctest::Approx(0.1 * 4.0));
    CHECK(rv.item() == doctest::Approx(0.9 + 0.1 * (20.0 / 3.0)));
  }

  TEST_CASE("softmax rows sum to one and are shift invariant") {
    std::mt19937_64 rng(15);
    auto v = oracle::random_vec(12, rng, -5, 5);
    auto x = from(v, {3, 4});
    auto s = ops::softmax(x, 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 4; ++c) total += s.data()[r * 4 + c];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto shifted = ops::softmax(ops::shift(x, 100.0), 1);
    CHECK(max_abs_diff(shifted.data(), oracle::Vec(s.data().begin(), s.data().end())) <= 1e-12);
    auto ls = ops::log_softmax(x, 1);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::exp(ls.data()[i]) == doctest::Approx(s.data()[i]));
  }

  TEST_CASE("every registered case passes gradcheck in 64-bit on seed 0") {
    const auto options = suite_options(Precision::f64);
    for (const auto& c : gradcheck_cases()) {
      CAPTURE(c.name);
      auto report = c.run(0, options);
      CHECK(report.pass);
    }
  }

  TEST_CASE("every registered case passes gradcheck in 32-bit on seed 0") {
    const auto options = suite_options(Precision::f32);
    for (const auto& c : gradcheck_cases()) {
      CAPTURE(c.name);
      auto report = c.run(0, options);
      CHECK(report.pass);
    }
  }
}
