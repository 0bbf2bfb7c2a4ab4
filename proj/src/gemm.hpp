// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace relfsl::detail {

// C = A B with A M x K and B K x N row-major. Each entry is accumulated
// from zero over k = 0..K-1 in order, one rounded multiply and one rounded
// add per step, in the vector body and the scalar tail alike.
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wignored-attributes"
template <typename T>
void gemm_ordered(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  using namespace Eigen::internal;
  using Packet = typename packet_traits<T>::type;
  constexpr std::size_t P = unpacket_traits<Packet>::size;
  constexpr std::size_t J = 2 * P;
  auto scalar = [&](std::size_t i, std::size_t j) {
    T acc{};
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T prod = a[i * k + kk] * b[kk * n + j];
      acc = acc + prod;
    }
    c[i * n + j] = acc;
  };
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + i * k;
    std::size_t j = 0;
    for (; j + J <= n; j += J) {
      Packet c00 = pset1<Packet>(T{0}), c01 = c00, c10 = c00, c11 = c00, c20 = c00, c21 = c00, c30 = c00, c31 = c00;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const Packet b0 = ploadu<Packet>(b + kk * n + j), b1 = ploadu<Packet>(b + kk * n + j + P);
        Packet x = pset1<Packet>(a0[kk]);
        c00 = padd(c00, pmul(x, b0));
        c01 = padd(c01, pmul(x, b1));
        x = pset1<Packet>(a0[k + kk]);
        c10 = padd(c10, pmul(x, b0));
        c11 = padd(c11, pmul(x, b1));
        x = pset1<Packet>(a0[2 * k + kk]);
        c20 = padd(c20, pmul(x, b0));
        c21 = padd(c21, pmul(x, b1));
        x = pset1<Packet>(a0[3 * k + kk]);
        c30 = padd(c30, pmul(x, b0));
        c31 = padd(c31, pmul(x, b1));
      }
      T* out = c + i * n + j;
      pstoreu(out, c00);
      pstoreu(out + P, c01);
      pstoreu(out + n, c10);
      pstoreu(out + n + P, c11);
      pstoreu(out + 2 * n, c20);
      pstoreu(out + 2 * n + P, c21);
      pstoreu(out + 3 * n, c30);
      pstoreu(out + 3 * n + P, c31);
    }
    for (; j < n; ++j)
      for (std::size_t r = 0; r < 4; ++r) scalar(i + r, j);
  }
  for (; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) scalar(i, j);
}

// sum_i x[i] y[i] with a fixed blocking that does not depend on alignment.
template <typename T>
T dot_ordered(const T* x, const T* y, std::size_t k) {
  using namespace Eigen::internal;
  using Packet = typename packet_traits<T>::type;
  constexpr std::size_t P = unpacket_traits<Packet>::size;
  Packet s0 = pset1<Packet>(T{0}), s1 = s0, s2 = s0, s3 = s0;
  std::size_t i = 0;
  for (; i + 4 * P <= k; i += 4 * P) {
    s0 = padd(s0, pmul(ploadu<Packet>(x + i), ploadu<Packet>(y + i)));
    s1 = padd(s1, pmul(ploadu<Packet>(x + i + P), ploadu<Packet>(y + i + P)));
    s2 = padd(s2, pmul(ploadu<Packet>(x + i + 2 * P), ploadu<Packet>(y + i + 2 * P)));
    s3 = padd(s3, pmul(ploadu<Packet>(x + i + 3 * P), ploadu<Packet>(y + i + 3 * P)));
  }
  T tail{};
  for (; i < k; ++i) {
    const T prod = x[i] * y[i];
    tail = tail + prod;
  }
  return predux(padd(padd(s0, s1), padd(s2, s3))) + tail;
}

// out[j] (+)= sum_kk s[kk] * rows[kk * ld + j] for j < n, kk in order.
template <typename T>
void combine_rows(const T* s, const T* rows, std::size_t ld, T* out, std::size_t n, std::size_t k, bool accumulate) {
  using namespace Eigen::internal;
  using Packet = typename packet_traits<T>::type;
  constexpr std::size_t P = unpacket_traits<Packet>::size;
  std::size_t j = 0;
  for (; j + 4 * P <= n; j += 4 * P) {
    Packet c0 = pset1<Packet>(T{0}), c1 = c0, c2 = c0, c3 = c0;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Packet x = pset1<Packet>(s[kk]);
      const T* r = rows + kk * ld + j;
      c0 = padd(c0, pmul(x, ploadu<Packet>(r)));
      c1 = padd(c1, pmul(x, ploadu<Packet>(r + P)));
      c2 = padd(c2, pmul(x, ploadu<Packet>(r + 2 * P)));
      c3 = padd(c3, pmul(x, ploadu<Packet>(r + 3 * P)));
    }
    if (accumulate) {
      c0 = padd(ploadu<Packet>(out + j), c0);
      c1 = padd(ploadu<Packet>(out + j + P), c1);
      c2 = padd(ploadu<Packet>(out + j + 2 * P), c2);
      c3 = padd(ploadu<Packet>(out + j + 3 * P), c3);
    }
    pstoreu(out + j, c0);
    pstoreu(out + j + P, c1);
    pstoreu(out + j + 2 * P, c2);
    pstoreu(out + j + 3 * P, c3);
  }
  for (; j < n; ++j) {
    T acc{};
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T prod = s[kk] * rows[kk * ld + j];
      acc = acc + prod;
    }
    out[j] = accumulate ? out[j] + acc : acc;
  }
}

#pragma GCC diagnostic pop

// C (M x N) = op(A) (M x K) * op(B) (K x N), row-major storage. With
// transpose_a, A is stored K x M; with transpose_b, B is stored N x K.
template <typename T>
void gemm(const T* a, bool transpose_a, const T* b, bool transpose_b, T* c, std::size_t m, std::size_t n,
          std::size_t k, bool accumulate) {
  if (m == 0 || n == 0) return;
  // Eigen's lazy (tiny) and matrix-vector product paths peel by pointer
  // alignment, so their summation order depends on where the buffers landed.
  // Tiny products go through the ordered kernel; a single row or column is
  // padded to two so the packed kernel handles it.
  if (m + n + k < 20) {
    std::vector<T> at, bt, tmp;
    const T* ap = a;
    const T* bp = b;
    if (transpose_a) {
      at.resize(m * k);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < m; ++j) at[j * k + i] = a[i * m + j];
      ap = at.data();
    }
    if (transpose_b) {
      bt.resize(k * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) bt[j * n + i] = b[i * k + j];
      bp = bt.data();
    }
    if (!accumulate) {
      gemm_ordered(ap, bp, c, m, n, k);
      return;
    }
    tmp.resize(m * n);
    gemm_ordered(ap, bp, tmp.data(), m, n, k);
    for (std::size_t i = 0; i < m * n; ++i) c[i] += tmp[i];
    return;
  }
  // A single row of op(A) is a[0..k) in either layout, as is a single column of op(B).
  if (m == 1) {
    if (transpose_b) {
      for (std::size_t j = 0; j < n; ++j) {
        const T v = dot_ordered(a, b + j * k, k);
        c[j] = accumulate ? c[j] + v : v;
      }
    } else {
      combine_rows(a, b, n, c, n, k, accumulate);
    }
    return;
  }
  if (n == 1) {
    if (transpose_a) {
      combine_rows(b, a, m, c, m, k, accumulate);
    } else {
      for (std::size_t i = 0; i < m; ++i) {
        const T v = dot_ordered(a + i * k, b, k);
        c[i] = accumulate ? c[i] + v : v;
      }
    }
    return;
  }
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Mat>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> out(c, M, N);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      out.noalias() += lhs * rhs;
    } else {
      out.noalias() = lhs * rhs;
    }
  };
  if (!transpose_a && !transpose_b) {
    run(ConstMap(a, M, K), ConstMap(b, K, N));
  } else if (!transpose_a && transpose_b) {
    run(ConstMap(a, M, K), ConstMap(b, N, K).transpose());
  } else if (transpose_a && !transpose_b) {
    run(ConstMap(a, K, M).transpose(), ConstMap(b, K, N));
  } else {
    run(ConstMap(a, K, M).transpose(), ConstMap(b, N, K).transpose());
  }
}

}  // namespace relfsl::detail
