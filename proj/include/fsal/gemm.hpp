#pragma once

#include <cmath>
#include <cstddef>

namespace fsal {

/// C(m x n) = A(m x k) * B(k x n)  [+ C when accumulate].
///
/// A is addressed as a[i * a_rs + p * a_cs] so a transposed operand costs nothing.
/// B and C are dense row-major. Every output element is one std::fma chain over p in
/// increasing order, whatever tile it lands in. This makes results independent of the
/// batch size and of the position of a sample inside a batch.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_cs, const T* b,
          T* c, bool accumulate) {
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 128 / sizeof(T);

  std::size_t i0 = 0;
  for (; i0 + kRows <= m; i0 += kRows) {
    std::size_t j0 = 0;
    for (; j0 + kCols <= n; j0 += kCols) {
      T acc[kRows][kCols];
      for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t j = 0; j < kCols; ++j) acc[r][j] = accumulate ? c[(i0 + r) * n + j0 + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j0;
        const T a0 = a[(i0 + 0) * a_rs + p * a_cs];
        const T a1 = a[(i0 + 1) * a_rs + p * a_cs];
        const T a2 = a[(i0 + 2) * a_rs + p * a_cs];
        const T a3 = a[(i0 + 3) * a_rs + p * a_cs];
        for (std::size_t j = 0; j < kCols; ++j) {
          acc[0][j] = std::fma(a0, brow[j], acc[0][j]);
          acc[1][j] = std::fma(a1, brow[j], acc[1][j]);
          acc[2][j] = std::fma(a2, brow[j], acc[2][j]);
          acc[3][j] = std::fma(a3, brow[j], acc[3][j]);
        }
      }
      for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t j = 0; j < kCols; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
    }
    if (j0 < n) {
      const std::size_t width = n - j0;
      T acc[kRows][kCols];
      for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t j = 0; j < width; ++j) acc[r][j] = accumulate ? c[(i0 + r) * n + j0 + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j0;
        for (std::size_t r = 0; r < kRows; ++r) {
          const T av = a[(i0 + r) * a_rs + p * a_cs];
          for (std::size_t j = 0; j < width; ++j) acc[r][j] = std::fma(av, brow[j], acc[r][j]);
        }
      }
      for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t j = 0; j < width; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
    }
  }
  for (; i0 < m; ++i0) {
    T* crow = c + i0 * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T{0};
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i0 * a_rs + p * a_cs];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

}  // namespace fsal
