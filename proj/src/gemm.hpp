#pragma once

// Dense kernels shared by the tensor ops. Every output element is accumulated
// sequentially in ascending inner index, so results do not depend on blocking.

#include <algorithm>
#include <cstdint>

namespace cnvs::kernel {

/// C (m x n) = [C +] A (m x k) * B (k x n), all row-major and contiguous.
template <class T>
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const T* __restrict a, const T* __restrict b,
          T* __restrict c, bool accumulate) {
  if (!accumulate) {
    std::fill(c, c + m * n, T(0));
  }
  constexpr std::int64_t kColBlock = 1024;
  for (std::int64_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::int64_t j1 = std::min(n, j0 + kColBlock);
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* __restrict c0 = c + (i + 0) * n;
      T* __restrict c1 = c + (i + 1) * n;
      T* __restrict c2 = c + (i + 2) * n;
      T* __restrict c3 = c + (i + 3) * n;
      const T* a0 = a + (i + 0) * k;
      const T* a1 = a + (i + 1) * k;
      const T* a2 = a + (i + 2) * k;
      const T* a3 = a + (i + 3) * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T* __restrict brow = b + p * n;
        const T x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
        for (std::int64_t j = j0; j < j1; ++j) {
          const T bv = brow[j];
          c0[j] += x0 * bv;
          c1[j] += x1 * bv;
          c2[j] += x2 * bv;
          c3[j] += x3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* __restrict ci = c + i * n;
      const T* ai = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T* __restrict brow = b + p * n;
        const T x = ai[p];
        for (std::int64_t j = j0; j < j1; ++j) {
          ci[j] += x * brow[j];
        }
      }
    }
  }
}

/// dst (cols x rows) = src (rows x cols) transposed.
template <class T>
void transpose(std::int64_t rows, std::int64_t cols, const T* __restrict src, T* __restrict dst) {
  constexpr std::int64_t kTile = 32;
  for (std::int64_t r0 = 0; r0 < rows; r0 += kTile) {
    for (std::int64_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::int64_t r1 = std::min(rows, r0 + kTile);
      const std::int64_t c1 = std::min(cols, c0 + kTile);
      for (std::int64_t r = r0; r < r1; ++r) {
        for (std::int64_t c = c0; c < c1; ++c) {
          dst[c * rows + r] = src[r * cols + c];
        }
      }
    }
  }
}

}  // namespace cnvs::kernel
