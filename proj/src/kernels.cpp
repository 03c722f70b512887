// SPDX-License-Identifier: Apache-2.0
#include "vaguide/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace vaguide::kernels {
namespace {

// Rows [r0, r1) of C. Four rows share each loaded row of B.
template <class T>
void gemm_rows(std::size_t r0, std::size_t r1, std::size_t n, std::size_t k, const T *__restrict a,
               const T *__restrict b, T *__restrict c, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = r0; i < r1; ++i) std::memset(c + i * n, 0, n * sizeof(T));
  std::size_t i = r0;
  for (; i + 4 <= r1; i += 4) {
    T *__restrict c0 = c + i * n;
    T *__restrict c1 = c0 + n;
    T *__restrict c2 = c1 + n;
    T *__restrict c3 = c2 + n;
    const T *a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const T *__restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = bp[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < r1; ++i) {
    T *__restrict ci = c + i * n;
    const T *ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = ai[p];
      const T *__restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * bp[j];
    }
  }
}

}  // namespace

namespace serial {

template <class T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T *a, const T *b, T *c, bool accumulate) {
  gemm_rows(0, m, n, k, a, b, c, accumulate);
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float *, const float *, float *, bool);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double *, const double *, double *, bool);

}  // namespace serial

template <class T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T *a, const T *b, T *c, bool accumulate) {
  if (m * n * k < kParallelGemmThreshold || m < 8) {
    gemm_rows(0, m, n, k, a, b, c, accumulate);
    return;
  }
  // Blocks of 4 rows keep the micro-kernel's row grouping identical to the
  // serial path's (both start blocks at multiples of 4).
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((m + 3) / 4);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * 4;
    gemm_rows(r0, std::min(m, r0 + 4), n, k, a, b, c, accumulate);
  }
}

template <class T>
void transpose(std::size_t m, std::size_t n, const T *a, T *b) {
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += tile)
    for (std::size_t j0 = 0; j0 < n; j0 += tile)
      for (std::size_t i = i0; i < std::min(m, i0 + tile); ++i)
        for (std::size_t j = j0; j < std::min(n, j0 + tile); ++j) b[j * m + i] = a[i * n + j];
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float *, const float *, float *, bool);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double *, const double *, double *, bool);
template void transpose<float>(std::size_t, std::size_t, const float *, float *);
template void transpose<double>(std::size_t, std::size_t, const double *, double *);

}  // namespace vaguide::kernels
