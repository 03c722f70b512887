// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace vaguide::kernels {

// Row-major C[m x n] (+)= A[m x k] * B[k x n].
//
// Each output element is accumulated over k in ascending order by the same
// row-block routine in both variants, so the parallel kernel is bit-identical
// to the serial one for any thread count.
template <class T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T *a, const T *b, T *c, bool accumulate);

// B[n x m] = A[m x n]^T
template <class T>
void transpose(std::size_t m, std::size_t n, const T *a, T *b);

namespace serial {
template <class T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T *a, const T *b, T *c, bool accumulate);
}  // namespace serial

// Matrices smaller than this many multiply-adds run serially.
inline constexpr std::size_t kParallelGemmThreshold = 1u << 16;

}  // namespace vaguide::kernels
