#pragma once

#include <algorithm>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "mustgan/core/parallel.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace mustgan::detail {

// Register tile: kRows rows of C times one cache line group of columns.
template <class T>
struct GemmTile {
  static constexpr std::size_t kRows = 4;
  static constexpr std::size_t kCols = 256 / sizeof(T);
};

template <class T>
struct VecOf {
  static constexpr std::size_t kBytes = 64;
  static constexpr std::size_t kLanes = kBytes / sizeof(T);
  typedef T type __attribute__((vector_size(kBytes), aligned(alignof(T))));
};

// acc + a * b with a single rounding where the ISA provides it; fixed per build, so results
// do not depend on how the optimizer contracts surrounding code.
template <class V, class T>
[[gnu::always_inline]] inline V fused_multiply_add(T a, V b, V acc) {
#if defined(__AVX512F__)
  if constexpr (sizeof(V) == 64 && std::is_same_v<T, float>)
    return reinterpret_cast<V>(_mm512_fmadd_ps(_mm512_set1_ps(a), reinterpret_cast<__m512>(b), reinterpret_cast<__m512>(acc)));
  else if constexpr (sizeof(V) == 64 && std::is_same_v<T, double>)
    return reinterpret_cast<V>(_mm512_fmadd_pd(_mm512_set1_pd(a), reinterpret_cast<__m512d>(b), reinterpret_cast<__m512d>(acc)));
  else
#endif
    return acc + a * b;
}

template <class T, std::size_t Rows, std::size_t Cols>
[[gnu::always_inline]] inline void gemm_block(std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
                       std::size_t ldc, bool accumulate) {
  using V = typename VecOf<T>::type;
  constexpr std::size_t kLanes = VecOf<T>::kLanes;
  constexpr std::size_t kVecs = Cols / kLanes;
  static_assert(Cols % kLanes == 0);
  V acc[Rows][kVecs];
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t v = 0; v < kVecs; ++v)
      acc[r][v] = accumulate ? *reinterpret_cast<const V*>(C + r * ldc + v * kLanes) : V{};
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * ldb;
    V bv[kVecs];
#pragma GCC unroll 8
    for (std::size_t v = 0; v < kVecs; ++v) bv[v] = *reinterpret_cast<const V*>(b + v * kLanes);
#pragma GCC unroll 8
    for (std::size_t r = 0; r < Rows; ++r) {
      const T a = A[r * lda + k];
#pragma GCC unroll 8
      for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] = fused_multiply_add(a, bv[v], acc[r][v]);
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t v = 0; v < kVecs; ++v) *reinterpret_cast<V*>(C + r * ldc + v * kLanes) = acc[r][v];
}

// Scalar tail for the last cols % lanes columns; same k-ordered accumulation as gemm_block.
template <class T>
inline void gemm_scalar(std::size_t rows, std::size_t cols, std::size_t K, const T* A, std::size_t lda, const T* B,
                        std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) {
      T acc = accumulate ? C[r * ldc + j] : T(0);
      for (std::size_t k = 0; k < K; ++k) acc += A[r * lda + k] * B[k * ldb + j];
      C[r * ldc + j] = acc;
    }
}

template <class T, std::size_t Rows>
inline void gemm_rows(std::size_t cols, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
                      std::size_t ldc, bool accumulate) {
  constexpr std::size_t kCols = GemmTile<T>::kCols;
  constexpr std::size_t kLanes = VecOf<T>::kLanes;
  std::size_t j = 0;
  if (cols == kCols) {
    gemm_block<T, Rows, kCols>(K, A, lda, B, ldb, C, ldc, accumulate);
    return;
  }
  for (; j + kLanes <= cols; j += kLanes) gemm_block<T, Rows, kLanes>(K, A, lda, B + j, ldb, C + j, ldc, accumulate);
  if (j < cols) gemm_scalar<T>(Rows, cols - j, K, A, lda, B + j, ldb, C + j, ldc, accumulate);
}

/// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[K,N], row-major with leading dimensions.
/// Every C entry is reduced over k in ascending order, independent of tiling and threads.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
          std::size_t ldc, bool accumulate) {
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < M; ++i) std::fill(C + i * ldc, C + i * ldc + N, T(0));
    return;
  }
  constexpr std::size_t kRows = GemmTile<T>::kRows;
  constexpr std::size_t kCols = GemmTile<T>::kCols;
  const std::size_t row_blocks = (M + kRows - 1) / kRows;
  const std::size_t min_chunk = std::max<std::size_t>(1, 65536 / std::max<std::size_t>(1, N * K / kRows + 1));
  parallel_for(0, row_blocks, min_chunk, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t j0 = 0; j0 < N; j0 += kCols) {
      const std::size_t cols = std::min(kCols, N - j0);
      for (std::size_t rb = lo; rb < hi; ++rb) {
        const std::size_t i0 = rb * kRows;
        const std::size_t rows = std::min(kRows, M - i0);
        const T* a = A + i0 * lda;
        const T* b = B + j0;
        T* c = C + i0 * ldc + j0;
        switch (rows) {
          case 4: gemm_rows<T, 4>(cols, K, a, lda, b, ldb, c, ldc, accumulate); break;
          case 3: gemm_rows<T, 3>(cols, K, a, lda, b, ldb, c, ldc, accumulate); break;
          case 2: gemm_rows<T, 2>(cols, K, a, lda, b, ldb, c, ldc, accumulate); break;
          default: gemm_rows<T, 1>(cols, K, a, lda, b, ldb, c, ldc, accumulate); break;
        }
      }
    }
  });
}

/// out[cols, rows] = in[rows, cols]^T
template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t kB = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kB)
    for (std::size_t j0 = 0; j0 < cols; j0 += kB)
      for (std::size_t i = i0; i < std::min(rows, i0 + kB); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + kB); ++j) out[j * rows + i] = in[i * cols + j];
}

}  // namespace mustgan::detail
