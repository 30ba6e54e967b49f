#pragma once

#include <algorithm>
#include <cstddef>
#include <type_traits>

namespace scinet::detail {

// C[M x N] += A[M x K] * B[K x N], all row-major with explicit leading
// dimensions. Blocked over N and K. The summation order depends only on the
// block sizes, so results are reproducible.
template <typename T>
void gemm_accumulate_generic(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, std::size_t lda,
                             const T* __restrict B, std::size_t ldb, T* __restrict C, std::size_t ldc) {
  constexpr std::size_t kBlockN = 256;
  constexpr std::size_t kBlockK = 256;
  for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
    const std::size_t j_end = std::min(N, j0 + kBlockN);
    for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
      const std::size_t k_end = std::min(K, k0 + kBlockK);
      for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        for (std::size_t k = k0; k < k_end; ++k) {
          const T a = A[i * lda + k];
          const T* b = B + k * ldb;
          for (std::size_t j = j0; j < j_end; ++j) c[j] += a * b[j];
        }
      }
    }
  }
}

// Single-precision path: a Rows x 16 tile of C (Rows <= 6) lives in 8-wide
// vector registers while the K block streams through.
using f32x8 = float __attribute__((vector_size(32), aligned(4)));

template <std::size_t Rows>
void gemm_tile_16(std::size_t k_count, const float* __restrict A, std::size_t lda, const float* __restrict B,
                  std::size_t ldb, float* __restrict C, std::size_t ldc) {
  f32x8 acc[Rows][2] = {};
  for (std::size_t k = 0; k < k_count; ++k) {
    const f32x8 b0 = *reinterpret_cast<const f32x8*>(B + k * ldb);
    const f32x8 b1 = *reinterpret_cast<const f32x8*>(B + k * ldb + 8);
    for (std::size_t r = 0; r < Rows; ++r) {
      const float a = A[r * lda + k];
      acc[r][0] += a * b0;
      acc[r][1] += a * b1;
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    auto* c = reinterpret_cast<f32x8*>(C + r * ldc);
    c[0] += acc[r][0];
    c[1] += acc[r][1];
  }
}

template <typename T>
void gemm_accumulate(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, std::size_t lda,
                     const T* __restrict B, std::size_t ldb, T* __restrict C, std::size_t ldc) {
  if constexpr (!std::is_same_v<T, float>) {
    gemm_accumulate_generic(M, N, K, A, lda, B, ldb, C, ldc);
  } else {
    constexpr std::size_t kBlockN = 512;
    constexpr std::size_t kBlockK = 256;
    for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
      const std::size_t j_end = std::min(N, j0 + kBlockN);
      for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
        const std::size_t kb = std::min(K, k0 + kBlockK) - k0;
        for (std::size_t i = 0; i < M; i += 6) {
          const std::size_t rows = std::min<std::size_t>(6, M - i);
          const float* a = A + i * lda + k0;
          float* c_row = C + i * ldc;
          std::size_t j = j0;
          for (; j + 16 <= j_end; j += 16) {
            const float* b = B + k0 * ldb + j;
            switch (rows) {
              case 6: gemm_tile_16<6>(kb, a, lda, b, ldb, c_row + j, ldc); break;
              case 5: gemm_tile_16<5>(kb, a, lda, b, ldb, c_row + j, ldc); break;
              case 4: gemm_tile_16<4>(kb, a, lda, b, ldb, c_row + j, ldc); break;
              case 3: gemm_tile_16<3>(kb, a, lda, b, ldb, c_row + j, ldc); break;
              case 2: gemm_tile_16<2>(kb, a, lda, b, ldb, c_row + j, ldc); break;
              default: gemm_tile_16<1>(kb, a, lda, b, ldb, c_row + j, ldc); break;
            }
          }
          if (j < j_end) gemm_accumulate_generic(rows, j_end - j, kb, a, lda, B + k0 * ldb + j, ldb, c_row + j, ldc);
        }
      }
    }
  }
}

// out[cols x rows] = transpose(in[rows x cols]); `in` has leading dimension ld_in.
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict in, std::size_t ld_in, T* __restrict out) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r_end = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c_end = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r_end; ++r) {
        for (std::size_t c = c0; c < c_end; ++c) out[c * rows + r] = in[r * ld_in + c];
      }
    }
  }
}

}  // namespace scinet::detail
