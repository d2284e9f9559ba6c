#pragma once

#include <algorithm>
#include <cstddef>

#include "sgg/threadpool.hpp"

namespace sgg {

// Small dense GEMM kernels, row-major, accumulate-into-C semantics.
// Per output element the reduction order over k is fixed, and parallel
// partitions never split an output element, so results do not depend on the
// thread count. This property is load-bearing: it is what keeps training
// bitwise reproducible while threaded.
//
// The microkernels hold an IT x JT accumulator tile in registers so that C
// is touched once per tile and the streamed operand is read near peak rate.

namespace gemm_detail {

template <class T>
inline constexpr size_t kTileJ = 128 / sizeof(T);  // two 512-bit vectors
constexpr size_t kTileI = 12;  // 12x2 accumulator vectors fit the register file
constexpr size_t kParallelCutoff = size_t(1) << 18;  // MACs

// One IT-row strip of tiles: C[i0..i0+IT, j0..j1). B is always walked row
// by row so the streamed operand stays sequential even on remainder edges.
template <class T, size_t IT, class AGet>
inline void tile_strip(AGet a_at, const T* B, size_t ldb, T* C, size_t ldc,
                       size_t i, size_t j0, size_t j1, size_t k) {
  constexpr size_t JT = kTileJ<T>;
  size_t j = j0;
  for (; j + JT <= j1; j += JT) {
    T acc[IT][JT];
    for (size_t r = 0; r < IT; ++r)
      for (size_t c = 0; c < JT; ++c) acc[r][c] = T(0);
    for (size_t kk = 0; kk < k; ++kk) {
      const T* __restrict brow = B + kk * ldb + j;
      for (size_t r = 0; r < IT; ++r) {
        const T a = a_at(i + r, kk);
        for (size_t c = 0; c < JT; ++c) acc[r][c] += a * brow[c];
      }
    }
    for (size_t r = 0; r < IT; ++r) {
      T* __restrict crow = C + (i + r) * ldc + j;
      for (size_t c = 0; c < JT; ++c) crow[c] += acc[r][c];
    }
  }
  if (j < j1) {
    const size_t rem = j1 - j;
    T acc[IT][JT];
    for (size_t r = 0; r < IT; ++r)
      for (size_t c = 0; c < rem; ++c) acc[r][c] = T(0);
    for (size_t kk = 0; kk < k; ++kk) {
      const T* __restrict brow = B + kk * ldb + j;
      for (size_t r = 0; r < IT; ++r) {
        const T a = a_at(i + r, kk);
        for (size_t c = 0; c < rem; ++c) acc[r][c] += a * brow[c];
      }
    }
    for (size_t r = 0; r < IT; ++r) {
      T* __restrict crow = C + (i + r) * ldc + j;
      for (size_t c = 0; c < rem; ++c) crow[c] += acc[r][c];
    }
  }
}

template <class T, class AGet>
inline void tile_body(AGet a_at, const T* B, size_t ldb, T* C, size_t ldc,
                      size_t i0, size_t i1, size_t j0, size_t j1, size_t k) {
  size_t i = i0;
  for (; i + kTileI <= i1; i += kTileI)
    tile_strip<T, kTileI>(a_at, B, ldb, C, ldc, i, j0, j1, k);
  for (; i + 4 <= i1; i += 4) tile_strip<T, 4>(a_at, B, ldb, C, ldc, i, j0, j1, k);
  for (; i + 2 <= i1; i += 2) tile_strip<T, 2>(a_at, B, ldb, C, ldc, i, j0, j1, k);
  for (; i < i1; ++i) tile_strip<T, 1>(a_at, B, ldb, C, ldc, i, j0, j1, k);
}

template <class T>
inline T dot_fixed(const T* __restrict a, const T* __restrict b, size_t k) {
  T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  const size_t k8 = k & ~size_t(7);
  for (size_t i = 0; i < k8; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T tail = T(0);
  for (size_t i = k8; i < k; ++i) tail += a[i] * b[i];
  return (((acc[0] + acc[1]) + (acc[2] + acc[3])) +
          ((acc[4] + acc[5]) + (acc[6] + acc[7]))) +
         tail;
}

inline size_t column_chunk(size_t n, size_t align) {
  const size_t threads = size_t(ThreadPool::instance().threads());
  size_t per = (n + threads - 1) / threads;
  per = ((per + align - 1) / align) * align;
  return std::max(per, align);
}

}  // namespace gemm_detail

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, size_t m, size_t n, size_t k) {
  using namespace gemm_detail;
  auto a_at = [&](size_t i, size_t kk) { return A[i * k + kk]; };
  if (m * n * k < kParallelCutoff) {
    tile_body<T>(a_at, B, n, C, n, 0, m, 0, n, k);
    return;
  }
  const size_t chunk = column_chunk(n, kTileJ<T>);
  const size_t blocks = (n + chunk - 1) / chunk;
  parallel_for(blocks, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const size_t j0 = b * chunk;
      tile_body<T>(a_at, B, n, C, n, 0, m, j0, std::min(j0 + chunk, n), k);
    }
  });
}

// C[n1,n2] += A[k,n1]^T * B[k,n2]   (the dW = dY^T X shape)
template <class T>
void gemm_tn(const T* A, const T* B, T* C, size_t n1, size_t n2, size_t k) {
  using namespace gemm_detail;
  auto a_at = [&](size_t i, size_t kk) { return A[kk * n1 + i]; };
  if (n1 * n2 * k < kParallelCutoff) {
    tile_body<T>(a_at, B, n2, C, n2, 0, n1, 0, n2, k);
    return;
  }
  // Split rows of C: each thread owns whole C rows, B is shared read-only.
  const size_t chunk = column_chunk(n1, kTileI);
  const size_t blocks = (n1 + chunk - 1) / chunk;
  parallel_for(blocks, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const size_t i0 = b * chunk;
      tile_body<T>(a_at, B, n2, C, n2, i0, std::min(i0 + chunk, n1), 0, n2, k);
    }
  });
}

// C[m,n] += A[m,k] * B[n,k]^T   (rows of B are the reduction operands)
template <class T>
void gemm_nt(const T* A, const T* B, T* C, size_t m, size_t n, size_t k) {
  using namespace gemm_detail;
  constexpr size_t VW = 64 / sizeof(T);
  auto body = [&](size_t j0, size_t j1) {
    constexpr size_t IT = 4, JT = 4;
    size_t i = 0;
    for (; i + IT <= m; i += IT) {
      size_t j = j0;
      for (; j + JT <= j1; j += JT) {
        T acc[IT][JT][VW];
        for (size_t r = 0; r < IT; ++r)
          for (size_t c = 0; c < JT; ++c)
            for (size_t v = 0; v < VW; ++v) acc[r][c][v] = T(0);
        const size_t kv = k & ~(VW - 1);
        for (size_t kk = 0; kk < kv; kk += VW) {
          for (size_t r = 0; r < IT; ++r) {
            const T* __restrict arow = A + (i + r) * k + kk;
            for (size_t c = 0; c < JT; ++c) {
              const T* __restrict brow = B + (j + c) * k + kk;
              for (size_t v = 0; v < VW; ++v) acc[r][c][v] += arow[v] * brow[v];
            }
          }
        }
        for (size_t r = 0; r < IT; ++r) {
          for (size_t c = 0; c < JT; ++c) {
            T s = T(0);
            for (size_t v = 0; v < VW; ++v) s += acc[r][c][v];
            for (size_t kk = kv; kk < k; ++kk) s += A[(i + r) * k + kk] * B[(j + c) * k + kk];
            C[(i + r) * n + (j + c)] += s;
          }
        }
      }
      for (; j < j1; ++j) {
        for (size_t r = 0; r < IT; ++r)
          C[(i + r) * n + j] += dot_fixed(A + (i + r) * k, B + j * k, k);
      }
    }
    for (; i < m; ++i) {
      for (size_t j = j0; j < j1; ++j) C[i * n + j] += dot_fixed(A + i * k, B + j * k, k);
    }
  };
  if (m * n * k < kParallelCutoff) {
    body(0, n);
    return;
  }
  const size_t chunk = column_chunk(n, 4);
  const size_t blocks = (n + chunk - 1) / chunk;
  parallel_for(blocks, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const size_t j0 = b * chunk;
      body(j0, std::min(j0 + chunk, n));
    }
  });
}

}  // namespace sgg
