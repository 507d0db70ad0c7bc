#pragma once

#include <vector>

#include "swm/tensor.hpp"

namespace swm {

/// C[m,n] += A[m,k] * B[k,n].  ikj loop order so the inner loop streams
/// contiguous rows of B and C; gcc vectorizes it well.
template <class S>
void gemm_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] = A[m,k] * B[k,n] (C overwritten).
template <class S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  std::fill(c, c + m * n, S(0));
  gemm_acc(a, b, c, m, k, n);
}

/// out[n,m] = in[m,n].
template <class S>
void transpose2d(const S* in, S* out, int64_t m, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
}

/// C[m,n] += A^T[m,k] * B[k,n] where A is stored [k,m].
template <class S>
void gemm_at_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const S* arow = a + p * m;
    const S* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      S av = arow[i];
      if (av == S(0)) continue;
      S* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] += A[m,k] * B^T[k,n] where B is stored [n,k].
template <class S>
void gemm_bt_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  std::vector<S> bt(static_cast<size_t>(k) * static_cast<size_t>(n));
  transpose2d(b, bt.data(), n, k);
  gemm_acc(a, bt.data(), c, m, k, n);
}

}  // namespace swm
