#pragma once

// Dense and row-sparse kernels in two flavours.
//
// `serial` holds the straightforward reference loops used by tests and the
// kernel benchmark. `parallel` holds the OpenMP versions the autodiff ops run
// on. Both accumulate every output element over the reduction index in
// ascending order, starting from the same initial value, so for a given build
// they agree bit for bit regardless of thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "omnidit/fastmath.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace omnidit::kernels {

/// Compressed row structure of an attention mask: row q may attend
/// cols[row_ptr[q] .. row_ptr[q+1]), ascending.
struct RowSparsity {
  std::size_t rows = 0;
  std::size_t cols_total = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<std::size_t> cols;

  std::size_t nnz() const noexcept { return cols.size(); }
};

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace serial {

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[p * n + j], acc);
      c[i * n + j] = acc;
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[j * k + p], acc);
      c[i * n + j] = acc;
    }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[p * m + i], b[p * n + j], acc);
      c[i * n + j] = acc;
    }
}

/// Row-sparse scaled-dot-product attention for `groups` independent
/// (batch, head) slices. q,k,v,out are [groups, len, d]; probs receives the
/// softmax weights in CSR order, [groups, nnz].
template <typename T>
void sparse_attention(std::size_t groups, std::size_t len, std::size_t d, const RowSparsity& mask, T scale,
                      const T* q, const T* k, const T* v, T* out, T* probs) {
  const std::size_t nnz = mask.nnz();
  for (std::size_t g = 0; g < groups; ++g) {
    const T* qg = q + g * len * d;
    const T* kg = k + g * len * d;
    const T* vg = v + g * len * d;
    T* og = out + g * len * d;
    T* pg = probs + g * nnz;
    for (std::size_t r = 0; r < len; ++r) {
      const std::size_t b0 = mask.row_ptr[r], b1 = mask.row_ptr[r + 1];
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = b0; e < b1; ++e) {
        const T* kr = kg + mask.cols[e] * d;
        T s = 0;
        for (std::size_t c = 0; c < d; ++c) s = std::fma(qg[r * d + c], kr[c], s);
        s *= scale;
        pg[e] = s;
        mx = std::max(mx, s);
      }
      T sum = 0;
      for (std::size_t e = b0; e < b1; ++e) {
        pg[e] = fastmath::exp(pg[e] - mx);
        sum += pg[e];
      }
      for (std::size_t e = b0; e < b1; ++e) pg[e] /= sum;
      T* orow = og + r * d;
      for (std::size_t c = 0; c < d; ++c) orow[c] = 0;
      for (std::size_t e = b0; e < b1; ++e) {
        const T* vr = vg + mask.cols[e] * d;
        for (std::size_t c = 0; c < d; ++c) orow[c] = std::fma(pg[e], vr[c], orow[c]);
      }
    }
  }
}

/// Backward of sparse_attention. Accumulates into dq, dk, dv.
template <typename T>
void sparse_attention_backward(std::size_t groups, std::size_t len, std::size_t d, const RowSparsity& mask,
                               T scale, const T* q, const T* k, const T* v, const T* probs, const T* dout,
                               T* dq, T* dk, T* dv) {
  const std::size_t nnz = mask.nnz();
  std::vector<T> dp;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t off = g * len * d;
    const T* pg = probs + g * nnz;
    for (std::size_t r = 0; r < len; ++r) {
      const std::size_t b0 = mask.row_ptr[r], b1 = mask.row_ptr[r + 1];
      dp.assign(b1 - b0, T{0});
      const T* dor = dout + off + r * d;
      T dot = 0;
      for (std::size_t e = b0; e < b1; ++e) {
        const T* vr = v + off + mask.cols[e] * d;
        T s = 0;
        for (std::size_t c = 0; c < d; ++c) s = std::fma(dor[c], vr[c], s);
        dp[e - b0] = s;
        dot = std::fma(pg[e], s, dot);
      }
      for (std::size_t e = b0; e < b1; ++e) {
        const std::size_t col = mask.cols[e];
        const T p = pg[e];
        const T ds = p * (dp[e - b0] - dot) * scale;
        T* dvr = dv + off + col * d;
        T* dkr = dk + off + col * d;
        const T* kr = k + off + col * d;
        const T* qr = q + off + r * d;
        T* dqr = dq + off + r * d;
        for (std::size_t c = 0; c < d; ++c) {
          dvr[c] = std::fma(p, dor[c], dvr[c]);
          dkr[c] = std::fma(ds, qr[c], dkr[c]);
          dqr[c] = std::fma(ds, kr[c], dqr[c]);
        }
      }
    }
  }
}

}  // namespace serial

namespace parallel {

namespace detail {
constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kParallelWork = 1u << 15;

// Four output rows c[r][0..n) += sum_p arow[r][p * astride] * b[p][j], with
// p ascending per element. Column tiles of kColTile stay in registers across
// the whole p loop; the remainder columns go through memory.
template <typename T>
void tile_rows(std::size_t k, std::size_t n, const T* const* arow, std::size_t astride, const T* __restrict b,
               T* __restrict c) {
  constexpr std::size_t kColTile = 64 / sizeof(T) * 2;
  std::size_t j0 = 0;
  for (; j0 + kColTile <= n; j0 += kColTile) {
    T acc[kRowBlock][kColTile];
    for (std::size_t r = 0; r < kRowBlock; ++r)
      for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] = c[r * n + j0 + j];
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict br = b + p * n + j0;
      for (std::size_t r = 0; r < kRowBlock; ++r) {
        const T av = arow[r][p * astride];
        for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] = std::fma(av, br[j], acc[r][j]);
      }
    }
    for (std::size_t r = 0; r < kRowBlock; ++r)
      for (std::size_t j = 0; j < kColTile; ++j) c[r * n + j0 + j] = acc[r][j];
  }
  if (j0 == n) return;
  for (std::size_t p = 0; p < k; ++p) {
    const T* __restrict br = b + p * n;
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const T av = arow[r][p * astride];
      T* __restrict cr = c + r * n;
      for (std::size_t j = j0; j < n; ++j) cr[j] = std::fma(av, br[j], cr[j]);
    }
  }
}
}  // namespace detail

// i-k-j ordering with four output rows per block; each C element still sums
// p = 0..k-1 in order.
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b,
          T* __restrict c, bool accumulate) {
  using detail::kRowBlock;
  const std::size_t blocks = (m + kRowBlock - 1) / kRowBlock;
  const bool par = m * n * k >= detail::kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = blk * kRowBlock;
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    if (!accumulate)
      for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * n, c + (i + 1) * n, T{0});
    if (i1 - i0 == kRowBlock) {
      const T* arow[kRowBlock];
      for (std::size_t r = 0; r < kRowBlock; ++r) arow[r] = a + (i0 + r) * k;
      detail::tile_rows<T>(k, n, arow, 1, b, c + i0 * n);
    } else {
      for (std::size_t i = i0; i < i1; ++i) {
        T* __restrict ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T ai = a[i * k + p];
          const T* __restrict br = b + p * n;
          for (std::size_t j = 0; j < n; ++j) ci[j] = std::fma(ai, br[j], ci[j]);
        }
      }
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t tile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += tile)
    for (std::size_t c0 = 0; c0 < cols; c0 += tile)
      for (std::size_t r = r0; r < std::min(rows, r0 + tile); ++r)
        for (std::size_t c = c0; c < std::min(cols, c0 + tile); ++c) dst[c * rows + r] = src[r * cols + c];
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm(m, k, n, a, bt.data(), c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b,
             T* __restrict c, bool accumulate) {
  using detail::kRowBlock;
  const std::size_t blocks = (m + kRowBlock - 1) / kRowBlock;
  const bool par = m * n * k >= detail::kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = blk * kRowBlock;
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    if (!accumulate)
      for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * n, c + (i + 1) * n, T{0});
    if (i1 - i0 == kRowBlock) {
      const T* arow[kRowBlock];
      for (std::size_t r = 0; r < kRowBlock; ++r) arow[r] = a + i0 + r;
      detail::tile_rows<T>(k, n, arow, m, b, c + i0 * n);
    } else {
      for (std::size_t i = i0; i < i1; ++i) {
        T* __restrict ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T ai = a[p * m + i];
          const T* __restrict br = b + p * n;
          for (std::size_t j = 0; j < n; ++j) ci[j] = std::fma(ai, br[j], ci[j]);
        }
      }
    }
  }
}

namespace detail {

// Scores (or dO.v products) for one query row against the row's keys, using
// a [d, len] transposed key matrix so the key loop is unit-stride when the
// row's keys are contiguous. Per element the sum runs c = 0..d-1, exactly as
// the serial dot product does.
template <typename T, std::size_t DC = 0>
void row_dots(std::size_t len, std::size_t d_rt, const T* __restrict qrow, const T* __restrict kt,
              const std::size_t* cols, std::size_t count, T* __restrict out) {
  const std::size_t d = DC ? DC : d_rt;
  for (std::size_t e = 0; e < count; ++e) out[e] = T{0};
  const bool contiguous = count > 0 && cols[count - 1] - cols[0] == count - 1;
  if (contiguous) {
    const std::size_t c0 = cols[0];
    for (std::size_t c = 0; c < d; ++c) {
      const T qc = qrow[c];
      const T* __restrict kr = kt + c * len + c0;
      for (std::size_t e = 0; e < count; ++e) out[e] = std::fma(qc, kr[e], out[e]);
    }
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      const T qc = qrow[c];
      const T* kr = kt + c * len;
      for (std::size_t e = 0; e < count; ++e) out[e] = std::fma(qc, kr[cols[e]], out[e]);
    }
  }
}

// DC != 0 fixes the head width at compile time; results are identical.
template <typename T, std::size_t DC = 0>
void attention_group(std::size_t len, std::size_t d_rt, const RowSparsity& mask, T scale, const T* q, const T* k,
                     const T* v, T* out, T* probs, std::vector<T>& kt) {
  const std::size_t d = DC ? DC : d_rt;
  kt.resize(len * d);
  transpose(len, d, k, kt.data());
  for (std::size_t r = 0; r < len; ++r) {
    const std::size_t b0 = mask.row_ptr[r], b1 = mask.row_ptr[r + 1];
    T* pr = probs + b0;
    row_dots<T, DC>(len, d, q + r * d, kt.data(), mask.cols.data() + b0, b1 - b0, pr);
    // Elementwise passes are split from the ordered reductions so they vectorize.
    const std::size_t cnt = b1 - b0;
    for (std::size_t e = 0; e < cnt; ++e) pr[e] *= scale;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t e = 0; e < cnt; ++e) mx = std::max(mx, pr[e]);
    for (std::size_t e = 0; e < cnt; ++e) pr[e] = fastmath::exp(pr[e] - mx);
    T sum = 0;
    for (std::size_t e = 0; e < cnt; ++e) sum += pr[e];
    for (std::size_t e = 0; e < cnt; ++e) pr[e] /= sum;
    T* __restrict orow = out + r * d;
    if constexpr (DC != 0) {
      // Register-resident accumulator; same per-element order as below.
      T acc[DC] = {};
      for (std::size_t e = b0; e < b1; ++e) {
        const T p = probs[e];
        const T* __restrict vr = v + mask.cols[e] * DC;
        for (std::size_t c = 0; c < DC; ++c) acc[c] = std::fma(p, vr[c], acc[c]);
      }
      for (std::size_t c = 0; c < DC; ++c) orow[c] = acc[c];
    } else {
      for (std::size_t c = 0; c < d; ++c) orow[c] = 0;
      for (std::size_t e = b0; e < b1; ++e) {
        const T p = probs[e];
        const T* __restrict vr = v + mask.cols[e] * d;
#pragma GCC ivdep
        for (std::size_t c = 0; c < d; ++c) orow[c] = std::fma(p, vr[c], orow[c]);
      }
    }
  }
}

template <typename T, std::size_t DC = 0>
void attention_group_backward(std::size_t len, std::size_t d_rt, const RowSparsity& mask, T scale, const T* q,
                              const T* k, const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv,
                              std::vector<T>& vt, std::vector<T>& dp) {
  const std::size_t d = DC ? DC : d_rt;
  vt.resize(len * d);
  transpose(len, d, v, vt.data());
  for (std::size_t r = 0; r < len; ++r) {
    const std::size_t b0 = mask.row_ptr[r], b1 = mask.row_ptr[r + 1];
    dp.resize(b1 - b0);
    const T* dor = dout + r * d;
    row_dots<T, DC>(len, d, dor, vt.data(), mask.cols.data() + b0, b1 - b0, dp.data());
    T dot = 0;
    for (std::size_t e = b0; e < b1; ++e) dot = std::fma(probs[e], dp[e - b0], dot);
    const T* __restrict qr = q + r * d;
    T* __restrict dqr = dq + r * d;
    if constexpr (DC != 0) {
      T acc[DC];
      for (std::size_t c = 0; c < DC; ++c) acc[c] = dqr[c];
      for (std::size_t e = b0; e < b1; ++e) {
        const std::size_t col = mask.cols[e];
        const T p = probs[e];
        const T ds = p * (dp[e - b0] - dot) * scale;
        T* __restrict dvr = dv + col * DC;
        T* __restrict dkr = dk + col * DC;
        const T* __restrict kr = k + col * DC;
#pragma GCC ivdep
        for (std::size_t c = 0; c < DC; ++c) {
          dvr[c] = std::fma(p, dor[c], dvr[c]);
          dkr[c] = std::fma(ds, qr[c], dkr[c]);
          acc[c] = std::fma(ds, kr[c], acc[c]);
        }
      }
      for (std::size_t c = 0; c < DC; ++c) dqr[c] = acc[c];
    } else {
      for (std::size_t e = b0; e < b1; ++e) {
        const std::size_t col = mask.cols[e];
        const T p = probs[e];
        const T ds = p * (dp[e - b0] - dot) * scale;
        T* __restrict dvr = dv + col * d;
        T* __restrict dkr = dk + col * d;
        const T* __restrict kr = k + col * d;
#pragma GCC ivdep
        for (std::size_t c = 0; c < d; ++c) {
          dvr[c] = std::fma(p, dor[c], dvr[c]);
          dkr[c] = std::fma(ds, qr[c], dkr[c]);
          dqr[c] = std::fma(ds, kr[c], dqr[c]);
        }
      }
    }
  }
}

}  // namespace detail

// Slices are independent, so each thread owns whole (batch, head) groups.
template <typename T>
void sparse_attention(std::size_t groups, std::size_t len, std::size_t d, const RowSparsity& mask, T scale,
                      const T* q, const T* k, const T* v, T* out, T* probs) {
  const std::size_t slice = len * d;
  const std::size_t nnz = mask.nnz();
#pragma omp parallel if (groups > 1)
  {
    std::vector<T> kt;
#pragma omp for schedule(static)
    for (std::size_t g = 0; g < groups; ++g) {
      auto run = [&]<std::size_t DC>() {
        detail::attention_group<T, DC>(len, d, mask, scale, q + g * slice, k + g * slice, v + g * slice,
                                       out + g * slice, probs + g * nnz, kt);
      };
      switch (d) {
        case 8: run.template operator()<8>(); break;
        case 16: run.template operator()<16>(); break;
        case 32: run.template operator()<32>(); break;
        default: run.template operator()<0>();
      }
    }
  }
}

template <typename T>
void sparse_attention_backward(std::size_t groups, std::size_t len, std::size_t d, const RowSparsity& mask,
                               T scale, const T* q, const T* k, const T* v, const T* probs, const T* dout,
                               T* dq, T* dk, T* dv) {
  const std::size_t slice = len * d;
  const std::size_t nnz = mask.nnz();
#pragma omp parallel if (groups > 1)
  {
    std::vector<T> vt, dp;
#pragma omp for schedule(static)
    for (std::size_t g = 0; g < groups; ++g) {
      auto run = [&]<std::size_t DC>() {
        detail::attention_group_backward<T, DC>(len, d, mask, scale, q + g * slice, k + g * slice, v + g * slice,
                                                probs + g * nnz, dout + g * slice, dq + g * slice, dk + g * slice,
                                                dv + g * slice, vt, dp);
      };
      switch (d) {
        case 8: run.template operator()<8>(); break;
        case 16: run.template operator()<16>(); break;
        case 32: run.template operator()<32>(); break;
        default: run.template operator()<0>();
      }
    }
  }
}

}  // namespace parallel

}  // namespace omnidit::kernels
