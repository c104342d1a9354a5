// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma;
// nothing in it may run before dispatch.cpp confirms CPU support.
#include "anatgraph/kernels.hpp"

#include <immintrin.h>

#include <vector>

namespace anatgraph::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_movehdup_ps(lo));
  return _mm_cvtss_f32(lo);
}

float dot_avx2(const float* x, const float* y, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  }
  float acc = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy_avx2(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 a = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(a, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// R rows of A against a 16-column panel of B.
template <int R>
inline void panel16(std::size_t k, const float* a, std::size_t lda, const float* b, std::size_t ldb,
                    float beta, float* c, std::size_t ldc) {
  __m256 acc[R][2];
  for (int r = 0; r < R; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_ps();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * ldb);
    const __m256 b1 = _mm256_loadu_ps(b + p * ldb + 8);
    for (int r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + r * lda + p);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < R; ++r) {
    float* out = c + r * ldc;
    if (beta != 0.0f) {
      acc[r][0] = _mm256_add_ps(acc[r][0], _mm256_loadu_ps(out));
      acc[r][1] = _mm256_add_ps(acc[r][1], _mm256_loadu_ps(out + 8));
    }
    _mm256_storeu_ps(out, acc[r][0]);
    _mm256_storeu_ps(out + 8, acc[r][1]);
  }
}

template <int R>
inline void panel8(std::size_t k, const float* a, std::size_t lda, const float* b, std::size_t ldb,
                   float beta, float* c, std::size_t ldc) {
  __m256 acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_ps();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * ldb);
    for (int r = 0; r < R; ++r) {
      acc[r] = _mm256_fmadd_ps(_mm256_broadcast_ss(a + r * lda + p), b0, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    float* out = c + r * ldc;
    if (beta != 0.0f) acc[r] = _mm256_add_ps(acc[r], _mm256_loadu_ps(out));
    _mm256_storeu_ps(out, acc[r]);
  }
}

template <int R>
void row_block(std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
               std::size_t ldb, float beta, float* c, std::size_t ldc) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) panel16<R>(k, a, lda, b + j, ldb, beta, c + j, ldc);
  for (; j + 8 <= n; j += 8) panel8<R>(k, a, lda, b + j, ldb, beta, c + j, ldc);
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += a[r * lda + p] * b[p * ldb + j];
      float& out = c[r * ldc + j];
      out = beta == 0.0f ? acc : out + acc;
    }
  }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<4>(n, k, a + i * lda, lda, b, ldb, beta, c + i * ldc, ldc);
  switch (m - i) {
    case 3: row_block<3>(n, k, a + i * lda, lda, b, ldb, beta, c + i * ldc, ldc); break;
    case 2: row_block<2>(n, k, a + i * lda, lda, b, ldb, beta, c + i * ldc, ldc); break;
    case 1: row_block<1>(n, k, a + i * lda, lda, b, ldb, beta, c + i * ldc, ldc); break;
    default: break;
  }
}

void transpose_into(std::vector<float>& dst, const float* src, std::size_t rows, std::size_t cols,
                    std::size_t ld) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * ld + c];
  }
}

void gemm_avx2(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const float* a,
               std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
               std::size_t ldc) {
  thread_local std::vector<float> packed_a;
  thread_local std::vector<float> packed_b;
  if (ta == Trans::Yes) {
    // stored A is k x m
    transpose_into(packed_a, a, k, m, lda);
    a = packed_a.data();
    lda = k;
  }
  if (tb == Trans::Yes) {
    // Rows of stored B are columns of op(B): dot products stream both operands.
    if (k >= 32 || n < 8) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const float v = dot_avx2(a + i * lda, b + j * ldb, k);
          float& out = c[i * ldc + j];
          out = beta == 0.0f ? v : out + v;
        }
      }
      return;
    }
    transpose_into(packed_b, b, n, k, ldb);
    b = packed_b.data();
    ldb = n;
  }
  gemm_nn(m, n, k, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace

const KernelTable& avx2_table_impl() {
  static const KernelTable table{"avx2", &gemm_avx2, &dot_avx2, &axpy_avx2};
  return table;
}

}  // namespace anatgraph::kernels
