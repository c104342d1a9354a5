#include "anatgraph/kernels.hpp"

namespace anatgraph::kernels {
namespace {

inline float load(const float* p, std::size_t ld, Trans t, std::size_t r, std::size_t c) {
  return t == Trans::No ? p[r * ld + c] : p[c * ld + r];
}

void gemm_scalar(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
                 std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += load(a, lda, ta, i, p) * load(b, ldb, tb, p, j);
      float& out = c[i * ldc + j];
      out = beta == 0.0f ? acc : out + acc;
    }
  }
}

float dot_scalar(const float* x, const float* y, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy_scalar(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar", &gemm_scalar, &dot_scalar, &axpy_scalar};
  return table;
}

}  // namespace anatgraph::kernels
