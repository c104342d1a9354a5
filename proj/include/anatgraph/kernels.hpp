#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace anatgraph::kernels {

enum class Trans { No, Yes };

// Row-major C[m x n] = op(A) * op(B) + beta * C, beta in {0, 1}.
// op(A) is m x k, op(B) is k x n; lda/ldb/ldc are the row strides of the
// stored (untransposed) matrices.
using GemmFn = void (*)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                        const float* a, std::size_t lda, const float* b, std::size_t ldb,
                        float beta, float* c, std::size_t ldc);
using DotFn = float (*)(const float* x, const float* y, std::size_t n);
// y += alpha * x
using AxpyFn = void (*)(float alpha, const float* x, float* y, std::size_t n);

struct KernelTable {
  std::string_view name;
  GemmFn gemm;
  DotFn dot;
  AxpyFn axpy;
};

// Portable reference implementations; the ground truth for the SIMD variants.
const KernelTable& scalar_table();

// Nullptr when the variant was not compiled in or the CPU lacks the ISA.
const KernelTable* avx2_table();

// Table used by the rest of the library. Chosen once at first use: the best
// supported variant, unless ANATGRAPH_KERNELS=scalar is set.
const KernelTable& active();

// Force a variant ("scalar" or "avx2"). Returns false if unavailable.
bool select(std::string_view name);

std::vector<std::string_view> available();

}  // namespace anatgraph::kernels
