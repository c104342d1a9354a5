#pragma once

#include <span>
#include <vector>

#include "anatgraph/tensor.hpp"

namespace anatgraph {

enum class Activation { ELU, ReLU, Sigmoid };
enum class BnMode { Train, Eval };

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;
inline constexpr float kEluAlpha = 1.0f;

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;

  static BatchNormStats identity(std::size_t channels) {
    return {Tensor({channels}, 0.0f), Tensor({channels}, 1.0f)};
  }
};

// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation with zero padding 1 and a 3x3x3 kernel.
// input: [C_in, D, H, W] or [B, C_in, D, H, W]; kernels: [C_out, C_in, 3, 3, 3].
Tensor conv3d(const Tensor& input, const Tensor& kernels, int stride);
std::size_t conv3d_out_dim(std::size_t dim, int stride);

Tensor activation(const Tensor& x, Activation kind);
float activate(float v, Activation kind);

// Per-channel normalization over every axis except axis 1 (x is [N, C] or
// [B, C, D, H, W]). Train mode uses batch moments and, if `stats` is given,
// blends them into the running estimates.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnMode mode,
                  BatchNormStats* stats);

// Rank 1: the vector; rank 2: each row.
Tensor l2_normalize(const Tensor& x);

// -log softmax_0 over [q.k+, q.k-_1, ...] / tau with max subtraction.
float info_nce(std::span<const float> q, std::span<const float> k_pos,
               std::span<const std::span<const float>> negatives, float tau);
// Negatives stored as rows of a [K x F] tensor.
float info_nce(std::span<const float> q, std::span<const float> k_pos, const Tensor& negatives,
               float tau);

namespace detail {

struct BatchNormForward {
  Tensor y;
  Tensor x_hat;
  std::vector<float> inv_std;
};

struct ChannelLayout {
  std::size_t outer = 0;
  std::size_t channels = 0;
  std::size_t inner = 0;
};

ChannelLayout channel_layout(const Shape& dims);

BatchNormForward batch_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                    BnMode mode, BatchNormStats* stats);

struct Conv3dGeometry {
  std::size_t batch, c_in, d, h, w;
  std::size_t c_out, od, oh, ow;
  int stride;
  std::size_t out_plane() const { return od * oh * ow; }
  std::size_t in_plane() const { return d * h * w; }
  std::size_t col_rows() const { return c_in * 27; }
  std::size_t col_cols() const { return batch * out_plane(); }
};

Conv3dGeometry conv3d_geometry(const Shape& input, const Shape& kernels, int stride);
void im2col(const float* x, const Conv3dGeometry& g, std::vector<float>& col);
void col2im(const std::vector<float>& col, const Conv3dGeometry& g, float* dx);

}  // namespace detail
}  // namespace anatgraph
