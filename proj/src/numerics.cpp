#include "anatgraph/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "anatgraph/kernels.hpp"

namespace anatgraph {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.dims()) + " x " +
                     shape_string(b.dims()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  kernels::active().gemm(kernels::Trans::No, kernels::Trans::No, m, n, k, a.ptr(), k, b.ptr(), n,
                         0.0f, out.ptr(), n);
  require_finite(out, "matmul");
  return out;
}

std::size_t conv3d_out_dim(std::size_t dim, int stride) {
  return (dim + 2 - 3) / static_cast<std::size_t>(stride) + 1;
}

namespace detail {

Conv3dGeometry conv3d_geometry(const Shape& input, const Shape& kernels, int stride) {
  if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");
  if (kernels.size() != 5 || kernels[2] != 3 || kernels[3] != 3 || kernels[4] != 3) {
    throw ShapeError("conv3d: kernels must be [C_out, C_in, 3, 3, 3], got " + shape_string(kernels));
  }
  Conv3dGeometry g{};
  if (input.size() == 4) {
    g.batch = 1;
    g.c_in = input[0];
    g.d = input[1];
    g.h = input[2];
    g.w = input[3];
  } else if (input.size() == 5) {
    g.batch = input[0];
    g.c_in = input[1];
    g.d = input[2];
    g.h = input[3];
    g.w = input[4];
  } else {
    throw ShapeError("conv3d: input must be rank 4 or 5, got " + shape_string(input));
  }
  if (kernels[1] != g.c_in) {
    throw ShapeError("conv3d: channel mismatch, input has " + std::to_string(g.c_in) +
                     ", kernels expect " + std::to_string(kernels[1]));
  }
  g.c_out = kernels[0];
  g.stride = stride;
  g.od = conv3d_out_dim(g.d, stride);
  g.oh = conv3d_out_dim(g.h, stride);
  g.ow = conv3d_out_dim(g.w, stride);
  return g;
}

// col[(c*27 + tap), b*P + p] = x[b, c, o*s + k - 1] (zero outside).
void im2col(const float* x, const Conv3dGeometry& g, std::vector<float>& col) {
  const std::size_t plane = g.out_plane();
  const std::size_t ncols = g.col_cols();
  col.assign(g.col_rows() * ncols, 0.0f);
  const long s = g.stride;
  const long D = static_cast<long>(g.d), H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (int kz = 0; kz < 3; ++kz) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          float* row = col.data() + (c * 27 + kz * 9 + ky * 3 + kx) * ncols;
          for (std::size_t b = 0; b < g.batch; ++b) {
            const float* src = x + (b * g.c_in + c) * g.in_plane();
            float* dst = row + b * plane;
            for (std::size_t oz = 0; oz < g.od; ++oz) {
              const long iz = static_cast<long>(oz) * s + kz - 1;
              if (iz < 0 || iz >= D) continue;
              for (std::size_t oy = 0; oy < g.oh; ++oy) {
                const long iy = static_cast<long>(oy) * s + ky - 1;
                if (iy < 0 || iy >= H) continue;
                const float* srow = src + (iz * H + iy) * W;
                float* drow = dst + (oz * g.oh + oy) * g.ow;
                for (std::size_t ox = 0; ox < g.ow; ++ox) {
                  const long ix = static_cast<long>(ox) * s + kx - 1;
                  if (ix >= 0 && ix < W) drow[ox] = srow[ix];
                }
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<float>& col, const Conv3dGeometry& g, float* dx) {
  const std::size_t plane = g.out_plane();
  const std::size_t ncols = g.col_cols();
  const long s = g.stride;
  const long D = static_cast<long>(g.d), H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (int kz = 0; kz < 3; ++kz) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const float* row = col.data() + (c * 27 + kz * 9 + ky * 3 + kx) * ncols;
          for (std::size_t b = 0; b < g.batch; ++b) {
            float* dst = dx + (b * g.c_in + c) * g.in_plane();
            const float* src = row + b * plane;
            for (std::size_t oz = 0; oz < g.od; ++oz) {
              const long iz = static_cast<long>(oz) * s + kz - 1;
              if (iz < 0 || iz >= D) continue;
              for (std::size_t oy = 0; oy < g.oh; ++oy) {
                const long iy = static_cast<long>(oy) * s + ky - 1;
                if (iy < 0 || iy >= H) continue;
                float* drow = dst + (iz * H + iy) * W;
                const float* srow = src + (oz * g.oh + oy) * g.ow;
                for (std::size_t ox = 0; ox < g.ow; ++ox) {
                  const long ix = static_cast<long>(ox) * s + kx - 1;
                  if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

ChannelLayout channel_layout(const Shape& dims) {
  if (dims.size() < 2) throw ShapeError("batch_norm: input must have a channel axis");
  ChannelLayout l;
  l.outer = dims[0];
  l.channels = dims[1];
  l.inner = 1;
  for (std::size_t i = 2; i < dims.size(); ++i) l.inner *= dims[i];
  return l;
}

BatchNormForward batch_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                    BnMode mode, BatchNormStats* stats) {
  const ChannelLayout l = channel_layout(x.dims());
  if (gamma.size() != l.channels || beta.size() != l.channels) {
    throw ShapeError("batch_norm: gamma/beta length must equal channel count " +
                     std::to_string(l.channels));
  }
  if (mode == BnMode::Train && l.outer < 2) {
    throw ShapeError("batch_norm: train mode needs a batch of at least 2, got " +
                     std::to_string(l.outer));
  }
  if (mode == BnMode::Eval && stats == nullptr) {
    throw ShapeError("batch_norm: eval mode needs running statistics");
  }
  if (stats && (stats->running_mean.size() != l.channels || stats->running_var.size() != l.channels)) {
    throw ShapeError("batch_norm: running statistics length mismatch");
  }
  BatchNormForward f{Tensor(x.dims()), Tensor(x.dims()), std::vector<float>(l.channels)};
  const std::size_t count = l.outer * l.inner;
  for (std::size_t c = 0; c < l.channels; ++c) {
    float mean = 0.0f, inv_std = 0.0f;
    if (mode == BnMode::Train) {
      double sum = 0.0;
      for (std::size_t o = 0; o < l.outer; ++o) {
        const float* p = x.ptr() + (o * l.channels + c) * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t o = 0; o < l.outer; ++o) {
        const float* p = x.ptr() + (o * l.channels + c) * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean = static_cast<float>(mu);
      inv_std = static_cast<float>(1.0 / std::sqrt(var + kBatchNormEps));
      if (stats) {
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        float& rm = stats->running_mean[c];
        float& rv = stats->running_var[c];
        rm = static_cast<float>((1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * mu);
        rv = static_cast<float>((1.0 - kBatchNormMomentum) * rv + kBatchNormMomentum * unbiased);
      }
    } else {
      mean = stats->running_mean[c];
      inv_std = static_cast<float>(1.0 / std::sqrt(static_cast<double>(stats->running_var[c]) +
                                                   kBatchNormEps));
    }
    f.inv_std[c] = inv_std;
    const float g = gamma[c], b = beta[c];
    for (std::size_t o = 0; o < l.outer; ++o) {
      const std::size_t off = (o * l.channels + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        const float xh = (x[off + i] - mean) * inv_std;
        f.x_hat[off + i] = xh;
        f.y[off + i] = g * xh + b;
      }
    }
  }
  require_finite(f.y, "batch_norm");
  return f;
}

}  // namespace detail

Tensor conv3d(const Tensor& input, const Tensor& kernels, int stride) {
  const auto g = detail::conv3d_geometry(input.dims(), kernels.dims(), stride);
  thread_local std::vector<float> col;
  detail::im2col(input.ptr(), g, col);
  const std::size_t plane = g.out_plane();
  const std::size_t ncols = g.col_cols();
  std::vector<float> tmp(g.c_out * ncols);
  kernels::active().gemm(kernels::Trans::No, kernels::Trans::No, g.c_out, ncols, g.col_rows(),
                         kernels.ptr(), g.col_rows(), col.data(), ncols, 0.0f, tmp.data(), ncols);
  Shape out_dims = input.rank() == 4 ? Shape{g.c_out, g.od, g.oh, g.ow}
                                     : Shape{g.batch, g.c_out, g.od, g.oh, g.ow};
  Tensor out(out_dims);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      std::copy_n(tmp.data() + co * ncols + b * plane, plane, out.ptr() + (b * g.c_out + co) * plane);
    }
  }
  require_finite(out, "conv3d");
  return out;
}

float activate(float v, Activation kind) {
  switch (kind) {
    case Activation::ELU: return v > 0.0f ? v : kEluAlpha * std::expm1(v);
    case Activation::ReLU: return v > 0.0f ? v : 0.0f;
    case Activation::Sigmoid:
      if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
      {
        const float e = std::exp(v);
        return e / (1.0f + e);
      }
  }
  return v;
}

Tensor activation(const Tensor& x, Activation kind) {
  Tensor out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activate(x[i], kind);
  require_finite(out, "activation");
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnMode mode,
                  BatchNormStats* stats) {
  return detail::batch_norm_forward(x, gamma, beta, mode, stats).y;
}

Tensor l2_normalize(const Tensor& x) {
  if (x.rank() > 2) throw ShapeError("l2_normalize: expects a vector or a matrix of rows");
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t cols = x.rank() == 1 ? x.dim(0) : x.dim(1);
  Tensor out(x.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* p = x.ptr() + r * cols;
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += static_cast<double>(p[c]) * p[c];
    const double norm = std::sqrt(sq);
    if (norm <= 1e-12) throw DegenerateInputError("l2_normalize: vector norm below 1e-12");
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<float>(p[c] / norm);
  }
  return out;
}

namespace {

double dot_d(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

}  // namespace

float info_nce(std::span<const float> q, std::span<const float> k_pos,
               std::span<const std::span<const float>> negatives, float tau) {
  if (!(tau > 0.0f)) throw ConfigError("info_nce: tau must be > 0");
  if (negatives.empty()) throw ShapeError("info_nce: at least one negative is required");
  if (q.size() != k_pos.size()) throw ShapeError("info_nce: q and k+ dimension mismatch");
  std::vector<double> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(dot_d(q, k_pos) / tau);
  for (const auto& n : negatives) {
    if (n.size() != q.size()) throw ShapeError("info_nce: negative dimension mismatch");
    logits.push_back(dot_d(q, n) / tau);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return static_cast<float>(mx + std::log(z) - logits[0]);
}

float info_nce(std::span<const float> q, std::span<const float> k_pos, const Tensor& negatives,
               float tau) {
  if (negatives.rank() != 2) throw ShapeError("info_nce: negatives must be [K x F]");
  std::vector<std::span<const float>> rows;
  rows.reserve(negatives.dim(0));
  for (std::size_t r = 0; r < negatives.dim(0); ++r) {
    rows.emplace_back(negatives.ptr() + r * negatives.dim(1), negatives.dim(1));
  }
  return info_nce(q, k_pos, rows, tau);
}

}  // namespace anatgraph
