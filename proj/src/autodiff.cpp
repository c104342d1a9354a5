#include "anatgraph/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "anatgraph/kernels.hpp"

namespace anatgraph {

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(std::string name, Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  n.param_name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, bool needs_grad, Backward backward, std::string_view op) {
  require_finite(value, op);
  Node n;
  n.value = std::move(value);
  if (grad_enabled_ && needs_grad) {
    n.requires_grad = true;
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.dims(), 0.0f);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.grad.reshape(n.value.dims());
    n.has_grad = true;
    return;
  }
  if (n.grad.size() != g.size()) throw ShapeError("gradient shape mismatch during accumulate");
  kernels::active().axpy(1.0f, g.ptr(), n.grad.ptr(), g.size());
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw Error("backward() on a tape recorded with gradients disabled");
  if (consumed_) throw Error("backward() called twice on the same tape");
  consumed_ = true;
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(root.value.dims()));
  }
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.dims(), 1.0f);
  root.has_grad = true;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    require_finite(n.grad, "backward pass");
    n.backward(*this, n.grad);
  }
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.has_grad ? &n.grad : nullptr;
}

std::optional<Var> Tape::find_parameter(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].param_name.empty() && nodes_[i].param_name == name) return Var{i};
  }
  return std::nullopt;
}

std::vector<ParamGrad> grad(Tape& tape, Var loss, std::span<const std::string> names,
                            std::span<const Shape> shapes) {
  if (names.size() != shapes.size()) throw ShapeError("grad: names/shapes length mismatch");
  tape.backward(loss);
  std::vector<ParamGrad> out;
  out.reserve(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    ParamGrad pg{names[i], Tensor(shapes[i], 0.0f), false};
    if (auto v = tape.find_parameter(names[i])) {
      pg.on_tape = true;
      if (const Tensor* g = tape.grad(*v)) pg.value = *g;
    }
    out.push_back(std::move(pg));
  }
  return out;
}

namespace ad {

using kernels::Trans;

Var matmul(Tape& t, Var a, Var b) {
  Tensor out = anatgraph::matmul(t.value(a), t.value(b));
  const bool ng = t.requires_grad(a) || t.requires_grad(b);
  return t.record(
      std::move(out), ng,
      [a, b](Tape& tp, const Tensor& g) {
        const Tensor& av = tp.value(a);
        const Tensor& bv = tp.value(b);
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        const auto& kt = kernels::active();
        if (tp.requires_grad(a)) {
          Tensor& ga = tp.grad_buffer(a);
          kt.gemm(Trans::No, Trans::Yes, m, k, n, g.ptr(), n, bv.ptr(), n, 1.0f, ga.ptr(), k);
        }
        if (tp.requires_grad(b)) {
          Tensor& gb = tp.grad_buffer(b);
          kt.gemm(Trans::Yes, Trans::No, k, n, m, av.ptr(), k, g.ptr(), n, 1.0f, gb.ptr(), n);
        }
      },
      "matmul");
}

Var add_bias(Tape& t, Var x, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  if (xv.rank() != 2 || bv.size() != xv.dim(1)) {
    throw ShapeError("add_bias: x " + shape_string(xv.dims()) + " vs bias " +
                     shape_string(bv.dims()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  const bool ng = t.requires_grad(x) || t.requires_grad(bias);
  return t.record(
      std::move(out), ng,
      [x, bias, rows, cols](Tape& tp, const Tensor& g) {
        tp.accumulate(x, g);
        if (tp.requires_grad(bias)) {
          Tensor& gb = tp.grad_buffer(bias);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
          }
        }
      },
      "add_bias");
}

Var conv3d(Tape& t, Var x, Var kernels_var, int stride) {
  Tensor out = anatgraph::conv3d(t.value(x), t.value(kernels_var), stride);
  const bool ng = t.requires_grad(x) || t.requires_grad(kernels_var);
  return t.record(
      std::move(out), ng,
      [x, kernels_var, stride](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        const Tensor& wv = tp.value(kernels_var);
        const auto geo = detail::conv3d_geometry(xv.dims(), wv.dims(), stride);
        const std::size_t plane = geo.out_plane();
        const std::size_t ncols = geo.col_cols();
        const std::size_t krows = geo.col_rows();
        std::vector<float> dy(geo.c_out * ncols);
        for (std::size_t b = 0; b < geo.batch; ++b) {
          for (std::size_t co = 0; co < geo.c_out; ++co) {
            std::copy_n(g.ptr() + (b * geo.c_out + co) * plane, plane,
                        dy.data() + co * ncols + b * plane);
          }
        }
        const auto& kt = kernels::active();
        if (tp.requires_grad(kernels_var)) {
          std::vector<float> col;
          detail::im2col(xv.ptr(), geo, col);
          Tensor& gw = tp.grad_buffer(kernels_var);
          kt.gemm(Trans::No, Trans::Yes, geo.c_out, krows, ncols, dy.data(), ncols, col.data(),
                  ncols, 1.0f, gw.ptr(), krows);
        }
        if (tp.requires_grad(x)) {
          std::vector<float> dcol(krows * ncols);
          kt.gemm(Trans::Yes, Trans::No, krows, ncols, geo.c_out, wv.ptr(), krows, dy.data(),
                  ncols, 0.0f, dcol.data(), ncols);
          Tensor& gx = tp.grad_buffer(x);
          detail::col2im(dcol, geo, gx.ptr());
        }
      },
      "conv3d");
}

Var batch_norm(Tape& t, Var x, Var gamma, Var beta, BnMode mode, BatchNormStats* stats) {
  auto fwd = std::make_shared<detail::BatchNormForward>(
      detail::batch_norm_forward(t.value(x), t.value(gamma), t.value(beta), mode, stats));
  Tensor out = fwd->y;
  const bool ng = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.record(
      std::move(out), ng,
      [x, gamma, beta, mode, fwd](Tape& tp, const Tensor& g) {
        const auto l = detail::channel_layout(g.dims());
        const Tensor& gv = tp.value(gamma);
        const double count = static_cast<double>(l.outer * l.inner);
        const bool want_x = tp.requires_grad(x);
        Tensor gx = want_x ? Tensor(g.dims(), 0.0f) : Tensor();
        for (std::size_t c = 0; c < l.channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t o = 0; o < l.outer; ++o) {
            const std::size_t off = (o * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
              sum_g += g[off + i];
              sum_gx += static_cast<double>(g[off + i]) * fwd->x_hat[off + i];
            }
          }
          if (tp.requires_grad(gamma)) tp.grad_buffer(gamma)[c] += static_cast<float>(sum_gx);
          if (tp.requires_grad(beta)) tp.grad_buffer(beta)[c] += static_cast<float>(sum_g);
          if (!want_x) continue;
          const double scale = static_cast<double>(gv[c]) * fwd->inv_std[c];
          for (std::size_t o = 0; o < l.outer; ++o) {
            const std::size_t off = (o * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
              double d;
              if (mode == BnMode::Train) {
                d = scale * (g[off + i] - sum_g / count - fwd->x_hat[off + i] * sum_gx / count);
              } else {
                d = scale * g[off + i];
              }
              gx[off + i] = static_cast<float>(d);
            }
          }
        }
        if (want_x) tp.accumulate(x, gx);
      },
      "batch_norm");
}

Var activation(Tape& t, Var x, Activation kind) {
  Tensor out = anatgraph::activation(t.value(x), kind);
  return t.record(
      std::move(out), t.requires_grad(x),
      [x, kind](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        Tensor gx(g.dims());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float v = xv[i];
          float d = 0.0f;
          switch (kind) {
            case Activation::ELU: d = v > 0.0f ? 1.0f : kEluAlpha * std::exp(v); break;
            case Activation::ReLU: d = v > 0.0f ? 1.0f : 0.0f; break;
            case Activation::Sigmoid: {
              const float s = activate(v, Activation::Sigmoid);
              d = s * (1.0f - s);
              break;
            }
          }
          gx[i] = g[i] * d;
        }
        tp.accumulate(x, gx);
      },
      "activation");
}

Var l2_normalize(Tape& t, Var x) {
  Tensor out = anatgraph::l2_normalize(t.value(x));
  return t.record(
      std::move(out), t.requires_grad(x),
      [x](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        const std::size_t rows = xv.rank() == 1 ? 1 : xv.dim(0);
        const std::size_t cols = xv.rank() == 1 ? xv.dim(0) : xv.dim(1);
        Tensor gx(xv.dims());
        for (std::size_t r = 0; r < rows; ++r) {
          const float* p = xv.ptr() + r * cols;
          const float* gr = g.ptr() + r * cols;
          double sq = 0.0;
          for (std::size_t c = 0; c < cols; ++c) sq += static_cast<double>(p[c]) * p[c];
          const double norm = std::sqrt(sq);
          double yg = 0.0;
          for (std::size_t c = 0; c < cols; ++c) yg += (p[c] / norm) * gr[c];
          for (std::size_t c = 0; c < cols; ++c) {
            gx[r * cols + c] = static_cast<float>((gr[c] - (p[c] / norm) * yg) / norm);
          }
        }
        tp.accumulate(x, gx);
      },
      "l2_normalize");
}

Var concat_cols(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
    throw ShapeError("concat_cols: " + shape_string(av.dims()) + " vs " + shape_string(bv.dims()));
  }
  const std::size_t rows = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out({rows, p + q});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.ptr() + r * p, p, out.ptr() + r * (p + q));
    std::copy_n(bv.ptr() + r * q, q, out.ptr() + r * (p + q) + p);
  }
  const bool ng = t.requires_grad(a) || t.requires_grad(b);
  return t.record(
      std::move(out), ng,
      [a, b, rows, p, q](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) {
          Tensor& ga = tp.grad_buffer(a);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += g[r * (p + q) + c];
          }
        }
        if (tp.requires_grad(b)) {
          Tensor& gb = tp.grad_buffer(b);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < q; ++c) gb[r * q + c] += g[r * (p + q) + p + c];
          }
        }
      },
      "concat_cols");
}

Var flatten(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  const std::size_t rows = xv.dim(0);
  Tensor out = xv.reshaped({rows, xv.size() / rows});
  return t.record(
      std::move(out), t.requires_grad(x), [x](Tape& tp, const Tensor& g) { tp.accumulate(x, g); },
      "flatten");
}

Var graph_propagate(Tape& t, std::span<const Tensor> blocks, Var x) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2) throw ShapeError("graph_propagate: node features must be [N x F]");
  const std::size_t f = xv.dim(1);
  std::size_t total = 0;
  for (const auto& blk : blocks) {
    if (blk.rank() != 2 || blk.dim(0) != blk.dim(1)) {
      throw ShapeError("graph_propagate: adjacency blocks must be square");
    }
    total += blk.dim(0);
  }
  if (total != xv.dim(0)) {
    throw ShapeError("graph_propagate: adjacency covers " + std::to_string(total) +
                     " nodes but features have " + std::to_string(xv.dim(0)) + " rows");
  }
  auto saved = std::make_shared<std::vector<Tensor>>(blocks.begin(), blocks.end());
  Tensor out({total, f});
  const auto& kt = kernels::active();
  std::size_t row = 0;
  for (const auto& blk : *saved) {
    const std::size_t n = blk.dim(0);
    kt.gemm(Trans::No, Trans::No, n, f, n, blk.ptr(), n, xv.ptr() + row * f, f, 0.0f,
            out.ptr() + row * f, f);
    row += n;
  }
  return t.record(
      std::move(out), t.requires_grad(x),
      [x, saved, f](Tape& tp, const Tensor& g) {
        Tensor& gx = tp.grad_buffer(x);
        const auto& kt2 = kernels::active();
        std::size_t r = 0;
        for (const auto& blk : *saved) {
          const std::size_t n = blk.dim(0);
          kt2.gemm(Trans::Yes, Trans::No, n, f, n, blk.ptr(), n, g.ptr() + r * f, f, 1.0f,
                   gx.ptr() + r * f, f);
          r += n;
        }
      },
      "graph_propagate");
}

Var segment_mean(Tape& t, Var x, std::span<const std::size_t> segment_sizes) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2) throw ShapeError("segment_mean: expects [N x F]");
  const std::size_t f = xv.dim(1);
  std::size_t total = 0;
  for (auto s : segment_sizes) {
    if (s == 0) throw ShapeError("segment_mean: empty segment");
    total += s;
  }
  if (total != xv.dim(0)) throw ShapeError("segment_mean: segment sizes do not cover all rows");
  std::vector<std::size_t> sizes(segment_sizes.begin(), segment_sizes.end());
  Tensor out({sizes.size(), f}, 0.0f);
  std::size_t row = 0;
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    for (std::size_t c = 0; c < f; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < sizes[b]; ++r) acc += xv[(row + r) * f + c];
      out[b * f + c] = static_cast<float>(acc / static_cast<double>(sizes[b]));
    }
    row += sizes[b];
  }
  return t.record(
      std::move(out), t.requires_grad(x),
      [x, sizes, f](Tape& tp, const Tensor& g) {
        Tensor& gx = tp.grad_buffer(x);
        std::size_t r0 = 0;
        for (std::size_t b = 0; b < sizes.size(); ++b) {
          const float inv = 1.0f / static_cast<float>(sizes[b]);
          for (std::size_t r = 0; r < sizes[b]; ++r) {
            for (std::size_t c = 0; c < f; ++c) gx[(r0 + r) * f + c] += g[b * f + c] * inv;
          }
          r0 += sizes[b];
        }
      },
      "segment_mean");
}

Var info_nce(Tape& t, Var q, Var k_pos, std::span<const Tensor> negatives, float tau) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k_pos);
  if (!(tau > 0.0f)) throw ConfigError("info_nce: tau must be > 0");
  if (qv.rank() != 2 || !qv.same_shape(kv)) {
    throw ShapeError("info_nce: q " + shape_string(qv.dims()) + " vs k+ " +
                     shape_string(kv.dims()));
  }
  const std::size_t rows = qv.dim(0), f = qv.dim(1);
  if (negatives.size() != rows) throw ShapeError("info_nce: one negative set per row required");
  auto negs = std::make_shared<std::vector<Tensor>>(negatives.begin(), negatives.end());
  // probs[i][0] is the positive's softmax weight; the rest follow negative order.
  auto probs = std::make_shared<std::vector<std::vector<double>>>(rows);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const Tensor& n = (*negs)[i];
    if (n.rank() != 2 || n.dim(1) != f) throw ShapeError("info_nce: negatives must be [K x F]");
    const float* qi = qv.ptr() + i * f;
    const float* ki = kv.ptr() + i * f;
    std::vector<double>& p = (*probs)[i];
    p.resize(n.dim(0) + 1);
    auto dot = [&](const float* other) {
      double acc = 0.0;
      for (std::size_t c = 0; c < f; ++c) acc += static_cast<double>(qi[c]) * other[c];
      return acc / tau;
    };
    p[0] = dot(ki);
    for (std::size_t r = 0; r < n.dim(0); ++r) p[r + 1] = dot(n.ptr() + r * f);
    const double mx = *std::max_element(p.begin(), p.end());
    double z = 0.0;
    for (double& l : p) {
      l = std::exp(l - mx);
      z += l;
    }
    for (double& l : p) l /= z;
    total += -std::log(p[0]);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  const bool ng = t.requires_grad(q) || t.requires_grad(k_pos);
  return t.record(
      std::move(out), ng,
      [q, k_pos, negs, probs, tau, rows, f](Tape& tp, const Tensor& g) {
        const Tensor& qv2 = tp.value(q);
        const Tensor& kv2 = tp.value(k_pos);
        const double scale = g[0] / (static_cast<double>(rows) * tau);
        Tensor gq(qv2.dims(), 0.0f), gk(kv2.dims(), 0.0f);
        for (std::size_t i = 0; i < rows; ++i) {
          const auto& p = (*probs)[i];
          const Tensor& n = (*negs)[i];
          for (std::size_t c = 0; c < f; ++c) {
            double acc = (p[0] - 1.0) * kv2[i * f + c];
            for (std::size_t r = 0; r < n.dim(0); ++r) acc += p[r + 1] * n[r * f + c];
            gq[i * f + c] = static_cast<float>(scale * acc);
            gk[i * f + c] = static_cast<float>(scale * (p[0] - 1.0) * qv2[i * f + c]);
          }
        }
        tp.accumulate(q, gq);
        tp.accumulate(k_pos, gk);
      },
      "info_nce");
}

Var sum(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  double acc = 0.0;
  for (float v : xv.data()) acc += v;
  return t.record(
      Tensor::scalar(static_cast<float>(acc)), t.requires_grad(x),
      [x](Tape& tp, const Tensor& g) { tp.accumulate(x, Tensor(tp.value(x).dims(), g[0])); },
      "sum");
}

Var half_sum_squares(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  double acc = 0.0;
  for (float v : xv.data()) acc += 0.5 * static_cast<double>(v) * v;
  return t.record(
      Tensor::scalar(static_cast<float>(acc)), t.requires_grad(x),
      [x](Tape& tp, const Tensor& g) {
        Tensor gx = tp.value(x);
        for (float& v : gx.data()) v *= g[0];
        tp.accumulate(x, gx);
      },
      "half_sum_squares");
}

}  // namespace ad
}  // namespace anatgraph
