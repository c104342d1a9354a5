#pragma once

// Straight-loop float64 reimplementations of the forward ops, used as
// finite-difference and value oracles. Nothing here shares code with src/.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "anatgraph/encoders.hpp"
#include "anatgraph/tensor.hpp"

namespace ref64 {

struct T {
  std::vector<std::size_t> dims;
  std::vector<double> v;

  T() = default;
  explicit T(std::vector<std::size_t> d, double fill = 0.0) : dims(std::move(d)) {
    std::size_t n = 1;
    for (auto x : dims) n *= x;
    v.assign(n, fill);
  }
  std::size_t size() const { return v.size(); }
  double& operator()(std::size_t r, std::size_t c) { return v[r * dims[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * dims[1] + c]; }
};

inline T from(const anatgraph::Tensor& t) {
  T out(t.dims());
  for (std::size_t i = 0; i < t.size(); ++i) out.v[i] = t[i];
  return out;
}

using Map = std::map<std::string, T>;

inline Map from(const anatgraph::TensorMap& m) {
  Map out;
  for (const auto& [k, t] : m) out[k] = from(t);
  return out;
}

inline T matmul(const T& a, const T& b) {
  const std::size_t m = a.dims[0], k = a.dims[1], n = b.dims[1];
  T out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  return out;
}

inline T add_bias(T x, const T& b) {
  for (std::size_t r = 0; r < x.dims[0]; ++r)
    for (std::size_t c = 0; c < x.dims[1]; ++c) x(r, c) += b.v[c];
  return x;
}

// x [B, Ci, D, H, W], k [Co, Ci, 3, 3, 3], zero padding 1.
inline T conv3d(const T& x, const T& k, int stride) {
  const std::size_t b = x.dims[0], ci = x.dims[1], d = x.dims[2], h = x.dims[3], w = x.dims[4];
  const std::size_t co = k.dims[0];
  auto od = [&](std::size_t n) { return (n - 1) / static_cast<std::size_t>(stride) + 1; };
  T out({b, co, od(d), od(h), od(w)});
  const long s = stride;
  std::size_t o = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t z = 0; z < od(d); ++z)
        for (std::size_t y = 0; y < od(h); ++y)
          for (std::size_t xx = 0; xx < od(w); ++xx, ++o) {
            double acc = 0.0;
            for (std::size_t ic = 0; ic < ci; ++ic)
              for (long dz = 0; dz < 3; ++dz)
                for (long dy = 0; dy < 3; ++dy)
                  for (long dx = 0; dx < 3; ++dx) {
                    const long iz = static_cast<long>(z) * s + dz - 1;
                    const long iy = static_cast<long>(y) * s + dy - 1;
                    const long ix = static_cast<long>(xx) * s + dx - 1;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(d) ||
                        iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                      continue;
                    const double xv =
                        x.v[(((n * ci + ic) * d + iz) * h + iy) * w + ix];
                    const double kv = k.v[(((oc * ci + ic) * 3 + dz) * 3 + dy) * 3 + dx];
                    acc += xv * kv;
                  }
            out.v[o] = acc;
          }
  return out;
}

// Channel axis 1; statistics over every other axis, biased variance.
inline T batch_norm_train(const T& x, const T& gamma, const T& beta, double eps = 1e-5) {
  const std::size_t outer = x.dims[0], ch = x.dims[1];
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.dims.size(); ++i) inner *= x.dims[i];
  T out(x.dims);
  for (std::size_t c = 0; c < ch; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) mu += x.v[(o * ch + c) * inner + i];
    mu /= static_cast<double>(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const double dlt = x.v[(o * ch + c) * inner + i] - mu;
        var += dlt * dlt;
      }
    var /= static_cast<double>(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t at = (o * ch + c) * inner + i;
        out.v[at] = gamma.v[c] * (x.v[at] - mu) / std::sqrt(var + eps) + beta.v[c];
      }
  }
  return out;
}

inline T batch_norm_eval(const T& x, const T& gamma, const T& beta, const T& mean, const T& var,
                         double eps = 1e-5) {
  const std::size_t outer = x.dims[0], ch = x.dims[1];
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.dims.size(); ++i) inner *= x.dims[i];
  T out(x.dims);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t at = (o * ch + c) * inner + i;
        out.v[at] = gamma.v[c] * (x.v[at] - mean.v[c]) / std::sqrt(var.v[c] + eps) + beta.v[c];
      }
  return out;
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Records the ReLU sign pattern of a base evaluation, then flags any later
// evaluation whose pattern differs: such a draw sits on a kink, where
// central differences do not estimate a derivative.
struct KinkTracker {
  std::vector<bool> pattern;
  bool recording = true;
  std::size_t pos = 0;
  bool flipped = false;

  void compare_from_start() {
    recording = false;
    pos = 0;
  }
  void see(double z) {
    const bool on = z > 0.0;
    if (recording) {
      pattern.push_back(on);
    } else if (pos >= pattern.size() || pattern[pos++] != on) {
      flipped = true;
    }
  }
};

inline T apply(T x, double (*f)(double)) {
  for (double& e : x.v) e = f(e);
  return x;
}

inline T relu_tracked(T x, KinkTracker* k) {
  for (double& e : x.v) {
    if (k) k->see(e);
    e = relu(e);
  }
  return x;
}

inline T l2_normalize_rows(T x) {
  const std::size_t rows = x.dims.size() == 1 ? 1 : x.dims[0];
  const std::size_t cols = x.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += x.v[r * cols + c] * x.v[r * cols + c];
    const double n = std::sqrt(sq);
    for (std::size_t c = 0; c < cols; ++c) x.v[r * cols + c] /= n;
  }
  return x;
}

inline T concat_cols(const T& a, const T& b) {
  T out({a.dims[0], a.dims[1] + b.dims[1]});
  for (std::size_t r = 0; r < a.dims[0]; ++r) {
    for (std::size_t c = 0; c < a.dims[1]; ++c) out(r, c) = a(r, c);
    for (std::size_t c = 0; c < b.dims[1]; ++c) out(r, a.dims[1] + c) = b(r, c);
  }
  return out;
}

inline T flatten(T x) {
  const std::size_t b = x.dims[0];
  x.dims = {b, x.size() / b};
  return x;
}

// Block-diagonal A x over consecutive node blocks.
inline T propagate(const std::vector<T>& blocks, const T& x) {
  T out(x.dims);
  std::size_t off = 0;
  for (const T& a : blocks) {
    const std::size_t n = a.dims[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < x.dims[1]; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += a(i, j) * x(off + j, c);
        out(off + i, c) = acc;
      }
    off += n;
  }
  return out;
}

inline T segment_mean(const T& x, const std::vector<std::size_t>& sizes) {
  T out({sizes.size(), x.dims[1]});
  std::size_t off = 0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    for (std::size_t r = 0; r < sizes[s]; ++r)
      for (std::size_t c = 0; c < x.dims[1]; ++c) out(s, c) += x(off + r, c);
    for (std::size_t c = 0; c < x.dims[1]; ++c) out(s, c) /= static_cast<double>(sizes[s]);
    off += sizes[s];
  }
  return out;
}

// Mean over rows of -log softmax_0([q.k+, q.k-...] / tau).
inline double info_nce(const T& q, const T& kpos, const std::vector<T>& negatives, double tau) {
  const std::size_t rows = q.dims[0], f = q.dims[1];
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> logits;
    double pos = 0.0;
    for (std::size_t c = 0; c < f; ++c) pos += q(r, c) * kpos(r, c);
    logits.push_back(pos / tau);
    const T& neg = negatives[r];
    for (std::size_t k = 0; k < neg.dims[0]; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < f; ++c) s += q(r, c) * neg(k, c);
      logits.push_back(s / tau);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += -(logits[0] - mx - std::log(z));
  }
  return total / static_cast<double>(rows);
}

inline T dense(const Map& p, const std::string& base, const T& x) {
  return add_bias(matmul(x, p.at(base + ".w")), p.at(base + ".b"));
}

// E(x, p) in train-mode BN: conv-BN-ELU per layer, flatten, concat coords,
// Dense-ReLU-Dense-ReLU-Dense.
inline T encoder(const Map& p, const anatgraph::EncoderConfig& cfg, const std::string& prefix,
                 const T& patches, const T& coords, KinkTracker* kinks = nullptr) {
  const auto layers = anatgraph::conv_layers(cfg);
  T x = patches;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + ".c." + std::to_string(i);
    x = conv3d(x, p.at(base + ".w"), layers[i].stride);
    x = batch_norm_train(x, p.at(base + ".gamma"), p.at(base + ".beta"));
    x = apply(x, elu);
  }
  x = concat_cols(flatten(x), coords);
  x = relu_tracked(dense(p, prefix + ".fl.0", x), kinks);
  x = relu_tracked(dense(p, prefix + ".fl.1", x), kinks);
  return dense(p, prefix + ".fl.2", x);
}

// ELU(BN(A H W)) in train mode over stacked graphs.
inline T gcn(const Map& p, const std::string& prefix, const std::vector<T>& blocks, const T& h) {
  T x = matmul(propagate(blocks, h), p.at(prefix + ".w"));
  x = batch_norm_train(x, p.at(prefix + ".bn.gamma"), p.at(prefix + ".bn.beta"));
  return apply(x, elu);
}

inline T head(const Map& p, const std::string& prefix, const T& pooled, KinkTracker* kinks = nullptr) {
  T x = relu_tracked(dense(p, prefix + ".fg.0", pooled), kinks);
  x = relu_tracked(dense(p, prefix + ".fg.1", x), kinks);
  return dense(p, prefix + ".fg.2", x);
}

// |a - n| / max(|a|, |n|, floor): relative where gradients are appreciable,
// absolute against `floor` near zero.
inline double rel_err(double a, double n, double floor = 1e-2) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct CheckResult {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
};

// Central differences (step eps, float64) of f over every element of the
// named tensors in `at`, compared with the analytic gradients.
inline CheckResult check_gradients(const std::function<double(const Map&)>& f, Map at,
                                   const std::map<std::string, anatgraph::Tensor>& analytic,
                                   double eps = 1e-3) {
  CheckResult r;
  for (const auto& [name, g] : analytic) {
    T& x = at.at(name);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x.v[i];
      x.v[i] = keep + eps;
      const double up = f(at);
      x.v[i] = keep - eps;
      const double down = f(at);
      x.v[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double e = rel_err(g[i], numeric);
      ++r.checked;
      if (e > r.worst) {
        r.worst = e;
        r.where = name + "[" + std::to_string(i) + "] analytic " + std::to_string(g[i]) +
                  " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace ref64
