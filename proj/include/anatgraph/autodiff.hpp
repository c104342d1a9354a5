#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anatgraph/numerics.hpp"
#include "anatgraph/tensor.hpp"

namespace anatgraph {

struct Var {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

// Records primitive operations so their vector-Jacobian products can be
// replayed in reverse. A tape is single-owner and is discarded after one
// backward pass. With gradients disabled it only holds forward values.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor value);
  Var parameter(std::string name, Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Appends an op result. `backward` is dropped unless one of the inputs
  // needs a gradient (signalled by `needs_grad`).
  Var record(Tensor value, bool needs_grad, Backward backward, std::string_view op);

  // Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  // Zero-initialized gradient buffer of `v` for in-place accumulation.
  Tensor& grad_buffer(Var v);

  void backward(Var loss);

  // Gradient w.r.t. `v` after backward(); nullptr when none flowed there.
  const Tensor* grad(Var v) const;

  std::optional<Var> find_parameter(std::string_view name) const;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    std::string param_name;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

// Gradient for one named parameter. `on_tape == false` means the parameter
// was never used while recording: the zeros in `value` are structural, not a
// computed result.
struct ParamGrad {
  std::string name;
  Tensor value;
  bool on_tape = false;
};

// Runs the reverse pass from a scalar loss and collects gradients for
// `names` (in order). `shapes` supplies the zero shape for absent params.
std::vector<ParamGrad> grad(Tape& tape, Var loss, std::span<const std::string> names,
                            std::span<const Shape> shapes);

namespace ad {

Var matmul(Tape& t, Var a, Var b);
// x [rows x n] + bias [n] broadcast over rows.
Var add_bias(Tape& t, Var x, Var bias);
Var conv3d(Tape& t, Var x, Var kernels, int stride);
Var batch_norm(Tape& t, Var x, Var gamma, Var beta, BnMode mode, BatchNormStats* stats);
Var activation(Tape& t, Var x, Activation kind);
Var l2_normalize(Tape& t, Var x);
// [rows x p] || [rows x q] -> [rows x (p+q)].
Var concat_cols(Tape& t, Var a, Var b);
// [B, ...] -> [B, prod(rest)].
Var flatten(Tape& t, Var x);
// Block-diagonal propagation: rows of x are stacked node features of
// consecutive graphs; block b multiplies its own rows.
Var graph_propagate(Tape& t, std::span<const Tensor> blocks, Var x);
// Column mean of consecutive row segments: [sum n_b x F] -> [B x F].
Var segment_mean(Tape& t, Var x, std::span<const std::size_t> segment_sizes);
// Mean over rows of per-row InfoNCE. negatives[i] is [K_i x F] and carries
// no gradient.
Var info_nce(Tape& t, Var q, Var k_pos, std::span<const Tensor> negatives, float tau);
Var sum(Tape& t, Var x);
// 0.5 * sum(x^2)
Var half_sum_squares(Tape& t, Var x);

}  // namespace ad
}  // namespace anatgraph
