#include "anatgraph/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace anatgraph {

std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void Tensor::validate(const Shape& dims) {
  if (dims.empty() || dims.size() > kMaxRank) {
    throw ShapeError("tensor rank must be 1.." + std::to_string(kMaxRank) + ", got " +
                     std::to_string(dims.size()));
  }
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + shape_string(dims));
  }
}

Tensor::Tensor(Shape dims, float fill) : dims_(std::move(dims)) {
  validate(dims_);
  data_.assign(shape_size(dims_), fill);
}

Tensor::Tensor(Shape dims, std::vector<float> data) : dims_(std::move(dims)), data_(std::move(data)) {
  validate(dims_);
  if (data_.size() != shape_size(dims_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                     shape_string(dims_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

float Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(dims_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape dims) const {
  Tensor out = *this;
  out.reshape(std::move(dims));
  return out;
}

void Tensor::reshape(Shape dims) {
  validate(dims);
  if (shape_size(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(dims_) + " to " + shape_string(dims));
  }
  dims_ = std::move(dims);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, std::string_view where) {
  if (!t.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(where) + " (shape " +
                       shape_string(t.dims()) + ")");
  }
}

}  // namespace anatgraph
