#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anatgraph/error.hpp"

namespace anatgraph {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 5;

std::string shape_string(const Shape& dims);
std::size_t shape_size(const Shape& dims);

// Dense row-major float32 tensor of rank 1..5.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape dims, float fill = 0.0f);
  Tensor(Shape dims, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor({1}, v); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }
  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 accessors.
  float& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  float item() const;

  Tensor reshaped(Shape dims) const;
  void reshape(Shape dims);
  void fill(float v);

  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  static void validate(const Shape& dims);

  Shape dims_;
  std::vector<float> data_;
};

// Throws NumericError naming `where` if any element is NaN or infinite.
void require_finite(const Tensor& t, std::string_view where);

}  // namespace anatgraph
