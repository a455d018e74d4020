#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unlearn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised for incompatible operand shapes. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// `product(shape) == data.size()` always holds; the gradient buffer, once
/// allocated, has the same length as the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  std::span<const double> grad() const;
  /// Gradient buffer, allocated zero-filled on first access.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad() noexcept { grad_.reset(); }

  /// Same data viewed with another shape of equal element count.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
  bool requires_grad_ = false;
};

}  // namespace unlearn
