#include "unlearn/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>

namespace unlearn {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " holds " + std::to_string(numel(shape_)) +
                     " elements but " + std::to_string(data_.size()) + " values were given");
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got shape " + shape_string(shape_));
  }
  return data_[0];
}

std::span<const double> Tensor::grad() const {
  if (!grad_) throw std::logic_error("tensor has no gradient buffer");
  return *grad_;
}

std::span<double> Tensor::mutable_grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) {
    std::fill(grad_->begin(), grad_->end(), 0.0);
  } else {
    grad_.emplace(data_.size(), 0.0);
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out(std::move(shape), data_);
  out.requires_grad_ = requires_grad_;
  return out;
}

}  // namespace unlearn
