#include "capsule/tensor.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace capsule {

std::string to_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t k = shape.size(); k-- > 1;) strides[k - 1] = strides[k] * shape[k];
  return strides;
}

Tensor::Tensor() : Tensor(Shape{1}, std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data)
    : shape_(std::move(shape)), data_(std::move(data)) {}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError(fmt::format("zero dimension in shape {}", to_string(shape)));
  }
  const auto n = element_count(shape);
  if (n != data.size()) {
    throw ShapeError(fmt::format("shape {} ≠ data {}", n, data.size()));
  }
  return Tensor(std::move(shape), std::make_shared<const std::vector<double>>(std::move(data)));
}

Tensor Tensor::from(std::initializer_list<std::size_t> shape, std::initializer_list<double> data) {
  return from(Shape(shape), std::vector<double>(data));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = element_count(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from(Shape{1}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError(fmt::format("axis {} out of range for shape {}", axis, to_string(shape_)));
  }
  return shape_[axis];
}

std::size_t Tensor::flat_index(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError(fmt::format("index of rank {} for shape {}", index.size(), to_string(shape_)));
  }
  std::size_t flat = 0;
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= shape_[k]) {
      throw ShapeError(fmt::format("index {} out of range on axis {} of shape {}", index[k], k,
                                   to_string(shape_)));
    }
    flat = flat * shape_[k] + index[k];
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  return at(std::span<const std::size_t>(index.begin(), index.size()));
}

double Tensor::at(std::span<const std::size_t> index) const { return (*data_)[flat_index(index)]; }

Tensor Tensor::reshape(Shape shape) const {
  for (auto d : shape) {
    if (d == 0) throw ShapeError(fmt::format("zero dimension in shape {}", to_string(shape)));
  }
  if (shape.empty() || element_count(shape) != size()) {
    throw ShapeError(fmt::format("cannot reshape {} to {}", to_string(shape_), to_string(shape)));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::operator==(const Tensor& other) const {
  return shape_ == other.shape_ && (data_ == other.data_ || *data_ == *other.data_);
}

} // namespace capsule
