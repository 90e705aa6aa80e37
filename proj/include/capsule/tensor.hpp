#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsule {

using Shape = std::vector<std::size_t>;

/// Raised for any shape or index contract violation.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);
/// Row-major strides, last axis contiguous.
std::vector<std::size_t> strides_of(const Shape& shape);

/// Dense row-major array of doubles. Immutable once constructed: the data
/// buffer is shared between copies and never written through a Tensor.
class Tensor {
public:
  Tensor();

  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor from(std::initializer_list<std::size_t> shape,
                     std::initializer_list<double> data);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const { return *data_; }
  const double* begin() const { return data_->data(); }
  const double* end() const { return data_->data() + data_->size(); }

  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double at(std::initializer_list<std::size_t> index) const;
  double at(std::span<const std::size_t> index) const;
  std::size_t flat_index(std::span<const std::size_t> index) const;

  /// Same data viewed under a new shape with identical element count.
  Tensor reshape(Shape shape) const;
  std::vector<double> to_vector() const { return *data_; }

  /// Exact (bitwise on values) equality of shape and data.
  bool operator==(const Tensor& other) const;

private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

} // namespace capsule
