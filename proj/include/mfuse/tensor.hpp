#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfuse {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a primitive receives operands whose shapes do not fit.
class ShapeError : public Error {
 public:
  using Error::Error;
};

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Tensors are plain values. The gradient bookkeeping (requires_grad and
/// node id) is assigned only by a Graph, so a tensor that requires a gradient
/// is always attached to a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return values_.size(); }
  /// Extent of an axis; negative axes count from the end.
  std::size_t dim(int axis) const;

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const std::vector<double>& data() const { return values_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  /// Value of a one-element tensor.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  std::optional<NodeId> node() const { return node_; }

  /// Copy of the values with gradient tracking stripped.
  Tensor detached() const { return Tensor(shape_, values_); }

  bool all_finite() const;

 private:
  friend class Graph;

  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  std::optional<NodeId> node_;
};

/// Bitwise equality of shape and values.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Integer matrix of token ids, row-major.
struct IdMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;

  int operator()(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
};

}  // namespace mfuse
