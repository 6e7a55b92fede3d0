#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mpae {

using Shape = std::vector<std::size_t>;

// Error hierarchy. The CLI maps NumericalError to exit code 2 and everything
// else to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct DivergenceInfinite : DomainError {
  using DomainError::DomainError;
};
struct ValidationError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

/// Dense row-major tensor of doubles, rank 1 to 5, every extent >= 1.
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 5;

  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::vector<double>& data() & noexcept { return data_; }
  const std::vector<double>& data() const& noexcept { return data_; }
  // By value on temporaries, so `for (x : f().data())` stays valid.
  std::vector<double> data() && noexcept { return std::move(data_); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor " + to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  /// Same values, new shape. Element count must match.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: rank 0 is not supported, use shape [1]");
    if (shape.size() > kMaxRank) throw ShapeError("tensor: rank above 5 in shape " + to_string(shape));
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace mpae
