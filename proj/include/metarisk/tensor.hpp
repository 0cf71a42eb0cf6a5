#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace metarisk {

class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles. Everything in this toolkit is rank 0
/// (scalar), rank 1 (vector) or rank 2 (matrix); the meta-gradient math is
/// ill-conditioned in single precision, so the element type is fixed to f64.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}
  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str() + " does not match " +
                       std::to_string(data_.size()) + " elements");
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vec(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }

  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : throw_rank2(); }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : throw_rank2(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Value of a single-element tensor of any rank.
  double item() const {
    if (numel() != 1)
      throw ShapeError("tensor: item() on shape " + shape_str());
    return data_[0];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  std::string shape_str() const;

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
  }

private:
  std::size_t throw_rank2() const {
    throw ShapeError("tensor: rank-2 access on shape " + shape_str());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace metarisk
