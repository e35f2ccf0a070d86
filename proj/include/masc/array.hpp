#pragma once
// Row-major dense arrays of 64-bit floats. The whole pipeline runs on these;
// shapes stay small (vectors and L x E / H x H matrices).

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace masc {

class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape);
  Array(std::vector<std::size_t> shape, std::vector<double> data);
  Array(std::initializer_list<double> values);  // 1-d

  static Array zeros(std::vector<std::size_t> shape);
  static Array full(std::vector<std::size_t> shape, double value);
  static Array identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool same_shape(const Array& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double value);

  // in-place elementwise
  Array& operator+=(const Array& other);
  Array& operator*=(double alpha);

  bool operator==(const Array& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// standard matrix product; throws DimensionError on inner-dim mismatch
Array matmul(const Array& a, const Array& b);

Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array scale(const Array& a, double alpha);
double sum(const Array& a);
double max_value(const Array& a);
double l1_norm(const Array& a);

std::string shape_string(const Array& a);

}  // namespace masc
