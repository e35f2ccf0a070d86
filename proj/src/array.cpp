#include "masc/array.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "masc/kernels.hpp"

namespace masc {
namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Array::Array(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Array::Array(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw DimensionError("array data length does not match shape product");
  }
}

Array::Array(std::initializer_list<double> values)
    : shape_{values.size()}, data_(values) {}

Array Array::zeros(std::vector<std::size_t> shape) {
  return Array(std::move(shape));
}

Array Array::full(std::vector<std::size_t> shape, double value) {
  Array a(std::move(shape));
  a.fill(value);
  return a;
}

Array Array::identity(std::size_t n) {
  Array a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) = 1.0;
  return a;
}

std::size_t Array::rows() const {
  return shape_.empty() ? 1 : shape_.front();
}

std::size_t Array::cols() const {
  if (shape_.size() < 2) throw DimensionError("cols() on non-matrix array");
  return shape_[1];
}

bool Array::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Array::fill(double value) {
  std::fill(data_.begin(), data_.end(), value);
}

Array& Array::operator+=(const Array& other) {
  if (!same_shape(other)) throw DimensionError("+=: shape mismatch");
  kernels::axpy(1.0, other.data(), data(), size());
  return *this;
}

Array& Array::operator*=(double alpha) {
  kernels::scale(alpha, data(), size());
  return *this;
}

Array matmul(const Array& a, const Array& b) {
  if (a.ndim() != 2 || b.ndim() < 1 || b.ndim() > 2) {
    throw DimensionError("matmul: need a matrix times a matrix or vector");
  }
  if (b.ndim() == 1) {
    if (b.size() != a.cols()) {
      throw DimensionError("matmul: inner dimensions disagree (" +
                           shape_string(a) + " x " + shape_string(b) + ")");
    }
    Array out(Shape{a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
      out[i] = kernels::dot(a.data() + i * a.cols(), b.data(), b.size());
    }
    return out;
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree (" +
                         shape_string(a) + " x " + shape_string(b) + ")");
  }
  Array out(Shape{m, n});
  // (i,k)-ordered loop, axpy over rows of b
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      kernels::axpy(a.at(i, p), b.data() + p * n, out.data() + i * n, n);
    }
  }
  return out;
}

Array add(const Array& a, const Array& b) {
  if (!a.same_shape(b)) throw DimensionError("add: shape mismatch");
  Array out(a.shape());
  kernels::add(a.data(), b.data(), out.data(), a.size());
  return out;
}

Array sub(const Array& a, const Array& b) {
  if (!a.same_shape(b)) throw DimensionError("sub: shape mismatch");
  Array out(a.shape());
  kernels::sub(a.data(), b.data(), out.data(), a.size());
  return out;
}

Array mul(const Array& a, const Array& b) {
  if (!a.same_shape(b)) throw DimensionError("mul: shape mismatch");
  Array out(a.shape());
  kernels::mul(a.data(), b.data(), out.data(), a.size());
  return out;
}

Array scale(const Array& a, double alpha) {
  Array out = a;
  out *= alpha;
  return out;
}

double sum(const Array& a) { return kernels::sum(a.data(), a.size()); }

double max_value(const Array& a) { return kernels::max(a.data(), a.size()); }

double l1_norm(const Array& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i]);
  return acc;
}

std::string shape_string(const Array& a) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < a.shape().size(); ++i) {
    if (i) os << ", ";
    os << a.shape()[i];
  }
  os << ")";
  return os.str();
}

}  // namespace masc
