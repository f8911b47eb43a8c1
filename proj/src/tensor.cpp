#include "stgcn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "stgcn/errors.hpp"

namespace stgcn {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const auto r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor Tensor::uninitialized(Shape shape) {
  Tensor t;
  t.data_.resize(shape_size(shape));
  t.shape_ = std::move(shape);
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeMismatch("shape " + shape_str(shape_) + " does not hold " +
                        std::to_string(data_.size()) + " values");
  }
}

std::size_t Tensor::dim(int axis) const { return shape_[normalize_axis(axis, rank())]; }

std::size_t Tensor::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw ShapeMismatch("index rank " + std::to_string(idx.size()) + " vs tensor " + shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t k = 0;
  for (auto i : idx) {
    if (i >= shape_[k]) throw ShapeMismatch("index out of range for " + shape_str(shape_));
    off = off * shape_[k] + i;
    ++k;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  // x * 0 is NaN exactly for NaN/Inf, and a vectorized sum propagates it.
  const Eigen::Map<const Eigen::ArrayXd> a(data_.data(), static_cast<Eigen::Index>(data_.size()));
  return !std::isnan((a * 0.0).sum());
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeMismatch("+= of " + shape_str(other.shape_) + " into " + shape_str(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace stgcn
