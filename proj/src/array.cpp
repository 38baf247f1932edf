#include "modalpatch/array.hpp"

#include <cmath>
#include <stdexcept>

namespace modalpatch {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("array: non-positive dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

Array::Array(std::vector<int> shape_, double fill)
    : shape(std::move(shape_)), data(static_cast<size_t>(numel_of(shape)), fill) {}

Array Array::from(std::vector<int> shape_, std::vector<double> values) {
  Array a;
  a.shape = std::move(shape_);
  if (numel_of(a.shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("array: data length does not match shape " + shape_str(a.shape));
  a.data = std::move(values);
  return a;
}

double& Array::at(int c, int y, int x) {
  const int H = shape[1], W = shape[2];
  return data[(static_cast<size_t>(c) * H + y) * W + x];
}

double Array::at(int c, int y, int x) const {
  const int H = shape[1], W = shape[2];
  return data[(static_cast<size_t>(c) * H + y) * W + x];
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool same_shape(const Array& a, const Array& b) { return a.shape == b.shape; }

bool all_finite(const Array& a) {
  for (double v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace modalpatch
