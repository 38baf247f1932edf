#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace modalpatch {

// Dense row-major array of 64-bit reals. Rank is arbitrary; feature maps
// are rank-3 (C, H, W) by convention throughout the pipeline.
struct Array {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Array() = default;
  explicit Array(std::vector<int> shape_, double fill = 0.0);

  static Array from(std::vector<int> shape_, std::vector<double> values);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Rank-3 accessors (c, y, x).
  double& at(int c, int y, int x);
  double at(int c, int y, int x) const;
};

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
bool same_shape(const Array& a, const Array& b);
bool all_finite(const Array& a);

}  // namespace modalpatch
