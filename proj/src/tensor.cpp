#include "narf/tensor.hpp"

#include "narf/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace narf {

namespace {

#if defined(__GLIBC__)
// Activation buffers are large and short-lived. Serving them from mmap means
// fresh zero pages (and page faults) on every allocation, so keep freed
// blocks in the heap instead.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                     " does not match shape [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  }
}

Tensor Tensor::row(std::initializer_list<double> values) {
  return Tensor(1, values.size(), std::vector<double>(values));
}

Tensor Tensor::column(std::span<const double> values) {
  return Tensor(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::reshape(std::size_t rows, std::size_t cols) {
  if (rows * cols != data_.size()) {
    throw ShapeError("reshape: cannot view " + shape_string() + " as [" +
                     std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  rows_ = rows;
  cols_ = cols;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_difference: " + a.shape_string() + " vs " + b.shape_string());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace narf
