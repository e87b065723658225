#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace narf {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major matrix of doubles. Every activation in the engine is a
// (rows x cols) block where rows index samples and cols index features.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor row(std::initializer_list<double> values);
  static Tensor column(std::span<const double> values);
  static Tensor scalar(double value) { return Tensor(1, 1, value); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  std::string shape_string() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  Eigen::Map<RowMatrix> mat() {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }
  Eigen::Map<const RowMatrix> mat() const {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  void fill(double value);
  void reshape(std::size_t rows, std::size_t cols);
  bool all_finite() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  // Over-aligned so that vectorized reductions peel identically on every
  // allocation; a varying peel changes the summation order.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

// True when shapes match and every element has the same bit pattern.
bool bit_identical(const Tensor& a, const Tensor& b);

double max_abs_difference(const Tensor& a, const Tensor& b);

}  // namespace narf
