#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace lbd {

// Dense row-major matrix of 64-bit floats. Everything in this library runs
// in double precision; the bias measurements need the headroom and nothing
// here is large enough for single precision to pay off.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::span<double> flat() { return {data_.data(), data_.size()}; }
  std::span<const double> flat() const { return {data_.data(), data_.size()}; }

  void fill(double value) { data_.assign(data_.size(), value); }
  bool all_finite() const;
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ·b without materializing the transpose.
Matrix matmul_at_b(const Matrix& a, const Matrix& b);
// a·bᵀ without materializing the transpose.
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);

Matrix hadamard(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, double s);
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices);

bool approx_equal(const Matrix& a, const Matrix& b, double tol);

}  // namespace lbd
