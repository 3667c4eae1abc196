#include "lbd/matrix.hpp"

#include <cmath>
#include <cstdio>

#include "lbd/error.hpp"

namespace lbd {

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
  std::size_t i = 0;
  for (const auto& r : rows) {
    if (r.size() != m.cols_) throw DimensionError("from_rows: ragged rows");
    std::size_t j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s: shape mismatch %zux%zu vs %zux%zu", op,
                a.rows(), a.cols(), b.rows(), b.cols());
  throw DimensionError(buf);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    const auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) shape_error("matmul_at_b", a, b);
  Matrix c(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    const auto brow = b.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      const auto crow = c.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_error("matmul_a_bt", a, b);
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) shape_error("hadamard", a, b);
  Matrix c = a;
  auto cf = c.flat();
  const auto bf = b.flat();
  for (std::size_t i = 0; i < cf.size(); ++i) cf[i] *= bf[i];
  return c;
}

void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) shape_error("add_inplace", a, b);
  auto af = a.flat();
  const auto bf = b.flat();
  for (std::size_t i = 0; i < af.size(); ++i) af[i] += bf[i];
}

void scale_inplace(Matrix& a, double s) {
  for (double& v : a.flat()) v *= s;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = m.row(indices[r]);
    const auto dst = out.row(r);
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = src[j];
  }
  return out;
}

bool approx_equal(const Matrix& a, const Matrix& b, double tol) {
  if (!a.same_shape(b)) return false;
  const auto af = a.flat();
  const auto bf = b.flat();
  for (std::size_t i = 0; i < af.size(); ++i) {
    if (std::abs(af[i] - bf[i]) > tol) return false;
  }
  return true;
}

}  // namespace lbd
