#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "shadowpool/common.hpp"

namespace shadowpool {

// Dense row-major matrix of 64-bit floats.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& at(size_t r, size_t c) { return values[r * cols + c]; }
  double at(size_t r, size_t c) const { return values[r * cols + c]; }

  std::span<double> row(size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(size_t r) const { return {values.data() + r * cols, cols}; }

  size_t size() const { return values.size(); }

  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }
};

inline void ensure_finite(const Matrix& m, const std::string& what) {
  for (double v : m.values) {
    if (!std::isfinite(v)) throw NumericError(what + ": non-finite entry");
  }
}

// out = a * b^T   (a: m×k, b: n×k, out: m×n)
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix out(a.rows, b.rows);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.values.data() + i * a.cols;
    for (size_t j = 0; j < b.rows; ++j) {
      const double* bj = b.values.data() + j * b.cols;
      double acc = 0.0;
      for (size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// out = a^T * b   (a: m×k, b: m×n, out: k×n)
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw ShapeError("matmul_tn: row counts differ");
  Matrix out(a.cols, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.values.data() + i * a.cols;
    const double* bi = b.values.data() + i * b.cols;
    for (size_t k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      double* ok = out.values.data() + k * out.cols;
      for (size_t j = 0; j < b.cols; ++j) ok[j] += aik * bi[j];
    }
  }
  return out;
}

// out = a * b   (a: m×k, b: k×n, out: m×n)
inline Matrix matmul_nn(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeError("matmul_nn: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.values.data() + i * a.cols;
    double* oi = out.values.data() + i * out.cols;
    for (size_t k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.values.data() + k * b.cols;
      for (size_t j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
    }
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace shadowpool
