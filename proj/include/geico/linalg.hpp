#pragma once

// Small dense linear algebra on row-major double matrices (dimension <= ~100).

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace geico::linalg {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> v);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> d);

  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  bool square() const { return rows == cols; }
};

Matrix multiply(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b, double b_scale = 1.0);
double trace(const Matrix& a);
double frobenius_norm(const Matrix& a);
// Largest |a_ij - a_ji|.
double asymmetry(const Matrix& a);
Matrix symmetrize(const Matrix& a);

// LU factorisation with partial pivoting.
struct LUResult {
  Matrix lu;
  std::vector<std::size_t> pivots;
  int sign = 1;
  bool singular = false;
};
LUResult lu_decompose(const Matrix& a);
// log|det a|; -inf when singular.
double log_abs_det(const Matrix& a);
double determinant(const Matrix& a);
// Inverse via LU; nullopt when singular.
std::optional<Matrix> invert(const Matrix& a);

// Eigen-decomposition of a symmetric matrix by the cyclic Jacobi method.
// Column k of `vectors` is the eigenvector for values[k]; values ascend.
struct SymmetricEigen {
  std::vector<double> values;
  Matrix vectors;
  int sweeps = 0;
};
SymmetricEigen jacobi_eigen(const Matrix& a, double tolerance = 1e-15, int max_sweeps = 100);

// V f(Lambda) V^T for a precomputed decomposition.
template <typename F>
Matrix spectral_map(const SymmetricEigen& eig, F&& f) {
  const std::size_t n = eig.values.size();
  std::vector<double> fv(n);
  for (std::size_t k = 0; k < n; ++k) fv[k] = f(eig.values[k]);
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += eig.vectors(i, k) * fv[k] * eig.vectors(j, k);
      out(i, j) = s;
      out(j, i) = s;
    }
  }
  return out;
}

}  // namespace geico::linalg
