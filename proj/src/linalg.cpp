#include "geico/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace geico::linalg {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != r * c) throw std::invalid_argument("Matrix: value count does not match extents");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Matrix multiply(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("multiply: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b, double b_scale) {
  if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("add: extents differ");
  Matrix out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += b_scale * b.values[i];
  return out;
}

double trace(const Matrix& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows, a.cols); ++i) t += a(i, i);
  return t;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values) s += v * v;
  return std::sqrt(s);
}

double asymmetry(const Matrix& a) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = i + 1; j < a.cols; ++j) worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
  return worst;
}

Matrix symmetrize(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = i + 1; j < a.cols; ++j) {
      const double m = 0.5 * (a(i, j) + a(j, i));
      out(i, j) = m;
      out(j, i) = m;
    }
  return out;
}

LUResult lu_decompose(const Matrix& a) {
  if (!a.square()) throw std::invalid_argument("lu_decompose: matrix is not square");
  const std::size_t n = a.rows;
  LUResult r{a, std::vector<std::size_t>(n), 1, false};
  Matrix& m = r.lu;
  for (std::size_t i = 0; i < n; ++i) r.pivots[i] = i;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(m(i, k)) > std::abs(m(p, k))) p = i;
    if (m(p, k) == 0.0) {
      r.singular = true;
      continue;
    }
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(k, j), m(p, j));
      std::swap(r.pivots[k], r.pivots[p]);
      r.sign = -r.sign;
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      m(i, k) /= m(k, k);
      const double f = m(i, k);
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) m(i, j) -= f * m(k, j);
    }
  }
  return r;
}

double log_abs_det(const Matrix& a) {
  const LUResult r = lu_decompose(a);
  if (r.singular) return -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) s += std::log(std::abs(r.lu(i, i)));
  return s;
}

double determinant(const Matrix& a) {
  const LUResult r = lu_decompose(a);
  if (r.singular) return 0.0;
  double d = r.sign;
  for (std::size_t i = 0; i < a.rows; ++i) d *= r.lu(i, i);
  return d;
}

std::optional<Matrix> invert(const Matrix& a) {
  const LUResult r = lu_decompose(a);
  if (r.singular) return std::nullopt;
  const std::size_t n = a.rows;
  Matrix inv(n, n);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    // Solve L U x = P e_c.
    for (std::size_t i = 0; i < n; ++i) col[i] = (r.pivots[i] == c) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) col[i] -= r.lu(i, j) * col[j];
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t j = ii + 1; j < n; ++j) col[ii] -= r.lu(ii, j) * col[j];
      col[ii] /= r.lu(ii, ii);
    }
    for (std::size_t i = 0; i < n; ++i) inv(i, c) = col[i];
  }
  return inv;
}

SymmetricEigen jacobi_eigen(const Matrix& input, double tolerance, int max_sweeps) {
  if (!input.square()) throw std::invalid_argument("jacobi_eigen: matrix is not square");
  const std::size_t n = input.rows;
  Matrix a = symmetrize(input);
  Matrix v = Matrix::identity(n);
  SymmetricEigen out;

  double scale = 0.0;
  for (double x : a.values) scale = std::max(scale, std::abs(x));
  const double threshold = tolerance * std::max(scale, std::numeric_limits<double>::min());

  for (out.sweeps = 0; out.sweeps < max_sweeps; ++out.sweeps) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a(p, q)));
    if (off <= threshold) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= threshold * 1e-3) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

}  // namespace geico::linalg
