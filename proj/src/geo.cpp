#include "geico/geo.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

namespace geico::geo {

namespace {

constexpr double kAsymmetryTol = 1e-8;

linalg::Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2 || t.dim(0) != t.dim(1)) throw GeoError("expected a square matrix, got " + to_string(t.shape()));
  return linalg::Matrix(t.dim(0), t.dim(1), t.to_vector());
}

linalg::SymmetricEigen eig_checked(const linalg::Matrix& m) {
  if (linalg::asymmetry(m) > kAsymmetryTol * std::max(1.0, linalg::frobenius_norm(m))) {
    throw GeoError("matrix is not symmetric");
  }
  // Eigen's tridiagonal QR: the Jacobi solver is too slow for the 60-dim label latents.
  const std::size_t n = m.rows;
  const linalg::Matrix sym = linalg::symmetrize(m);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> view(
      sym.values.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(view);
  if (es.info() != Eigen::Success) throw GeoError("eigen-decomposition failed");
  linalg::SymmetricEigen out;
  out.values.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
  out.vectors = linalg::Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      out.vectors(i, k) = es.eigenvectors()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
  return out;
}

double clip_eigen(double v) {
  if (v < -1e-9) throw GeoError("matrix is not positive semi-definite (eigenvalue " + std::to_string(v) + ")");
  return std::max(v, 0.0);
}

// Gradient of Tr((A^1/2 B A^1/2)^1/2) with respect to B: 1/2 A^1/2 M^-1/2 A^1/2.
linalg::Matrix cross_trace_grad(const linalg::Matrix& a_half, const linalg::Matrix& m) {
  const auto eig = eig_checked(m);
  const double top = std::max(eig.values.back(), 1e-300);
  const linalg::Matrix m_inv_half =
      linalg::spectral_map(eig, [top](double v) { return 1.0 / std::sqrt(std::max(v, top * 1e-15)); });
  linalg::Matrix g = linalg::multiply(linalg::multiply(a_half, m_inv_half), a_half);
  for (double& v : g.values) v *= 0.5;
  return linalg::symmetrize(g);
}

}  // namespace

LatentGaussian fit_gaussian(const Tensor& vectors, double ridge) {
  if (vectors.rank() != 2) throw ShapeError("fit_gaussian: expected [N,D], got " + to_string(vectors.shape()));
  const std::size_t n = vectors.dim(0), d = vectors.dim(1);
  if (n < 2) throw GeoError("fit_gaussian: need at least 2 vectors");
  const Tensor mu = mean(vectors, 0);
  const Tensor centred = vectors - mu;
  const Tensor cov = matmul(transpose(centred), centred) * (1.0 / static_cast<double>(n - 1));
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = ridge;
  return {mu, cov + Tensor({d, d}, eye), n};
}

LatentGaussian make_gaussian(std::vector<double> mean, const linalg::Matrix& cov) {
  const std::size_t d = mean.size();
  if (cov.rows != d || cov.cols != d) throw GeoError("make_gaussian: dimension mismatch");
  return {Tensor({d}, std::move(mean)), Tensor({d, d}, cov.values), 0};
}

linalg::Matrix sqrt_psd(const linalg::Matrix& m) {
  const auto eig = eig_checked(m);
  for (double v : eig.values) clip_eigen(v);
  return linalg::spectral_map(eig, [](double v) { return std::sqrt(std::max(v, 0.0)); });
}

Tensor bures_cross_trace(const Tensor& a, const Tensor& b) {
  const linalg::Matrix am = to_matrix(a), bm = to_matrix(b);
  if (am.rows != bm.rows) throw GeoError("bures: dimension mismatch");
  const linalg::Matrix a_half = sqrt_psd(am);
  const linalg::Matrix m = linalg::symmetrize(linalg::multiply(linalg::multiply(a_half, bm), a_half));
  const auto eig = eig_checked(m);
  double value = 0.0;
  for (double v : eig.values) value += std::sqrt(clip_eigen(v));
  Tensor out = Tensor::scalar(value);
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  return tape->record(out, "bures_cross_trace", {&a, &b}, [a, b, am, bm, a_half, m](std::span<const double> g, Tape& t) {
    if (auto gb = t.grad_for(b); !gb.empty()) {
      const linalg::Matrix d = cross_trace_grad(a_half, m);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * d.values[i];
    }
    if (auto ga = t.grad_for(a); !ga.empty()) {
      // The trace is symmetric in A and B.
      const linalg::Matrix b_half = sqrt_psd(bm);
      const linalg::Matrix n = linalg::symmetrize(linalg::multiply(linalg::multiply(b_half, am), b_half));
      const linalg::Matrix d = cross_trace_grad(b_half, n);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * d.values[i];
    }
  });
}

Tensor w2_gaussian(const LatentGaussian& a, const LatentGaussian& b) {
  if (a.dim() != b.dim()) {
    throw GeoError("w2_gaussian: dimension mismatch " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  const std::size_t d = a.dim();
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  const Tensor id({d, d}, eye);
  const Tensor tr = sum((a.cov + b.cov) * id);
  const Tensor raw = sum(square(a.mean - b.mean)) + tr - 2.0 * bures_cross_trace(a.cov, b.cov);
  // max(raw, 0)
  return -clamp_max(-raw, 0.0);
}

ClampedDistance clamp_distance(const Tensor& raw, double beta) {
  if (!(beta > 0.0)) throw GeoError("beta must be positive");
  return {clamp_max(raw, beta), raw.item(), beta};
}

ClampedDistance dist(const flow::FlowModel& model, const std::vector<Tensor>& p, const Tensor& batch_a,
                     const std::vector<flow::Domain>& dom_a, const Tensor& batch_b,
                     const std::vector<flow::Domain>& dom_b, double beta, const W2Fn& w2) {
  const Tensor za = flow::pooled_latent(flow::forward(model, p, batch_a, dom_a));
  const Tensor zb = flow::pooled_latent(flow::forward(model, p, batch_b, dom_b));
  return clamp_distance(w2(fit_gaussian(za), fit_gaussian(zb)), beta);
}

}  // namespace geico::geo
