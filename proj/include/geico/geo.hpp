#pragma once

// Gaussian fits of latent batches and the squared 2-Wasserstein (Bures)
// distance between them, with a hard upper clamp.

#include <functional>

#include "geico/flow.hpp"
#include "geico/linalg.hpp"
#include "geico/tensor.hpp"

namespace geico::geo {

inline constexpr double kRidge = 1e-6;
inline constexpr double kBeta = 100.0;

class GeoError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Mean [D] and covariance [D,D]; both stay on the tape of the fitted vectors.
struct LatentGaussian {
  Tensor mean;
  Tensor cov;
  std::size_t count = 0;
  std::size_t dim() const { return mean.dim(0); }
};

// Rows of `vectors` [N,D] are samples; unbiased covariance plus ridge * I.
LatentGaussian fit_gaussian(const Tensor& vectors, double ridge = kRidge);
LatentGaussian make_gaussian(std::vector<double> mean, const linalg::Matrix& cov);

// Square root of a symmetric PSD matrix; eigenvalues in [-1e-9, 0) are clipped to 0.
linalg::Matrix sqrt_psd(const linalg::Matrix& m);

// Tr((A^1/2 B A^1/2)^1/2), differentiable in both arguments.
Tensor bures_cross_trace(const Tensor& a, const Tensor& b);

// ||mu_a - mu_b||^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2), negatives clipped to 0.
Tensor w2_gaussian(const LatentGaussian& a, const LatentGaussian& b);

using W2Fn = std::function<Tensor(const LatentGaussian&, const LatentGaussian&)>;

struct ClampedDistance {
  Tensor clamped;  // scalar, min(raw, beta); zero gradient on the clamped branch
  double raw = 0.0;
  double beta = kBeta;
};

ClampedDistance clamp_distance(const Tensor& raw, double beta = kBeta);

// Clamped W2 between Gaussians fitted to pooled flow latents of two batches.
// Inputs are already in the flow's input space; `p` selects the parameters.
ClampedDistance dist(const flow::FlowModel& model, const std::vector<Tensor>& p, const Tensor& batch_a,
                     const std::vector<flow::Domain>& dom_a, const Tensor& batch_b,
                     const std::vector<flow::Domain>& dom_b, double beta = kBeta, const W2Fn& w2 = w2_gaussian);

}  // namespace geico::geo
