#pragma once

// Independent reference computations shared by the unit tests, the acceptance
// run and the CLI verify suite. Nothing here calls the code it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "geico/flow.hpp"
#include "geico/geo.hpp"
#include "geico/linalg.hpp"
#include "geico/scene.hpp"

namespace geico::testing {

struct RandomGaussian {
  std::vector<double> mean;
  linalg::Matrix factor;
  linalg::Matrix cov;
  geo::LatentGaussian g;
};

// Mean ~ N(0, I), covariance F F^T with F entries ~ N(0, spread^2).
inline RandomGaussian random_gaussian(std::size_t d, std::mt19937_64& rng, double spread = 0.7) {
  std::normal_distribution<double> n(0.0, 1.0);
  RandomGaussian r;
  r.mean.resize(d);
  for (double& v : r.mean) v = n(rng);
  r.factor = linalg::Matrix(d, d);
  for (double& v : r.factor.values) v = spread * n(rng);
  r.cov = linalg::multiply(r.factor, linalg::transpose(r.factor));
  r.g = geo::make_gaussian(r.mean, r.cov);
  return r;
}

struct Assignment {
  std::vector<std::size_t> perm;
  double best = 0.0;
  double runner_up = 0.0;
};

// Exhaustive search over permutations; costs are totals over k of cost(k, perm[k]).
// With uniform marginals the optimal transport plan is a scaled permutation, so
// best / n is the exact unregularised optimum.
inline Assignment brute_force(const linalg::Matrix& cost) {
  std::vector<std::size_t> perm(cost.rows);
  std::iota(perm.begin(), perm.end(), 0);
  Assignment out;
  out.best = out.runner_up = 1e300;
  do {
    double s = 0.0;
    for (std::size_t k = 0; k < perm.size(); ++k) s += cost(k, perm[k]);
    if (s < out.best) {
      out.runner_up = out.best;
      out.best = s;
      out.perm = perm;
    } else {
      out.runner_up = std::min(out.runner_up, s);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

// Largest deviation of row and column sums from the uniform marginals.
inline double marginal_residual(const linalg::Matrix& s) {
  double worst = 0.0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < s.cols; ++j) r += s(i, j);
    worst = std::max(worst, std::abs(r - 1.0 / static_cast<double>(s.rows)));
  }
  for (std::size_t j = 0; j < s.cols; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < s.rows; ++i) c += s(i, j);
    worst = std::max(worst, std::abs(c - 1.0 / static_cast<double>(s.cols)));
  }
  return worst;
}

// Dense H*W x H*W matrix of a permutation map; row = target pixel.
inline std::vector<double> dense_matrix(const scene::PermutationMap& perm) {
  const std::size_t n = perm.height * perm.width;
  std::vector<double> m(n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    if (perm.source_index[r] >= 0) m[r * n + static_cast<std::size_t>(perm.source_index[r])] = 1.0;
  return m;
}

// Per-class IoU from a confusion matrix; NaN for classes absent from both maps.
// Truth values >= classes are void and skipped.
inline std::vector<double> confusion_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                                         std::size_t classes) {
  std::vector<std::vector<double>> conf(classes, std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (truth[i] < classes && pred[i] < classes) conf[truth[i]][pred[i]] += 1.0;
  std::vector<double> iou(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    double row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      row += conf[c][k];
      col += conf[k][c];
    }
    const double denom = row + col - conf[c][c];
    iou[c] = denom > 0 ? conf[c][c] / denom : std::nan("");
  }
  return iou;
}

// Moves every flow parameter well away from its near-identity initialisation:
// ActNorm scales of both signs, perturbed 1x1 convolutions, live coupling outputs
// and distinct per-domain prior means.
inline void randomize_flow(flow::FlowModel& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto uniform = [&](Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> v(lo, hi);
    std::vector<double> out(numel(shape));
    for (double& x : out) x = v(rng);
    return Tensor(std::move(shape), std::move(out));
  };
  for (const auto& scale : m.steps)
    for (const flow::StepLayout& s : scale) {
      const std::size_t c = s.channels;
      std::vector<double> sc(c);
      for (double& v : sc) v = (u(rng) < 0 ? -1.0 : 1.0) * (0.6 + 0.5 * std::abs(u(rng)));
      m.params[s.an_scale] = Tensor({1, c, 1, 1}, sc);
      m.params[s.an_bias] = uniform({1, c, 1, 1}, -0.5, 0.5);
      std::vector<double> w = m.params[s.weight].to_vector();
      for (double& v : w) v += 0.2 * u(rng);
      m.params[s.weight] = Tensor({c, c}, w);
      m.params[s.w2] = uniform(m.params[s.w2].shape(), -0.3, 0.3);
      m.params[s.b2] = uniform(m.params[s.b2].shape(), -0.3, 0.3);
      m.params[s.b1] = uniform(m.params[s.b1].shape(), -0.3, 0.3);
    }
  for (std::size_t k = 0; k < m.prior_means.size(); ++k)
    m.params[m.prior_means[k]] = uniform(m.params[m.prior_means[k]].shape(), -1, 1);
  m.initialized = true;
}

}  // namespace geico::testing
