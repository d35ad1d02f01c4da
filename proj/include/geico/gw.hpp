#pragma once

// Topology-preserving regularizer for the segmentation flow: target images are
// associated with generated target segmentations through an entropic transport
// plan whose cost compares image-space and segmentation-space distances to
// index-aligned source pairs.

#include <cstdint>
#include <vector>

#include "geico/likelihood.hpp"
#include "geico/linalg.hpp"
#include "geico/optim.hpp"
#include "geico/tensor.hpp"

namespace geico::gw {

inline constexpr double kEpsilon = 0.05;
inline constexpr int kMaxIters = 200;
inline constexpr double kTolerance = 1e-6;

class GwError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// (i, j) = mean squared difference between sample i of a and sample j of b.
Tensor pairwise_l2(const Tensor& a, const Tensor& b);

// c[i,k,l] = (l2(xs_i, xt_k) - alpha * l2(ys_i, yt_l))^2, source pairs index-aligned.
struct GWCost {
  Tensor c;  // [n_s, n_x, n_y]
  std::size_t n_s() const { return c.dim(0); }
  std::size_t n_x() const { return c.dim(1); }
  std::size_t n_y() const { return c.dim(2); }
  // Source-averaged cost [n_x, n_y]; the plan only sees this.
  Tensor reduced() const;
};

GWCost make_cost(const Tensor& xs, const Tensor& ys, const Tensor& xt, const Tensor& yt, double alpha);

struct CouplingMatrix {
  linalg::Matrix sigma;   // n_x x n_y, rounded onto the marginals
  double residual = 0.0;  // marginal violation of the last Sinkhorn iterate, before rounding
  int iterations = 0;
  bool converged = false;  // residual < tol within max_iters
};

// Log-domain Sinkhorn with uniform marginals. `epsilon` is relative to the
// largest cost entry; it is reached by halving from 1 so small values stay stable.
CouplingMatrix solve_plan(const linalg::Matrix& cost, double epsilon = kEpsilon, int max_iters = kMaxIters,
                          double tol = kTolerance);
CouplingMatrix solve_gw(const GWCost& cost, double epsilon = kEpsilon, int max_iters = kMaxIters,
                        double tol = kTolerance);

// sum_kl sigma_kl * cost_kl.
double plan_objective(const linalg::Matrix& cost, const linalg::Matrix& sigma);

// Plan-weighted cost with the plan held constant; differentiable through the cost.
Tensor weighted_cost(const GWCost& cost, const CouplingMatrix& plan);

struct RegTerms {
  Tensor value;   // scalar
  CouplingMatrix plan;
  Tensor generated;  // [n_gen, C, h, w] on the simplex
};

// Regularizer against caller-supplied target segmentations.
RegTerms topology_term(const Tensor& xs, const Tensor& ys, const Tensor& xt, const Tensor& yt, double alpha,
                       double epsilon = kEpsilon, int max_iters = kMaxIters);

// n softmax-normalised target-domain segmentations drawn from the flow.
Tensor generate_segmentations(const flow::FlowModel& gy, const std::vector<Tensor>& p, std::size_t n, std::size_t h,
                              std::size_t w, std::uint64_t seed);

struct RegSettings {
  double alpha = 2.0;
  double epsilon = kEpsilon;
  int max_iters = kMaxIters;
  std::size_t n_gen = 0;  // 0: same as the target batch
};

// ys are one-hot maps at the flow's spatial size; images may be any size shared by xs and xt.
RegTerms topology_reg(const flow::FlowModel& gy, const std::vector<Tensor>& p, const Tensor& xs, const Tensor& ys,
                      const Tensor& xt, const RegSettings& settings, std::uint64_t seed);

struct GyBatch {
  Tensor ys_flow;  // dequantised source labels, flow input space
  Tensor ys;       // the same labels as maps on the simplex
  Tensor xs;
  Tensor xt;
};

struct GyStepStats {
  double nll = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  CouplingMatrix plan;
};

// total = NLL(ys | source) + lambda_r * reg; one optimizer step on G_y.
GyStepStats train_gy_step(flow::FlowModel& gy, optim::Sgd& opt, const GyBatch& batch,
                          const likelihood::DomainPrior& prior, double lambda_r, const RegSettings& settings,
                          std::uint64_t seed);

}  // namespace geico::gw
