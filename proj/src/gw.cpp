#include "geico/gw.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace geico::gw {

namespace {

Tensor flatten(const Tensor& x) {
  if (x.rank() == 0) throw GwError("pairwise_l2: scalar batch");
  return reshape(x, {x.dim(0), x.size() / x.dim(0)});
}

// Soft-min over one axis of the scaled kernel: -eps log sum_j w_j exp((pot_j - c_ij)/eps).
double softmin(const std::vector<double>& shifted, double log_w, double eps) {
  double top = -std::numeric_limits<double>::infinity();
  for (double v : shifted) top = std::max(top, v);
  double s = 0.0;
  for (double v : shifted) s += std::exp(v - top);
  return -eps * (top + std::log(s) + log_w);
}

// Projects an approximate plan onto the uniform transport polytope: shrink
// rows and columns that exceed their marginal, then spread the deficit as a
// rank-one correction. Moves the plan by at most twice its marginal error.
void round_to_marginals(linalg::Matrix& p) {
  const std::size_t n = p.rows, m = p.cols;
  const double a = 1.0 / static_cast<double>(n), b = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += p(i, j);
    if (s > a)
      for (std::size_t j = 0; j < m; ++j) p(i, j) *= a / s;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p(i, j);
    if (s > b)
      for (std::size_t i = 0; i < n; ++i) p(i, j) *= b / s;
  }
  std::vector<double> dr(n), dc(m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += p(i, j);
    dr[i] = std::max(0.0, a - s);
    total += dr[i];
  }
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p(i, j);
    dc[j] = std::max(0.0, b - s);
  }
  if (total <= 0.0) return;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) p(i, j) += dr[i] * dc[j] / total;
}

}  // namespace

Tensor pairwise_l2(const Tensor& a, const Tensor& b) {
  const Tensor fa = flatten(a), fb = flatten(b);
  if (fa.dim(1) != fb.dim(1))
    throw GwError("pairwise_l2: per-sample sizes differ (" + to_string(a.shape()) + " vs " + to_string(b.shape()) +
                  ")");
  const std::size_t n = fa.dim(0), m = fb.dim(0), d = fa.dim(1);
  const Tensor diff = reshape(fa, {n, 1, d}) - reshape(fb, {1, m, d});
  return mean(square(diff), 2);
}

Tensor GWCost::reduced() const { return mean(c, 0); }

GWCost make_cost(const Tensor& xs, const Tensor& ys, const Tensor& xt, const Tensor& yt, double alpha) {
  if (!(alpha > 0.0)) throw GwError("make_cost: alpha must be positive");
  if (xs.dim(0) != ys.dim(0)) throw GwError("make_cost: source images and labels must pair up");
  const Tensor dx = pairwise_l2(xs, xt);
  const Tensor dy = pairwise_l2(ys, yt);
  const std::size_t ns = dx.dim(0), nx = dx.dim(1), ny = dy.dim(1);
  GWCost cost{square(reshape(dx, {ns, nx, 1}) - alpha * reshape(dy, {ns, 1, ny}))};
  check_finite(cost.c.data(), "gw cost");
  return cost;
}

CouplingMatrix solve_plan(const linalg::Matrix& cost, double epsilon, int max_iters, double tol) {
  if (!(epsilon > 0.0)) throw GwError("solve_gw: epsilon must be positive");
  const std::size_t n = cost.rows, m = cost.cols;
  if (n == 0 || m == 0) throw GwError("solve_gw: empty cost");
  double scale = 0.0;
  for (double v : cost.values) {
    if (!std::isfinite(v) || v < 0.0) throw GwError("solve_gw: cost entries must be finite and nonnegative");
    scale = std::max(scale, v);
  }
  if (scale == 0.0) scale = 1.0;

  const double log_a = -std::log(static_cast<double>(n)), log_b = -std::log(static_cast<double>(m));
  std::vector<double> f(n, 0.0), g(m, 0.0), row(m), col(n);
  auto sweep = [&](double eps) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) row[j] = (g[j] - cost(i, j)) / eps;
      f[i] = softmin(row, log_b, eps);
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) col[i] = (f[i] - cost(i, j)) / eps;
      g[j] = softmin(col, log_a, eps);
    }
  };
  auto plan = [&](double eps) {
    linalg::Matrix p(n, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) p(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / eps + log_a + log_b);
    return p;
  };

  CouplingMatrix out;
  const double target = epsilon * scale;
  // Warm start through a coarse-to-fine schedule.
  for (double eps = scale; eps > target; eps *= 0.5) {
    for (int k = 0; k < 10; ++k) sweep(eps);
    out.iterations += 10;
  }
  for (int it = 0; it < max_iters; ++it) {
    sweep(target);
    ++out.iterations;
    out.sigma = plan(target);
    // Columns are exact after the g update, so only rows can be off.
    out.residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += out.sigma(i, j);
      out.residual = std::max(out.residual, std::abs(s - 1.0 / static_cast<double>(n)));
    }
    if (out.residual < tol) {
      out.converged = true;
      break;
    }
  }
  round_to_marginals(out.sigma);
  return out;
}

CouplingMatrix solve_gw(const GWCost& cost, double epsilon, int max_iters, double tol) {
  const Tensor r = cost.reduced();
  return solve_plan(linalg::Matrix(r.dim(0), r.dim(1), r.to_vector()), epsilon, max_iters, tol);
}

double plan_objective(const linalg::Matrix& cost, const linalg::Matrix& sigma) {
  double s = 0.0;
  for (std::size_t k = 0; k < cost.values.size(); ++k) s += cost.values[k] * sigma.values[k];
  return s;
}

Tensor weighted_cost(const GWCost& cost, const CouplingMatrix& plan) {
  const Tensor sigma({plan.sigma.rows, plan.sigma.cols}, plan.sigma.values);
  return sum(cost.reduced() * sigma);
}

RegTerms topology_term(const Tensor& xs, const Tensor& ys, const Tensor& xt, const Tensor& yt, double alpha,
                       double epsilon, int max_iters) {
  const GWCost cost = make_cost(xs, ys, xt, yt, alpha);
  RegTerms out;
  out.plan = solve_gw(cost, epsilon, max_iters);
  out.value = weighted_cost(cost, out.plan);
  out.generated = yt;
  return out;
}

Tensor generate_segmentations(const flow::FlowModel& gy, const std::vector<Tensor>& p, std::size_t n, std::size_t h,
                              std::size_t w, std::uint64_t seed) {
  const flow::LatentCode z = likelihood::sample_latent(gy, p, flow::Domain::Target, n, h, w, seed);
  return softmax_channels(flow::inverse(gy, p, z));
}

RegTerms topology_reg(const flow::FlowModel& gy, const std::vector<Tensor>& p, const Tensor& xs, const Tensor& ys,
                      const Tensor& xt, const RegSettings& settings, std::uint64_t seed) {
  if (ys.rank() != 4) throw GwError("topology_reg: source labels must be [N,C,H,W]");
  const std::size_t n = settings.n_gen ? settings.n_gen : xt.dim(0);
  const Tensor yt = generate_segmentations(gy, p, n, ys.dim(2), ys.dim(3), seed);
  return topology_term(xs, ys, xt, yt, settings.alpha, settings.epsilon, settings.max_iters);
}

GyStepStats train_gy_step(flow::FlowModel& gy, optim::Sgd& opt, const GyBatch& batch,
                          const likelihood::DomainPrior& prior, double lambda_r, const RegSettings& settings,
                          std::uint64_t seed) {
  Tape tape;
  const auto leaves = tape.leaves(gy.params);
  const std::vector<flow::Domain> src(batch.ys_flow.dim(0), flow::Domain::Source);
  const Tensor nll = likelihood::nll(gy, leaves, batch.ys_flow, src, prior).loss;
  GyStepStats st;
  st.nll = nll.item();
  Tensor total = nll;
  if (lambda_r != 0.0) {
    RegTerms reg = topology_reg(gy, leaves, batch.xs, batch.ys, batch.xt, settings, seed);
    st.reg = reg.value.item();
    st.plan = std::move(reg.plan);
    total = nll + lambda_r * reg.value;
  }
  st.total = total.item();
  if (!std::isfinite(st.total)) throw NumericError("segmentation flow training: non-finite loss");
  const Gradients g = tape.backward(total);
  st.grad_norm = opt.step(gy.params, optim::collect(g, leaves));
  flow::reproject_invconv(gy);
  return st;
}

}  // namespace geico::gw
