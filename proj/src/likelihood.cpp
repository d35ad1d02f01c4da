#include "geico/likelihood.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace geico::likelihood {

namespace {

Tensor domain_onehot(const std::vector<Domain>& domains) {
  std::vector<double> v(domains.size() * flow::kNumDomains, 0.0);
  for (std::size_t i = 0; i < domains.size(); ++i) v[i * flow::kNumDomains + (domains[i] == Domain::Source ? 0 : 1)] = 1.0;
  return Tensor({domains.size(), flow::kNumDomains}, std::move(v));
}

Tensor per_sample_sum(const Tensor& x) {
  const std::size_t n = x.dim(0);
  return sum(reshape(x, {n, x.size() / n}), 1);
}

Tensor logit(const Tensor& a) { return log(a) - log(1.0 - a); }

}  // namespace

double DomainPrior::log_p(Domain d) const { return std::log(d == Domain::Source ? p_s : p_t); }

DomainPrior domain_prior(std::size_t count_s, std::size_t count_t) {
  if (count_s == 0 || count_t == 0) throw std::invalid_argument("domain_prior: both domains need samples");
  const double total = static_cast<double>(count_s + count_t);
  return {static_cast<double>(count_s) / total, static_cast<double>(count_t) / total};
}

Tensor log_prior(const FlowModel& model, const std::vector<Tensor>& p, const LatentCode& code) {
  const std::size_t n = code.batch();
  const Tensor onehot = domain_onehot(code.domains);
  Tensor total = Tensor::zeros({n});
  for (std::size_t k = 0; k < code.pieces.size(); ++k) {
    const Tensor& z = code.pieces[k];
    const std::size_t c = z.dim(1);
    const Tensor mu = reshape(matmul(onehot, p[model.prior_means[k]]), {n, c, 1, 1});
    total = total + per_sample_sum(square(z - mu)) * -0.5;
  }
  const double d = static_cast<double>(code.dim());
  return total - 0.5 * d * std::log(2.0 * std::numbers::pi);
}

NllTerms nll(const FlowModel& model, const std::vector<Tensor>& p, const Tensor& batch,
             const std::vector<Domain>& domains, const DomainPrior& prior) {
  const LatentCode code = flow::forward(model, p, batch, domains);
  for (double v : code.logdet.data())
    if (!std::isfinite(v)) throw NumericError("nll: non-finite logdet");
  std::vector<double> log_pd(domains.size());
  for (std::size_t i = 0; i < domains.size(); ++i) log_pd[i] = prior.log_p(domains[i]);
  const Tensor per = -(log_prior(model, p, code) + code.logdet + Tensor({domains.size()}, log_pd));
  NllTerms out;
  out.loss = mean(per);
  out.per_sample = per.to_vector();
  double ld = 0.0;
  for (double v : code.logdet.data()) ld += v;
  out.logdet_mean = ld / static_cast<double>(domains.size());
  return out;
}

NllTerms nll(const FlowModel& model, const Tensor& batch, const std::vector<Domain>& domains,
             const DomainPrior& prior) {
  return nll(model, model.params, batch, domains, prior);
}

LatentCode sample_latent(const FlowModel& model, const std::vector<Tensor>& p, Domain domain, std::size_t n,
                         std::size_t h, std::size_t w, std::uint64_t seed) {
  const auto shapes = flow::latent_shapes(model, {n, model.config.in_channels, h, w});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  LatentCode code;
  code.domains.assign(n, domain);
  code.logdet = Tensor::zeros({n});
  const std::size_t row = domain == Domain::Source ? 0 : 1;
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const Shape& s = shapes[k];
    const std::size_t c = s[1], hw = s[2] * s[3];
    std::vector<double> noise(numel(s));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < hw; ++j) noise[(i * c + ch) * hw + j] = g(rng);
    const Tensor mean_map = reshape(slice(p[model.prior_means[k]], 0, row, row + 1), {1, c, 1, 1});
    code.pieces.push_back(mean_map + Tensor(s, std::move(noise)));
  }
  return code;
}

Tensor dequantize_labels(const Tensor& onehot, std::mt19937_64& rng, double noise) {
  std::uniform_real_distribution<double> u(0.0, noise);
  std::vector<double> v = onehot.to_vector();
  for (double& x : v) {
    const double q = (x + u(rng)) / (1.0 + noise);
    const double a = kLogitLambda + (1.0 - 2.0 * kLogitLambda) * q;
    x = std::log(a) - std::log1p(-a);
  }
  return Tensor(onehot.shape(), std::move(v));
}

Tensor labels_to_flow(const Tensor& probs) {
  const double mid = 0.5 * kDequantNoise;
  const Tensor q = (probs + mid) * (1.0 / (1.0 + kDequantNoise));
  return logit(q * (1.0 - 2.0 * kLogitLambda) + kLogitLambda);
}

Tensor images_to_flow(const Tensor& images, std::size_t pool) {
  const Tensor x = pool > 1 ? avg_pool2d(images, pool) : images;
  return x - 0.5;
}

TrainStats train_step(FlowModel& model, optim::Sgd& opt, const Tensor& batch, const std::vector<Domain>& domains,
                      const DomainPrior& prior) {
  Tape tape;
  const auto leaves = tape.leaves(model.params);
  const NllTerms terms = nll(model, leaves, batch, domains, prior);
  if (!std::isfinite(terms.loss.item())) throw NumericError("flow training: non-finite NLL");
  const Gradients g = tape.backward(terms.loss);
  TrainStats st;
  st.grad_norm = opt.step(model.params, optim::collect(g, leaves));
  flow::reproject_invconv(model);
  double s = 0, t = 0;
  std::size_t ns = 0, nt = 0;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i] == Domain::Source) {
      s += terms.per_sample[i];
      ++ns;
    } else {
      t += terms.per_sample[i];
      ++nt;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  st.nll_s = ns ? s / static_cast<double>(ns) : nan;
  st.nll_t = nt ? t / static_cast<double>(nt) : nan;
  st.logdet_mean = terms.logdet_mean;
  return st;
}

}  // namespace geico::likelihood
