#pragma once

// Domain-conditioned maximum likelihood for the flows: per-domain Gaussian
// priors with unit covariance, constant domain probabilities, and helpers to
// move one-hot label maps in and out of the flows' continuous space.

#include <cstdint>
#include <random>
#include <vector>

#include "geico/flow.hpp"
#include "geico/optim.hpp"

namespace geico::likelihood {

using flow::Domain;
using flow::FlowModel;
using flow::LatentCode;

struct DomainPrior {
  double p_s = 0.5;
  double p_t = 0.5;
  double log_p(Domain d) const;
};

DomainPrior domain_prior(std::size_t count_s, std::size_t count_t);

struct NllTerms {
  Tensor loss;                  // scalar mean NLL (differentiable)
  std::vector<double> per_sample;
  double logdet_mean = 0.0;
};

NllTerms nll(const FlowModel& model, const std::vector<Tensor>& p, const Tensor& batch,
             const std::vector<Domain>& domains, const DomainPrior& prior);
NllTerms nll(const FlowModel& model, const Tensor& batch, const std::vector<Domain>& domains,
             const DomainPrior& prior);

// Per-sample log pi(z|d) for every sample of `code`, [N].
Tensor log_prior(const FlowModel& model, const std::vector<Tensor>& p, const LatentCode& code);

// n i.i.d. draws from the prior of `domain`, shaped for an input of spatial size h x w.
LatentCode sample_latent(const FlowModel& model, const std::vector<Tensor>& p, Domain domain, std::size_t n,
                         std::size_t h, std::size_t w, std::uint64_t seed);

// One-hot maps -> logit space: v = (y + u) / (1 + noise), u ~ U[0, noise), then
// logit(lambda + (1 - 2 lambda) v). Void pixels (all-zero one-hot) stay all-zero before noise.
inline constexpr double kDequantNoise = 0.05;
inline constexpr double kLogitLambda = 0.05;
Tensor dequantize_labels(const Tensor& onehot, std::mt19937_64& rng, double noise = kDequantNoise);
// Same map with fixed mid-interval noise, for deterministic or differentiable inputs (e.g. softmax maps).
Tensor labels_to_flow(const Tensor& probs);

// Flow-space images: pooled by `pool` and centred.
Tensor images_to_flow(const Tensor& images, std::size_t pool);

struct TrainStats {
  double nll_s = 0.0;  // NaN when the batch has no sample of that domain
  double nll_t = 0.0;
  double logdet_mean = 0.0;
  double grad_norm = 0.0;
};

// One SGD step on the mean NLL; reprojects degenerate 1x1-conv weights afterwards.
TrainStats train_step(FlowModel& model, optim::Sgd& opt, const Tensor& batch, const std::vector<Domain>& domains,
                      const DomainPrior& prior);

}  // namespace geico::likelihood
