#pragma once

#include <cstddef>
#include <vector>

#include "geico/tensor.hpp"

namespace geico::optim {

using GradList = std::vector<std::vector<double>>;

// Gradients of `leaves` (in order) copied out of a finished backward pass.
GradList collect(const Gradients& grads, const std::vector<Tensor>& leaves);
double global_norm(const GradList& grads);

struct SgdConfig {
  double lr = 2.5e-4;
  double momentum = 0.9;
  double clip = 50.0;  // global gradient-norm clip; <= 0 disables
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  // Updates params in place; returns the pre-clip gradient norm.
  virtual double step(std::vector<Tensor>& params, GradList grads) = 0;
};

class Sgd : public Optimizer {
 public:
  explicit Sgd(SgdConfig cfg = {}) : cfg_(cfg) {}
  double step(std::vector<Tensor>& params, GradList grads) override;
  const SgdConfig& config() const { return cfg_; }
  std::vector<Tensor>& state() { return velocity_; }
  const std::vector<Tensor>& state() const { return velocity_; }

 private:
  SgdConfig cfg_;
  std::vector<Tensor> velocity_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 50.0;
};

class Adam : public Optimizer {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  double step(std::vector<Tensor>& params, GradList grads) override;
  const AdamConfig& config() const { return cfg_; }
  // m and v interleaved per parameter, followed by a [1] step counter.
  std::vector<Tensor> state() const;
  void set_state(const std::vector<Tensor>& s);

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace geico::optim
