#include "geico/optim.hpp"

#include <cmath>

namespace geico::optim {

namespace {

double clip_factor(const GradList& g, double clip, double& norm) {
  norm = global_norm(g);
  if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient norm");
  return (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
}

void check_sizes(const std::vector<Tensor>& params, const GradList& grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != grads[i].size()) throw ShapeError("optimizer: gradient size mismatch");
}

}  // namespace

GradList collect(const Gradients& grads, const std::vector<Tensor>& leaves) {
  GradList out;
  out.reserve(leaves.size());
  for (const auto& l : leaves) {
    const auto g = grads.raw(l);
    out.emplace_back(g.begin(), g.end());
  }
  return out;
}

double global_norm(const GradList& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

double Sgd::step(std::vector<Tensor>& params, GradList grads) {
  check_sizes(params, grads);
  double norm = 0.0;
  const double f = clip_factor(grads, cfg_.clip, norm);
  if (velocity_.empty())
    for (const auto& p : params) velocity_.push_back(Tensor::zeros(p.shape()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> v = velocity_[i].to_vector();
    std::vector<double> p = params[i].to_vector();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = cfg_.momentum * v[j] + f * grads[i][j];
      p[j] -= cfg_.lr * v[j];
    }
    velocity_[i] = Tensor(params[i].shape(), std::move(v));
    params[i] = Tensor(params[i].shape(), std::move(p));
  }
  return norm;
}

double Adam::step(std::vector<Tensor>& params, GradList grads) {
  check_sizes(params, grads);
  double norm = 0.0;
  const double f = clip_factor(grads, cfg_.clip, norm);
  if (m_.empty())
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> p = params[i].to_vector();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = f * grads[i][j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
      p[j] -= cfg_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.eps);
    }
    params[i] = Tensor(params[i].shape(), std::move(p));
  }
  return norm;
}

std::vector<Tensor> Adam::state() const {
  std::vector<Tensor> s;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    s.emplace_back(Shape{m_[i].size()}, m_[i]);
    s.emplace_back(Shape{v_[i].size()}, v_[i]);
  }
  s.emplace_back(Shape{1}, std::vector<double>{static_cast<double>(t_)});
  return s;
}

void Adam::set_state(const std::vector<Tensor>& s) {
  if (s.empty() || s.size() % 2 != 1) throw ShapeError("adam: malformed optimizer state");
  m_.clear();
  v_.clear();
  for (std::size_t i = 0; i + 1 < s.size(); i += 2) {
    m_.push_back(s[i].to_vector());
    v_.push_back(s[i + 1].to_vector());
  }
  t_ = static_cast<std::size_t>(s.back().item());
}

}  // namespace geico::optim
