#include "geico/flow.hpp"

#include "geico/checkpoint.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>

namespace geico::flow {

namespace {

std::vector<double> normal_values(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

// Random orthogonal matrix: Q factor of a Gaussian matrix.
std::vector<double> random_rotation(std::size_t c, std::mt19937_64& rng) {
  Eigen::MatrixXd a(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = g(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  std::vector<double> out(c * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

std::size_t push(FlowModel& m, Tensor t) {
  m.params.push_back(std::move(t));
  return m.params.size() - 1;
}

Tensor as_column(const Tensor& logdet) { return logdet.rank() == 0 ? reshape(logdet, {1}) : logdet; }

using ActnormHook = std::function<void(const Tensor& x, const StepLayout& layout)>;

void check_input(const FlowModel& model, const Tensor& x, const std::vector<Domain>& domains) {
  if (x.rank() != 4 || x.dim(1) != model.config.in_channels) {
    throw ShapeError("flow: expected [N," + std::to_string(model.config.in_channels) + ",H,W] input, got " +
                     to_string(x.shape()));
  }
  if (domains.size() != x.dim(0)) throw ShapeError("flow: one domain tag per sample required");
  if (model.config.squeeze) {
    const std::size_t f = std::size_t{1} << model.config.scales;
    if (x.dim(2) % f != 0 || x.dim(3) % f != 0) {
      throw FlowError("flow: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                      " not divisible by " + std::to_string(f));
    }
  }
}

CouplingParams coupling_params(const std::vector<Tensor>& p, const StepLayout& s) {
  return {p[s.w1], p[s.b1], p[s.w2], p[s.b2]};
}

LatentCode run_forward(const FlowModel& model, const std::vector<Tensor>& p, Tensor x,
                       const std::vector<Domain>& domains, const ActnormHook& hook) {
  check_input(model, x, domains);
  const std::size_t n = x.dim(0);
  LatentCode code;
  code.domains = domains;
  Tensor logdet = Tensor::zeros({n});
  for (std::size_t k = 0; k < model.config.scales; ++k) {
    if (model.config.squeeze) x = squeeze2x2(x);
    for (const StepLayout& s : model.steps[k]) {
      if (hook) hook(x, s);
      LayerOut a = actnorm(x, p[s.an_scale], p[s.an_bias]);
      LayerOut b = invconv(a.y, p[s.weight]);
      LayerOut c = coupling(b.y, domains, coupling_params(p, s));
      logdet = logdet + as_column(a.logdet) + as_column(b.logdet) + c.logdet;
      x = c.y;
    }
    if (k + 1 < model.config.scales) {
      const std::size_t half = x.dim(1) / 2;
      code.pieces.push_back(slice(x, 1, 0, half));
      x = slice(x, 1, half, x.dim(1));
    } else {
      code.pieces.push_back(x);
    }
  }
  code.logdet = logdet;
  return code;
}

}  // namespace

std::size_t LatentCode::dim() const {
  std::size_t d = 0;
  for (const auto& p : pieces) d += p.size() / p.dim(0);
  return d;
}

FlowModel make_flow(const FlowConfig& cfg) {
  if (cfg.in_channels == 0 || cfg.scales == 0 || cfg.steps == 0 || cfg.hidden == 0) {
    throw FlowError("flow config: channels, scales, steps and hidden width must be positive");
  }
  FlowModel m;
  m.config = cfg;
  std::mt19937_64 rng(cfg.seed ^ 0x5EEDF10Full);
  std::size_t c = cfg.in_channels;
  for (std::size_t k = 0; k < cfg.scales; ++k) {
    if (cfg.squeeze) c *= 4;
    if (c < 2 || c % 2 != 0) throw FlowError("flow: coupling needs an even channel count, got " + std::to_string(c));
    std::vector<StepLayout> steps;
    const std::size_t c1 = c / 2;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      StepLayout l{};
      l.channels = c;
      l.an_scale = push(m, Tensor::full({1, c, 1, 1}, 1.0));
      l.an_bias = push(m, Tensor::zeros({1, c, 1, 1}));
      l.weight = push(m, Tensor({c, c}, random_rotation(c, rng)));
      const std::size_t fan_in = (c1 + kNumDomains) * 9;
      l.w1 = push(m, Tensor({cfg.hidden, c1 + kNumDomains, 3, 3},
                            normal_values(cfg.hidden * fan_in, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng)));
      l.b1 = push(m, Tensor::zeros({1, cfg.hidden, 1, 1}));
      // Zero last layer: every coupling starts as the identity.
      l.w2 = push(m, Tensor::zeros({c, cfg.hidden, 3, 3}));
      l.b2 = push(m, Tensor::zeros({1, c, 1, 1}));
      steps.push_back(l);
    }
    m.steps.push_back(std::move(steps));
    const std::size_t piece = (k + 1 < cfg.scales) ? c / 2 : c;
    m.piece_channels.push_back(piece);
    m.prior_means.push_back(push(m, Tensor::zeros({kNumDomains, piece})));
    if (k + 1 < cfg.scales) c /= 2;
  }
  return m;
}

Tensor domain_map(const std::vector<Domain>& domains, std::size_t h, std::size_t w) {
  const std::size_t n = domains.size(), hw = h * w;
  std::vector<double> v(n * kNumDomains * hw, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d = domains[i] == Domain::Source ? 0 : 1;
    std::fill_n(v.begin() + static_cast<std::ptrdiff_t>((i * kNumDomains + d) * hw), hw, 1.0);
  }
  return Tensor({n, kNumDomains, h, w}, std::move(v));
}

LayerOut actnorm(const Tensor& x, const Tensor& scale, const Tensor& bias, bool reverse) {
  for (double s : scale.data())
    if (s == 0.0) throw FlowError("actnorm: zero scale");
  const double hw = static_cast<double>(x.dim(2) * x.dim(3));
  // 0.5 log(s^2) = log|s|, differentiable for either sign.
  const Tensor ld = sum(log(square(scale))) * (0.5 * hw);
  if (!reverse) return {(x + bias) * scale, ld};
  return {x / scale - bias, -ld};
}

LayerOut invconv(const Tensor& x, const Tensor& weight, bool reverse) {
  const std::size_t c = weight.dim(0);
  if (weight.rank() != 2 || weight.dim(1) != c || x.dim(1) != c) throw ShapeError("invconv: weight/channel mismatch");
  const double hw = static_cast<double>(x.dim(2) * x.dim(3));
  const std::vector<double> wv = weight.to_vector();
  if (!std::isfinite(linalg::log_abs_det(linalg::Matrix(c, c, wv)))) throw FlowError("invconv: singular weight");
  const Tensor ld = logabsdet(weight);
  if (!reverse) return {conv2d(x, reshape(weight, {c, c, 1, 1})), ld * hw};
  return {conv2d(x, reshape(inverse(weight), {c, c, 1, 1})), ld * (-hw)};
}

LayerOut coupling(const Tensor& x, const std::vector<Domain>& domains, const CouplingParams& p, bool reverse) {
  const std::size_t c = x.dim(1);
  if (c < 2 || c % 2 != 0) throw FlowError("coupling: odd channel count " + std::to_string(c));
  const std::size_t n = x.dim(0), half = c / 2;
  const Tensor x1 = slice(x, 1, 0, half);
  const Tensor x2 = slice(x, 1, half, c);
  const Conv2dParams same{1, 1, 1};
  const Tensor in = concat({x1, domain_map(domains, x.dim(2), x.dim(3))}, 1);
  const Tensor h = relu(conv2d(in, p.w1, same) + p.b1);
  const Tensor out = conv2d(h, p.w2, same) + p.b2;
  const Tensor logs = tanh(slice(out, 1, 0, half));
  const Tensor shift = slice(out, 1, half, c);
  const Tensor ld = sum(reshape(logs, {n, logs.size() / n}), 1);
  if (!reverse) return {concat({x1, x2 * exp(logs) + shift}, 1), ld};
  return {concat({x1, (x2 - shift) * exp(-logs)}, 1), -ld};
}

LatentCode forward(const FlowModel& model, const std::vector<Tensor>& p, const Tensor& x,
                   const std::vector<Domain>& domains) {
  return run_forward(model, p, x, domains, {});
}

LatentCode forward(const FlowModel& model, const Tensor& x, const std::vector<Domain>& domains) {
  return forward(model, model.params, x, domains);
}

Tensor inverse(const FlowModel& model, const std::vector<Tensor>& p, const LatentCode& z) {
  const std::size_t scales = model.config.scales;
  if (z.pieces.size() != scales) throw ShapeError("flow inverse: expected one latent piece per scale");
  const std::size_t n = z.pieces.back().dim(0);
  for (std::size_t k = 0; k < scales; ++k) {
    if (z.pieces[k].rank() != 4 || z.pieces[k].dim(1) != model.piece_channels[k] || z.pieces[k].dim(0) != n) {
      throw ShapeError("flow inverse: latent piece " + std::to_string(k) + " has shape " +
                       to_string(z.pieces[k].shape()));
    }
  }
  if (z.domains.size() != n) throw ShapeError("flow inverse: one domain tag per sample required");
  Tensor x = z.pieces.back();
  for (std::size_t k = scales; k-- > 0;) {
    if (k + 1 < scales) x = concat({z.pieces[k], x}, 1);
    const auto& steps = model.steps[k];
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
      x = coupling(x, z.domains, coupling_params(p, *it), true).y;
      x = invconv(x, p[it->weight], true).y;
      x = actnorm(x, p[it->an_scale], p[it->an_bias], true).y;
    }
    if (model.config.squeeze) x = unsqueeze2x2(x);
  }
  return x;
}

Tensor inverse(const FlowModel& model, const LatentCode& z) { return inverse(model, model.params, z); }

std::vector<Shape> latent_shapes(const FlowModel& model, const Shape& input) {
  const std::size_t n = input.at(0);
  std::size_t h = input.at(2), w = input.at(3);
  if (model.config.squeeze) {
    const std::size_t f = std::size_t{1} << model.config.scales;
    if (h % f != 0 || w % f != 0) throw FlowError("flow: spatial size not divisible by 2^scales");
  }
  std::vector<Shape> out;
  for (std::size_t k = 0; k < model.config.scales; ++k) {
    if (model.config.squeeze) {
      h /= 2;
      w /= 2;
    }
    out.push_back({n, model.piece_channels[k], h, w});
  }
  return out;
}

void init_data_dependent(FlowModel& model, const Tensor& batch, const std::vector<Domain>& domains) {
  auto hook = [&model](const Tensor& x, const StepLayout& s) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const auto v = x.data();
    std::vector<double> scale(c), bias(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) mean += v[(i * c + ch) * hw + j];
      mean /= static_cast<double>(n * hw);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = v[(i * c + ch) * hw + j] - mean;
          var += d * d;
        }
      var /= static_cast<double>(n * hw);
      bias[ch] = -mean;
      scale[ch] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    }
    model.params[s.an_scale] = Tensor({1, c, 1, 1}, std::move(scale));
    model.params[s.an_bias] = Tensor({1, c, 1, 1}, std::move(bias));
  };
  run_forward(model, model.params, batch.detach(), domains, hook);
  model.initialized = true;
}

std::size_t reproject_invconv(FlowModel& model) {
  std::size_t changed = 0;
  for (const auto& scale : model.steps)
    for (const StepLayout& s : scale) {
      const Tensor& w = model.params[s.weight];
      const std::size_t c = w.dim(0);
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
          w.data().data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
      if (std::abs(a.determinant()) > 1e-12) continue;
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
      const Eigen::MatrixXd q = svd.matrixU() * svd.matrixV().transpose();
      std::vector<double> v(c * c);
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      model.params[s.weight] = Tensor({c, c}, std::move(v));
      ++changed;
    }
  return changed;
}

Tensor pooled_latent(const LatentCode& code) {
  std::vector<Tensor> parts;
  for (const auto& p : code.pieces) parts.push_back(mean(mean(p, 3), 2));
  return concat(parts, 1);
}

std::uint64_t param_hash(const std::vector<Tensor>& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& t : params) {
    for (std::size_t d : t.shape()) mix(&d, sizeof d);
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

void save_flow(const std::filesystem::path& path, const FlowModel& model) {
  const FlowConfig& c = model.config;
  ckpt::Checkpoint ck;
  ck.manifest = {{"kind", "flow"},
                 {"version", 1},
                 {"in_channels", c.in_channels},
                 {"scales", c.scales},
                 {"steps", c.steps},
                 {"hidden", c.hidden},
                 {"squeeze", c.squeeze},
                 {"seed", c.seed},
                 {"initialized", model.initialized}};
  ck.tensors = model.params;
  ckpt::save(path, ck);
}

FlowModel load_flow(const std::filesystem::path& path) {
  ckpt::Checkpoint ck = ckpt::load(path);
  FlowConfig c;
  try {
    if (ck.manifest.at("kind") != "flow") throw ckpt::CorruptError("checkpoint " + path.string() + " is not a flow");
    c.in_channels = ck.manifest.at("in_channels");
    c.scales = ck.manifest.at("scales");
    c.steps = ck.manifest.at("steps");
    c.hidden = ck.manifest.at("hidden");
    c.squeeze = ck.manifest.at("squeeze");
    c.seed = ck.manifest.at("seed");
  } catch (const nlohmann::json::exception& e) {
    throw ckpt::CorruptError(std::string("flow checkpoint manifest: ") + e.what());
  }
  FlowModel m = make_flow(c);
  if (ck.tensors.size() != m.params.size()) throw ckpt::CorruptError("flow checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (ck.tensors[i].shape() != m.params[i].shape()) throw ckpt::CorruptError("flow checkpoint: parameter shape mismatch");
  m.params = std::move(ck.tensors);
  m.initialized = ck.manifest.value("initialized", false);
  return m;
}

}  // namespace geico::flow
