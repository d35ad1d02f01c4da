#include "geico/seg.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "geico/checkpoint.hpp"
#include "geico/gw.hpp"
#include "geico/likelihood.hpp"
#include "geico/scene.hpp"

namespace geico::seg {

namespace {

Tensor he_normal(Shape shape, double gain, std::mt19937_64& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor conv_bias(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dParams cp) {
  return conv2d(x, w, cp) + reshape(b, {1, b.dim(0), 1, 1});
}

// 1 on labelled pixels, 0 on void: [N,1,H,W].
Tensor label_mask(const Tensor& onehot) {
  const std::size_t n = onehot.dim(0), h = onehot.dim(2), w = onehot.dim(3);
  return reshape(sum(onehot, 1), {n, 1, h, w});
}

double labelled_pixels(const Tensor& onehot) {
  double count = 0.0;
  for (double v : onehot.data()) count += v;
  if (count <= 0.0) throw SegError("cross entropy: every pixel is void");
  return count;
}

const std::vector<flow::Domain> domains(std::size_t n, flow::Domain d) { return std::vector<flow::Domain>(n, d); }

}  // namespace

SegmenterModel make_segmenter(const SegConfig& c) {
  if (c.classes < 2 || c.width1 == 0 || c.width2 == 0) throw SegError("make_segmenter: bad config");
  std::mt19937_64 rng(c.seed);
  const double relu_gain = std::sqrt(2.0);
  SegmenterModel m{c, {}};
  m.params.push_back(he_normal({c.width1, 3, 3, 3}, relu_gain, rng));
  m.params.push_back(Tensor::zeros({c.width1}));
  m.params.push_back(he_normal({c.width2, c.width1, 3, 3}, relu_gain, rng));
  m.params.push_back(Tensor::zeros({c.width2}));
  m.params.push_back(he_normal({c.width2, c.width2, 3, 3}, relu_gain, rng));
  m.params.push_back(Tensor::zeros({c.width2}));
  // Small head so an untrained model is close to uniform.
  m.params.push_back(he_normal({c.classes, c.width2, 1, 1}, 0.1, rng));
  m.params.push_back(Tensor::zeros({c.classes}));
  if (c.skip_width > 0) {
    m.params.push_back(he_normal({c.skip_width, 3, 3, 3}, relu_gain, rng));
    m.params.push_back(Tensor::zeros({c.skip_width}));
    m.params.push_back(he_normal({c.classes, c.skip_width, 1, 1}, 0.1, rng));
    m.params.push_back(Tensor::zeros({c.classes}));
  }
  return m;
}

Tensor logits(const SegmenterModel& model, const std::vector<Tensor>& p, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3) throw SegError("segment: expected images [N,3,H,W]");
  if (images.dim(2) % 4 || images.dim(3) % 4) throw SegError("segment: height and width must be multiples of 4");
  if (p.size() != model.params.size()) throw SegError("segment: parameter count mismatch");
  Tensor h = relu(conv_bias(images, p[0], p[1], {2, 1, 1}));
  h = relu(conv_bias(h, p[2], p[3], {2, 1, 1}));
  h = relu(conv_bias(h, p[4], p[5], {1, 2, 2}));
  h = upsample_bilinear(conv_bias(h, p[6], p[7], {}), 4);
  if (model.config.skip_width == 0) return h;
  const Tensor fine = relu(conv_bias(images, p[8], p[9], {1, 1, 1}));
  return h + conv_bias(fine, p[10], p[11], {});
}

Tensor segment(const SegmenterModel& model, const Tensor& images) {
  return softmax_channels(logits(model, model.params, images));
}

std::vector<std::uint8_t> predict_classes(const Tensor& scores) {
  const std::size_t n = scores.dim(0), c = scores.dim(1), hw = scores.dim(2) * scores.dim(3);
  std::vector<std::uint8_t> out(n * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t px = 0; px < hw; ++px) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (scores.at((i * c + k) * hw + px) > scores.at((i * c + best) * hw + px)) best = k;
      out[i * hw + px] = static_cast<std::uint8_t>(best);
    }
  return out;
}

Tensor cross_entropy(const Tensor& probs, const Tensor& onehot) {
  if (probs.shape() != onehot.shape()) throw SegError("cross entropy: shape mismatch");
  const double count = labelled_pixels(onehot);
  const Tensor clipped = -clamp_max(-clamp_max(probs, 1.0 - 1e-6), -1e-12);
  return scale(-sum(onehot * log(clipped)), 1.0 / count);
}

Tensor cross_entropy_logits(const Tensor& scores, const Tensor& onehot) {
  if (scores.shape() != onehot.shape()) throw SegError("cross entropy: shape mismatch");
  const double count = labelled_pixels(onehot);
  return scale(-sum(onehot * log_softmax_channels(scores)), 1.0 / count);
}

Tensor image_flow_input(const Tensor& images, std::size_t pool) { return likelihood::images_to_flow(images, pool); }

Tensor label_flow_input(const Tensor& probs, std::size_t pool) {
  return likelihood::labels_to_flow(pool > 1 ? avg_pool2d(probs, pool) : probs);
}

Tensor geico_from_distances(const Tensor& dx, const Tensor& dy, double alpha) {
  if (!(alpha > 0.0)) throw SegError("geico loss: alpha must be positive");
  return square(dx - alpha * dy);
}

GeicoTerms geico_loss(const Tensor& xs, const Tensor& ys_pred, const Tensor& xt, const Tensor& yt_pred,
                      const Flows& flows, double alpha, double beta, const geo::W2Fn& w2) {
  if (!flows.gx || !flows.gy) throw SegError("geico loss: both flows are required");
  using flow::Domain;
  GeicoTerms t;
  t.dx = geo::dist(*flows.gx, flows.gx->params, image_flow_input(xs), domains(xs.dim(0), Domain::Source),
                   image_flow_input(xt), domains(xt.dim(0), Domain::Target), beta, w2);
  t.dy = geo::dist(*flows.gy, flows.gy->params, label_flow_input(ys_pred), domains(ys_pred.dim(0), Domain::Source),
                   label_flow_input(yt_pred), domains(yt_pred.dim(0), Domain::Target), beta, w2);
  t.loss = geico_from_distances(t.dx.clamped, t.dy.clamped, alpha);
  return t;
}

GeicoTerms direct_geico_loss(const Tensor& xs, const Tensor& ys_pred, const Tensor& xt, const Tensor& yt_pred,
                             double alpha, double beta) {
  auto direct = [beta](const Tensor& a, const Tensor& b) {
    return geo::clamp_distance(mean(gw::pairwise_l2(a, b)), beta);
  };
  GeicoTerms t;
  t.dx = direct(image_flow_input(xs), image_flow_input(xt));
  t.dy = direct(label_flow_input(ys_pred), label_flow_input(yt_pred));
  t.loss = geico_from_distances(t.dx.clamped, t.dy.clamped, alpha);
  return t;
}

AdaptStats adapt_step(SegmenterModel& model, optim::Optimizer& opt, const Flows& flows, const AdaptBatch& batch,
                      const AdaptConfig& cfg) {
  Tape tape;
  const auto leaves = tape.leaves(model.params);
  const Tensor scores_s = logits(model, leaves, batch.xs);
  const Tensor ls = cross_entropy_logits(scores_s, batch.ys);
  AdaptStats st;
  st.ls = ls.item();
  Tensor total = ls;
  if (cfg.lambda_t != 0.0) {
    // Void pixels carry no label, so they are blanked in the source maps too.
    const Tensor ys_dy = cfg.true_source_labels ? batch.ys : softmax_channels(scores_s) * label_mask(batch.ys);
    const Tensor yt = softmax_channels(logits(model, leaves, batch.xt));
    const GeicoTerms g = cfg.direct_distances ? direct_geico_loss(batch.xs, ys_dy, batch.xt, yt, cfg.alpha, cfg.beta)
                                              : geico_loss(batch.xs, ys_dy, batch.xt, yt, flows, cfg.alpha, cfg.beta);
    st.lt = g.loss.item();
    st.dx = g.dx.raw;
    st.dy = g.dy.raw;
    total = ls + cfg.lambda_t * g.loss;
  }
  st.total = total.item();
  if (!std::isfinite(st.total)) throw NumericError("segmenter adaptation: non-finite loss");
  const Gradients g = tape.backward(total);
  st.grad_norm = opt.step(model.params, optim::collect(g, leaves));
  return st;
}

MiouReport miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, std::size_t classes) {
  if (pred.size() != truth.size()) throw SegError("miou: size mismatch");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  std::size_t valid = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] >= classes) continue;
    ++valid;
    if (pred[i] == truth[i]) {
      ++tp[truth[i]];
    } else {
      ++fn[truth[i]];
      if (pred[i] < classes) ++fp[pred[i]];
    }
  }
  if (valid == 0) throw SegError("miou: no labelled pixels");
  MiouReport r;
  r.iou.assign(classes, std::numeric_limits<double>::quiet_NaN());
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    r.iou[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
    total += r.iou[c];
    ++present;
  }
  r.mean = total / static_cast<double>(present);
  return r;
}

std::string miou_csv(const MiouReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "class,iou\n";
  for (std::size_t c = 0; c < report.iou.size(); ++c) {
    os << (c < scene::kNumClasses ? scene::class_name(c) : std::to_string(c)) << ',';
    if (std::isnan(report.iou[c]))
      os << "nan\n";
    else
      os << report.iou[c] << '\n';
  }
  os << "mean," << report.mean << '\n';
  return os.str();
}

std::uint64_t param_hash(const SegmenterModel& model) { return flow::param_hash(model.params); }

void save_segmenter(const std::filesystem::path& path, const SegmenterModel& model) {
  const SegConfig& c = model.config;
  ckpt::Checkpoint ck;
  ck.manifest = {{"kind", "segmenter"}, {"version", 1},      {"classes", c.classes},
                 {"width1", c.width1},  {"width2", c.width2}, {"skip_width", c.skip_width},
                 {"seed", c.seed}};
  ck.tensors = model.params;
  ckpt::save(path, ck);
}

SegmenterModel load_segmenter(const std::filesystem::path& path) {
  ckpt::Checkpoint ck = ckpt::load(path);
  SegConfig c;
  try {
    if (ck.manifest.at("kind") != "segmenter")
      throw ckpt::CorruptError("checkpoint " + path.string() + " is not a segmenter");
    c.classes = ck.manifest.at("classes");
    c.width1 = ck.manifest.at("width1");
    c.width2 = ck.manifest.at("width2");
    c.skip_width = ck.manifest.at("skip_width");
    c.seed = ck.manifest.at("seed");
  } catch (const nlohmann::json::exception& e) {
    throw ckpt::CorruptError(std::string("segmenter checkpoint manifest: ") + e.what());
  }
  SegmenterModel m = make_segmenter(c);
  if (ck.tensors.size() != m.params.size()) throw ckpt::CorruptError("segmenter checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (ck.tensors[i].shape() != m.params[i].shape())
      throw ckpt::CorruptError("segmenter checkpoint: parameter shape mismatch");
  m.params = std::move(ck.tensors);
  return m;
}

}  // namespace geico::seg
