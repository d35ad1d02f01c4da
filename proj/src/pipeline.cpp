#include "geico/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "geico/checkpoint.hpp"
#include "geico/likelihood.hpp"

#ifndef GEICO_SOURCE_HASH
#define GEICO_SOURCE_HASH "unknown"
#endif

namespace geico::pipeline {

namespace {

using nlohmann::json;

enum Stream : std::uint64_t { kFlowXSource = 1, kFlowXTarget, kFlowYSource, kFlowYTarget, kSegSource, kSegTarget,
                              kDequant, kPlanSeed, kInit };

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) {
  return splitmix(splitmix(splitmix(seed) ^ stream) ^ step);
}

void restore(std::vector<Tensor>& params, optim::Sgd& opt, std::size_t& start, const TrainControl& ctl) {
  if (!ctl.resume) return;
  if (ctl.resume->params.size() != params.size()) throw ConfigError("resume: parameter count mismatch");
  params = ctl.resume->params;
  opt.state() = ctl.resume->opt_state;
  start = ctl.resume->step;
}

void maybe_checkpoint(const ExperimentConfig& c, const TrainControl& ctl, std::size_t done, std::size_t total,
                      const std::vector<Tensor>& params, const optim::Sgd& opt) {
  if (!ctl.on_checkpoint) return;
  if (done % c.checkpoint_every != 0 && done != total) return;
  ctl.on_checkpoint(TrainState{params, opt.state(), done});
}

template <typename F>
auto at_step(std::size_t step, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
  }
}

bool should_log(const ExperimentConfig& c, std::size_t step, std::size_t total) {
  return step % c.log_every == 0 || step + 1 == total;
}

}  // namespace

const char* mode_name(AdaptMode m) {
  switch (m) {
    case AdaptMode::SourceOnly: return "source_only";
    case AdaptMode::Direct: return "direct";
    case AdaptMode::Flow: return "flow";
  }
  return "?";
}

AdaptMode parse_mode(const std::string& s) {
  if (s == "source_only") return AdaptMode::SourceOnly;
  if (s == "direct") return AdaptMode::Direct;
  if (s == "flow") return AdaptMode::Flow;
  throw ConfigError("unknown adaptation mode '" + s + "'");
}

#define GEICO_CONFIG_FIELDS(X)                                                                                  \
  X(n_scenes) X(height) X(width) X(classes) X(flow_scales) X(flow_steps) X(flow_hidden) X(alpha) X(beta)      \
  X(lambda_r) X(lambda_t) X(eps_gw) X(true_source_labels) X(batch) X(flow_x_steps) X(flow_y_steps)            \
  X(seg_pretrain_steps) X(seg_adapt_steps) X(flow_lr) X(seg_lr) X(momentum) X(clip) X(seed) X(out_dir)        \
  X(log_every) X(checkpoint_every)

json to_json(const ExperimentConfig& c) {
  json j;
#define X(f) j[#f] = c.f;
  GEICO_CONFIG_FIELDS(X)
#undef X
  j["mode"] = mode_name(c.mode);
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    try {
      if (key == "mode") {
        c.mode = parse_mode(it.value().get<std::string>());
        continue;
      }
#define X(f)                                    \
  if (key == #f) {                              \
    c.f = it.value().get<decltype(c.f)>();      \
    continue;                                   \
  }
      GEICO_CONFIG_FIELDS(X)
#undef X
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
    throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid config: ") + what);
  };
  need(c.n_scenes > 0, "n_scenes must be positive");
  need(c.height % 16 == 0 && c.width % 16 == 0 && c.height > 0 && c.width > 0,
       "height and width must be positive multiples of 16");
  need(c.classes == scene::kNumClasses, "classes must match the scene palette (6)");
  need(c.flow_scales > 0 && c.flow_steps > 0 && c.flow_hidden > 0, "flow sizes must be positive");
  need(c.alpha > 0 && c.beta > 0, "alpha and beta must be positive");
  need(c.lambda_r >= 0 && c.lambda_t >= 0, "loss weights must be non-negative");
  need(c.eps_gw > 0, "eps_gw must be positive");
  need(c.batch >= 2, "batch must be at least 2");
  need(c.flow_lr > 0 && c.seg_lr > 0, "learning rates must be positive");
  need(c.momentum >= 0 && c.momentum < 1, "momentum must lie in [0, 1)");
  need(c.log_every > 0 && c.checkpoint_every > 0, "log/checkpoint intervals must be positive");
  need(!c.out_dir.empty(), "out_dir must be set");
}

// Where the run lives is not part of its identity.
std::uint64_t config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("out_dir");
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

ExperimentConfig full_scale_preset() {
  ExperimentConfig c;
  c.batch = 8;
  c.flow_lr = 2.5e-4;
  c.seg_lr = 2.5e-4;
  c.flow_scales = 4;
  c.flow_steps = 32;
  return c;
}

scene::Dataset make_dataset(const ExperimentConfig& c) {
  return scene::generate_dataset(c.n_scenes, c.height, c.width, c.seed);
}

std::vector<std::size_t> batch_indices(std::size_t pool, std::size_t k, std::uint64_t seed, std::uint64_t stage,
                                       std::size_t step) {
  if (k > pool) throw ConfigError("batch larger than the split (" + std::to_string(k) + " > " +
                                  std::to_string(pool) + ")");
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix(seed, stage, step));
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

namespace {

Tensor stack(const std::vector<scene::SceneSample>& samples, const std::vector<std::size_t>& idx, bool labels) {
  if (idx.empty()) throw ConfigError("empty batch");
  const Tensor& first = labels ? samples[idx[0]].label : samples[idx[0]].image;
  const Shape one = first.shape();
  std::vector<double> v;
  v.reserve(idx.size() * first.size());
  for (std::size_t i : idx) {
    const Tensor& t = labels ? samples.at(i).label : samples.at(i).image;
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensor({idx.size(), one[0], one[1], one[2]}, std::move(v));
}

}  // namespace

Tensor stack_images(const std::vector<scene::SceneSample>& samples, const std::vector<std::size_t>& idx) {
  return stack(samples, idx, false);
}

Tensor stack_labels(const std::vector<scene::SceneSample>& samples, const std::vector<std::size_t>& idx) {
  return stack(samples, idx, true);
}

std::string StageLog::csv() const {
  std::ostringstream os;
  os.precision(10);
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n';
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << '\n';
  }
  return os.str();
}

flow::FlowConfig flow_x_config(const ExperimentConfig& c) {
  return {3, c.flow_scales, c.flow_steps, c.flow_hidden, true, mix(c.seed, kInit, 1)};
}

flow::FlowConfig flow_y_config(const ExperimentConfig& c) {
  return {c.classes, c.flow_scales, c.flow_steps, c.flow_hidden, true, mix(c.seed, kInit, 2)};
}

seg::SegConfig seg_config(const ExperimentConfig& c) { return {.classes = c.classes, .seed = mix(c.seed, kInit, 3)}; }

flow::FlowModel train_flow_x(const ExperimentConfig& c, const scene::Dataset& ds, StageLog* log,
                             const TrainControl& ctl) {
  validate(c);
  flow::FlowModel model = flow::make_flow(flow_x_config(c));
  optim::Sgd opt({c.flow_lr, c.momentum, c.clip});
  const std::size_t half = c.batch / 2;
  auto batch = [&](std::size_t step, std::size_t ns, std::size_t nt) {
    const Tensor xs = stack_images(ds.train_s, batch_indices(ds.train_s.size(), ns, c.seed, kFlowXSource, step));
    const Tensor xt = stack_images(ds.train_t, batch_indices(ds.train_t.size(), nt, c.seed, kFlowXTarget, step));
    std::vector<flow::Domain> d(ns, flow::Domain::Source);
    d.insert(d.end(), nt, flow::Domain::Target);
    return std::pair{concat({likelihood::images_to_flow(xs, seg::kFlowPool), likelihood::images_to_flow(xt, seg::kFlowPool)}, 0), d};
  };
  std::size_t start = 0;
  restore(model.params, opt, start, ctl);
  if (ctl.resume) {
    model.initialized = true;
  } else {
    const std::size_t n = std::min<std::size_t>({16, ds.train_s.size(), ds.train_t.size()});
    auto [x, d] = batch(~std::size_t{0}, n, n);
    flow::init_data_dependent(model, x, d);
  }
  const auto prior = likelihood::domain_prior(ds.train_s.size(), ds.train_t.size());
  if (log) log->columns = {"step", "nll_s", "nll_t", "logdet", "grad_norm"};
  for (std::size_t step = start; step < c.flow_x_steps; ++step) {
    auto [x, d] = batch(step, half, c.batch - half);
    const auto st = at_step(step, [&] { return likelihood::train_step(model, opt, x, d, prior); });
    if (log && should_log(c, step, c.flow_x_steps))
      log->rows.push_back({double(step), st.nll_s, st.nll_t, st.logdet_mean, st.grad_norm});
    maybe_checkpoint(c, ctl, step + 1, c.flow_x_steps, model.params, opt);
  }
  return model;
}

flow::FlowModel train_flow_y(const ExperimentConfig& c, const scene::Dataset& ds, StageLog* log,
                             const TrainControl& ctl) {
  validate(c);
  flow::FlowModel model = flow::make_flow(flow_y_config(c));
  optim::Sgd opt({c.flow_lr, c.momentum, c.clip});
  auto source_maps = [&](const std::vector<std::size_t>& idx) {
    return avg_pool2d(stack_labels(ds.train_s, idx), seg::kFlowPool);
  };
  std::size_t start = 0;
  restore(model.params, opt, start, ctl);
  if (ctl.resume) {
    model.initialized = true;
  } else {
    const std::size_t n = std::min<std::size_t>(32, ds.train_s.size());
    std::mt19937_64 rng(mix(c.seed, kDequant, ~std::uint64_t{0}));
    const Tensor y = likelihood::dequantize_labels(
        source_maps(batch_indices(ds.train_s.size(), n, c.seed, kFlowYSource, ~std::size_t{0})), rng);
    flow::init_data_dependent(model, y, std::vector<flow::Domain>(n, flow::Domain::Source));
  }
  const auto prior = likelihood::domain_prior(ds.train_s.size(), ds.train_t.size());
  const gw::RegSettings reg{c.alpha, c.eps_gw, gw::kMaxIters, 0};
  if (log) log->columns = {"step", "nll", "reg", "total", "grad_norm", "plan_residual"};
  for (std::size_t step = start; step < c.flow_y_steps; ++step) {
    const auto idx_s = batch_indices(ds.train_s.size(), c.batch, c.seed, kFlowYSource, step);
    const auto idx_t = batch_indices(ds.train_t.size(), c.batch, c.seed, kFlowYTarget, step);
    std::mt19937_64 rng(mix(c.seed, kDequant, step));
    const Tensor maps = source_maps(idx_s);
    const gw::GyBatch b{likelihood::dequantize_labels(maps, rng), maps, stack_images(ds.train_s, idx_s),
                        stack_images(ds.train_t, idx_t)};
    const auto st =
        at_step(step, [&] { return gw::train_gy_step(model, opt, b, prior, c.lambda_r, reg, mix(c.seed, kPlanSeed, step)); });
    if (ctl.on_plan && c.lambda_r != 0.0) ctl.on_plan(step, st.plan);
    if (log && should_log(c, step, c.flow_y_steps))
      log->rows.push_back({double(step), st.nll, st.reg, st.total, st.grad_norm, st.plan.residual});
    maybe_checkpoint(c, ctl, step + 1, c.flow_y_steps, model.params, opt);
  }
  return model;
}

seg::SegmenterModel train_segmenter(const ExperimentConfig& c, const scene::Dataset& ds, const seg::Flows& flows,
                                    StageLog* log, const TrainControl& ctl) {
  validate(c);
  if (c.mode == AdaptMode::Flow && c.seg_adapt_steps > 0 && (!flows.gx || !flows.gy))
    throw ConfigError("segmenter adaptation needs both flows");
  seg::SegmenterModel model = seg::make_segmenter(seg_config(c));
  optim::Sgd opt({c.seg_lr, c.momentum, c.clip});
  std::size_t start = 0;
  restore(model.params, opt, start, ctl);
  const std::size_t total = c.seg_pretrain_steps + c.seg_adapt_steps;
  if (log) log->columns = {"step", "ls", "lt", "total", "dx", "dy", "grad_norm"};
  for (std::size_t step = start; step < total; ++step) {
    const bool adapting = step >= c.seg_pretrain_steps && c.mode != AdaptMode::SourceOnly;
    const auto idx_s = batch_indices(ds.train_s.size(), c.batch, c.seed, kSegSource, step);
    seg::AdaptBatch b{stack_images(ds.train_s, idx_s), stack_labels(ds.train_s, idx_s), Tensor()};
    seg::AdaptConfig ac{c.alpha, c.beta, adapting ? c.lambda_t : 0.0, c.true_source_labels,
                        c.mode == AdaptMode::Direct};
    if (adapting && c.lambda_t != 0.0)
      b.xt = stack_images(ds.train_t, batch_indices(ds.train_t.size(), c.batch, c.seed, kSegTarget, step));
    const auto st = at_step(step, [&] { return seg::adapt_step(model, opt, flows, b, ac); });
    if (log && should_log(c, step, total))
      log->rows.push_back({double(step), st.ls, st.lt, st.total, st.dx, st.dy, st.grad_norm});
    maybe_checkpoint(c, ctl, step + 1, total, model.params, opt);
  }
  return model;
}

seg::MiouReport evaluate(const seg::SegmenterModel& model, const std::vector<scene::SceneSample>& samples) {
  if (samples.empty()) throw ConfigError("evaluate: empty split");
  std::vector<std::uint8_t> pred, truth;
  for (std::size_t begin = 0; begin < samples.size(); begin += 16) {
    std::vector<std::size_t> idx(std::min<std::size_t>(16, samples.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const auto p = seg::predict_classes(seg::segment(model, stack_images(samples, idx)));
    pred.insert(pred.end(), p.begin(), p.end());
    for (std::size_t i : idx) truth.insert(truth.end(), samples[i].classes.begin(), samples[i].classes.end());
  }
  return seg::miou(pred, truth, model.config.classes);
}

AdaptOutcome adapt_and_evaluate(const ExperimentConfig& c, const scene::Dataset& ds, const seg::Flows& flows,
                                const TrainState& pretrained) {
  TrainControl ctl;
  ctl.resume = pretrained;
  AdaptOutcome out{train_segmenter(c, ds, flows, nullptr, ctl), {}};
  out.report = evaluate(out.model, ds.test_t);
  return out;
}

const char* code_hash() { return GEICO_SOURCE_HASH; }

json to_json(const RunManifest& m) {
  return {{"config", m.config},
          {"code_hash", m.code_hash},
          {"config_hash", m.config_hash},
          {"stages", m.stages},
          {"metrics", m.metrics}};
}

RunManifest manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.config = j.at("config");
    m.code_hash = j.at("code_hash").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.stages = j.at("stages");
    m.metrics = j.at("metrics");
    return m;
  } catch (const json::exception& e) {
    throw ckpt::CorruptError(std::string("run manifest: ") + e.what());
  }
}

void save_manifest(const std::filesystem::path& path, const RunManifest& m) {
  ckpt::write_text_atomic(path, to_json(m).dump(2) + "\n");
}

RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ckpt::CorruptError("cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ckpt::CorruptError("run manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

}  // namespace geico::pipeline
