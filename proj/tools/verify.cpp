#include "verify.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "geico/checkpoint.hpp"
#include "geico/gw.hpp"
#include "geico/likelihood.hpp"
#include "geico/scene.hpp"
#include "geico/seg.hpp"
#include "oracles.hpp"
#include "ot_oracle.hpp"
#include "test_util.hpp"

namespace geico::verify {

namespace {

using flow::Domain;
using testing::random_tensor;

class Recorder {
 public:
  Recorder(std::string suite, std::vector<Check>& out) : suite_(std::move(suite)), out_(out) {}

  void less(const std::string& name, double value, double threshold) { add(name, value, threshold, "<", value < threshold); }
  void at_most(const std::string& name, double value, double threshold) {
    add(name, value, threshold, "<=", value <= threshold);
  }
  void at_least(const std::string& name, double value, double threshold) {
    add(name, value, threshold, ">=", value >= threshold);
  }
  // |value - expected| <= tol, reported as the deviation.
  void near(const std::string& name, double value, double expected, double tol) {
    const double dev = std::abs(value - expected);
    add(name, std::isnan(dev) ? INFINITY : dev, tol, "<=", dev <= tol);
  }

 private:
  void add(const std::string& name, double value, double threshold, const char* rel, bool pass) {
    out_.push_back({suite_, name, value, threshold, rel, pass});
  }
  std::string suite_;
  std::vector<Check>& out_;
};

double w2(const Options& opt, const geo::LatentGaussian& a, const geo::LatentGaussian& b) { return opt.w2(a, b).item(); }

flow::FlowModel random_flow(flow::FlowConfig cfg, std::mt19937_64& rng) {
  flow::FlowModel m = flow::make_flow(cfg);
  testing::randomize_flow(m, rng);
  return m;
}

std::vector<double> flatten(const flow::LatentCode& z) {
  std::vector<double> out;
  for (const auto& p : z.pieces) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

// ---------------------------------------------------------------------------

void flows_suite(const Options& opt, Recorder& r) {
  std::mt19937_64 rng(opt.seed + 101);

  double worst = 0.0;
  for (int model = 0; model < 5; ++model) {
    const flow::FlowModel m = random_flow({3, 2, 2, 6, true, opt.seed + static_cast<std::uint64_t>(model)}, rng);
    for (int i = 0; i < 100; ++i) {
      const Tensor x = random_tensor({1, 3, 8, 8}, rng);
      const flow::LatentCode z = flow::forward(m, x, {i % 2 ? Domain::Target : Domain::Source});
      worst = std::max(worst, testing::max_abs_diff(flow::inverse(m, z).data(), x.data()));
    }
  }
  r.less("flow_round_trip", worst, 1e-8);

  {
    const flow::FlowModel m = random_flow({4, 2, 2, 4, true, opt.seed + 7}, rng);
    const std::vector<double> x0 = random_tensor({1, 4, 4, 4}, rng, -1, 1).to_vector();
    auto f = [&](const std::vector<double>& v) { return flatten(flow::forward(m, Tensor({1, 4, 4, 4}, v), {Domain::Target})); };
    const double numeric = linalg::log_abs_det(testing::numeric_jacobian(f, x0));
    const double analytic = flow::forward(m, Tensor({1, 4, 4, 4}, x0), {Domain::Target}).logdet.item();
    r.less("flow_logdet_vs_jacobian_64d", std::abs(analytic - numeric) / std::abs(numeric), 1e-4);
  }

  {
    flow::FlowModel m = random_flow({2, 1, 3, 4, false, opt.seed + 8}, rng);
    const Tensor x = random_tensor({3, 2, 1, 1}, rng, -1, 1);
    const std::vector<Domain> d{Domain::Source, Domain::Target, Domain::Source};
    Tensor h = x;
    std::vector<double> total(3, 0.0);
    for (const flow::StepLayout& s : m.steps[0]) {
      const auto a = flow::actnorm(h, m.params[s.an_scale], m.params[s.an_bias]);
      const auto b = flow::invconv(a.y, m.params[s.weight]);
      const auto c = flow::coupling(b.y, d, {m.params[s.w1], m.params[s.b1], m.params[s.w2], m.params[s.b2]});
      for (std::size_t i = 0; i < 3; ++i) total[i] += a.logdet.item() + b.logdet.item() + c.logdet.at(i);
      h = c.y;
    }
    r.less("flow_logdet_additivity", testing::max_abs_diff(flow::forward(m, x, d).logdet.data(), total), 1e-12);
  }

  {
    flow::FlowModel a = flow::make_flow({3, 2, 2, 6, true, opt.seed + 9}), b = a;
    const Tensor batch = random_tensor({16, 3, 8, 8}, rng, 0, 1);
    const std::vector<Domain> d(16, Domain::Source);
    flow::init_data_dependent(a, batch, d);
    flow::FlowModel twice = a;
    flow::init_data_dependent(twice, batch, d);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.params.size(); ++i)
      diff = std::max(diff, testing::max_abs_diff(a.params[i].data(), twice.params[i].data()));
    r.less("actnorm_init_idempotent", diff, 1e-10);
  }

  {
    const flow::FlowModel m = random_flow({2, 1, 1, 3, true, opt.seed + 10}, rng);
    const Tensor x = random_tensor({6, 2, 2, 2}, rng);
    const std::vector<Domain> d(6, Domain::Source);
    const auto a = likelihood::domain_prior(100, 100), b = likelihood::domain_prior(9400, 600);
    const double shift = likelihood::nll(m, x, d, b).loss.item() - likelihood::nll(m, x, d, a).loss.item();
    r.near("nll_domain_prior_shift", shift, std::log(a.p_s / b.p_s), 1e-12);
  }

  {
    flow::FlowModel m = random_flow({2, 2, 1, 3, true, opt.seed + 11}, rng);
    const Tensor x = random_tensor({3, 2, 4, 4}, rng, -1, 1);
    const std::vector<Domain> d{Domain::Source, Domain::Target, Domain::Target};
    const auto prior = likelihood::domain_prior(2, 3);
    r.less("nll_gradient_fd",
           testing::grad_check(m.params, [&](const std::vector<Tensor>& p) { return likelihood::nll(m, p, x, d, prior).loss; }),
           1e-3);
  }

  {
    const flow::FlowModel m = random_flow({3, 2, 2, 6, true, opt.seed + 12}, rng);
    const auto path = std::filesystem::temp_directory_path() / ("geico_verify_" + std::to_string(opt.seed) + ".ckpt");
    flow::save_flow(path, m);
    const flow::FlowModel back = flow::load_flow(path);
    std::filesystem::remove(path);
    r.near("flow_checkpoint_bit_exact", flow::param_hash(back.params) == flow::param_hash(m.params) ? 0.0 : 1.0, 0.0, 0.0);
  }
}

// ---------------------------------------------------------------------------

void distances_suite(const Options& opt, Recorder& r) {
  std::mt19937_64 rng(opt.seed + 202);

  {
    linalg::Matrix a(2, 2, {1, 0, 0, 4}), b(2, 2, {4, 0, 0, 1});
    r.near("w2_diagonal_closed_form", w2(opt, geo::make_gaussian({0, 0}, a), geo::make_gaussian({1, 0}, b)), 3.0, 1e-8);
  }

  double asym = 0.0, self = 0.0, negative = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto a = testing::random_gaussian(4, rng), b = testing::random_gaussian(4, rng);
    const double ab = w2(opt, a.g, b.g);
    asym = std::max(asym, std::abs(ab - w2(opt, b.g, a.g)));
    self = std::max(self, w2(opt, a.g, a.g));
    negative = std::max(negative, -ab);
  }
  r.less("w2_symmetry", asym, 1e-8);
  r.less("w2_self_distance_zero", self, 1e-8);
  r.at_most("w2_non_negative", negative, 0.0);

  {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const auto a = testing::random_gaussian(4, rng), b = testing::random_gaussian(4, rng);
      auto scaled = [](const linalg::Matrix& c, double s) {
        linalg::Matrix out = c;
        for (double& v : out.values) v *= s * s;
        return out;
      };
      const std::vector<double> zero(4, 0.0);
      const double base = w2(opt, geo::make_gaussian(zero, a.cov), geo::make_gaussian(zero, b.cov));
      const double doubled = w2(opt, geo::make_gaussian(zero, scaled(a.cov, 2)), geo::make_gaussian(zero, scaled(b.cov, 2)));
      worst = std::max(worst, std::abs(doubled - 4.0 * base) / (4.0 * base));
    }
    r.less("w2_quadratic_homogeneity", worst, 1e-6);
  }

  {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const auto a = testing::random_gaussian(3, rng), b = testing::random_gaussian(3, rng);
      const double est = testing::sinkhorn_transport_cost(testing::gaussian_cloud(a.mean, a.factor, 1000, rng),
                                                          testing::gaussian_cloud(b.mean, b.factor, 1000, rng), 3);
      const double exact = w2(opt, a.g, b.g);
      worst = std::max(worst, std::abs(est - exact) / exact);
    }
    r.less("w2_sampled_ot_agreement", worst, 0.05);
  }

  {
    int violations = 0;
    for (int t = 0; t < 1000; ++t) {
      const auto a = testing::random_gaussian(3, rng, 3.0), b = testing::random_gaussian(3, rng, 3.0),
                 c = testing::random_gaussian(3, rng, 3.0);
      auto d = [&](const testing::RandomGaussian& x, const testing::RandomGaussian& y) {
        return std::min(w2(opt, x.g, y.g), geo::kBeta);
      };
      violations += !(d(a, c) <= d(a, b) + d(b, c) + geo::kBeta);
    }
    r.at_most("clamped_triangle_with_slack", violations, 0);
  }

  {
    const Tensor va = random_tensor({12, 4}, rng), vb = random_tensor({12, 4}, rng, -1, 3);
    r.less("w2_gradient_fd",
           testing::grad_check({va, vb},
                               [&](const std::vector<Tensor>& p) { return opt.w2(geo::fit_gaussian(p[0]), geo::fit_gaussian(p[1])); },
                               1e-6),
           1e-5);
  }

  {
    const auto g = testing::random_gaussian(5, rng);
    const linalg::Matrix s = geo::sqrt_psd(g.cov);
    r.less("sqrt_psd_squares_back", linalg::frobenius_norm(linalg::add(linalg::multiply(s, s), g.cov, -1.0)), 1e-9);
  }

  {
    Tape tape;
    const Tensor raw = tape.leaf(Tensor::scalar(150.0));
    const auto c = geo::clamp_distance(raw);
    const Gradients grads = tape.backward(c.clamped);
    r.near("clamp_zero_gradient_above_beta", std::abs(grads.raw(raw)[0]), 0.0, 0.0);
  }

  {
    const auto dx = geo::clamp_distance(Tensor::scalar(250.0)), dy = geo::clamp_distance(Tensor::scalar(0.0));
    r.near("geico_clamped_closed_form", seg::geico_from_distances(dx.clamped, dy.clamped, 2.0).item(), 10000.0, 1e-12);
  }

  {
    std::vector<std::uint8_t> cls(2 * 8 * 8);
    for (auto& k : cls) k = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 5)(rng));
    const Tensor onehot = scene::one_hot(std::vector<std::uint8_t>(cls.begin(), cls.begin() + 64), 8, 8);
    const Tensor y = reshape(onehot, {1, 6, 8, 8});
    r.near("cross_entropy_uniform_log6", seg::cross_entropy(Tensor::full({1, 6, 8, 8}, 1.0 / 6.0), y).item(), std::log(6.0),
           1e-12);
    r.at_most("cross_entropy_perfect", seg::cross_entropy(y, y).item(), 1e-5);
    const Tensor scores = random_tensor({1, 6, 8, 8}, rng);
    r.less("cross_entropy_gradient_fd",
           testing::grad_check({scores}, [&](const std::vector<Tensor>& p) { return seg::cross_entropy_logits(p[0], y); }),
           1e-4);
  }

  {
    flow::FlowModel gx = random_flow({3, 1, 1, 4, true, opt.seed + 21}, rng), gy = random_flow({2, 1, 1, 4, true, opt.seed + 22}, rng);
    const seg::SegmenterModel m = seg::make_segmenter({.classes = 2, .width1 = 4, .width2 = 4, .skip_width = 2, .seed = opt.seed});
    const Tensor xs = random_tensor({16, 3, 16, 16}, rng, 0, 1), xt = random_tensor({16, 3, 16, 16}, rng, 0, 1);
    auto loss = [&](const std::vector<Tensor>& p) {
      const Tensor ys = softmax_channels(seg::logits(m, p, xs)), yt = softmax_channels(seg::logits(m, p, xt));
      return seg::geico_loss(xs, ys, xt, yt, {&gx, &gy}, 0.7, geo::kBeta, opt.w2).loss;
    };
    r.less("geico_gradient_fd", testing::grad_check(m.params, loss, 1e-6), 1e-3);
  }

  {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const std::size_t classes = 2 + static_cast<std::size_t>(t % 5);
      std::vector<std::uint8_t> pred(500), truth(500);
      for (std::size_t i = 0; i < 500; ++i) {
        pred[i] = static_cast<std::uint8_t>(std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng));
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, classes)(rng);
        truth[i] = k == classes ? 255 : static_cast<std::uint8_t>(k);
      }
      const auto oracle = testing::confusion_iou(pred, truth, classes);
      const auto rep = seg::miou(pred, truth, classes);
      for (std::size_t c = 0; c < classes; ++c) worst = std::max(worst, std::abs(rep.iou[c] - oracle[c]));
    }
    r.less("miou_confusion_oracle", worst, 1e-12);
    r.near("miou_half_half", seg::miou({0, 0, 0, 0}, {0, 0, 1, 1}, 2).mean, 0.25, 0.0);
  }

  {
    const Tensor z = random_tensor({2, 6, 8, 8}, rng, -4, 4);
    const auto base = seg::predict_classes(z);
    int changed = 0;
    for (double k : {0.01, 3.0, 100.0}) changed += seg::predict_classes(softmax_channels(scale(z, k))) != base;
    r.at_most("argmax_scale_invariance", changed, 0);
  }
}

// ---------------------------------------------------------------------------

void gw_suite(const Options& opt, Recorder& r) {
  std::mt19937_64 rng(opt.seed + 303);
  for (std::size_t n = 2; n <= 5; ++n) {
    double worst_gap = 0.0, worst_res = 0.0;
    for (int t = 0; t < 20; ++t) {
      const Tensor c3 = random_tensor({3, n, n}, rng, 0.0, 1.0);
      const linalg::Matrix c(n, n, mean(c3, 0).to_vector());
      const gw::CouplingMatrix plan = gw::solve_plan(c, 1e-3, 20000);
      const double exact = testing::brute_force(c).best / static_cast<double>(n);
      worst_gap = std::max(worst_gap, (gw::plan_objective(c, plan.sigma) - exact) / exact);
      worst_res = std::max(worst_res, testing::marginal_residual(plan.sigma));
    }
    r.less("gw_brute_force_gap_n" + std::to_string(n), worst_gap, 0.05);
    r.less("gw_marginal_residual_n" + std::to_string(n), worst_res, 1e-6);
  }

  {
    const Tensor a = random_tensor({3, 5}, rng), b = random_tensor({4, 5}, rng);
    const Tensor d = gw::pairwise_l2(a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) s += std::pow(a.at(i * 5 + k) - b.at(j * 5 + k), 2);
        worst = std::max(worst, std::abs(d.at(i * 4 + j) - s / 5.0));
      }
    r.less("gw_pairwise_l2_oracle", worst, 1e-12);
  }

  {
    const linalg::Matrix c(4, 4, random_tensor({16}, rng, 0, 1).to_vector());
    const auto p1 = gw::solve_plan(c), p2 = gw::solve_plan(c);
    r.near("gw_solver_deterministic", p1.sigma.values == p2.sigma.values ? 0.0 : 1.0, 0.0, 0.0);
  }

  {
    flow::FlowModel gy = flow::make_flow({2, 1, 2, 4, true, opt.seed + 31});
    testing::randomize_flow(gy, rng);
    const Tensor xs = random_tensor({3, 1, 4, 4}, rng, 0, 1), xt = random_tensor({3, 1, 4, 4}, rng, 0, 1);
    const Tensor ys = softmax_channels(random_tensor({3, 2, 4, 4}, rng, -3, 3));
    const gw::RegSettings settings{0.5, gw::kEpsilon, gw::kMaxIters, 0};
    const gw::RegTerms base = gw::topology_reg(gy, gy.params, xs, ys, xt, settings, 21);
    auto loss = [&](const std::vector<Tensor>& p) {
      const Tensor yt = gw::generate_segmentations(gy, p, 3, 4, 4, 21);
      return gw::weighted_cost(gw::make_cost(xs, ys, xt, yt, settings.alpha), base.plan);
    };
    r.less("gw_regularizer_gradient_fd", testing::grad_check(gy.params, loss, 1e-6), 1e-3);
  }
}

// ---------------------------------------------------------------------------

void bounds_suite(const Options& opt, Recorder& r) {
  std::mt19937_64 rng(opt.seed + 404);
  const scene::Dataset ds = scene::generate_dataset(48, 32, 32, opt.seed);

  {
    double worst = 0.0;
    std::size_t pairs = 0;
    for (const auto& p : ds.hidden_pairs) {
      const scene::PermutationMap perm = scene::build_permutation(p.transform, ds.height, ds.width);
      worst = std::max(worst, testing::max_abs_diff(scene::warp(p.source.image, perm).data(), p.target.image.data()));
      worst = std::max(worst, testing::max_abs_diff(scene::warp(p.source.label, perm).data(), p.target.label.data()));
      worst += scene::warp_classes(p.source.classes, perm, scene::kVoid) != p.target.classes;
      ++pairs;
    }
    r.near("warp_pair_consistency", worst, 0.0, 0.0);
    r.at_least("hidden_pairs", static_cast<double>(pairs), 2);
  }

  {
    double worst = 0.0;
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (int trial = 0; trial < 10; ++trial) {
      linalg::Matrix m(3, 3, {1 + u(rng), u(rng), 4 * u(rng), u(rng), 1 + u(rng), 4 * u(rng), 0.02 * u(rng), 0.02 * u(rng), 1});
      const scene::PermutationMap p = scene::build_permutation(scene::make_transform(m), 8, 8);
      const auto dense = testing::dense_matrix(p);
      const Tensor f = random_tensor({3, 8, 8}, rng);
      const Tensor w = scene::warp(f, p);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t row = 0; row < 64; ++row) {
          double acc = 0.0;
          for (std::size_t c = 0; c < 64; ++c) acc += dense[row * 64 + c] * f.at(ch * 64 + c);
          worst = std::max(worst, std::abs(w.at(ch * 64 + row) - acc));
        }
    }
    r.at_most("permutation_equals_dense_product", worst, 1e-12);
  }

  {
    // Distance-consistency upper bound on hidden pairs with freshly initialised flows.
    auto images = [](const std::vector<const scene::SceneSample*>& s) {
      std::vector<Tensor> parts;
      for (auto* x : s) parts.push_back(reshape(x->image, {1, 3, x->image.dim(1), x->image.dim(2)}));
      return seg::image_flow_input(concat(parts, 0));
    };
    auto labels = [](const std::vector<const scene::SceneSample*>& s) {
      std::vector<Tensor> parts;
      for (auto* x : s) parts.push_back(reshape(x->label, {1, 6, x->label.dim(1), x->label.dim(2)}));
      return seg::label_flow_input(concat(parts, 0));
    };
    std::vector<const scene::SceneSample*> all_s, all_t;
    for (const auto& s : ds.train_s) all_s.push_back(&s);
    for (const auto& s : ds.train_t) all_t.push_back(&s);
    flow::FlowModel gx = flow::make_flow({3, 2, 2, 8, true, opt.seed + 41}), gy = flow::make_flow({6, 2, 2, 8, true, opt.seed + 42});
    std::vector<Domain> dom(all_s.size(), Domain::Source);
    dom.insert(dom.end(), all_t.size(), Domain::Target);
    std::vector<const scene::SceneSample*> both = all_s;
    both.insert(both.end(), all_t.begin(), all_t.end());
    flow::init_data_dependent(gx, images(both), dom);
    flow::init_data_dependent(gy, labels(both), dom);

    const double alpha = 2.0, beta = geo::kBeta;
    const std::size_t k = 4;
    int combos = 0, held = 0;
    for (int trial = 0; trial < 120; ++trial) {
      std::vector<const scene::SceneSample*> src, paired_t, tgt;
      for (std::size_t i = 0; i < k; ++i) {
        const auto& p = ds.hidden_pairs[std::uniform_int_distribution<std::size_t>(0, ds.hidden_pairs.size() - 1)(rng)];
        src.push_back(&p.source);
        paired_t.push_back(&p.target);
        tgt.push_back(all_t[std::uniform_int_distribution<std::size_t>(0, all_t.size() - 1)(rng)]);
      }
      const std::vector<Domain> ds_(k, Domain::Source), dt(k, Domain::Target);
      auto d = [&](const flow::FlowModel& g, const Tensor& a, const Tensor& b) {
        return geo::dist(g, g.params, a, ds_, b, dt, beta, opt.w2).clamped.item();
      };
      const double lhs = d(gx, images(src), images(paired_t)) - alpha * d(gy, labels(src), labels(paired_t));
      const double rhs = d(gx, images(src), images(tgt)) - alpha * d(gy, labels(src), labels(tgt)) + (1 + alpha) * beta;
      ++combos;
      held += lhs <= rhs;
    }
    r.at_least("upper_bound_on_hidden_pairs", static_cast<double>(held) / combos, 1.0);
    r.at_least("upper_bound_combinations", combos, 100);
  }
}

}  // namespace

const std::vector<std::string>& suites() {
  static const std::vector<std::string> s{"flows", "distances", "gw", "bounds"};
  return s;
}

std::vector<Check> run(const std::string& suite, const Options& opt) {
  std::vector<Check> out;
  const std::map<std::string, std::function<void(const Options&, Recorder&)>> table{
      {"flows", flows_suite}, {"distances", distances_suite}, {"gw", gw_suite}, {"bounds", bounds_suite}};
  if (suite != "all" && !table.count(suite)) throw std::invalid_argument("unknown verify suite '" + suite + "'");
  for (const auto& name : suites()) {
    if (suite != "all" && suite != name) continue;
    Recorder r(name, out);
    table.at(name)(opt, r);
  }
  return out;
}

nlohmann::json report(const std::string& suite, const std::vector<Check>& checks) {
  nlohmann::json j;
  j["suite"] = suite;
  j["checks"] = nlohmann::json::array();
  std::size_t failed = 0;
  for (const Check& c : checks) {
    j["checks"].push_back({{"suite", c.suite},
                           {"name", c.name},
                           {"value", std::isfinite(c.value) ? nlohmann::json(c.value) : nlohmann::json(nullptr)},
                           {"threshold", c.threshold},
                           {"relation", c.relation},
                           {"pass", c.pass}});
    failed += !c.pass;
  }
  j["total"] = checks.size();
  j["failed"] = failed;
  j["pass"] = failed == 0;
  return j;
}

Tensor w2_trace_sign_flip(const geo::LatentGaussian& a, const geo::LatentGaussian& b) {
  const std::size_t d = a.dim();
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  const Tensor tr = sum((a.cov + b.cov) * Tensor({d, d}, eye));
  return sum(square(a.mean - b.mean)) - (tr - 2.0 * geo::bures_cross_trace(a.cov, b.cov));
}

}  // namespace geico::verify
