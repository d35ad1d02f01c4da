#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "geico/checkpoint.hpp"
#include "geico/flow.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace geico;
using namespace geico::flow;
using geico::testing::max_abs_diff;
using geico::testing::numeric_jacobian;
using geico::testing::random_tensor;

namespace {

const std::vector<Domain> kS1{Domain::Source};

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) { return random_tensor(std::move(shape), rng, lo, hi); }

void randomize(FlowModel& m, std::mt19937_64& rng) { testing::randomize_flow(m, rng); }

std::vector<double> flatten(const LatentCode& z) {
  std::vector<double> out;
  for (const auto& p : z.pieces) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

double jacobian_logdet(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                       const std::vector<double>& x) {
  return linalg::log_abs_det(numeric_jacobian(f, x));
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

}  // namespace

TEST_CASE("actnorm examples") {
  std::mt19937_64 rng(1);
  const Tensor x = uniform({1, 2, 2, 2}, rng, -1, 1);
  const LayerOut id = actnorm(x, Tensor::full({1, 2, 1, 1}, 1.0), Tensor::zeros({1, 2, 1, 1}));
  CHECK(id.y.to_vector() == x.to_vector());
  CHECK(id.logdet.item() == 0.0);

  const LayerOut two = actnorm(uniform({1, 1, 2, 2}, rng, -1, 1), Tensor::full({1, 1, 1, 1}, 2.0),
                               Tensor::zeros({1, 1, 1, 1}));
  CHECK(two.logdet.item() == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(std::abs(two.logdet.item() - 2.7726) < 1e-4);

  CHECK_THROWS_AS(actnorm(x, Tensor::zeros({1, 2, 1, 1}), Tensor::zeros({1, 2, 1, 1})), FlowError);
}

TEST_CASE("actnorm logdet matches Jacobian") {
  std::mt19937_64 rng(2);
  const Tensor s({1, 2, 1, 1}, {1.7, -0.4});
  const Tensor b = uniform({1, 2, 1, 1}, rng, -1, 1);
  const Tensor x = uniform({1, 2, 2, 2}, rng, -1, 1);
  auto f = [&](const std::vector<double>& v) { return actnorm(Tensor({1, 2, 2, 2}, v), s, b).y.to_vector(); };
  CHECK(rel(actnorm(x, s, b).logdet.item(), jacobian_logdet(f, x.to_vector())) < 1e-8);
  const LayerOut fwd = actnorm(x, s, b);
  const LayerOut back = actnorm(fwd.y, s, b, true);
  CHECK(max_abs_diff(back.y.data(), x.data()) < 1e-14);
  CHECK(back.logdet.item() == -fwd.logdet.item());
}

TEST_CASE("invconv examples") {
  std::mt19937_64 rng(3);
  const Tensor x = uniform({2, 2, 3, 3}, rng, -1, 1);
  const LayerOut id = invconv(x, Tensor({2, 2}, {1, 0, 0, 1}));
  CHECK(id.y.to_vector() == x.to_vector());
  CHECK(id.logdet.item() == 0.0);

  const double th = 0.7;
  const LayerOut rot = invconv(x, Tensor({2, 2}, {std::cos(th), -std::sin(th), std::sin(th), std::cos(th)}));
  CHECK(std::abs(rot.logdet.item()) < 1e-12);
  const std::size_t hw = 9;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < hw; ++i) {
      const double a = x.at((n * 2 + 0) * hw + i), b = x.at((n * 2 + 1) * hw + i);
      CHECK(rot.y.at((n * 2 + 0) * hw + i) == doctest::Approx(std::cos(th) * a - std::sin(th) * b).epsilon(1e-12));
      CHECK(rot.y.at((n * 2 + 1) * hw + i) == doctest::Approx(std::sin(th) * a + std::cos(th) * b).epsilon(1e-12));
    }

  CHECK_THROWS_AS(invconv(x, Tensor({2, 2}, {1, 2, 2, 4})), FlowError);
}

TEST_CASE("invconv logdet matches Jacobian") {
  std::mt19937_64 rng(4);
  const Tensor w = uniform({3, 3}, rng, -1, 1);
  const Tensor x = uniform({1, 3, 2, 2}, rng, -1, 1);
  auto f = [&](const std::vector<double>& v) { return invconv(Tensor({1, 3, 2, 2}, v), w).y.to_vector(); };
  CHECK(rel(invconv(x, w).logdet.item(), jacobian_logdet(f, x.to_vector())) < 1e-8);
  const Tensor back = invconv(invconv(x, w).y, w, true).y;
  CHECK(max_abs_diff(back.data(), x.data()) < 1e-12);
}

TEST_CASE("coupling examples") {
  std::mt19937_64 rng(5);
  const std::size_t c = 4, hid = 5;
  const Tensor x = uniform({2, c, 2, 2}, rng, -1, 1);
  const std::vector<Domain> dom{Domain::Source, Domain::Target};
  CouplingParams zero{uniform({hid, c / 2 + kNumDomains, 3, 3}, rng, -1, 1), Tensor::zeros({1, hid, 1, 1}),
                      Tensor::zeros({c, hid, 3, 3}), Tensor::zeros({1, c, 1, 1})};
  const LayerOut id = coupling(x, dom, zero);
  CHECK(id.y.to_vector() == x.to_vector());
  CHECK(max_abs_diff(id.logdet.data(), std::vector<double>{0, 0}) == 0.0);

  CouplingParams p = zero;
  p.w2 = uniform(p.w2.shape(), rng, -0.5, 0.5);
  const Tensor one = slice(x, 0, 0, 1);
  const LayerOut ys = coupling(one, {Domain::Source}, p);
  const LayerOut yt = coupling(one, {Domain::Target}, p);
  CHECK(max_abs_diff(ys.y.data(), yt.y.data()) > 1e-6);

  CHECK_THROWS_AS(coupling(uniform({1, 3, 2, 2}, rng, -1, 1), {Domain::Source}, p), FlowError);
}

TEST_CASE("coupling logdet matches Jacobian and inverts") {
  std::mt19937_64 rng(6);
  const std::size_t c = 4, hid = 6;
  CouplingParams p{uniform({hid, c / 2 + kNumDomains, 3, 3}, rng, -0.8, 0.8), uniform({1, hid, 1, 1}, rng, -0.3, 0.3),
                   uniform({c, hid, 3, 3}, rng, -0.4, 0.4), uniform({1, c, 1, 1}, rng, -0.3, 0.3)};
  const Tensor x = uniform({1, c, 2, 2}, rng, -1, 1);
  for (Domain d : {Domain::Source, Domain::Target}) {
    auto f = [&](const std::vector<double>& v) { return coupling(Tensor({1, c, 2, 2}, v), {d}, p).y.to_vector(); };
    CHECK(rel(coupling(x, {d}, p).logdet.item(), jacobian_logdet(f, x.to_vector())) < 1e-7);
    const Tensor back = coupling(coupling(x, {d}, p).y, {d}, p, true).y;
    CHECK(max_abs_diff(back.data(), x.data()) < 1e-13);
  }
}

TEST_CASE("identity model reduces to squeeze") {
  FlowModel m = make_flow({4, 2, 2, 4, true, 9});
  for (const auto& scale : m.steps)
    for (const StepLayout& s : scale) {
      std::vector<double> eye(s.channels * s.channels, 0.0);
      for (std::size_t i = 0; i < s.channels; ++i) eye[i * s.channels + i] = 1.0;
      m.params[s.weight] = Tensor({s.channels, s.channels}, eye);
    }
  std::mt19937_64 rng(7);
  const Tensor x = uniform({2, 4, 4, 4}, rng, -1, 1);
  const LatentCode z = forward(m, x, {Domain::Source, Domain::Target});
  CHECK(max_abs_diff(z.logdet.data(), std::vector<double>{0, 0}) < 1e-15);
  const Tensor sq = squeeze2x2(x);
  CHECK(z.pieces[0].to_vector() == slice(sq, 1, 0, 8).to_vector());
  CHECK(z.pieces[1].to_vector() == squeeze2x2(slice(sq, 1, 8, 16)).to_vector());
  CHECK(inverse(m, z).to_vector() == x.to_vector());
}

TEST_CASE("two-scale model logdet matches the 64x64 Jacobian") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    FlowModel m = make_flow({4, 2, 2, 4, true, static_cast<std::uint64_t>(trial)});
    randomize(m, rng);
    const Tensor x = uniform({1, 4, 4, 4}, rng, -1, 1);
    for (Domain d : {Domain::Source, Domain::Target}) {
      auto f = [&](const std::vector<double>& v) { return flatten(forward(m, Tensor({1, 4, 4, 4}, v), {d})); };
      const LatentCode z = forward(m, x, {d});
      CHECK(z.dim() == 64);
      CHECK(rel(z.logdet.item(), jacobian_logdet(f, x.to_vector())) < 1e-5);
    }
  }
}

TEST_CASE("logdet is the sum of layer logdets") {
  std::mt19937_64 rng(9);
  FlowModel m = make_flow({2, 1, 3, 4, false, 1});
  randomize(m, rng);
  const Tensor x = uniform({3, 2, 1, 1}, rng, -1, 1);
  const std::vector<Domain> d{Domain::Source, Domain::Target, Domain::Source};
  Tensor h = x;
  std::vector<double> total(3, 0.0);
  for (const StepLayout& s : m.steps[0]) {
    const LayerOut a = actnorm(h, m.params[s.an_scale], m.params[s.an_bias]);
    const LayerOut b = invconv(a.y, m.params[s.weight]);
    const LayerOut c = coupling(b.y, d, {m.params[s.w1], m.params[s.b1], m.params[s.w2], m.params[s.b2]});
    for (std::size_t i = 0; i < 3; ++i) total[i] += a.logdet.item() + b.logdet.item() + c.logdet.at(i);
    h = c.y;
  }
  const LatentCode z = forward(m, x, d);
  CHECK(z.pieces[0].to_vector() == h.to_vector());
  CHECK(max_abs_diff(z.logdet.data(), total) < 1e-13);
}

TEST_CASE("random models are bijective") {
  std::mt19937_64 rng(10);
  double worst = 0.0, worst_z = 0.0;
  for (int model = 0; model < 5; ++model) {
    FlowModel m = make_flow({3, 2, 2, 6, true, static_cast<std::uint64_t>(model)});
    randomize(m, rng);
    for (int i = 0; i < 20; ++i) {
      const Tensor x = uniform({1, 3, 8, 8}, rng, -2, 2);
      const std::vector<Domain> d{i % 2 ? Domain::Target : Domain::Source};
      const LatentCode z = forward(m, x, d);
      worst = std::max(worst, max_abs_diff(inverse(m, z).data(), x.data()));
      LatentCode back = forward(m, inverse(m, z), d);
      worst_z = std::max(worst_z, max_abs_diff(flatten(back), flatten(z)));
    }
  }
  CHECK(worst < 1e-8);
  CHECK(worst_z < 1e-8);
}

TEST_CASE("latent shapes and prior samples invert to input shape") {
  FlowModel m = make_flow({6, 2, 2, 8, true, 3});
  const auto shapes = latent_shapes(m, {5, 6, 16, 16});
  REQUIRE(shapes.size() == 2);
  CHECK(shapes[0] == Shape{5, 12, 8, 8});
  CHECK(shapes[1] == Shape{5, 48, 4, 4});
  std::mt19937_64 rng(11);
  LatentCode z;
  for (const auto& s : shapes) z.pieces.push_back(uniform(s, rng, -1, 1));
  z.logdet = Tensor::zeros({5});
  z.domains.assign(5, Domain::Target);
  CHECK(inverse(m, z).shape() == Shape{5, 6, 16, 16});

  CHECK_THROWS_AS(forward(m, Tensor::zeros({1, 6, 10, 10}), kS1), FlowError);
  CHECK_THROWS_AS(latent_shapes(m, {1, 6, 6, 8}), FlowError);
  CHECK_THROWS_AS(forward(m, Tensor::zeros({1, 3, 16, 16}), kS1), ShapeError);
  CHECK_THROWS_AS(make_flow({3, 1, 1, 4, false, 0}), FlowError);
}

TEST_CASE("pooled latent averages channels over space") {
  std::mt19937_64 rng(12);
  FlowModel m = make_flow({3, 2, 1, 4, true, 3});
  const Tensor x = uniform({2, 3, 8, 8}, rng, 0, 1);
  const LatentCode z = forward(m, x, {Domain::Source, Domain::Source});
  const Tensor p = pooled_latent(z);
  CHECK(p.shape() == Shape{2, 6 + 24});
  double acc = 0.0;
  for (std::size_t j = 0; j < 16; ++j) acc += z.pieces[0].at((1 * 6 + 2) * 16 + j);
  CHECK(p.at(1 * 30 + 2) == doctest::Approx(acc / 16).epsilon(1e-14));
}

TEST_CASE("data-dependent init") {
  SUBCASE("constant batch falls back to unit scale") {
    FlowModel m = make_flow({2, 1, 1, 4, false, 0});
    init_data_dependent(m, Tensor::full({4, 2, 1, 1}, 0.3), std::vector<Domain>(4, Domain::Source));
    const StepLayout& s = m.steps[0][0];
    CHECK(m.params[s.an_scale].to_vector() == std::vector<double>{1.0, 1.0});
    CHECK(max_abs_diff(m.params[s.an_bias].data(), std::vector<double>{-0.3, -0.3}) < 1e-15);
  }
  SUBCASE("post-actnorm activations are standardised") {
    std::mt19937_64 rng(13);
    FlowModel m = make_flow({3, 2, 2, 8, true, 4});
    const Tensor batch = uniform({6, 3, 8, 8}, rng, 0.0, 3.0);
    const std::vector<Domain> d(6, Domain::Source);
    init_data_dependent(m, batch, d);
    CHECK(m.initialized);
    // Recompute each ActNorm output independently.
    Tensor x = batch;
    for (std::size_t k = 0; k < m.steps.size(); ++k) {
      x = squeeze2x2(x);
      for (const StepLayout& s : m.steps[k]) {
        const Tensor y = actnorm(x, m.params[s.an_scale], m.params[s.an_bias]).y;
        const std::size_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double mu = 0, sq = 0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
              const double v = y.at((i * c + ch) * hw + j);
              mu += v;
              sq += v * v;
            }
          mu /= static_cast<double>(n * hw);
          const double sd = std::sqrt(sq / static_cast<double>(n * hw) - mu * mu);
          CHECK(std::abs(mu) < 1e-10);
          CHECK(sd >= 0.99);
          CHECK(sd <= 1.01);
        }
        const Tensor b = invconv(y, m.params[s.weight]).y;
        x = coupling(b, d, {m.params[s.w1], m.params[s.b1], m.params[s.w2], m.params[s.b2]}).y;
      }
      if (k + 1 < m.steps.size()) x = slice(x, 1, x.dim(1) / 2, x.dim(1));
    }
    const auto before = param_hash(m.params);
    init_data_dependent(m, batch, d);
    CHECK(param_hash(m.params) == before);
  }
}

TEST_CASE("invconv reprojection") {
  FlowModel m = make_flow({2, 1, 2, 4, false, 0});
  CHECK(reproject_invconv(m) == 0);
  m.params[m.steps[0][1].weight] = Tensor({2, 2}, {1, 2, 2, 4});
  CHECK(reproject_invconv(m) == 1);
  const auto w = m.params[m.steps[0][1].weight].to_vector();
  CHECK(std::abs(std::abs(w[0] * w[3] - w[1] * w[2]) - 1.0) < 1e-12);
}

TEST_CASE("flow parameters have correct gradients") {
  std::mt19937_64 rng(14);
  FlowModel m = make_flow({2, 2, 1, 3, true, 5});
  randomize(m, rng);
  const Tensor x = uniform({2, 2, 4, 4}, rng, -1, 1);
  const std::vector<Domain> d{Domain::Source, Domain::Target};
  auto loss = [&](const std::vector<Tensor>& p) {
    const LatentCode z = forward(m, p, x, d);
    Tensor l = sum(z.logdet);
    for (const auto& piece : z.pieces) l = l + 0.5 * sum(square(piece));
    return l;
  };
  CHECK(testing::grad_check(m.params, loss) < 1e-4);

  // Gradients through the inverse as well.
  const LatentCode z = forward(m, x, d);
  auto inv_loss = [&](const std::vector<Tensor>& p) { return sum(square(inverse(m, p, z))); };
  CHECK(testing::grad_check(m.params, inv_loss) < 1e-4);
}

TEST_CASE("flow checkpoint round trip is bit exact") {
  std::mt19937_64 rng(15);
  FlowModel m = make_flow({3, 2, 2, 4, true, 6});
  randomize(m, rng);
  const auto path = std::filesystem::temp_directory_path() / "geico_flow_test.ckpt";
  save_flow(path, m);
  const FlowModel back = load_flow(path);
  CHECK(back.config == m.config);
  CHECK(back.initialized);
  CHECK(param_hash(back.params) == param_hash(m.params));
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(back.params[i].to_vector() == m.params[i].to_vector());

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(load_flow(path), ckpt::CorruptError);
  std::filesystem::resize_file(path, 20);
  CHECK_THROWS_AS(load_flow(path), ckpt::CorruptError);
  std::filesystem::remove(path);
}
