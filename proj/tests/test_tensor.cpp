#include <cmath>
#include <random>

#include "doctest.h"
#include "geico/tensor.hpp"
#include "test_util.hpp"

using namespace geico;
using geico::testing::grad_check;
using geico::testing::max_abs_diff;
using geico::testing::random_tensor;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i * k + p) * b.at(p * n + j);
  return out;
}

// Direct six-loop cross-correlation.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                               std::size_t dil) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (h + 2 * pad - (kh - 1) * dil - 1) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - (kw - 1) * dil - 1) / stride + 1;
  std::vector<double> out(n * o * ho * wo, 0.0);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(y * stride + ky * dil) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx * dil) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                out[((ni * o + oi) * ho + y) * wo + xx] +=
                    x.at(((ni * c + ci) * h + iy) * wd + ix) * w.at(((oi * c + ci) * kh + ky) * kw + kx);
              }
  return out;
}

}  // namespace

TEST_CASE("elementwise examples") {
  const Tensor a({2}, {1, 2});
  const Tensor b({2}, {3, 4});
  CHECK((a + b).to_vector() == std::vector<double>{4, 6});

  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({3, 4}, rng);
  CHECK((x * Tensor::full({3, 4}, 1.0)).to_vector() == x.to_vector());

  const Tensor e = exp(Tensor({2}, {0.0, std::log(2.0)}));
  CHECK(e.at(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(e.at(1) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("elementwise broadcasting over trailing dimensions") {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row({3}, {10, 20, 30});
  CHECK((x + row).to_vector() == std::vector<double>{11, 22, 33, 14, 25, 36});
  const Tensor col({2, 1}, {100, 200});
  CHECK((x + col).to_vector() == std::vector<double>{101, 102, 103, 204, 205, 206});
  CHECK_THROWS_AS(x + Tensor({2}, {1, 2}), ShapeError);
}

TEST_CASE("non-finite results raise NumericError") {
  CHECK_THROWS_AS(log(Tensor({2}, {1.0, -1.0})), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {1.0}) / Tensor({1}, {0.0}), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), NumericError);
}

TEST_CASE("matmul") {
  std::mt19937_64 rng(2);
  const Tensor m = random_tensor({3, 3}, rng);
  const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(matmul(eye, m).to_vector() == m.to_vector());

  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor ones({2, 1}, {1, 1});
  CHECK(matmul(a, ones).to_vector() == std::vector<double>{3, 7});

  const Tensor p = random_tensor({5, 4}, rng);
  const Tensor q = random_tensor({4, 3}, rng);
  CHECK(max_abs_diff(matmul(p, q).data(), naive_matmul(p, q)) < 1e-12);

  CHECK_THROWS_AS(matmul(p, p), ShapeError);
}

TEST_CASE("conv2d") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 1, 5, 5}, rng);
  CHECK(conv2d(x, Tensor({1, 1, 1, 1}, {1.0})).to_vector() == x.to_vector());

  const Tensor flat = Tensor::full({1, 1, 6, 6}, 0.7);
  const Tensor avg = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
  const Tensor y = conv2d(flat, avg, {1, 1, 1});
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 1; j < 5; ++j) CHECK(y.at(i * 6 + j) == doctest::Approx(0.7).epsilon(1e-14));

  const Tensor xr = random_tensor({1, 2, 5, 5}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  CHECK(max_abs_diff(conv2d(xr, k, {1, 1, 1}).data(), naive_conv(xr, k, 1, 1, 1)) < 1e-12);
  CHECK(max_abs_diff(conv2d(xr, k, {2, 1, 1}).data(), naive_conv(xr, k, 2, 1, 1)) < 1e-12);
  CHECK(max_abs_diff(conv2d(xr, k, {1, 2, 2}).data(), naive_conv(xr, k, 1, 2, 2)) < 1e-12);

  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5})), ShapeError);
  CHECK_THROWS_AS(conv2d(xr, Tensor::zeros({1, 2, 2, 2})), ShapeError);
}

TEST_CASE("backward examples") {
  Tape tape;
  const Tensor x = tape.leaf(Tensor({3}, {1, -2, 3}));
  const Gradients g = tape.backward(sum(square(x)));
  CHECK(g[x].to_vector() == std::vector<double>{2, -4, 6});

  Tape t2;
  const Tensor p = t2.leaf(Tensor({2}, {1, 2}));
  const Gradients g2 = t2.backward(Tensor::scalar(5.0));
  CHECK(g2[p].to_vector() == std::vector<double>{0, 0});

  Tape t3;
  const Tensor v = t3.leaf(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(t3.backward(v * 2.0), ShapeError);
}

TEST_CASE("untouched leaves get zero gradients") {
  Tape tape;
  const Tensor a = tape.leaf(Tensor({2}, {1, 2}));
  const Tensor b = tape.leaf(Tensor({3}, {1, 2, 3}));
  const Gradients g = tape.backward(sum(a * a));
  CHECK(g[b].to_vector() == std::vector<double>{0, 0, 0});
}

TEST_CASE("tape nodes are topologically ordered") {
  std::mt19937_64 rng(4);
  Tape tape;
  const Tensor a = tape.leaf(random_tensor({2, 3}, rng));
  const Tensor b = tape.leaf(random_tensor({3, 2}, rng));
  const Tensor loss = sum(tanh(matmul(a, b)) * 3.0 + exp(scale(a, 0.1)).at(0));
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (int p : tape.node(i).parents) CHECK(static_cast<std::size_t>(p) < i);
  (void)loss;
}

TEST_CASE("gradient check for every op kind") {
  std::mt19937_64 rng(5);
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
  auto pos = [&](Shape s) { return random_tensor(std::move(s), rng, 0.5, 2.0); };

  const std::vector<std::pair<const char*, std::function<double()>>> checks = {
      {"neg", [&] { return grad_check({r({4})}, [](const auto& v) { return sum(-v[0] * v[0]); }); }},
      {"exp", [&] { return grad_check({r({4})}, [](const auto& v) { return sum(exp(v[0])); }); }},
      {"log", [&] { return grad_check({pos({4})}, [](const auto& v) { return sum(log(v[0])); }); }},
      {"tanh", [&] { return grad_check({r({4})}, [](const auto& v) { return sum(tanh(v[0])); }); }},
      {"relu", [&] { return grad_check({r({6})}, [](const auto& v) { return sum(relu(v[0]) * v[0]); }); }},
      {"sigmoid", [&] { return grad_check({r({4})}, [](const auto& v) { return sum(sigmoid(v[0])); }); }},
      {"square", [&] { return grad_check({r({4})}, [](const auto& v) { return sum(square(v[0])); }); }},
      {"sqrt", [&] { return grad_check({pos({4})}, [](const auto& v) { return sum(sqrt(v[0])); }); }},
      {"add_broadcast", [&] { return grad_check({r({2, 3}), r({3})}, [](const auto& v) { return sum(square(v[0] + v[1])); }); }},
      {"sub_broadcast", [&] { return grad_check({r({2, 3}), r({2, 1})}, [](const auto& v) { return sum(square(v[0] - v[1])); }); }},
      {"mul_broadcast", [&] { return grad_check({r({2, 3, 2}), r({3, 1})}, [](const auto& v) { return sum(square(v[0] * v[1])); }); }},
      {"div", [&] { return grad_check({r({3}), pos({3})}, [](const auto& v) { return sum(v[0] / v[1]); }); }},
      {"scale_add_scalar", [&] { return grad_check({r({3})}, [](const auto& v) { return sum(square(v[0] * 1.7 + 0.3)); }); }},
      {"clamp_max", [&] { return grad_check({r({5})}, [](const auto& v) { return sum(square(clamp_max(v[0], 0.25))); }); }},
      {"mean_axis", [&] { return grad_check({r({2, 3, 2})}, [](const auto& v) { return sum(square(mean(v[0], 1))); }); }},
      {"transpose_matmul", [&] { return grad_check({r({3, 2}), r({3, 4})}, [](const auto& v) { return sum(square(matmul(transpose(v[0]), v[1]))); }); }},
      {"concat_slice", [&] {
         return grad_check({r({2, 3, 2}), r({2, 1, 2})}, [](const auto& v) {
           const Tensor c = concat({v[0], v[1]}, 1);
           return sum(square(slice(c, 1, 1, 4)) * slice(c, 1, 0, 3));
         });
       }},
      {"conv2d", [&] {
         return grad_check({r({2, 2, 5, 5}), r({3, 2, 3, 3})}, [](const auto& v) { return sum(square(conv2d(v[0], v[1], {2, 1, 1}))); });
       }},
      {"conv2d_dilated", [&] {
         return grad_check({r({1, 2, 6, 6}), r({2, 2, 3, 3})}, [](const auto& v) { return sum(square(conv2d(v[0], v[1], {1, 2, 2}))); });
       }},
      {"avg_pool", [&] { return grad_check({r({1, 2, 4, 4})}, [](const auto& v) { return sum(square(avg_pool2d(v[0], 2))); }); }},
      {"upsample", [&] { return grad_check({r({1, 2, 3, 3})}, [](const auto& v) { return sum(square(upsample_bilinear(v[0], 4))); }); }},
      {"softmax", [&] {
         return grad_check({r({2, 3, 2, 2}), r({2, 3, 2, 2})}, [](const auto& v) { return sum(softmax_channels(v[0]) * v[1]); });
       }},
      {"log_softmax", [&] {
         return grad_check({r({2, 3, 2, 2}), r({2, 3, 2, 2})}, [](const auto& v) { return sum(log_softmax_channels(v[0]) * v[1]); });
       }},
      {"squeeze", [&] {
         return grad_check({r({1, 2, 4, 4}), r({1, 8, 2, 2})}, [](const auto& v) { return sum(squeeze2x2(v[0]) * v[1]); });
       }},
      {"unsqueeze", [&] {
         return grad_check({r({1, 8, 2, 2}), r({1, 2, 4, 4})}, [](const auto& v) { return sum(unsqueeze2x2(v[0]) * v[1]); });
       }},
      {"logabsdet", [&] {
         std::vector<double> m = r({3, 3}).to_vector();
         for (int i = 0; i < 3; ++i) m[i * 4] += 3.0;
         return grad_check({Tensor({3, 3}, m)}, [](const auto& v) { return logabsdet(v[0]); });
       }},
      {"inverse", [&] {
         std::vector<double> m = r({3, 3}).to_vector();
         for (int i = 0; i < 3; ++i) m[i * 4] += 3.0;
         return grad_check({Tensor({3, 3}, m), r({3, 3})}, [](const auto& v) { return sum(inverse(v[0]) * v[1]); });
       }},
  };
  for (const auto& [name, run] : checks) {
    CAPTURE(name);
    CHECK(run() < 1e-4);
  }
}

TEST_CASE("squeeze round trip and layout") {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 3, 4, 6}, rng);
  CHECK(unsqueeze2x2(squeeze2x2(x)).to_vector() == x.to_vector());
  const Tensor s = squeeze2x2(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(s.shape() == Shape{1, 4, 1, 1});
  CHECK(s.to_vector() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(7);
  const Tensor x0 = random_tensor({3, 4}, rng);
  const Tensor w0 = random_tensor({4, 2}, rng);
  auto l1 = [](const Tensor& x, const Tensor& w) { return sum(tanh(matmul(x, w))); };
  auto l2 = [](const Tensor& x, const Tensor& w) { return sum(square(matmul(x, w))); };
  const double a = 0.7, b = -1.3;

  auto grads = [&](auto&& f) {
    Tape t;
    const Tensor x = t.leaf(x0), w = t.leaf(w0);
    const Gradients g = t.backward(f(x, w));
    return std::make_pair(g[x].to_vector(), g[w].to_vector());
  };
  const auto g1 = grads(l1);
  const auto g2 = grads(l2);
  const auto gc = grads([&](const Tensor& x, const Tensor& w) { return l1(x, w) * a + l2(x, w) * b; });
  for (std::size_t i = 0; i < gc.first.size(); ++i) CHECK(std::abs(gc.first[i] - (a * g1.first[i] + b * g2.first[i])) < 1e-10);
  for (std::size_t i = 0; i < gc.second.size(); ++i) CHECK(std::abs(gc.second[i] - (a * g1.second[i] + b * g2.second[i])) < 1e-10);
}

TEST_CASE("identical inputs give bit-identical outputs and gradients") {
  auto run = [] {
    std::mt19937_64 rng(8);
    Tape t;
    const Tensor x = t.leaf(random_tensor({2, 3, 8, 8}, rng));
    const Tensor k = t.leaf(random_tensor({4, 3, 3, 3}, rng));
    const Tensor y = softmax_channels(conv2d(x, k, {1, 1, 1}));
    const Tensor loss = sum(square(y));
    const Gradients g = t.backward(loss);
    return std::make_tuple(loss.item(), g[x].to_vector(), g[k].to_vector());
  };
  CHECK(run() == run());
}
