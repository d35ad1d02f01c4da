#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "geico/scene.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace geico;
using namespace geico::scene;
using geico::testing::dense_matrix;

namespace {

linalg::Matrix affine(double a, double b, double c, double d, double tx, double ty) {
  return linalg::Matrix(3, 3, {a, b, tx, c, d, ty, 0.0, 0.0, 1.0});
}

std::uint8_t terrain() { return static_cast<std::uint8_t>(ClassId::Terrain); }

}  // namespace

TEST_CASE("empty scene renders as terrain") {
  SceneSpec spec;
  spec.height = 16;
  spec.width = 16;
  spec.pixel_noise = 0.0;
  const SceneSample top = render(spec, Domain::Target);
  const SceneSample again = render(spec, Domain::Target);
  for (std::size_t i = 0; i < 256; ++i) {
    CHECK(top.classes[i] == terrain());
    CHECK(top.label.at(static_cast<std::size_t>(terrain()) * 256 + i) == 1.0);
    for (std::size_t c = 0; c < 3; ++c) CHECK(top.image.at(c * 256 + i) == top.image.at(c * 256));
  }
  CHECK(top.image.to_vector() == again.image.to_vector());

  // Ground view: sky above the horizon is void, everything below is terrain.
  const SceneSample ground = render(spec, Domain::Source);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const auto k = ground.classes[y * 16 + x];
      CHECK((y <= 2 ? k == kVoid : k == terrain()));
    }
}

TEST_CASE("car footprint is exact in the top view") {
  SceneSpec spec;
  spec.height = 20;
  spec.width = 20;
  spec.objects.push_back({ClassId::Car, 5, 7, 9, 10, 2.5, {0, 0, 0}});
  const SceneSample top = render(spec, Domain::Target);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      const bool inside = x >= 5 && x < 9 && y >= 7 && y < 10;
      CHECK((top.classes[static_cast<std::size_t>(y * 20 + x)] == static_cast<std::uint8_t>(ClassId::Car)) == inside);
    }
}

TEST_CASE("rendering is deterministic per seed") {
  const SceneSpec a = random_scene(32, 32, 42);
  const SceneSpec b = random_scene(32, 32, 42);
  REQUIRE(a.objects.size() == b.objects.size());
  for (Domain d : {Domain::Source, Domain::Target}) {
    const auto sa = render(a, d), sb = render(b, d);
    CHECK(sa.image.to_vector() == sb.image.to_vector());
    CHECK(sa.classes == sb.classes);
  }
  const SceneSpec c = random_scene(32, 32, 43);
  CHECK(render(c, Domain::Target).image.to_vector() != render(a, Domain::Target).image.to_vector());
}

TEST_CASE("scene validation") {
  SceneSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.objects.push_back({ClassId::Building, 4, 4, 9, 6, 3.0, {0, 0, 0}});
  CHECK_THROWS_AS(validate(spec), SceneError);
  spec.objects[0].x1 = 8;
  CHECK_NOTHROW(validate(spec));
  for (std::uint64_t s = 0; s < 20; ++s) CHECK_NOTHROW(validate(random_scene(64, 64, s)));
}

TEST_CASE("label one-hot sums to one on non-void pixels") {
  const SceneSpec spec = random_scene(32, 32, 5);
  for (Domain d : {Domain::Source, Domain::Target}) {
    const SceneSample s = render(spec, d);
    const std::size_t hw = 32 * 32;
    for (std::size_t i = 0; i < hw; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < kNumClasses; ++c) sum += s.label.at(c * hw + i);
      CHECK(sum == (s.classes[i] == kVoid ? 0.0 : 1.0));
    }
  }
}

TEST_CASE("identity transform gives the identity map") {
  const PermutationMap p = build_permutation(make_transform(linalg::Matrix::identity(3)), 5, 7);
  CHECK(p.valid_count() == 35);
  for (std::size_t i = 0; i < 35; ++i) CHECK(p.source_index[i] == static_cast<std::int64_t>(i));

  std::mt19937_64 rng(1);
  const Tensor f = testing::random_tensor({2, 5, 7}, rng);
  CHECK(warp(f, p).to_vector() == f.to_vector());
}

TEST_CASE("one-pixel translation on 4x4") {
  // Every target pixel reads the source pixel one to its right, so the last column has no source.
  const PermutationMap p = build_permutation(make_transform(affine(1, 0, 0, 1, -1, 0)), 4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const auto idx = p.source_index[y * 4 + x];
      if (x == 3)
        CHECK(idx == -1);
      else
        CHECK(idx == static_cast<std::int64_t>(y * 4 + x + 1));
    }
  CHECK(p.valid_count() == 12);
}

TEST_CASE("singular transforms are rejected") {
  CHECK_THROWS_AS(make_transform(affine(1, 2, 2, 4, 0, 0)), SceneError);
  CHECK_THROWS_AS(make_transform(linalg::Matrix::identity(2)), SceneError);
}

TEST_CASE("affine round trip returns original indices") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ang(-0.4, 0.4), sc(0.9, 1.1), tr(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const double th = ang(rng), s = sc(rng);
    const linalg::Matrix m =
        affine(s * std::cos(th), -s * std::sin(th), s * std::sin(th), s * std::cos(th), tr(rng), tr(rng));
    const PermutationMap fwd = build_permutation(make_transform(m), 8, 8);
    const PermutationMap bwd = build_permutation(make_transform(*linalg::invert(m)), 8, 8);
    // Integer translations are exact bijections; check round trip precisely there.
    const linalg::Matrix shift = affine(1, 0, 0, 1, std::round(tr(rng)), std::round(tr(rng)));
    const PermutationMap sf = build_permutation(make_transform(shift), 8, 8);
    const PermutationMap sb = build_permutation(make_transform(*linalg::invert(shift)), 8, 8);
    for (std::size_t i = 0; i < 64; ++i) {
      const auto j = sf.source_index[i];
      if (j < 0) continue;
      CHECK(sb.source_index[static_cast<std::size_t>(j)] == static_cast<std::int64_t>(i));
    }
    // General affine: a target pixel and its source must map back to within one pixel.
    for (std::size_t i = 0; i < 64; ++i) {
      const auto j = fwd.source_index[i];
      if (j < 0) continue;
      const auto k = bwd.source_index[static_cast<std::size_t>(j)];
      if (k < 0) continue;
      CHECK(std::abs(k % 8 - static_cast<std::int64_t>(i % 8)) <= 1);
      CHECK(std::abs(k / 8 - static_cast<std::int64_t>(i / 8)) <= 1);
    }
  }
}

TEST_CASE("warp equals dense permutation-matrix product") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int trial = 0; trial < 10; ++trial) {
    linalg::Matrix m = affine(1 + u(rng), u(rng), u(rng), 1 + u(rng), 4 * u(rng), 4 * u(rng));
    m(2, 0) = 0.02 * u(rng);
    m(2, 1) = 0.02 * u(rng);
    const PermutationMap p = build_permutation(make_transform(m), 8, 8);
    const auto dense = dense_matrix(p);
    // At most one nonzero per row.
    for (std::size_t r = 0; r < 64; ++r) {
      int nz = 0;
      for (std::size_t c = 0; c < 64; ++c) nz += dense[r * 64 + c] != 0.0;
      CHECK(nz <= 1);
    }
    const Tensor f = testing::random_tensor({3, 8, 8}, rng);
    const Tensor w = warp(f, p);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = 0; r < 64; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 64; ++c) acc += dense[r * 64 + c] * f.at(ch * 64 + c);
        CHECK(std::abs(w.at(ch * 64 + r) - acc) <= 1e-12);
      }
  }
}

TEST_CASE("warp rejects mismatched shapes") {
  const PermutationMap p = build_permutation(make_transform(linalg::Matrix::identity(3)), 4, 4);
  CHECK_THROWS_AS(warp(Tensor::zeros({1, 4, 5}), p), ShapeError);
  CHECK_THROWS_AS(warp(Tensor::zeros({4, 4}), p), ShapeError);
}

TEST_CASE("dataset splits and hidden pair consistency") {
  const Dataset ds = generate_dataset(8, 32, 32, 3);
  CHECK(ds.train_s.size() == 4);
  CHECK(ds.train_t.size() == 4);
  std::set<int> s_keys, t_keys, other;
  for (const auto& s : ds.train_s) {
    s_keys.insert(s.pair_key);
    CHECK(s.domain == Domain::Source);
  }
  for (const auto& s : ds.train_t) {
    t_keys.insert(s.pair_key);
    CHECK(s.domain == Domain::Target);
  }
  for (int k : s_keys) CHECK(t_keys.count(k) == 0);
  for (const auto& s : ds.test_t) other.insert(s.pair_key);
  for (const auto& p : ds.hidden_pairs) other.insert(p.source.pair_key);
  for (int k : other) CHECK((s_keys.count(k) == 0 && t_keys.count(k) == 0));

  REQUIRE(ds.hidden_pairs.size() >= 2);
  for (const auto& p : ds.hidden_pairs) {
    const PermutationMap perm = build_permutation(p.transform, 32, 32);
    CHECK(p.target.classes == warp_classes(p.source.classes, perm));
    CHECK(p.target.label.to_vector() == warp(p.source.label, perm).to_vector());
    CHECK(p.target.image.to_vector() == warp(p.source.image, perm).to_vector());
    CHECK(perm.valid_count() > 32 * 32 / 4);
  }

  CHECK_THROWS_AS(generate_dataset(1, 32, 32, 0), SceneError);
  const Dataset two = generate_dataset(2, 16, 16, 9);
  CHECK(two.train_s.front().pair_key != two.train_t.front().pair_key);
}

TEST_CASE("views of tall-building scenes have different class histograms") {
  int differing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SceneSpec spec = random_scene(64, 64, 100 + seed);
    bool tall = false;
    for (const auto& o : spec.objects) tall |= o.cls == ClassId::Building && o.height >= 15.0;
    if (!tall) spec.objects.push_back({ClassId::Building, 2, 2, 14, 12, 24.0, {0, 0, 0}});
    validate(spec);
    const auto g = class_histogram(render(spec, Domain::Source).classes);
    const auto t = class_histogram(render(spec, Domain::Target).classes);
    double gn = 0, tn = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      gn += static_cast<double>(g[c]);
      tn += static_cast<double>(t[c]);
    }
    double l1 = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) l1 += std::abs(g[c] / gn - t[c] / tn);
    differing += l1 > 0.05;
  }
  CHECK(differing == 10);
}

TEST_CASE("dataset save and load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "geico_scene_roundtrip";
  std::filesystem::remove_all(dir);
  const Dataset ds = generate_dataset(4, 16, 16, 21);
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir, true);
  REQUIRE(back.train_s.size() == ds.train_s.size());
  REQUIRE(back.hidden_pairs.size() == ds.hidden_pairs.size());
  CHECK(load_dataset(dir).hidden_pairs.empty());
  for (std::size_t i = 0; i < ds.train_s.size(); ++i) {
    CHECK(testing::max_abs_diff(back.train_s[i].image.data(), ds.train_s[i].image.data()) < 1e-12);
    CHECK(back.train_s[i].classes == ds.train_s[i].classes);
  }
  for (std::size_t i = 0; i < ds.hidden_pairs.size(); ++i) {
    CHECK(back.hidden_pairs[i].target.classes == ds.hidden_pairs[i].target.classes);
    CHECK(back.hidden_pairs[i].transform.matrix.values == ds.hidden_pairs[i].transform.matrix.values);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir), SceneError);
}
