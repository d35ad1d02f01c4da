#include "geico/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include "json.hpp"
#include <random>

#include "geico/png_io.hpp"

namespace geico::scene {

namespace {

using Rgb = std::array<double, 3>;

// Ground-camera appearance of each class (side profiles, walls).
constexpr std::array<Rgb, kNumClasses> kGroundPalette = {{
    {0.33, 0.33, 0.36},  // road
    {0.72, 0.50, 0.38},  // building wall
    {0.80, 0.12, 0.12},  // car
    {0.16, 0.50, 0.18},  // tree
    {0.50, 0.66, 0.30},  // terrain
    {0.92, 0.80, 0.25},  // person
}};

// Top-down appearance: roofs and canopies look different from walls and trunks.
constexpr std::array<Rgb, kNumClasses> kTopPalette = {{
    {0.36, 0.36, 0.40},  // road
    {0.42, 0.42, 0.46},  // roof
    {0.70, 0.20, 0.24},  // car roof
    {0.10, 0.36, 0.20},  // canopy
    {0.46, 0.60, 0.34},  // terrain
    {0.86, 0.74, 0.34},  // person (head and shoulders)
}};

// Side faces seen along the top-view slant.
constexpr std::array<Rgb, kNumClasses> kTopSidePalette = {{
    {0.36, 0.36, 0.40},
    {0.62, 0.46, 0.38},
    {0.60, 0.14, 0.14},
    {0.12, 0.42, 0.18},
    {0.46, 0.60, 0.34},
    {0.80, 0.70, 0.30},
}};

constexpr Rgb kSky = {0.55, 0.75, 0.95};
constexpr double kSlantPerHeight = 0.25;
// Horizontal magnification of the ground camera; the map's side edges fall out of frame.
constexpr double kGroundZoom = 1.5;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct Canvas {
  std::size_t h, w;
  std::vector<Rgb> color;
  std::vector<std::uint8_t> cls;
  Canvas(std::size_t hh, std::size_t ww, const Rgb& c, std::uint8_t k) : h(hh), w(ww), color(hh * ww, c), cls(hh * ww, k) {}
  void paint(long y, long x, const Rgb& c, std::uint8_t k) {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return;
    const std::size_t i = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
    color[i] = c;
    cls[i] = k;
  }
};

Rgb tinted(const Rgb& base, const std::array<double, 3>& tint) {
  return {base[0] + tint[0], base[1] + tint[1], base[2] + tint[2]};
}

// Noise, clamping and 8-bit quantisation, so rendered images equal their PNGs.
SceneSample finish(const Canvas& cv, Domain domain, double sigma, std::uint64_t noise_seed) {
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t hw = cv.h * cv.w;
  std::vector<double> img(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(cv.color[i][c] + sigma * noise(rng), 0.0, 1.0);
      img[c * hw + i] = std::round(v * 255.0) / 255.0;
    }
  SceneSample s;
  s.image = Tensor({3, cv.h, cv.w}, std::move(img));
  s.classes = cv.cls;
  s.label = one_hot(s.classes, cv.h, cv.w);
  s.domain = domain;
  return s;
}

std::vector<const SceneObject*> depth_sorted(const SceneSpec& spec) {
  std::vector<const SceneObject*> objs;
  for (const auto& o : spec.objects)
    if (o.cls != ClassId::Road) objs.push_back(&o);
  std::stable_sort(objs.begin(), objs.end(), [](auto* a, auto* b) { return a->y1 < b->y1; });
  return objs;
}

SceneSample render_top(const SceneSpec& spec) {
  Canvas cv(spec.height, spec.width, kTopPalette[4], static_cast<std::uint8_t>(ClassId::Terrain));
  for (const auto& o : spec.objects) {
    if (o.cls != ClassId::Road) continue;
    for (int y = o.y0; y < o.y1; ++y)
      for (int x = o.x0; x < o.x1; ++x) cv.paint(y, x, tinted(kTopPalette[0], o.tint), 0);
  }
  for (const SceneObject* o : depth_sorted(spec)) {
    const auto k = static_cast<std::uint8_t>(o->cls);
    const int off = static_cast<int>(std::floor(kSlantPerHeight * o->height));
    const Rgb side = tinted(kTopSidePalette[k], o->tint);
    const Rgb roof = tinted(kTopPalette[k], o->tint);
    for (int y = std::max(o->y1 - off, o->y0 - off); y < o->y1; ++y)
      for (int x = o->x0; x < o->x1; ++x) cv.paint(y, x, side, k);
    for (int y = o->y0 - off; y < o->y1 - off; ++y)
      for (int x = o->x0; x < o->x1; ++x) cv.paint(y, x, roof, k);
  }
  return finish(cv, Domain::Target, spec.pixel_noise, mix_seed(spec.seed, 11));
}

struct GroundCamera {
  double tilt, cx, horizon, bottom;
  // top-view (X,Y) -> ground image (u,v)
  double depth(double y) const { return 1.0 + tilt * (bottom - y); }
  double u(double x, double y) const { return kGroundZoom * (x - cx) / depth(y) + cx; }
  double v(double y) const { return horizon + (bottom - horizon) / depth(y); }
};

GroundCamera camera_for(const SceneSpec& spec) {
  return {spec.camera_tilt, (static_cast<double>(spec.width) - 1.0) / 2.0, std::floor(static_cast<double>(spec.height) / 6.0),
          static_cast<double>(spec.height) - 1.0};
}

SceneSample render_ground(const SceneSpec& spec) {
  const GroundCamera cam = camera_for(spec);
  Canvas cv(spec.height, spec.width, kSky, kVoid);

  // Flat ground map: roads, terrain, and object bases.
  std::vector<std::uint8_t> ground(spec.height * spec.width, static_cast<std::uint8_t>(ClassId::Terrain));
  std::vector<Rgb> ground_color(spec.height * spec.width, kGroundPalette[4]);
  for (const auto& o : spec.objects) {
    const auto k = static_cast<std::uint8_t>(o.cls);
    for (int y = o.y0; y < o.y1; ++y)
      for (int x = o.x0; x < o.x1; ++x) {
        if (y < 0 || x < 0 || y >= static_cast<int>(spec.height) || x >= static_cast<int>(spec.width)) continue;
        const std::size_t i = static_cast<std::size_t>(y) * spec.width + static_cast<std::size_t>(x);
        if (o.cls == ClassId::Road || ground[i] == static_cast<std::uint8_t>(ClassId::Terrain)) {
          ground[i] = k;
          ground_color[i] = tinted(kGroundPalette[k], o.tint);
        }
      }
  }

  for (std::size_t v = 0; v < spec.height; ++v) {
    const double dv = static_cast<double>(v);
    if (dv <= cam.horizon) continue;
    // Invert v -> Y, then u -> X.
    const double d = (cam.bottom - cam.horizon) / (dv - cam.horizon);
    const double y = cam.bottom - (d - 1.0) / cam.tilt;
    for (std::size_t u = 0; u < spec.width; ++u) {
      const double x = (static_cast<double>(u) - cam.cx) * d / kGroundZoom + cam.cx;
      const long yi = std::lround(y);
      const long xi = std::lround(x);
      Rgb c = kGroundPalette[4];
      std::uint8_t k = static_cast<std::uint8_t>(ClassId::Terrain);
      if (yi >= 0 && xi >= 0 && yi < static_cast<long>(spec.height) && xi < static_cast<long>(spec.width)) {
        const std::size_t i = static_cast<std::size_t>(yi) * spec.width + static_cast<std::size_t>(xi);
        c = ground_color[i];
        k = ground[i];
      }
      cv.paint(static_cast<long>(v), static_cast<long>(u), c, k);
    }
  }

  // Side profiles, far to near.
  for (const SceneObject* o : depth_sorted(spec)) {
    const auto k = static_cast<std::uint8_t>(o->cls);
    const double front = static_cast<double>(o->y1) - 0.5;
    const double base = cam.v(front);
    const double top = base - kGroundZoom * o->height / cam.depth(front);
    const double left = cam.u(static_cast<double>(o->x0) - 0.5, front);
    const double right = cam.u(static_cast<double>(o->x1) - 0.5, front);
    const Rgb c = tinted(kGroundPalette[k], o->tint);
    for (long v = static_cast<long>(std::ceil(top)); v <= static_cast<long>(std::floor(base)); ++v)
      for (long u = static_cast<long>(std::ceil(left)); u < static_cast<long>(std::ceil(right)); ++u) cv.paint(v, u, c, k);
  }
  return finish(cv, Domain::Source, spec.pixel_noise, mix_seed(spec.seed, 7));
}

void place(std::vector<SceneObject>& out, std::mt19937_64& rng, ClassId cls, int count, int wmin, int wmax, int hmin,
           int hmax, double zmin, double zmax, const SceneSpec& spec, bool on_road) {
  const int W = static_cast<int>(spec.width), H = static_cast<int>(spec.height);
  std::uniform_real_distribution<double> tint(-0.04, 0.04);
  std::uniform_real_distribution<double> z(zmin, zmax);
  auto overlaps = [&](const SceneObject& a) {
    for (const auto& b : out) {
      const bool hit = a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
      if (!hit) continue;
      if (b.cls == ClassId::Road) {
        if (!on_road) return true;
      } else {
        return true;
      }
    }
    return false;
  };
  auto inside_road = [&](const SceneObject& a) {
    for (const auto& b : out)
      if (b.cls == ClassId::Road && a.x0 >= b.x0 && a.x1 <= b.x1 && a.y0 >= b.y0 && a.y1 <= b.y1) return true;
    return false;
  };
  for (int n = 0; n < count; ++n) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const int w = std::uniform_int_distribution<int>(wmin, wmax)(rng);
      const int h = std::uniform_int_distribution<int>(hmin, hmax)(rng);
      if (w >= W || h >= H) continue;
      SceneObject o;
      o.cls = cls;
      o.x0 = std::uniform_int_distribution<int>(0, W - w)(rng);
      o.y0 = std::uniform_int_distribution<int>(0, H - h)(rng);
      o.x1 = o.x0 + w;
      o.y1 = o.y0 + h;
      o.height = z(rng);
      o.tint = {tint(rng), tint(rng), tint(rng)};
      if (overlaps(o)) continue;
      if (on_road && !inside_road(o)) continue;
      out.push_back(o);
      break;
    }
  }
}

}  // namespace

const char* class_name(std::size_t id) {
  static constexpr const char* kNames[] = {"road", "building", "car", "tree", "terrain", "person"};
  return id < kNumClasses ? kNames[id] : "void";
}

const char* domain_name(Domain d) { return d == Domain::Source ? "s" : "t"; }

Domain parse_domain(const std::string& s) {
  if (s == "s") return Domain::Source;
  if (s == "t") return Domain::Target;
  throw SceneError("unknown domain tag '" + s + "'");
}

void validate(const SceneSpec& spec) {
  if (spec.height == 0 || spec.width == 0) throw SceneError("scene canvas must be non-empty");
  if (!(spec.camera_tilt > 0.0)) throw SceneError("camera tilt must be positive");
  if (!(spec.pixel_noise >= 0.0)) throw SceneError("pixel noise must be non-negative");
  for (const auto& o : spec.objects) {
    if (static_cast<std::size_t>(o.cls) >= kNumClasses) throw SceneError("object class out of range");
    if (o.x0 < 0 || o.y0 < 0 || o.x1 > static_cast<int>(spec.width) || o.y1 > static_cast<int>(spec.height) ||
        o.x0 >= o.x1 || o.y0 >= o.y1) {
      throw SceneError("object footprint outside canvas or empty");
    }
    if (o.height < 0.0) throw SceneError("object height must be non-negative");
  }
}

SceneSpec random_scene(std::size_t height, std::size_t width, std::uint64_t seed) {
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.seed = seed;
  std::mt19937_64 rng(mix_seed(seed, 3));
  spec.camera_tilt = std::uniform_real_distribution<double>(0.015, 0.03)(rng);

  const int W = static_cast<int>(width), H = static_cast<int>(height);
  auto& objs = spec.objects;
  std::uniform_real_distribution<double> tint(-0.03, 0.03);
  // One horizontal road, sometimes a crossing vertical one.
  {
    const int t = std::uniform_int_distribution<int>(std::max(3, H / 10), std::max(4, H / 6))(rng);
    const int y = std::uniform_int_distribution<int>(H / 4, std::max(H / 4, H - H / 4 - t))(rng);
    objs.push_back({ClassId::Road, 0, y, W, std::min(H, y + t), 0.0, {tint(rng), tint(rng), tint(rng)}});
    if (std::bernoulli_distribution(0.6)(rng)) {
      const int tv = std::uniform_int_distribution<int>(std::max(3, W / 12), std::max(4, W / 7))(rng);
      const int x = std::uniform_int_distribution<int>(W / 6, std::max(W / 6, W - W / 6 - tv))(rng);
      objs.push_back({ClassId::Road, x, 0, std::min(W, x + tv), H, 0.0, {tint(rng), tint(rng), tint(rng)}});
    }
  }
  const int s = std::max(1, W / 64);
  place(objs, rng, ClassId::Building, std::uniform_int_distribution<int>(2, 4)(rng), 9 * s, 18 * s, 8 * s, 15 * s,
        10.0, 28.0, spec, false);
  place(objs, rng, ClassId::Tree, std::uniform_int_distribution<int>(2, 5)(rng), 4 * s, 6 * s, 4 * s, 6 * s, 6.0, 10.0,
        spec, false);
  place(objs, rng, ClassId::Car, std::uniform_int_distribution<int>(2, 4)(rng), 4 * s, 7 * s, 3 * s, 4 * s, 3.0, 5.0,
        spec, true);
  place(objs, rng, ClassId::Person, std::uniform_int_distribution<int>(1, 3)(rng), 3 * s, 3 * s, 3 * s, 3 * s, 5.0,
        7.0, spec, false);
  validate(spec);
  return spec;
}

ViewTransform make_transform(const linalg::Matrix& m, std::uint8_t fill_class) {
  if (m.rows != 3 || m.cols != 3) throw SceneError("view transform must be 3x3");
  if (std::abs(linalg::determinant(m)) <= 1e-9) throw SceneError("view transform is singular");
  return {m, fill_class};
}

ViewTransform ground_to_top(const SceneSpec& spec) {
  const GroundCamera cam = camera_for(spec);
  const double c = cam.tilt, b = cam.bottom, vh = cam.horizon, cx = cam.cx;
  // Homography of the ground camera: top-view (X,Y,1) -> ground image (u,v,1).
  const double z = kGroundZoom;
  linalg::Matrix hg(3, 3, {z, -cx * c, cx * (1.0 + c * b) - z * cx,               //
                           0.0, -vh * c, vh * (1.0 + c * b) + b - vh,            //
                           0.0, -c, 1.0 + c * b});
  auto inv = linalg::invert(hg);
  if (!inv) throw SceneError("ground camera homography is singular");
  return make_transform(*inv);
}

std::size_t PermutationMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(source_index.begin(), source_index.end(), [](auto i) { return i >= 0; }));
}

PermutationMap build_permutation(const ViewTransform& t, std::size_t height, std::size_t width) {
  const auto inv = linalg::invert(t.matrix);
  if (!inv || std::abs(linalg::determinant(t.matrix)) <= 1e-9) throw SceneError("build_permutation: singular transform");
  const linalg::Matrix& m = *inv;
  PermutationMap perm{height, width, std::vector<std::int64_t>(height * width, -1)};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      const double w = m(2, 0) * px + m(2, 1) * py + m(2, 2);
      if (std::abs(w) < 1e-12) continue;
      const double sx = (m(0, 0) * px + m(0, 1) * py + m(0, 2)) / w;
      const double sy = (m(1, 0) * px + m(1, 1) * py + m(1, 2)) / w;
      const double rx = std::nearbyint(sx), ry = std::nearbyint(sy);
      if (rx < 0 || ry < 0 || rx >= static_cast<double>(width) || ry >= static_cast<double>(height)) continue;
      perm.source_index[y * width + x] = static_cast<std::int64_t>(ry) * static_cast<std::int64_t>(width) +
                                         static_cast<std::int64_t>(rx);
    }
  }
  return perm;
}

Tensor warp(const Tensor& field, const PermutationMap& perm, double fill) {
  if (field.rank() != 3 || field.dim(1) != perm.height || field.dim(2) != perm.width) {
    throw ShapeError("warp: field " + to_string(field.shape()) + " does not match permutation map " +
                     std::to_string(perm.height) + "x" + std::to_string(perm.width));
  }
  const std::size_t k = field.dim(0), hw = perm.height * perm.width;
  const auto src = field.data();
  std::vector<double> out(k * hw, fill);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      if (perm.source_index[i] >= 0) out[c * hw + i] = src[c * hw + static_cast<std::size_t>(perm.source_index[i])];
  return Tensor(field.shape(), std::move(out));
}

std::vector<std::uint8_t> warp_classes(const std::vector<std::uint8_t>& classes, const PermutationMap& perm,
                                       std::uint8_t fill) {
  if (classes.size() != perm.height * perm.width) throw ShapeError("warp_classes: size mismatch");
  std::vector<std::uint8_t> out(classes.size(), fill);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (perm.source_index[i] >= 0) out[i] = classes[static_cast<std::size_t>(perm.source_index[i])];
  return out;
}

SceneSample warp_sample(const SceneSample& sample, const PermutationMap& perm) {
  SceneSample out;
  out.image = warp(sample.image, perm, 0.0);
  out.label = warp(sample.label, perm, 0.0);
  out.classes = warp_classes(sample.classes, perm, kVoid);
  out.domain = Domain::Target;
  out.pair_key = sample.pair_key;
  return out;
}

Tensor one_hot(const std::vector<std::uint8_t>& classes, std::size_t height, std::size_t width) {
  const std::size_t hw = height * width;
  if (classes.size() != hw) throw ShapeError("one_hot: size mismatch");
  std::vector<double> v(kNumClasses * hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (classes[i] == kVoid) continue;
    if (classes[i] >= kNumClasses) throw SceneError("one_hot: class id out of range");
    v[classes[i] * hw + i] = 1.0;
  }
  return Tensor({kNumClasses, height, width}, std::move(v));
}

SceneSample render(const SceneSpec& spec, Domain view) {
  validate(spec);
  return view == Domain::Source ? render_ground(spec) : render_top(spec);
}

std::array<std::size_t, kNumClasses> class_histogram(const std::vector<std::uint8_t>& classes) {
  std::array<std::size_t, kNumClasses> h{};
  for (auto c : classes)
    if (c < kNumClasses) ++h[c];
  return h;
}

Dataset generate_dataset(std::size_t n_scenes, std::size_t height, std::size_t width, std::uint64_t seed) {
  if (n_scenes < 2) throw SceneError("generate_dataset: need at least 2 scenes");
  Dataset ds;
  ds.height = height;
  ds.width = width;
  ds.seed = seed;
  ds.n_scenes = n_scenes;
  const std::size_t n_test = std::max<std::size_t>(2, n_scenes / 4);
  const std::size_t n_pairs = std::max<std::size_t>(2, n_scenes / 4);
  auto spec_for = [&](std::size_t id) { return random_scene(height, width, mix_seed(seed, 1000 + id)); };

  for (std::size_t id = 0; id < n_scenes; ++id) {
    const SceneSpec spec = spec_for(id);
    const Domain d = (id % 2 == 0) ? Domain::Source : Domain::Target;
    SceneSample s = render(spec, d);
    s.pair_key = static_cast<int>(id);
    (d == Domain::Source ? ds.train_s : ds.train_t).push_back(std::move(s));
  }
  for (std::size_t k = 0; k < n_test; ++k) {
    const std::size_t id = n_scenes + k;
    SceneSample s = render(spec_for(id), Domain::Target);
    s.pair_key = static_cast<int>(id);
    ds.test_t.push_back(std::move(s));
  }
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const std::size_t id = n_scenes + n_test + k;
    const SceneSpec spec = spec_for(id);
    HiddenPair p;
    p.transform = ground_to_top(spec);
    p.source = render(spec, Domain::Source);
    p.source.pair_key = static_cast<int>(id);
    p.target = warp_sample(p.source, build_permutation(p.transform, height, width));
    ds.hidden_pairs.push_back(std::move(p));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void write_sample(const fs::path& dir, const std::string& split, const SceneSample& s, std::size_t h, std::size_t w) {
  const std::string name = std::to_string(s.pair_key) + ".png";
  fs::create_directories(dir / "images" / split);
  fs::create_directories(dir / "labels" / split);
  io::Image8 img{w, h, 3, std::vector<std::uint8_t>(h * w * 3)};
  const auto v = s.image.data();
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v[c * h * w + i] * 255.0));
  io::write_png(dir / "images" / split / name, img);
  io::write_png(dir / "labels" / split / name, io::Image8{w, h, 1, s.classes});
}

SceneSample read_sample(const fs::path& dir, const std::string& split, int id, Domain d, std::size_t h, std::size_t w) {
  const std::string name = std::to_string(id) + ".png";
  const io::Image8 img = io::read_png(dir / "images" / split / name);
  const io::Image8 lab = io::read_png(dir / "labels" / split / name);
  if (img.width != w || img.height != h || img.channels != 3 || lab.width != w || lab.height != h || lab.channels != 1) {
    throw SceneError("dataset sample " + split + "/" + name + " has unexpected dimensions");
  }
  std::vector<double> v(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * h * w + i] = static_cast<double>(img.pixels[i * 3 + c]) / 255.0;
  SceneSample s;
  s.image = Tensor({3, h, w}, std::move(v));
  s.classes = lab.pixels;
  s.label = one_hot(s.classes, h, w);
  s.domain = d;
  s.pair_key = id;
  return s;
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["height"] = ds.height;
  manifest["width"] = ds.width;
  manifest["num_classes"] = kNumClasses;
  manifest["seed"] = ds.seed;
  manifest["n_scenes"] = ds.n_scenes;
  auto split = [&](const std::string& name, const std::vector<SceneSample>& samples) {
    json entries = json::array();
    for (const auto& s : samples) {
      write_sample(dir, name, s, ds.height, ds.width);
      entries.push_back({{"id", s.pair_key}, {"domain", domain_name(s.domain)}});
    }
    manifest["splits"][name] = entries;
  };
  split("train_s", ds.train_s);
  split("train_t", ds.train_t);
  split("test_t", ds.test_t);
  write_json(dir / "manifest.json", manifest);

  json pairs;
  pairs["version"] = 1;
  pairs["pairs"] = json::array();
  for (const auto& p : ds.hidden_pairs) {
    write_sample(dir, "hidden_s", p.source, ds.height, ds.width);
    write_sample(dir, "hidden_t", p.target, ds.height, ds.width);
    pairs["pairs"].push_back({{"id", p.source.pair_key}, {"transform", p.transform.matrix.values}});
  }
  write_json(dir / "pairs.json", pairs);
}

Dataset load_dataset(const fs::path& dir, bool with_pairs) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw SceneError("missing dataset manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw SceneError(std::string("malformed dataset manifest: ") + e.what());
  }
  Dataset ds;
  ds.height = manifest.at("height").get<std::size_t>();
  ds.width = manifest.at("width").get<std::size_t>();
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.n_scenes = manifest.at("n_scenes").get<std::size_t>();
  auto split = [&](const std::string& name, std::vector<SceneSample>& out) {
    for (const auto& e : manifest.at("splits").at(name)) {
      out.push_back(read_sample(dir, name, e.at("id").get<int>(), parse_domain(e.at("domain").get<std::string>()),
                                ds.height, ds.width));
    }
  };
  split("train_s", ds.train_s);
  split("train_t", ds.train_t);
  split("test_t", ds.test_t);
  if (with_pairs) {
    std::ifstream pin(dir / "pairs.json");
    if (!pin) throw SceneError("missing pairs.json in " + dir.string());
    const json pairs = json::parse(pin);
    for (const auto& e : pairs.at("pairs")) {
      HiddenPair p;
      const int id = e.at("id").get<int>();
      p.source = read_sample(dir, "hidden_s", id, Domain::Source, ds.height, ds.width);
      p.target = read_sample(dir, "hidden_t", id, Domain::Target, ds.height, ds.width);
      p.transform = make_transform(linalg::Matrix(3, 3, e.at("transform").get<std::vector<double>>()));
      ds.hidden_pairs.push_back(std::move(p));
    }
  }
  return ds;
}

}  // namespace geico::scene
