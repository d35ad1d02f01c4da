#pragma once

// Synthetic cross-view benchmark: toy urban scenes seen from a ground camera
// (source view) and from above (target view), related on the ground plane by a
// homography.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geico/linalg.hpp"
#include "geico/tensor.hpp"

namespace geico::scene {

enum class ClassId : std::uint8_t { Road = 0, Building = 1, Car = 2, Tree = 3, Terrain = 4, Person = 5 };
inline constexpr std::size_t kNumClasses = 6;
inline constexpr std::uint8_t kVoid = 255;

const char* class_name(std::size_t id);

enum class Domain { Source, Target };
const char* domain_name(Domain d);
Domain parse_domain(const std::string& s);

class SceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Axis-aligned footprint in top-view pixel coordinates, half-open [x0,x1)x[y0,y1).
struct SceneObject {
  ClassId cls = ClassId::Terrain;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double height = 0.0;
  // Per-object colour jitter, one offset per RGB channel.
  std::array<double, 3> tint{0.0, 0.0, 0.0};
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
  // Perspective strength of the ground camera.
  double camera_tilt = 0.05;
  // Std-dev of additive sensor noise, in [0,1] intensity units.
  double pixel_noise = 0.03;
};

void validate(const SceneSpec& spec);
SceneSpec random_scene(std::size_t height, std::size_t width, std::uint64_t seed);

// 3x3 homography T_{s->t} mapping ground-view pixels to top-view pixels.
struct ViewTransform {
  linalg::Matrix matrix = linalg::Matrix::identity(3);
  std::uint8_t fill_class = kVoid;
};

ViewTransform make_transform(const linalg::Matrix& m, std::uint8_t fill_class = kVoid);
// Ground-plane homography of the scene's ground camera.
ViewTransform ground_to_top(const SceneSpec& spec);

// Target pixel -> source pixel index; -1 marks out-of-frame target pixels.
struct PermutationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int64_t> source_index;

  bool valid(std::size_t target) const { return source_index[target] >= 0; }
  std::size_t valid_count() const;
};

PermutationMap build_permutation(const ViewTransform& t, std::size_t height, std::size_t width);

struct SceneSample {
  Tensor image;                        // [3,H,W] in [0,1]
  Tensor label;                        // one-hot [C,H,W]; void pixels are all-zero
  std::vector<std::uint8_t> classes;   // H*W class ids, kVoid for void
  Domain domain = Domain::Source;
  int pair_key = -1;
};

SceneSample render(const SceneSpec& spec, Domain view);

// Applies a permutation map to a field [K,H,W]; masked pixels take `fill`.
Tensor warp(const Tensor& field, const PermutationMap& perm, double fill = 0.0);
std::vector<std::uint8_t> warp_classes(const std::vector<std::uint8_t>& classes, const PermutationMap& perm,
                                       std::uint8_t fill = kVoid);
// Image and label warped with the same map; the result is tagged as target view.
SceneSample warp_sample(const SceneSample& sample, const PermutationMap& perm);

Tensor one_hot(const std::vector<std::uint8_t>& classes, std::size_t height, std::size_t width);

struct HiddenPair {
  SceneSample source;   // x_s with its label
  SceneSample target;   // W x_s and W y_s
  ViewTransform transform;
};

struct Dataset {
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  std::size_t n_scenes = 0;
  std::vector<SceneSample> train_s;
  std::vector<SceneSample> train_t;
  std::vector<SceneSample> test_t;
  std::vector<HiddenPair> hidden_pairs;
};

Dataset generate_dataset(std::size_t n_scenes, std::size_t height, std::size_t width, std::uint64_t seed);

// images/{split}/{id}.png, labels/{split}/{id}.png, manifest.json and pairs.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
// Hidden pairs are only read when `with_pairs` is set.
Dataset load_dataset(const std::filesystem::path& dir, bool with_pairs = false);

// Per-class pixel counts over non-void pixels.
std::array<std::size_t, kNumClasses> class_histogram(const std::vector<std::uint8_t>& classes);

}  // namespace geico::scene
