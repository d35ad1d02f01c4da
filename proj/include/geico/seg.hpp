#pragma once

// The adapted segmenter: a small strided conv encoder with a dilated middle
// block, a bilinear decoder and a shallow full-resolution skip branch for
// small objects, trained with cross entropy on the labelled
// view plus the cross-view distance-consistency loss on unpaired batches.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "geico/flow.hpp"
#include "geico/geo.hpp"
#include "geico/optim.hpp"
#include "geico/tensor.hpp"

namespace geico::seg {

class SegError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SegConfig {
  std::size_t classes = 6;
  std::size_t width1 = 16;
  std::size_t width2 = 32;
  std::size_t skip_width = 8;  // full-resolution branch; 0 disables it
  std::uint64_t seed = 0;

  bool operator==(const SegConfig&) const = default;
};

struct SegmenterModel {
  SegConfig config;
  std::vector<Tensor> params;  // w/b pairs: enc1, enc2, dilated, head, then skip conv and skip head
};

SegmenterModel make_segmenter(const SegConfig& config);

// Raw class scores [N,C,H,W] for images [N,3,H,W]; H and W must be multiples of 4.
Tensor logits(const SegmenterModel& model, const std::vector<Tensor>& p, const Tensor& images);
Tensor segment(const SegmenterModel& model, const Tensor& images);

// Argmax per pixel, row-major over [N,H,W].
std::vector<std::uint8_t> predict_classes(const Tensor& scores);

// Mean per-pixel cross entropy over non-void pixels (void = all-zero one-hot).
// The probability form clips predictions into [1e-12, 1 - 1e-6].
Tensor cross_entropy(const Tensor& probs, const Tensor& onehot);
Tensor cross_entropy_logits(const Tensor& scores, const Tensor& onehot);

// Flow-space views of a batch: images and soft label maps pooled by `pool`.
inline constexpr std::size_t kFlowPool = 4;
Tensor image_flow_input(const Tensor& images, std::size_t pool = kFlowPool);
Tensor label_flow_input(const Tensor& probs, std::size_t pool = kFlowPool);

struct Flows {
  const flow::FlowModel* gx = nullptr;  // images
  const flow::FlowModel* gy = nullptr;  // segmentations
};

struct GeicoTerms {
  Tensor loss;  // scalar
  geo::ClampedDistance dx;
  geo::ClampedDistance dy;
};

// (min(Dx, beta) - alpha * min(Dy, beta))^2 from precomputed distances.
Tensor geico_from_distances(const Tensor& dx, const Tensor& dy, double alpha);

// Source and target batches are unpaired; predictions are softmax maps at image resolution.
GeicoTerms geico_loss(const Tensor& xs, const Tensor& ys_pred, const Tensor& xt, const Tensor& yt_pred,
                      const Flows& flows, double alpha, double beta = geo::kBeta,
                      const geo::W2Fn& w2 = geo::w2_gaussian);

struct AdaptConfig {
  double alpha = 2.0;
  double beta = geo::kBeta;
  double lambda_t = 0.1;
  bool true_source_labels = false;  // use ground truth rather than F(x_s) inside D_y
  // Distances straight on pooled pixels / label maps instead of flow latents.
  bool direct_distances = false;
};

struct AdaptBatch {
  Tensor xs;   // [N,3,H,W]
  Tensor ys;   // one-hot [N,C,H,W]
  Tensor xt;   // [M,3,H,W]
};

struct AdaptStats {
  double ls = 0.0;
  double lt = 0.0;
  double total = 0.0;
  double dx = 0.0;  // raw distances, before clamping
  double dy = 0.0;
  double grad_norm = 0.0;
};

// total = L_s + lambda_t * L_t; one step on the segmenter only. L_t is skipped
// entirely when lambda_t is 0.
AdaptStats adapt_step(SegmenterModel& model, optim::Optimizer& opt, const Flows& flows, const AdaptBatch& batch,
                      const AdaptConfig& cfg);

// Distances on pooled pixels and label maps, used by the direct-distance ablation.
GeicoTerms direct_geico_loss(const Tensor& xs, const Tensor& ys_pred, const Tensor& xt, const Tensor& yt_pred,
                             double alpha, double beta = geo::kBeta);

struct MiouReport {
  std::vector<double> iou;  // NaN for classes absent from prediction and truth
  double mean = 0.0;
};

// Void pixels in `truth` are ignored.
MiouReport miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, std::size_t classes);

std::string miou_csv(const MiouReport& report);

std::uint64_t param_hash(const SegmenterModel& model);
void save_segmenter(const std::filesystem::path& path, const SegmenterModel& model);
SegmenterModel load_segmenter(const std::filesystem::path& path);

}  // namespace geico::seg
