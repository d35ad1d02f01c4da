#pragma once

// Domain-conditioned multi-scale normalising flow (Glow-style): per scale a
// squeeze, then steps of ActNorm -> invertible 1x1 conv -> affine coupling,
// and half the channels factored out between scales.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geico/linalg.hpp"
#include "geico/scene.hpp"
#include "geico/tensor.hpp"

namespace geico::flow {

using scene::Domain;

inline constexpr std::size_t kNumDomains = 2;

class FlowError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FlowConfig {
  std::size_t in_channels = 3;
  std::size_t scales = 2;
  std::size_t steps = 4;
  std::size_t hidden = 16;   // coupling subnet width
  bool squeeze = true;       // off only for the 1x1 toy flows
  std::uint64_t seed = 0;

  bool operator==(const FlowConfig&) const = default;
};

// Parameter indices of one flow step inside FlowModel::params.
struct StepLayout {
  std::size_t an_scale, an_bias;  // [1,C,1,1]
  std::size_t weight;             // [C,C]
  std::size_t w1, b1, w2, b2;     // subnet convs
  std::size_t channels;
};

struct FlowModel {
  FlowConfig config;
  std::vector<Tensor> params;
  std::vector<std::vector<StepLayout>> steps;  // [scale][step]
  // Per factored-out piece: index of a [kNumDomains, C_piece] prior-mean tensor.
  std::vector<std::size_t> prior_means;
  std::vector<std::size_t> piece_channels;
  bool initialized = false;
};

FlowModel make_flow(const FlowConfig& config);

struct LatentCode {
  std::vector<Tensor> pieces;  // one per scale, [N,C_k,H_k,W_k]
  Tensor logdet;               // [N]
  std::vector<Domain> domains;

  std::size_t batch() const { return logdet.dim(0); }
  std::size_t dim() const;  // per-sample latent dimension
};

// Layers, each in either direction. `p` is the parameter list to read from;
// pass tape leaves to differentiate, or model.params for a frozen pass.
struct LayerOut {
  Tensor y;
  Tensor logdet;  // [N] (or scalar broadcastable to [N])
};

Tensor domain_map(const std::vector<Domain>& domains, std::size_t h, std::size_t w);

LayerOut actnorm(const Tensor& x, const Tensor& scale, const Tensor& bias, bool reverse = false);
LayerOut invconv(const Tensor& x, const Tensor& weight, bool reverse = false);
struct CouplingParams {
  Tensor w1, b1, w2, b2;
};
LayerOut coupling(const Tensor& x, const std::vector<Domain>& domains, const CouplingParams& p, bool reverse = false);

LatentCode forward(const FlowModel& model, const std::vector<Tensor>& p, const Tensor& x,
                   const std::vector<Domain>& domains);
LatentCode forward(const FlowModel& model, const Tensor& x, const std::vector<Domain>& domains);
// Logdet of the returned code is that of the inverse map (negated forward logdet).
Tensor inverse(const FlowModel& model, const std::vector<Tensor>& p, const LatentCode& z);
Tensor inverse(const FlowModel& model, const LatentCode& z);

// Per-piece shapes for a given input; throws on indivisible spatial size.
std::vector<Shape> latent_shapes(const FlowModel& model, const Shape& input);

// Sets every ActNorm so its output has zero mean and unit variance per channel on `batch`.
void init_data_dependent(FlowModel& model, const Tensor& batch, const std::vector<Domain>& domains);

// Replaces any 1x1-conv weight with |det| <= 1e-12 by its nearest orthogonal matrix.
// Returns the number of weights changed.
std::size_t reproject_invconv(FlowModel& model);

// Per-sample vector of spatial channel means over all pieces: [N, sum C_k].
Tensor pooled_latent(const LatentCode& code);

std::uint64_t param_hash(const std::vector<Tensor>& params);

void save_flow(const std::filesystem::path& path, const FlowModel& model);
FlowModel load_flow(const std::filesystem::path& path);

}  // namespace geico::flow
