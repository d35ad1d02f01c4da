#pragma once

// Experiment configuration and the three training stages (image flow,
// segmentation flow, segmenter) plus evaluation, as in-memory functions that
// the CLI wraps with persistence.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "geico/flow.hpp"
#include "geico/gw.hpp"
#include "geico/scene.hpp"
#include "geico/seg.hpp"
#include "json.hpp"

namespace geico::pipeline {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class AdaptMode { SourceOnly, Direct, Flow };
const char* mode_name(AdaptMode m);
AdaptMode parse_mode(const std::string& s);

struct ExperimentConfig {
  // dataset
  std::size_t n_scenes = 240;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 6;
  // flows
  std::size_t flow_scales = 2;
  std::size_t flow_steps = 4;
  std::size_t flow_hidden = 16;
  // objective
  double alpha = 2.0;
  double beta = 100.0;
  double lambda_r = 1.0;
  double lambda_t = 0.1;
  double eps_gw = 0.05;
  AdaptMode mode = AdaptMode::Flow;
  bool true_source_labels = false;
  // budgets
  std::size_t batch = 8;
  std::size_t flow_x_steps = 600;
  std::size_t flow_y_steps = 300;
  std::size_t seg_pretrain_steps = 1200;
  std::size_t seg_adapt_steps = 300;
  // optimisation
  double flow_lr = 1e-3;
  double seg_lr = 3e-2;
  double momentum = 0.9;
  double clip = 50.0;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 100;

  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Unknown keys are rejected; missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
void validate(const ExperimentConfig& c);
std::uint64_t config_hash(const ExperimentConfig& c);

// Full-scale settings: batch 8, SGD lr 2.5e-4 for both flows and segmenter,
// and 4 scales with 32 flow steps per scale. Far slower than the defaults.
ExperimentConfig full_scale_preset();

scene::Dataset make_dataset(const ExperimentConfig& c);

// Deterministic mini-batch indices for (seed, stage, step), drawn without replacement.
std::vector<std::size_t> batch_indices(std::size_t pool, std::size_t k, std::uint64_t seed, std::uint64_t stage,
                                       std::size_t step);
Tensor stack_images(const std::vector<scene::SceneSample>& samples, const std::vector<std::size_t>& idx);
Tensor stack_labels(const std::vector<scene::SceneSample>& samples, const std::vector<std::size_t>& idx);

// One CSV row per logged step.
struct StageLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  std::string csv() const;
};

// Resumable training state: parameters, optimizer state and the next step.
struct TrainState {
  std::vector<Tensor> params;
  std::vector<Tensor> opt_state;
  std::size_t step = 0;
};

struct TrainControl {
  std::optional<TrainState> resume;
  std::function<void(const TrainState&)> on_checkpoint;  // every checkpoint_every steps
  std::function<void(std::size_t step, const gw::CouplingMatrix&)> on_plan;  // segmentation flow only
};

flow::FlowConfig flow_x_config(const ExperimentConfig& c);
flow::FlowConfig flow_y_config(const ExperimentConfig& c);
seg::SegConfig seg_config(const ExperimentConfig& c);

flow::FlowModel train_flow_x(const ExperimentConfig& c, const scene::Dataset& ds, StageLog* log = nullptr,
                             const TrainControl& ctl = {});
flow::FlowModel train_flow_y(const ExperimentConfig& c, const scene::Dataset& ds, StageLog* log = nullptr,
                             const TrainControl& ctl = {});

// Supervised pretraining for seg_pretrain_steps, then seg_adapt_steps under the
// configured adaptation mode. Both phases share one optimizer.
seg::SegmenterModel train_segmenter(const ExperimentConfig& c, const scene::Dataset& ds, const seg::Flows& flows,
                                    StageLog* log = nullptr, const TrainControl& ctl = {});

seg::MiouReport evaluate(const seg::SegmenterModel& model, const std::vector<scene::SceneSample>& samples);

// Target-view mIoU of one mode, reusing a pretrained segmenter state when given.
struct AdaptOutcome {
  seg::SegmenterModel model;
  seg::MiouReport report;
};
AdaptOutcome adapt_and_evaluate(const ExperimentConfig& c, const scene::Dataset& ds, const seg::Flows& flows,
                                const TrainState& pretrained);

// Run directory bookkeeping.
struct RunManifest {
  nlohmann::json config;
  std::string code_hash;
  std::uint64_t config_hash = 0;
  nlohmann::json stages = nlohmann::json::object();   // name -> bool
  nlohmann::json metrics = nlohmann::json::object();
};

const char* code_hash();
nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest load_manifest(const std::filesystem::path& path);

}  // namespace geico::pipeline
