#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "geico/checkpoint.hpp"
#include "geico/pipeline.hpp"

using namespace geico;
using namespace geico::pipeline;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.n_scenes = 16;
  c.height = c.width = 16;
  c.flow_steps = 1;
  c.flow_hidden = 4;
  c.batch = 4;
  c.flow_x_steps = 6;
  c.flow_y_steps = 4;
  c.seg_pretrain_steps = 4;
  c.seg_adapt_steps = 2;
  c.log_every = 1;
  c.checkpoint_every = 3;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("config json round trip") {
  ExperimentConfig c = tiny();
  c.alpha = 1.5;
  c.mode = AdaptMode::Direct;
  c.true_source_labels = true;
  c.out_dir = "somewhere/else";
  const nlohmann::json j = to_json(c);
  CHECK(config_from_json(j) == c);
  CHECK(config_from_json(nlohmann::json::parse(j.dump())) == c);
  CHECK(config_from_json(nlohmann::json::object()) == ExperimentConfig{});

  // Missing keys keep defaults.
  const ExperimentConfig partial = config_from_json({{"alpha", 0.5}});
  CHECK(partial.alpha == 0.5);
  CHECK(partial.beta == 100.0);

  CHECK_THROWS_AS(config_from_json({{"alhpa", 0.5}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"alpha", "big"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"mode", "joint"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("config validation and hashing") {
  CHECK_NOTHROW(validate(ExperimentConfig{}));
  auto bad = [](auto edit) {
    ExperimentConfig c;
    edit(c);
    return c;
  };
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.n_scenes = 0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.height = 40; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.alpha = 0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.beta = -1; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.batch = 1; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.momentum = 1.0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](auto& c) { c.classes = 5; })), ConfigError);

  CHECK(config_hash(tiny()) == config_hash(tiny()));
  CHECK(config_hash(tiny()) != config_hash(bad([](auto& c) { c.seed = 1; })));
  CHECK(config_hash(tiny()) == config_hash(bad([](auto& c) { c = tiny(); c.out_dir = "elsewhere"; })));
}

TEST_CASE("defaults and full-scale preset") {
  const ExperimentConfig d;
  CHECK(d.alpha == 2.0);
  CHECK(d.beta == 100.0);
  CHECK(d.batch == 8);
  CHECK(d.height == 64);
  CHECK(d.classes == 6);
  CHECK(d.flow_scales == 2);
  CHECK(d.flow_steps == 4);

  const ExperimentConfig p = full_scale_preset();
  CHECK(p.flow_lr == 2.5e-4);
  CHECK(p.seg_lr == 2.5e-4);
  CHECK(p.flow_scales == 4);
  CHECK(p.flow_steps == 32);
  CHECK(p.batch == 8);
  CHECK(p.beta == 100.0);
  CHECK(p.alpha == 2.0);
}

TEST_CASE("batch indices") {
  const auto a = batch_indices(20, 8, 3, 1, 7);
  CHECK(a == batch_indices(20, 8, 3, 1, 7));
  CHECK(a != batch_indices(20, 8, 3, 1, 8));
  CHECK(a != batch_indices(20, 8, 3, 2, 7));
  CHECK(a != batch_indices(20, 8, 4, 1, 7));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 8);
  for (auto i : a) CHECK(i < 20);

  const auto all = batch_indices(5, 5, 0, 0, 0);
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == 5);
  CHECK_THROWS_AS(batch_indices(4, 5, 0, 0, 0), ConfigError);
}

TEST_CASE("stacking samples") {
  const ExperimentConfig c = tiny();
  const auto ds = make_dataset(c);
  CHECK(ds.train_s.size() == 8);
  CHECK(ds.train_t.size() == 8);
  const Tensor x = stack_images(ds.train_s, {2, 0});
  CHECK(x.shape() == Shape{2, 3, 16, 16});
  CHECK(slice(x, 0, 0, 1).to_vector() == ds.train_s[2].image.to_vector());
  const Tensor y = stack_labels(ds.train_t, {1});
  CHECK(y.shape() == Shape{1, 6, 16, 16});
  CHECK_THROWS_AS(stack_images(ds.train_s, {}), ConfigError);
}

TEST_CASE("resumed stages continue the uninterrupted run") {
  const ExperimentConfig c = tiny();
  const auto ds = make_dataset(c);

  auto check_resume = [&](auto train) {
    std::vector<TrainState> saved;
    TrainControl ctl;
    ctl.on_checkpoint = [&](const TrainState& s) { saved.push_back(s); };
    StageLog full_log;
    const auto full = train(&full_log, ctl);
    REQUIRE(saved.size() >= 2);
    CHECK(saved.front().step == 3);

    TrainControl again;
    again.resume = saved.front();
    StageLog resumed_log;
    const auto resumed = train(&resumed_log, again);
    CHECK(flow::param_hash(resumed.params) == flow::param_hash(full.params));
    // The first resumed loss is the uninterrupted run's loss at the same step.
    REQUIRE(!resumed_log.rows.empty());
    CHECK(resumed_log.rows.front()[0] == 3.0);
    CHECK(resumed_log.rows.front() == full_log.rows[3]);
  };
  check_resume([&](StageLog* log, const TrainControl& ctl) { return train_flow_x(c, ds, log, ctl); });
  check_resume([&](StageLog* log, const TrainControl& ctl) { return train_flow_y(c, ds, log, ctl); });

  const flow::FlowModel gx = train_flow_x(c, ds), gy = train_flow_y(c, ds);
  check_resume([&](StageLog* log, const TrainControl& ctl) { return train_segmenter(c, ds, {&gx, &gy}, log, ctl); });
}

TEST_CASE("pipeline determinism") {
  ExperimentConfig c = tiny();
  const auto ds = make_dataset(c);
  std::vector<std::size_t> plan_steps;
  TrainControl ctl;
  ctl.on_plan = [&](std::size_t step, const gw::CouplingMatrix& plan) {
    plan_steps.push_back(step);
    CHECK(plan.sigma.rows == c.batch);
  };
  const flow::FlowModel gx = train_flow_x(c, ds), gy = train_flow_y(c, ds, nullptr, ctl);
  CHECK(plan_steps.size() == c.flow_y_steps);
  CHECK(flow::param_hash(gx.params) == flow::param_hash(train_flow_x(c, ds).params));
  CHECK(flow::param_hash(gy.params) == flow::param_hash(train_flow_y(c, ds).params));

  const auto m1 = train_segmenter(c, ds, {&gx, &gy}), m2 = train_segmenter(c, ds, {&gx, &gy});
  CHECK(seg::param_hash(m1) == seg::param_hash(m2));
  CHECK(evaluate(m1, ds.test_t).mean == evaluate(m2, ds.test_t).mean);

  // The adaptation mode changes only the adaptation phase.
  c.mode = AdaptMode::SourceOnly;
  CHECK(seg::param_hash(train_segmenter(c, ds, {&gx, &gy})) != seg::param_hash(m1));
  c.mode = AdaptMode::Flow;
  CHECK_THROWS_AS(train_segmenter(c, ds, {}), ConfigError);
}

TEST_CASE("run manifest") {
  const auto dir = std::filesystem::temp_directory_path() / "geico_test_pipeline";
  std::filesystem::create_directories(dir);
  RunManifest m;
  m.config = to_json(tiny());
  m.code_hash = code_hash();
  m.config_hash = config_hash(tiny());
  m.stages["flow_x"] = true;
  m.metrics["miou"] = 0.25;
  save_manifest(dir / "manifest.json", m);
  const RunManifest back = load_manifest(dir / "manifest.json");
  CHECK(to_json(back) == to_json(m));
  CHECK(config_from_json(back.config) == tiny());
  CHECK(std::string(code_hash()).size() == 40);

  std::ofstream(dir / "broken.json") << "{\"config\": ";
  CHECK_THROWS_AS(load_manifest(dir / "broken.json"), ckpt::CorruptError);
  std::ofstream(dir / "partial.json") << "{\"config\": {}}";
  CHECK_THROWS_AS(load_manifest(dir / "partial.json"), ckpt::CorruptError);
  CHECK_THROWS_AS(load_manifest(dir / "missing.json"), ckpt::CorruptError);
  std::filesystem::remove_all(dir);
}
