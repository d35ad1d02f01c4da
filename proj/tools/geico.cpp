// geico: dataset generation, staged training, evaluation, oracle verification
// and parameter sweeps over one run directory.
//
// Exit codes: 0 ok, 1 verify failure, 2 usage/config, 3 missing prerequisite,
// 4 non-finite values, 5 corrupt or mismatched artifact.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "geico/checkpoint.hpp"
#include "geico/pipeline.hpp"
#include "geico/png_io.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using namespace geico;
using namespace geico::pipeline;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kMissing = 3, kNumeric = 4, kCorrupt = 5 };

struct MissingPrerequisite : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load_config(const Common& opt) {
  ExperimentConfig c;
  if (!opt.config_path.empty()) {
    std::ifstream in(opt.config_path);
    if (!in) throw ConfigError("cannot read config " + opt.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + opt.config_path + ": " + e.what());
    }
    c = config_from_json(j);
  }
  if (opt.seed) c.seed = *opt.seed;
  if (!opt.out.empty()) c.out_dir = opt.out;
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Run directory

class Run {
 public:
  explicit Run(fs::path dir) : dir_(std::move(dir)) {}

  fs::path path(const std::string& name) const { return dir_ / name; }
  fs::path data() const { return dir_ / "data"; }

  void require(const std::string& name, const std::string& why) const {
    if (!fs::exists(path(name))) throw MissingPrerequisite("missing " + path(name).string() + " (" + why + ")");
  }

  // The configuration the run was generated with. A different config is a usage
  // error: every later artifact must agree with the data on disk.
  ExperimentConfig resolve(const Common& opt) const {
    require("manifest.json", "run `geico generate` first");
    const RunManifest m = load_manifest(path("manifest.json"));
    ExperimentConfig stored = config_from_json(m.config);
    if (opt.config_path.empty() && !opt.seed) return stored;
    ExperimentConfig given = load_config(opt);
    given.out_dir = stored.out_dir;
    if (config_hash(given) != config_hash(stored))
      throw ConfigError("config differs from the one recorded in " + path("manifest.json").string() +
                        "; use a fresh --out");
    return stored;
  }

  void update(const std::function<void(RunManifest&)>& edit) const {
    RunManifest m = load_manifest(path("manifest.json"));
    edit(m);
    m.code_hash = code_hash();
    save_manifest(path("manifest.json"), m);
  }

 private:
  fs::path dir_;
};

scene::Dataset load_data(const Run& run) {
  run.require("data/manifest.json", "run `geico generate` first");
  return scene::load_dataset(run.data());
}

void save_state(const fs::path& path, const TrainState& s, std::uint64_t config_hash, const std::string& stage) {
  ckpt::Checkpoint ck;
  ck.manifest = {{"kind", "train_state"},
                 {"stage", stage},
                 {"step", s.step},
                 {"config_hash", config_hash},
                 {"n_params", s.params.size()}};
  ck.tensors = s.params;
  ck.tensors.insert(ck.tensors.end(), s.opt_state.begin(), s.opt_state.end());
  ckpt::save(path, ck);
}

TrainState load_state(const fs::path& path, std::uint64_t config_hash, const std::string& stage) {
  const ckpt::Checkpoint ck = ckpt::load(path);
  try {
    if (ck.manifest.at("kind") != "train_state" || ck.manifest.at("stage") != stage)
      throw ckpt::CorruptError(path.string() + " is not a " + stage + " training state");
    if (ck.manifest.at("config_hash").get<std::uint64_t>() != config_hash)
      throw ConfigError("resume: config hash of " + path.string() + " does not match the run config");
    const auto n = ck.manifest.at("n_params").get<std::size_t>();
    if (n > ck.tensors.size()) throw ckpt::CorruptError(path.string() + ": parameter count exceeds tensors");
    TrainState s;
    s.params.assign(ck.tensors.begin(), ck.tensors.begin() + static_cast<std::ptrdiff_t>(n));
    s.opt_state.assign(ck.tensors.begin() + static_cast<std::ptrdiff_t>(n), ck.tensors.end());
    s.step = ck.manifest.at("step").get<std::size_t>();
    return s;
  } catch (const json::exception& e) {
    throw ckpt::CorruptError(path.string() + ": " + e.what());
  }
}

// Rows of an earlier log that precede `step`, so a resumed log reads as one run.
std::vector<std::vector<double>> rows_before(const fs::path& csv, std::size_t step) {
  std::vector<std::vector<double>> rows;
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!row.empty() && row[0] < static_cast<double>(step)) rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_generate(const Common& opt) {
  const ExperimentConfig c = load_config(opt);
  const Run run(c.out_dir);
  fs::create_directories(run.data());
  const scene::Dataset ds = make_dataset(c);
  scene::save_dataset(ds, run.data());
  RunManifest m;
  m.config = to_json(c);
  m.code_hash = code_hash();
  m.config_hash = config_hash(c);
  m.stages["generate"] = true;
  save_manifest(run.path("manifest.json"), m);
  std::cout << "wrote " << ds.train_s.size() << " source, " << ds.train_t.size() << " target, " << ds.test_t.size()
            << " test scenes to " << run.data().string() << "\n";
  return kOk;
}

struct TrainOptions {
  std::string stage;
  bool resume = false;
  bool dump_sigma = false;
};

int cmd_train(const Common& opt, const TrainOptions& t) {
  const Run run(opt.out.empty() ? load_config(opt).out_dir : opt.out);
  const ExperimentConfig c = run.resolve(opt);
  const std::uint64_t hash = config_hash(c);
  const std::string state_file = t.stage + ".state.ckpt";
  const std::string log_file = t.stage + ".csv";

  if (t.stage == "flow_y") run.require("flow_x.ckpt", "train --stage flow_x first");
  if (t.stage == "segmenter" && c.mode == AdaptMode::Flow) {
    run.require("flow_x.ckpt", "train --stage flow_x first");
    run.require("flow_y.ckpt", "train --stage flow_y first");
  }
  const scene::Dataset ds = load_data(run);

  // Rows logged before a resume point are carried over so the CSV reads as one run.
  std::vector<std::vector<double>> earlier;
  StageLog log;
  TrainControl ctl;
  if (t.resume) {
    run.require(state_file, "nothing to resume");
    ctl.resume = load_state(run.path(state_file), hash, t.stage);
    earlier = rows_before(run.path(log_file), ctl.resume->step);
    std::cout << "resuming " << t.stage << " at step " << ctl.resume->step << "\n";
  }
  auto write_log = [&] {
    StageLog full = log;
    full.rows.insert(full.rows.begin(), earlier.begin(), earlier.end());
    ckpt::write_text_atomic(run.path(log_file), full.csv());
  };
  ctl.on_checkpoint = [&](const TrainState& s) {
    save_state(run.path(state_file), s, hash, t.stage);
    write_log();
  };
  if (t.dump_sigma) {
    fs::create_directories(run.path("sigma"));
    ctl.on_plan = [&](std::size_t step, const gw::CouplingMatrix& plan) {
      std::ostringstream out;
      out.precision(17);
      for (std::size_t i = 0; i < plan.sigma.rows; ++i)
        for (std::size_t j = 0; j < plan.sigma.cols; ++j) out << plan.sigma(i, j) << (j + 1 == plan.sigma.cols ? "\n" : ",");
      ckpt::write_text_atomic(run.path("sigma") / ("sigma_" + std::to_string(step) + ".csv"), out.str());
    };
  }

  if (t.stage == "flow_x") {
    flow::save_flow(run.path("flow_x.ckpt"), train_flow_x(c, ds, &log, ctl));
  } else if (t.stage == "flow_y") {
    flow::save_flow(run.path("flow_y.ckpt"), train_flow_y(c, ds, &log, ctl));
  } else {
    std::optional<flow::FlowModel> gx, gy;
    if (c.mode == AdaptMode::Flow) {
      gx = flow::load_flow(run.path("flow_x.ckpt"));
      gy = flow::load_flow(run.path("flow_y.ckpt"));
    }
    seg::save_segmenter(run.path("seg.ckpt"),
                        train_segmenter(c, ds, {gx ? &*gx : nullptr, gy ? &*gy : nullptr}, &log, ctl));
  }
  write_log();
  run.update([&](RunManifest& m) { m.stages[t.stage] = true; });
  std::cout << t.stage << " done; log in " << run.path(log_file).string() << "\n";
  return kOk;
}

const std::vector<scene::SceneSample>& split(const scene::Dataset& ds, const std::string& name) {
  if (name == "train_s") return ds.train_s;
  if (name == "train_t") return ds.train_t;
  if (name == "test_t") return ds.test_t;
  throw ConfigError("unknown split '" + name + "' (train_s, train_t, test_t)");
}

void write_predictions(const fs::path& dir, const seg::SegmenterModel& model,
                       const std::vector<scene::SceneSample>& samples) {
  static constexpr std::uint8_t kColours[scene::kNumClasses][3] = {
      {128, 64, 128}, {70, 70, 70}, {0, 0, 142}, {107, 142, 35}, {152, 251, 152}, {220, 20, 60}};
  fs::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& img = samples[i].image;
    const std::size_t h = img.dim(1), w = img.dim(2);
    const auto pred = seg::predict_classes(seg::segment(model, reshape(img, {1, 3, h, w})));
    io::Image8 out{w, h, 3, std::vector<std::uint8_t>(h * w * 3)};
    for (std::size_t p = 0; p < h * w; ++p)
      std::copy_n(kColours[pred[p] % scene::kNumClasses], 3, out.pixels.begin() + static_cast<std::ptrdiff_t>(3 * p));
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    io::write_png(dir / name, out);
  }
}

struct EvalOptions {
  std::string split = "test_t";
  std::string checkpoint;
  bool png = false;
};

int cmd_eval(const Common& opt, const EvalOptions& e) {
  const Run run(opt.out.empty() ? load_config(opt).out_dir : opt.out);
  const ExperimentConfig c = run.resolve(opt);
  const fs::path ckpt_path = e.checkpoint.empty() ? run.path("seg.ckpt") : fs::path(e.checkpoint);
  if (!fs::exists(ckpt_path)) throw MissingPrerequisite("missing " + ckpt_path.string() + " (train --stage segmenter first)");
  const seg::SegmenterModel model = seg::load_segmenter(ckpt_path);
  const scene::Dataset ds = load_data(run);
  const auto& samples = split(ds, e.split);
  if (model.config.classes != c.classes)
    throw ckpt::CorruptError(ckpt_path.string() + " has " + std::to_string(model.config.classes) +
                             " classes but the dataset has " + std::to_string(c.classes));
  const seg::MiouReport report = evaluate(model, samples);
  const std::string csv = seg::miou_csv(report);
  ckpt::write_text_atomic(run.path("eval_" + e.split + ".csv"), csv);
  if (e.png) write_predictions(run.path("pred_" + e.split), model, samples);
  run.update([&](RunManifest& m) { m.metrics["miou_" + e.split] = report.mean; });
  std::cout << csv;
  return kOk;
}

struct VerifyOptions {
  std::string suite = "all";
  std::string inject;
  std::string report;
};

int cmd_verify(const Common& opt, const VerifyOptions& v) {
  verify::Options o;
  if (opt.seed) o.seed = *opt.seed;
  if (v.inject == "trace-sign-flip") o.w2 = verify::w2_trace_sign_flip;
  else if (!v.inject.empty()) throw ConfigError("unknown mutation '" + v.inject + "'");
  std::vector<verify::Check> checks;
  try {
    checks = verify::run(v.suite, o);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const json rep = verify::report(v.suite, checks);
  if (!v.report.empty()) ckpt::write_text_atomic(v.report, rep.dump(2) + "\n");
  std::cout << rep.dump(2) << "\n";
  for (const auto& c : checks)
    if (!c.pass) std::cerr << "FAIL " << c.suite << "/" << c.name << ": " << c.value << " " << c.relation << " " << c.threshold << "\n";
  return rep["pass"].get<bool>() ? kOk : kVerifyFailed;
}

struct SweepOptions {
  std::string param = "alpha";
  std::vector<double> values{0.1, 0.5, 1, 1.5, 2, 2.5, 3};
};

// Pretrains once, then adapts from that state for every value of the swept parameter.
int cmd_sweep(const Common& opt, const SweepOptions& s) {
  const Run run(opt.out.empty() ? load_config(opt).out_dir : opt.out);
  const ExperimentConfig c = run.resolve(opt);
  if (s.param != "alpha" && s.param != "lambda_t") throw ConfigError("sweep --param must be alpha or lambda_t");
  run.require("flow_x.ckpt", "train --stage flow_x first");
  run.require("flow_y.ckpt", "train --stage flow_y first");
  const scene::Dataset ds = load_data(run);
  const flow::FlowModel gx = flow::load_flow(run.path("flow_x.ckpt")), gy = flow::load_flow(run.path("flow_y.ckpt"));

  ExperimentConfig pre = c;
  pre.seg_adapt_steps = 0;
  TrainState pretrained;
  TrainControl ctl;
  ctl.on_checkpoint = [&](const TrainState& st) { pretrained = st; };
  train_segmenter(pre, ds, {}, nullptr, ctl);

  std::ostringstream csv;
  csv.precision(10);
  csv << s.param << ",miou\n";
  for (double v : s.values) {
    ExperimentConfig cv = c;
    (s.param == "alpha" ? cv.alpha : cv.lambda_t) = v;
    validate(cv);
    const double miou = adapt_and_evaluate(cv, ds, {&gx, &gy}, pretrained).report.mean;
    csv << v << "," << miou << "\n";
    std::cout << s.param << "=" << v << " miou=" << miou << std::endl;
  }
  ckpt::write_text_atomic(run.path("sweep_" + s.param + ".csv"), csv.str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-view segmentation adaptation lab"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "JSON experiment config");
    cmd->add_option("--seed", common.seed, "override the config seed");
    cmd->add_option("--out", common.out, "run directory (default: config out_dir)");
  };

  auto* gen = app.add_subcommand("generate", "render the synthetic two-view dataset");
  add_common(gen);

  TrainOptions topt;
  auto* train = app.add_subcommand("train", "train one stage");
  add_common(train);
  train->add_option("--stage", topt.stage, "flow_x | flow_y | segmenter")
      ->required()
      ->check(CLI::IsMember({"flow_x", "flow_y", "segmenter"}));
  train->add_flag("--resume", topt.resume, "continue from the last stage checkpoint");
  train->add_flag("--dump-sigma", topt.dump_sigma, "write every association matrix to sigma/");

  EvalOptions eopt;
  auto* eval = app.add_subcommand("eval", "per-class IoU and mIoU of a segmenter");
  add_common(eval);
  eval->add_option("--split", eopt.split, "train_s | train_t | test_t");
  eval->add_option("--checkpoint", eopt.checkpoint, "segmenter checkpoint (default: <out>/seg.ckpt)");
  eval->add_flag("--png", eopt.png, "write colour-coded predictions");

  VerifyOptions vopt;
  auto* ver = app.add_subcommand("verify", "run the oracle suites");
  add_common(ver);
  ver->add_option("--suite", vopt.suite, "all | flows | distances | gw | bounds");
  ver->add_option("--inject", vopt.inject, "deliberately break a component (trace-sign-flip)");
  ver->add_option("--report", vopt.report, "also write the JSON report here");

  SweepOptions sopt;
  auto* sweep = app.add_subcommand("sweep", "adapt from one pretrained segmenter for each parameter value");
  add_common(sweep);
  sweep->add_option("--param", sopt.param, "alpha | lambda_t");
  sweep->add_option("--values", sopt.values, "comma-separated values")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(common);
    if (train->parsed()) return cmd_train(common, topt);
    if (eval->parsed()) return cmd_eval(common, eopt);
    if (ver->parsed()) return cmd_verify(common, vopt);
    if (sweep->parsed()) return cmd_sweep(common, sopt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "error: non-finite value: " << e.what() << "\n";
    return kNumeric;
  } catch (const ckpt::CorruptError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCorrupt;
  }
  return kUsage;
}
