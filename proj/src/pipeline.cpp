#include "qdtune/pipeline.hpp"

#include "qdtune/autotune.hpp"
#include "qdtune/dataset.hpp"
#include "qdtune/dqc.hpp"
#include "qdtune/dse.hpp"

#include <fstream>
#include <map>
#include <numeric>
#include <tuple>

#ifndef QDTUNE_VERSION
#define QDTUNE_VERSION "unknown"
#endif

namespace qdtune::pipeline {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  f << j.dump(2) << "\n";
  if (!f) throw Error("write failed for " + path.string());
}

std::vector<data::Sample> load_all(const fs::path& dir, const std::vector<std::size_t>& indices) {
  data::DatasetReader reader(dir);
  std::vector<data::Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(reader.read(i));
  return out;
}

std::vector<data::Sample> load_split(const fs::path& dir, const std::string& split) {
  data::DatasetReader reader(dir);
  return load_all(dir, reader.split(split));
}

std::vector<data::Sample> load_everything(const fs::path& dir) {
  data::DatasetReader reader(dir);
  std::vector<std::size_t> all(reader.size());
  std::iota(all.begin(), all.end(), 0);
  return load_all(dir, all);
}

}  // namespace

std::string to_string(Scale s) {
  switch (s) {
    case Scale::Smoke: return "smoke";
    case Scale::Desk: return "desk";
    case Scale::Paper: return "paper";
  }
  return "?";
}

Scale parse_scale(const std::string& s) {
  if (s == "smoke") return Scale::Smoke;
  if (s == "desk") return Scale::Desk;
  if (s == "paper") return Scale::Paper;
  throw std::invalid_argument("unknown scale '" + s + "' (expected smoke, desk or paper)");
}

std::string version() { return QDTUNE_VERSION; }

ReproduceConfig ReproduceConfig::for_scale(Scale scale, std::uint64_t seed) {
  ReproduceConfig c;
  c.seed = seed;
  c.scale = scale;
  switch (scale) {
    case Scale::Smoke:
      c.train_count = 120;
      c.test_count = 60;
      c.sweep_count = 400;
      c.dqc_count = 60;
      c.holdout_count = 60;
      c.dse_models = 2;
      c.dse_epochs = 2;
      c.dqc_epochs = 1;
      c.map_rows = 62;
      c.map_cols = 66;
      c.min_class_samples = 10;
      break;
    case Scale::Desk: break;
    case Scale::Paper:
      c.train_count = 16000;
      c.test_count = 2000;
      c.sweep_count = 115000;
      c.dqc_count = 115000;
      c.holdout_count = 5000;
      c.dse_models = 20;
      c.dqc_models = 1;
      c.dqc_epochs = 30;
      break;
  }
  return c;
}

nlohmann::json ReproduceConfig::to_json() const {
  nlohmann::json noise_cfg = nlohmann::json::object();
  const auto kv = base_noise.to_config();
  for (const auto& [k, v] : kv.values()) noise_cfg[k] = v;
  return {{"seed", seed},
          {"scale", pipeline::to_string(scale)},
          {"base_noise", noise_cfg},
          {"train_count", train_count},
          {"test_count", test_count},
          {"sweep_count", sweep_count},
          {"dqc_count", dqc_count},
          {"holdout_count", holdout_count},
          {"dse_models", dse_models},
          {"dse_epochs", dse_epochs},
          {"dqc_models", dqc_models},
          {"dqc_epochs", dqc_epochs},
          {"map_rows", map_rows},
          {"map_cols", map_cols},
          {"map_max_scale", map_max_scale},
          {"mixed_threshold", mixed_threshold},
          {"min_class_samples", min_class_samples}};
}

sim::DeviceParams map_device() {
  sim::DeviceParams d;
  d.charging_energy_left = 3.5;
  d.charging_energy_right = 3.5;
  d.mutual_charging_energy = 0.6;
  d.lever_arm_matrix << 0.08, 0.02, 0.02, 0.08;
  d.sensor_coupling << 1.0, 0.7;
  d.sensor_gate_coupling << 0.002, 0.002;
  return d;
}

GridD noise_gradient_scan(const sim::DeviceParams& device, int rows, int cols, double max_scale,
                          const noise::NoiseParams& noise, std::uint64_t seed) {
  if (rows < 2 || cols < 2) throw std::invalid_argument("scan needs at least 2 x 2 pixels");
  if (!(max_scale >= 0.0)) throw std::invalid_argument("max_scale must be >= 0");
  // simulate_scan only does square windows, so the rectangular scan is built here
  sim::StabilityScan scan;
  scan.device = device;
  scan.window = {20.0, 20.0 + 2.0 * (cols - 1), 20.0, 20.0 + 2.0 * (rows - 1), cols};
  scan.sensor.resize(rows, cols);
  scan.state_map.resize(rows, cols);
  scan.occupancy_left.resize(rows, cols);
  scan.occupancy_right.resize(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double v1 = 20.0 + 2.0 * c, v2 = 20.0 + 2.0 * r;
      const auto occ = sim::compute_charge_config(device, v1, v2);
      scan.sensor(r, c) = sim::sensor_signal(device, occ, v1, v2);
      scan.state_map(r, c) = static_cast<std::uint8_t>(sim::classify_pixel(device, occ));
      scan.occupancy_left(r, c) = occ.left;
      scan.occupancy_right(r, c) = occ.right;
    }
  GridD scale_map(rows, cols);
  for (int c = 0; c < cols; ++c) scale_map.col(c).setConstant(max_scale * c / (cols - 1));
  return noise::apply_noise(scan, noise, seed, scale_map);
}

nlohmann::json MapSummary::to_json() const {
  return {{"rows", rows},
          {"cols", cols},
          {"margin", margin},
          {"moderate_mixed_iou", moderate_mixed_iou},
          {"moderate_pixels", moderate_pixels},
          {"mixed_pixels", mixed_pixels}};
}

MapSummary render_maps(std::vector<nn::Network<float>>& dse, std::vector<nn::Network<float>>& dqc,
                       const GridD& sensor, const fs::path& out, double mixed_threshold) {
  const auto map =
      tune::evaluate_map(sensor, 2.0, tune::batch_state_estimator(dse), tune::batch_quality_estimator(dqc));
  const Grid<std::uint8_t> moderate = (map.quality == static_cast<std::uint8_t>(Quality::Moderate)).cast<std::uint8_t>();
  const auto mixed = map.mixed_mask(mixed_threshold);
  MapSummary s;
  s.rows = map.rows;
  s.cols = map.cols;
  s.margin = map.margin;
  s.moderate_mixed_iou = tune::iou(moderate, mixed);
  s.moderate_pixels = static_cast<std::size_t>(moderate.cast<int>().sum());
  s.mixed_pixels = static_cast<std::size_t>(mixed.cast<int>().sum());

  fs::create_directories(out);
  tune::write_pgm(out / "sensor.pgm", sensor);
  tune::write_scan(out / "sensor.f32", sensor);
  tune::write_ppm(out / "state_map.ppm", tune::render_state_map(map));
  tune::write_ppm(out / "quality_map.ppm", tune::render_quality_map(map));
  tune::write_tensor(out / "predictions.f32", map.predictions, {map.rows, map.cols, kStateCount});
  nn::Mat<float> q = map.quality.cast<float>().matrix();
  q.transposeInPlace();  // column-major storage of the transpose is row-major order
  tune::write_tensor(out / "quality.f32", q, {map.rows, map.cols});
  write_json(out / "map_summary.json", s.to_json());
  return s;
}

void write_run_manifest(const fs::path& out, const std::string& command, const nlohmann::json& config) {
  fs::create_directories(out);
  std::ofstream f(out / "run_manifest.json", std::ios::trunc);
  f << nlohmann::json{{"command", command}, {"version", version()}, {"config", config}}.dump(2) << "\n";
  if (!f) throw Error("write failed for " + (out / "run_manifest.json").string());
}


nlohmann::json reproduce(const ReproduceConfig& cfg, const fs::path& out,
                         const std::function<void(const std::string&)>& log_fn) {
  auto log = [&](const std::string& s) {
    if (log_fn) log_fn(s);
  };
  fs::create_directories(out);
  const fs::path marker = out / "INCOMPLETE";
  { std::ofstream(marker) << "reproduce run in progress or failed\n"; }
  write_run_manifest(out, "reproduce", cfg.to_json());

  const fs::path ds = out / "datasets", models = out / "models", reports = out / "reports";
  auto dataset_cfg = [&](data::DatasetKind kind, std::size_t count, std::uint64_t stream) {
    data::DatasetConfig c;
    c.kind = kind;
    c.count = count;
    c.seed = derive_seed(cfg.seed, stream);
    c.base_noise = cfg.base_noise;
    return c;
  };

  // 1. datasets
  log("generating datasets");
  auto noiseless = dataset_cfg(data::DatasetKind::Noiseless, cfg.train_count, 1);
  noiseless.splits = {0.9, 0.1, 0.0};
  auto combined = dataset_cfg(data::DatasetKind::Combined, cfg.train_count, 2);
  combined.splits = {0.9, 0.1, 0.0};
  auto test = dataset_cfg(data::DatasetKind::Combined, cfg.test_count, 3);
  test.splits = {0.0, 0.0, 1.0};
  auto sweep = dataset_cfg(data::DatasetKind::ThresholdSweep, cfg.sweep_count, 4);
  for (const auto& [name, c] : {std::pair{"noiseless_train", noiseless}, std::pair{"combined_train", combined},
                                std::pair{"combined_test", test}, std::pair{"sweep_calibration", sweep}})
    data::generate_dataset(c, ds / name, cfg.workers);

  // 2. DSE ensembles: A on noiseless data, G on combined noise
  nlohmann::json report;
  std::map<std::string, dse::TrainedEnsemble> ensembles;
  const auto test_images = dse::state_images(load_split(ds / "combined_test", "test"), false);
  for (const auto& [name, dir, stream] : {std::tuple{"A", "noiseless_train", 10}, std::tuple{"G", "combined_train", 11}}) {
    log(std::string("training DSE ensemble ") + name);
    dse::EnsembleOptions opt;
    opt.models = cfg.dse_models;
    opt.epochs = cfg.dse_epochs;
    opt.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(stream));
    opt.log = log;
    auto e = dse::train_ensemble(dse::state_images(load_split(ds / dir, "train"), false),
                                 dse::state_images(load_split(ds / dir, "val"), false), opt);
    dse::save_ensemble(e, models / (std::string("dse_") + name));
    const auto eval = dse::evaluate(e.nets, test_images);
    write_json(reports / (std::string("evaluate_") + name + ".json"), eval);
    report["dse"][name] = {{"accuracy_mean", eval.accuracy_mean},
                           {"accuracy_std", eval.accuracy_std},
                           {"accuracy_percent", dse::value_uncertainty(100 * eval.accuracy_mean, 100 * eval.accuracy_std)},
                           {"mae_mean", eval.mae_mean}};
    ensembles[name] = std::move(e);
  }
  auto& robust = ensembles["G"].nets;
  const double gap = report["dse"]["G"]["accuracy_mean"].get<double>() - report["dse"]["A"]["accuracy_mean"].get<double>();

  // 3. MAE curves and thresholds
  log("calibrating quality thresholds");
  const auto curves = dqc::build_mae_curves(robust, load_everything(ds / "sweep_calibration"));
  write_json(reports / "mae_curves.json", curves);
  nlohmann::json rho = nlohmann::json::object();
  bool curves_ok = true;
  for (int s = 0; s < kStateCount; ++s) {
    const auto& c = curves.states[s];
    const double r = c.available ? dse::spearman(c.centers, c.mean_mae) : 0.0;
    rho[std::string(to_string(static_cast<State>(s)))] = r;
    if (s != static_cast<int>(State::ND)) curves_ok = curves_ok && c.available && r >= 0.9;
  }
  auto thresholds = dqc::calibrate_thresholds(curves);
  thresholds.calibration_hash = data::DatasetReader(ds / "sweep_calibration").config_hash();
  thresholds.save(out / "thresholds.json");

  // 4. DQC on a fresh labelled sweep
  log("training DQC");
  auto dqc_cfg = dataset_cfg(data::DatasetKind::DqcLabeled, cfg.dqc_count, 5);
  dqc_cfg.thresholds = thresholds;
  auto holdout_cfg = dataset_cfg(data::DatasetKind::DqcLabeled, cfg.holdout_count, 6);
  holdout_cfg.thresholds = thresholds;
  holdout_cfg.splits = {0.0, 0.0, 1.0};
  data::generate_dataset(dqc_cfg, ds / "dqc_train", cfg.workers);
  data::generate_dataset(holdout_cfg, ds / "sweep_holdout", cfg.workers);
  dqc::DqcOptions dopt;
  dopt.models = cfg.dqc_models;
  dopt.epochs = cfg.dqc_epochs;
  dopt.seed = derive_seed(cfg.seed, 12);
  dopt.log = log;
  std::vector<std::string> warnings;
  auto dqc_train = load_split(ds / "dqc_train", "train");
  auto dqc_val = load_split(ds / "dqc_train", "val");
  auto dqc_models = dqc::train_dqc(dqc::quality_images(dqc_train), dqc::quality_images(dqc_val), dopt, &warnings);
  dse::save_ensemble(dqc_models, models / "dqc");

  // 5. quality/accuracy correlation on the held-out sweep
  log("validating quality correlation");
  const auto holdout = load_everything(ds / "sweep_holdout");
  const auto corr = dqc::validate_quality_correlation(dqc_models.nets, robust, holdout, false, cfg.min_class_samples);
  write_json(reports / "dqc_validation.json", corr);
  bool counts_ok = true;
  for (const auto& c : corr.classes) counts_ok = counts_ok && c.count >= cfg.min_class_samples;

  // 6. noise-gradient map
  log("evaluating map");
  const auto device = map_device();
  const GridD noisy = noise_gradient_scan(device, cfg.map_rows, cfg.map_cols, cfg.map_max_scale, cfg.base_noise,
                                          derive_seed(cfg.seed, 20));
  const auto map = render_maps(robust, dqc_models.nets, noisy, out / "map", cfg.mixed_threshold);
  const bool geometry_ok = map.rows == cfg.map_rows - 2 * map.margin && map.cols == cfg.map_cols - 2 * map.margin;
  const double overlap = map.moderate_mixed_iou;

  // 7. tuning demo: start in the single-dot region, target the double dot
  log("tuning demo");
  tune::SimulatedEnvironment env(device, cfg.base_noise, 1.0, derive_seed(cfg.seed, 21));
  tune::TunerConfig tcfg;
  tcfg.target = StateLabel::one_hot(State::DD);
  const auto tuned = tune::run_tuner(60.0, -40.0, tune::quality_estimator(dqc_models.nets),
                                     tune::state_estimator(robust), env, tcfg);
  {
    std::ofstream f(reports / "tune_log.jsonl", std::ios::trunc);
    for (const auto& rec : tuned.log) f << tune::to_json(rec).dump() << "\n";
  }

  report["criteria"] = {
      {"noise_augmentation", {{"accuracy_gap", gap}, {"required", 0.20}, {"pass", gap >= 0.20}}},
      {"mae_sigmoid", {{"spearman", rho}, {"required", 0.9}, {"pass", curves_ok}}},
      {"quality_ordering",
       {{"accuracy_ordering", corr.accuracy_ordering},
        {"mae_ordering", corr.mae_ordering},
        {"min_class_samples", cfg.min_class_samples},
        {"class_counts", {corr.classes[0].count, corr.classes[1].count, corr.classes[2].count}},
        {"pass", corr.ordering_checked && corr.accuracy_ordering && corr.mae_ordering && counts_ok}}},
      {"map_overlap",
       {{"rows", map.rows},
        {"cols", map.cols},
        {"geometry", geometry_ok},
        {"iou", overlap},
        {"required", 0.5},
        {"pass", geometry_ok && overlap >= 0.5}}}};
  report["thresholds"] = thresholds;
  report["dqc"] = {{"holdout_accuracy", corr.dqc_accuracy}, {"warnings", warnings}};
  report["tune"] = {{"steps", tuned.log.size()}, {"converged", tuned.converged}, {"success", tuned.success},
                    {"reason", tuned.reason}};
  report["version"] = version();
  write_json(reports / "acceptance_report.json", report);
  fs::remove(marker);
  return report;
}

}  // namespace qdtune::pipeline
