#include "qdtune/cli.hpp"

#include "qdtune/autotune.hpp"
#include "qdtune/dataset.hpp"
#include "qdtune/dqc.hpp"
#include "qdtune/dse.hpp"
#include "qdtune/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <numeric>

namespace qdtune::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  f << j.dump(2) << "\n";
  if (!f) throw Error("write failed for " + path.string());
}

std::vector<data::Sample> load_samples(const fs::path& dir, const std::string& split) {
  data::DatasetReader reader(dir);
  std::vector<std::size_t> idx;
  if (split == "all") {
    idx.resize(reader.size());
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    idx = reader.split(split);
  }
  std::vector<data::Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(reader.read(i));
  return out;
}

nn::NetworkSpec arch_spec(const std::string& arch) {
  if (arch == "noiseless") return nn::NetworkSpec::noiseless_dse();
  if (arch == "noisy") return nn::NetworkSpec::noisy_dse();
  throw UsageError("unknown architecture '" + arch + "' (expected noiseless or noisy)");
}

struct Common {
  int workers = 0;
  bool quiet = false;

  int resolved_workers() const { return workers > 0 ? workers : default_workers(); }
  std::function<void(const std::string&)> logger(std::ostream& err) const {
    if (quiet) return {};
    return [&err](const std::string& s) { err << s << "\n"; };
  }
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"qdtune: simulated double-quantum-dot scans, state estimation, data quality control and tuning"};
  app.name("qdtune");
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", pipeline::version());
  Common common;
  app.add_option("--workers", common.workers, "Worker threads (default: QDTUNE_WORKERS or hardware concurrency)")
      ->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", common.quiet, "Suppress progress output");

  std::function<void()> action;

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a dataset directory");
  struct {
    std::string kind = "noiseless", noise_type = "white", out, noise_config, thresholds, manifest;
    std::size_t count = 1000;
    std::uint64_t seed = 0;
    double sweep_max = 7.0;
  } g;
  auto* g_kind = gen->add_option("--kind", g.kind, "noiseless | per-noise | combined | threshold-sweep | dqc-labeled");
  auto* g_noise = gen->add_option("--noise-type", g.noise_type, "Noise for per-noise datasets");
  auto* g_count = gen->add_option("--count", g.count, "Number of samples")->check(CLI::PositiveNumber);
  auto* g_seed = gen->add_option("--seed", g.seed, "Master seed");
  gen->add_option("--out", g.out, "Output directory")->required();
  auto* g_cfg = gen->add_option("--noise-config", g.noise_config, "Base noise magnitudes (key = value file)");
  auto* g_thr = gen->add_option("--thresholds", g.thresholds, "Quality thresholds JSON (dqc-labeled)");
  auto* g_sweep = gen->add_option("--sweep-max", g.sweep_max, "Upper noise scale of sweeps");
  auto* g_man = gen->add_option("--manifest", g.manifest, "Regenerate from the configuration in an existing manifest");
  for (auto* o : {g_kind, g_noise, g_count, g_seed, g_cfg, g_thr, g_sweep}) g_man->excludes(o);
  gen->callback([&] {
    action = [&] {
      data::DatasetConfig c;
      if (!g.manifest.empty()) {
        std::ifstream f(g.manifest);
        if (!f) throw Error("cannot open manifest " + g.manifest);
        c = nlohmann::json::parse(f).at("config").get<data::DatasetConfig>();
      } else {
        c.kind = data::parse_dataset_kind(g.kind);
        c.noise_type = noise::parse_noise_type(g.noise_type);
        c.count = g.count;
        c.seed = g.seed;
        c.sweep_max = g.sweep_max;
        if (!g.noise_config.empty()) c.base_noise = noise::load_noise_params(g.noise_config);
        if (!g.thresholds.empty()) c.thresholds = QualityThresholds::load(g.thresholds);
      }
      data::generate_dataset(c, g.out, common.resolved_workers());
      pipeline::write_run_manifest(g.out, "generate", c);
      out << "wrote " << c.count << " samples to " << g.out << " (config " << c.hash() << ")\n";
    };
  });

  // train-dse
  auto* tds = app.add_subcommand("train-dse", "Train a DSE ensemble");
  struct {
    std::string data, out, arch = "noiseless";
    int models = 5, epochs = 30, batch = 64, patience = 5;
    std::uint64_t seed = 0;
    bool clip = false;
  } t;
  tds->add_option("--dataset,--data", t.data, "Dataset directory (train and val splits are used)")->required();
  tds->add_option("--out", t.out, "Output ensemble directory")->required();
  tds->add_option("--arch", t.arch, "noiseless | noisy");
  tds->add_option("--models", t.models, "Ensemble size")->check(CLI::PositiveNumber);
  tds->add_option("--epochs", t.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  tds->add_option("--batch-size", t.batch, "Mini-batch size")->check(CLI::PositiveNumber);
  tds->add_option("--patience", t.patience, "Early-stopping patience")->check(CLI::PositiveNumber);
  tds->add_option("--seed", t.seed, "Master seed");
  tds->add_flag("--clip", t.clip, "2/98 percentile clipping before standardization");
  tds->callback([&] {
    action = [&] {
      dse::EnsembleOptions o;
      o.spec = arch_spec(t.arch);
      o.models = t.models;
      o.epochs = t.epochs;
      o.batch_size = t.batch;
      o.patience = t.patience;
      o.seed = t.seed;
      o.log = common.logger(err);
      auto e = dse::train_ensemble(dse::state_images(load_samples(t.data, "train"), t.clip),
                                   dse::state_images(load_samples(t.data, "val"), t.clip), o);
      dse::save_ensemble(e, t.out);
      pipeline::write_run_manifest(t.out, "train-dse",
                                   {{"data", t.data}, {"arch", t.arch}, {"models", t.models}, {"epochs", t.epochs},
                                    {"batch_size", t.batch}, {"patience", t.patience}, {"seed", t.seed},
                                    {"clip", t.clip}});
      out << "trained " << e.nets.size() << " models into " << t.out << "\n";
    };
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a DSE ensemble on a dataset split");
  struct {
    std::string model, data, split = "test", report;
    bool clip = false;
  } e;
  ev->add_option("--checkpoints,--model", e.model, "Ensemble or checkpoint directory")->required();
  ev->add_option("--dataset,--data", e.data, "Dataset directory")->required();
  ev->add_option("--split", e.split, "train | val | test | all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  ev->add_option("--report", e.report, "Write the JSON report here");
  ev->add_flag("--clip", e.clip, "2/98 percentile clipping");
  ev->callback([&] {
    action = [&] {
      auto ens = dse::load_ensemble(e.model);
      const auto r = dse::evaluate(ens.nets, dse::state_images(load_samples(e.data, e.split), e.clip));
      if (!e.report.empty()) write_json(e.report, r);
      out << "accuracy " << dse::value_uncertainty(100 * r.accuracy_mean, 100 * r.accuracy_std) << " %  MAE "
          << r.mae_mean << " (" << r.models.size() << " models, " << r.targets.cols() << " samples)\n";
    };
  });

  // calibrate-dqc
  auto* cal = app.add_subcommand("calibrate-dqc", "Fit quality thresholds from a threshold sweep");
  struct {
    std::string model, sweep, out, curves;
    int bins = dqc::kDefaultBins;
    bool clip = false;
  } c;
  cal->add_option("--checkpoints,--model", c.model, "DSE ensemble directory")->required();
  cal->add_option("--sweep", c.sweep, "Threshold-sweep dataset directory")->required();
  cal->add_option("--out", c.out, "Thresholds JSON")->required();
  cal->add_option("--curves", c.curves, "Also write the MAE curves JSON");
  cal->add_option("--bins", c.bins, "Noise-scale bins")->check(CLI::PositiveNumber);
  cal->add_flag("--clip", c.clip, "2/98 percentile clipping");
  cal->callback([&] {
    action = [&] {
      auto ens = dse::load_ensemble(c.model);
      data::DatasetReader reader(c.sweep);
      if (reader.config().kind != data::DatasetKind::ThresholdSweep)
        throw Error(c.sweep + " is not a threshold-sweep dataset");
      const auto curves = dqc::build_mae_curves(ens.nets, load_samples(c.sweep, "all"), c.bins, c.clip);
      if (!c.curves.empty()) write_json(c.curves, curves);
      auto thr = dqc::calibrate_thresholds(curves);
      thr.calibration_hash = reader.config_hash();
      if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
      thr.save(c.out);
      for (int s = 0; s < kStateCount; ++s)
        out << to_string(static_cast<State>(s)) << "  lower " << thr.bands[s].lower << "  upper " << thr.bands[s].upper
            << "\n";
    };
  });

  // train-dqc
  auto* tdq = app.add_subcommand("train-dqc", "Train the data quality classifier");
  struct {
    std::string data, out;
    int models = 1, epochs = 5, batch = 64, patience = 5;
    std::uint64_t seed = 0;
  } q;
  tdq->add_option("--dataset,--data", q.data, "dqc-labeled dataset directory")->required();
  tdq->add_option("--out", q.out, "Output directory")->required();
  tdq->add_option("--models", q.models, "Ensemble size")->check(CLI::PositiveNumber);
  tdq->add_option("--epochs", q.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  tdq->add_option("--batch-size", q.batch, "Mini-batch size")->check(CLI::PositiveNumber);
  tdq->add_option("--patience", q.patience, "Early-stopping patience")->check(CLI::PositiveNumber);
  tdq->add_option("--seed", q.seed, "Master seed");
  tdq->callback([&] {
    action = [&] {
      dqc::DqcOptions o;
      o.models = q.models;
      o.epochs = q.epochs;
      o.batch_size = q.batch;
      o.patience = q.patience;
      o.seed = q.seed;
      o.log = common.logger(err);
      std::vector<std::string> warnings;
      auto ens = dqc::train_dqc(dqc::quality_images(load_samples(q.data, "train")),
                                dqc::quality_images(load_samples(q.data, "val")), o, &warnings);
      for (const auto& w : warnings) err << "warning: " << w << "\n";
      dse::save_ensemble(ens, q.out);
      pipeline::write_run_manifest(q.out, "train-dqc",
                                   {{"data", q.data}, {"models", q.models}, {"epochs", q.epochs},
                                    {"batch_size", q.batch}, {"patience", q.patience}, {"seed", q.seed}});
      out << "trained " << ens.nets.size() << " DQC models into " << q.out << "\n";
    };
  });

  // validate-dqc
  auto* val = app.add_subcommand("validate-dqc", "Per-quality-class DSE accuracy on a held-out set");
  struct {
    std::string dqc, dse, data, split = "all", report;
    std::size_t min_class = dqc::kMinClassSamples;
    bool clip = false;
  } v;
  val->add_option("--dqc", v.dqc, "DQC directory")->required();
  val->add_option("--dse", v.dse, "DSE ensemble directory")->required();
  val->add_option("--dataset,--data", v.data, "Dataset directory")->required();
  val->add_option("--split", v.split, "train | val | test | all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  val->add_option("--min-class-samples", v.min_class, "Classes below this count are excluded");
  val->add_option("--report", v.report, "Write the JSON report here");
  val->add_flag("--clip", v.clip, "2/98 percentile clipping for the DSE");
  val->callback([&] {
    action = [&] {
      auto dq = dse::load_ensemble(v.dqc);
      auto ds = dse::load_ensemble(v.dse);
      const auto r = dqc::validate_quality_correlation(dq.nets, ds.nets, load_samples(v.data, v.split), v.clip,
                                                       v.min_class);
      if (!v.report.empty()) write_json(v.report, r);
      for (int k = 0; k < kQualityCount; ++k) {
        const auto& cs = r.classes[k];
        out << to_string(static_cast<Quality>(k)) << "  n=" << cs.count;
        if (cs.included)
          out << "  accuracy " << dse::value_uncertainty(100 * cs.accuracy_mean, 100 * cs.accuracy_std) << " %  MAE "
              << cs.mae_mean;
        else
          out << "  (excluded)";
        out << "\n";
      }
      for (const auto& n : r.notes) out << "note: " << n << "\n";
      out << "ordering " << (r.ordering_checked && r.accuracy_ordering && r.mae_ordering ? "holds" : "does not hold")
          << "\n";
    };
  });

  // tune
  auto* tn = app.add_subcommand("tune", "Run the closed tuning loop on a simulated device");
  struct {
    std::string dqc, dse, target = "DD", log, device, noise_config;
    double v1 = 60.0, v2 = -40.0, noise_scale = 1.0, factor = 0.5;
    int budget = 3, max_steps = 100;
    std::uint64_t seed = 0;
  } u;
  tn->add_option("--dqc", u.dqc, "DQC directory")->required();
  tn->add_option("--dse", u.dse, "DSE ensemble directory")->required();
  tn->add_option("--v1", u.v1, "Starting V_P1 (mV)");
  tn->add_option("--v2", u.v2, "Starting V_P2 (mV)");
  tn->add_option("--target", u.target, "Target state")->check(CLI::IsMember({"ND", "LD", "CD", "RD", "DD"}));
  tn->add_option("--noise-scale", u.noise_scale, "Initial device noise scale")->check(CLI::NonNegativeNumber);
  tn->add_option("--budget", u.budget, "Recalibration budget")->check(CLI::NonNegativeNumber);
  tn->add_option("--recalibration-factor", u.factor, "Noise-scale multiplier per recalibration")
      ->check(CLI::Range(0.0, 1.0));
  tn->add_option("--max-steps", u.max_steps, "Step cap")->check(CLI::PositiveNumber);
  tn->add_option("--seed", u.seed, "Measurement seed");
  tn->add_option("--device-config,--device", u.device, "Device parameters (key = value file)");
  tn->add_option("--noise-config", u.noise_config, "Base noise magnitudes (key = value file)");
  tn->add_option("--log", u.log, "JSON-lines step log");
  tn->callback([&] {
    action = [&] {
      auto dq = dse::load_ensemble(u.dqc);
      auto ds = dse::load_ensemble(u.dse);
      const auto device = u.device.empty() ? pipeline::map_device()
                                           : sim::DeviceParams::from_config(KeyValueConfig::load(u.device));
      const auto noise = u.noise_config.empty() ? noise::default_noise_params() : noise::load_noise_params(u.noise_config);
      tune::SimulatedEnvironment env(device, noise, u.noise_scale, u.seed);
      tune::TunerConfig cfg;
      cfg.target = StateLabel::one_hot(parse_state(u.target));
      cfg.budget = u.budget;
      cfg.recalibration_factor = u.factor;
      cfg.max_steps = u.max_steps;
      const auto st =
          tune::run_tuner(u.v1, u.v2, tune::quality_estimator(dq.nets), tune::state_estimator(ds.nets), env, cfg);
      std::ofstream log_file;
      if (!u.log.empty()) {
        if (fs::path(u.log).has_parent_path()) fs::create_directories(fs::path(u.log).parent_path());
        log_file.open(u.log, std::ios::trunc);
        if (!log_file) throw Error("cannot open " + u.log);
      }
      for (const auto& rec : st.log) {
        const auto j = tune::to_json(rec);
        if (log_file.is_open()) log_file << j.dump() << "\n";
        if (!common.quiet) err << j.dump() << "\n";
      }
      out << (st.success ? "success" : "no success") << " after " << st.log.size() << " steps at (" << st.v1 << ", "
          << st.v2 << ") mV: " << st.reason << "\n";
    };
  });

  // render-maps
  auto* rm = app.add_subcommand("render-maps", "Sliding-window state and quality maps of a noise-gradient scan");
  struct {
    std::string dqc, dse, out, device, noise_config, scan;
    int rows = 62, cols = 142;
    double max_scale = 7.0, mixed = 0.7;
    std::uint64_t seed = 0;
  } m;
  rm->add_option("--dqc", m.dqc, "DQC directory")->required();
  rm->add_option("--dse", m.dse, "DSE ensemble directory")->required();
  rm->add_option("--out", m.out, "Output directory")->required();
  auto* m_scan = rm->add_option("--scan", m.scan, "Sensor scan tensor (.f32 with .json shape header)");
  auto* m_rows = rm->add_option("--rows", m.rows, "Synthetic scan rows")->check(CLI::PositiveNumber);
  auto* m_cols = rm->add_option("--cols", m.cols, "Synthetic scan columns")->check(CLI::PositiveNumber);
  auto* m_max = rm->add_option("--max-scale", m.max_scale, "Synthetic noise scale at the right edge")
                    ->check(CLI::NonNegativeNumber);
  rm->add_option("--mixed-threshold", m.mixed, "Mixed label when the top probability is below this")
      ->check(CLI::Range(0.0, 1.0));
  auto* m_seed = rm->add_option("--seed", m.seed, "Synthetic scan noise seed");
  auto* m_dev = rm->add_option("--device-config,--device", m.device, "Synthetic scan device (key = value file)");
  auto* m_noise = rm->add_option("--noise-config", m.noise_config, "Synthetic scan noise magnitudes (key = value file)");
  for (auto* o : {m_rows, m_cols, m_max, m_seed, m_dev, m_noise}) m_scan->excludes(o);
  rm->callback([&] {
    action = [&] {
      auto dq = dse::load_ensemble(m.dqc);
      auto ds = dse::load_ensemble(m.dse);
      GridD scan;
      if (!m.scan.empty()) {
        scan = tune::read_scan(m.scan);
      } else {
        const auto device = m.device.empty() ? pipeline::map_device()
                                             : sim::DeviceParams::from_config(KeyValueConfig::load(m.device));
        const auto noise =
            m.noise_config.empty() ? noise::default_noise_params() : noise::load_noise_params(m.noise_config);
        scan = pipeline::noise_gradient_scan(device, m.rows, m.cols, m.max_scale, noise, m.seed);
      }
      const auto s = pipeline::render_maps(ds.nets, dq.nets, scan, m.out, m.mixed);
      pipeline::write_run_manifest(m.out, "render-maps",
                                   {{"dqc", m.dqc}, {"dse", m.dse}, {"scan", m.scan}, {"rows", m.rows}, {"cols", m.cols},
                                    {"max_scale", m.max_scale}, {"mixed_threshold", m.mixed}, {"seed", m.seed}});
      out << "map " << s.rows << " x " << s.cols << ", moderate/mixed IoU " << s.moderate_mixed_iou << "\n";
    };
  });

  // reproduce
  auto* rp = app.add_subcommand("reproduce", "End-to-end pipeline from a seed");
  struct {
    std::string out, scale = "desk", noise_config;
    std::uint64_t seed = 7;
  } r;
  rp->add_option("--out", r.out, "Output directory")->required();
  rp->add_option("--seed", r.seed, "Master seed");
  rp->add_option("--scale", r.scale, "smoke | desk | paper")->check(CLI::IsMember({"smoke", "desk", "paper"}));
  rp->add_option("--noise-config", r.noise_config, "Base noise magnitudes (key = value file)");
  rp->callback([&] {
    action = [&] {
      auto cfg = pipeline::ReproduceConfig::for_scale(pipeline::parse_scale(r.scale), r.seed);
      cfg.workers = common.resolved_workers();
      if (!r.noise_config.empty()) cfg.base_noise = noise::load_noise_params(r.noise_config);
      const auto rep = pipeline::reproduce(cfg, r.out, common.logger(err));
      for (const auto& [name, crit] : rep.at("criteria").items())
        out << name << ": " << (crit.at("pass").get<bool>() ? "PASS" : "FAIL") << "\n";
      out << "report: " << (fs::path(r.out) / "reports" / "acceptance_report.json").string() << "\n";
    };
  });

  // matrix
  auto* mx = app.add_subcommand("matrix", "Train-condition matrix scored on combined-noise test data");
  struct {
    std::string out;
    int models = 20, epochs = 30;
    std::size_t train = 2000, test = 500;
    std::uint64_t seed = 0;
  } x;
  mx->add_option("--out", x.out, "Output directory")->required();
  mx->add_option("--models", x.models, "Models per condition")->check(CLI::PositiveNumber);
  mx->add_option("--epochs", x.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  mx->add_option("--train-count", x.train, "Training samples per condition")->check(CLI::PositiveNumber);
  mx->add_option("--test-count", x.test, "Test samples")->check(CLI::PositiveNumber);
  mx->add_option("--seed", x.seed, "Master seed");
  mx->callback([&] {
    action = [&] {
      dse::MatrixConfig cfg;
      cfg.models_per_cell = x.models;
      cfg.epochs = x.epochs;
      cfg.train_count = x.train;
      cfg.test_count = x.test;
      cfg.seed = x.seed;
      cfg.log = common.logger(err);
      const auto cells = dse::run_matrix_experiment(cfg);
      write_json(fs::path(x.out) / "matrix.json", dse::matrix_json(cells));
      std::ofstream(fs::path(x.out) / "matrix.svg") << dse::matrix_svg(cells);
      pipeline::write_run_manifest(x.out, "matrix",
                                   {{"models", x.models}, {"epochs", x.epochs}, {"train_count", x.train},
                                    {"test_count", x.test}, {"seed", x.seed}});
      for (const auto& cell : cells)
        out << cell.condition.name << "  median accuracy " << cell.accuracy_box.median << "\n";
    };
  });

  if (argc <= 1) {
    out << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // help and version requests come through here with exit code 0
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (!action) {
    out << app.help();
    return kExitUsage;
  }
  try {
    action();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace qdtune::cli
