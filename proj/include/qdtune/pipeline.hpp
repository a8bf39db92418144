#pragma once

#include "qdtune/common.hpp"
#include "qdtune/nn/network.hpp"
#include "qdtune/noise.hpp"
#include "qdtune/simcore.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace qdtune::pipeline {

enum class Scale { Smoke, Desk, Paper };

std::string to_string(Scale s);
Scale parse_scale(const std::string& s);

struct ReproduceConfig {
  std::uint64_t seed = 7;
  Scale scale = Scale::Desk;
  int workers = 1;
  noise::NoiseParams base_noise = noise::default_noise_params();

  std::size_t train_count = 2000;     // noiseless and combined training sets
  std::size_t test_count = 500;       // combined-noise held-out set
  std::size_t sweep_count = 8000;     // threshold calibration sweep
  std::size_t dqc_count = 4000;       // labelled sweep for DQC training
  std::size_t holdout_count = 1500;   // labelled sweep for quality validation
  int dse_models = 5;
  int dse_epochs = 30;
  int dqc_models = 1;
  int dqc_epochs = 5;
  int map_rows = 62;
  int map_cols = 142;
  double map_max_scale = 7.0;
  double mixed_threshold = 0.7;
  std::size_t min_class_samples = 50;

  static ReproduceConfig for_scale(Scale scale, std::uint64_t seed);
  nlohmann::json to_json() const;
};

/// Device used for the large noise-gradient map and the tuning demo.
sim::DeviceParams map_device();

/// Rectangular scan of `device` from (20, 20) mV at 2 mV pitch with noise scale rising linearly
/// from 0 at the left edge to `max_scale` at the right edge.
GridD noise_gradient_scan(const sim::DeviceParams& device, int rows, int cols, double max_scale,
                          const noise::NoiseParams& noise, std::uint64_t seed);

struct MapSummary {
  int rows = 0, cols = 0;
  int margin = 0;
  double moderate_mixed_iou = 0.0;
  std::size_t moderate_pixels = 0, mixed_pixels = 0;
  nlohmann::json to_json() const;
};

/// Sliding-window state and quality maps for `sensor`, written under `out` as images and tensors.
MapSummary render_maps(std::vector<nn::Network<float>>& dse, std::vector<nn::Network<float>>& dqc,
                       const GridD& sensor, const std::filesystem::path& out, double mixed_threshold = 0.7);

/// Runs generate -> train -> calibrate -> validate -> map -> tune under `out` and returns the
/// acceptance report (also written to out/reports/acceptance_report.json).
nlohmann::json reproduce(const ReproduceConfig& config, const std::filesystem::path& out,
                         const std::function<void(const std::string&)>& log = {});

/// Version string baked in at configure time.
std::string version();

/// Writes out/run_manifest.json with the command, resolved configuration, and version.
void write_run_manifest(const std::filesystem::path& out, const std::string& command, const nlohmann::json& config);

}  // namespace qdtune::pipeline
