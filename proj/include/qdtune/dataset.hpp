#pragma once

#include "qdtune/common.hpp"
#include "qdtune/noise.hpp"
#include "qdtune/quality.hpp"
#include "qdtune/simcore.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace qdtune::data {

enum class DatasetKind { Noiseless, PerNoise, Combined, ThresholdSweep, DqcLabeled };

std::string to_string(DatasetKind k);
DatasetKind parse_dataset_kind(const std::string& s);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Noiseless;
  noise::NoiseType noise_type = noise::NoiseType::White;  // PerNoise only
  std::size_t count = 100;
  std::uint64_t seed = 0;
  int pixels = 30;
  double pitch = 2.0;  // mV per pixel
  // Window corners are drawn uniformly so that v_start lies in [window_min, window_max] (mV).
  double window_min = -90.0;
  double window_max = 30.0;
  double sweep_min = 0.0;
  double sweep_max = 7.0;
  sim::DeviceRanges devices;
  noise::NoiseParams base_noise = noise::default_noise_params();
  std::optional<QualityThresholds> thresholds;  // DqcLabeled only
  SplitFractions splits;

  /// Throws std::invalid_argument for an infeasible configuration.
  void validate() const;
  /// Noise parameters before per-sample variation, with the mask the kind implies.
  noise::NoiseParams kind_noise() const;
  std::string hash() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Sample {
  GridF sensor;
  GridF gradient;
  StateLabel state_label;
  std::optional<Quality> quality;
  float noise_scale = 0.0f;
  noise::NoiseParams noise_params;
  std::uint64_t device_id = 0;
  sim::VoltageWindow window;
};

/// dS/dV_P1 by central differences along columns, one-sided at the borders.
GridD gradient_image(const GridD& sensor, double pitch);

/// Sample `index` of a dataset; pure function of (config, index).
Sample generate_sample(const DatasetConfig& config, std::size_t index);
std::vector<Sample> generate_samples(const DatasetConfig& config, int workers = default_workers());

/// Generates and writes a dataset directory (manifest.json + samples.bin).
void generate_dataset(const DatasetConfig& config, const std::filesystem::path& dir,
                      int workers = default_workers());
void write_dataset(const std::filesystem::path& dir, const DatasetConfig& config, const std::vector<Sample>& samples);

class DatasetError : public Error {
 public:
  enum class Kind { CorruptManifest, TruncatedRecord, ChecksumMismatch, Io };
  DatasetError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Streaming reader; records are read on demand.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& dir);

  std::size_t size() const { return count_; }
  int height() const { return height_; }
  int width() const { return width_; }
  const nlohmann::json& manifest() const { return manifest_; }
  const DatasetConfig& config() const { return config_; }
  std::string config_hash() const { return manifest_.at("config_hash").get<std::string>(); }

  Sample read(std::size_t index);
  /// Index list of "train", "val" or "test".
  std::vector<std::size_t> split(const std::string& name) const;

 private:
  std::filesystem::path dir_;
  std::ifstream bin_;
  nlohmann::json manifest_;
  DatasetConfig config_;
  std::size_t count_ = 0;
  std::size_t record_bytes_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint64_t> checksums_;
};

inline constexpr std::uint8_t kNoQuality = 255;

std::size_t record_bytes(int height, int width);

/// Disjoint, exhaustive split assignment for `count` items.
struct Splits {
  std::vector<std::size_t> train, val, test;
};
Splits make_splits(std::size_t count, const SplitFractions& fractions, std::uint64_t seed);

}  // namespace qdtune::data
