#pragma once

#include "qdtune/common.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <string>

namespace qdtune {

/// Per-state noise_scale cutoffs. Quality is high below `lower`, moderate on [lower, upper),
/// low from `upper` up.
struct QualityThresholds {
  struct Band {
    double lower = 0.0;
    double upper = 0.0;
  };
  std::array<Band, kStateCount> bands{};
  /// Hash of the dataset the thresholds were calibrated on; empty for hand-made thresholds.
  std::string calibration_hash;

  const Band& operator[](State s) const { return bands[static_cast<int>(s)]; }
  Band& operator[](State s) { return bands[static_cast<int>(s)]; }

  void validate() const;
  void save(const std::filesystem::path& path) const;
  static QualityThresholds load(const std::filesystem::path& path);
};

Quality assign_quality(double noise_scale, State true_state, const QualityThresholds& thresholds);

void to_json(nlohmann::json& j, const QualityThresholds& t);
void from_json(const nlohmann::json& j, QualityThresholds& t);

}  // namespace qdtune
