#include "qdtune/quality.hpp"

#include <cmath>
#include <fstream>

namespace qdtune {

void QualityThresholds::validate() const {
  for (int s = 0; s < kStateCount; ++s) {
    const auto& b = bands[s];
    if (!(std::isfinite(b.lower) && std::isfinite(b.upper) && b.lower >= 0.0 && b.lower < b.upper))
      throw std::invalid_argument("quality thresholds for " + std::string(to_string(static_cast<State>(s))) +
                                  " must satisfy 0 <= lower < upper");
  }
}

Quality assign_quality(double noise_scale, State true_state, const QualityThresholds& thresholds) {
  const auto& b = thresholds[true_state];
  if (noise_scale < b.lower) return Quality::High;
  if (noise_scale < b.upper) return Quality::Moderate;
  return Quality::Low;
}

void to_json(nlohmann::json& j, const QualityThresholds& t) {
  j = nlohmann::json::object();
  nlohmann::json states = nlohmann::json::object();
  for (int s = 0; s < kStateCount; ++s)
    states[std::string(to_string(static_cast<State>(s)))] = {{"lower", t.bands[s].lower}, {"upper", t.bands[s].upper}};
  j["states"] = states;
  j["calibration_hash"] = t.calibration_hash;
}

void from_json(const nlohmann::json& j, QualityThresholds& t) {
  for (int s = 0; s < kStateCount; ++s) {
    const auto& b = j.at("states").at(std::string(to_string(static_cast<State>(s))));
    t.bands[s].lower = b.at("lower").get<double>();
    t.bands[s].upper = b.at("upper").get<double>();
  }
  t.calibration_hash = j.value("calibration_hash", std::string());
}

void QualityThresholds::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << nlohmann::json(*this).dump(2) << "\n";
}

QualityThresholds QualityThresholds::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open thresholds " + path.string());
  try {
    auto t = nlohmann::json::parse(in).get<QualityThresholds>();
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad thresholds file " + path.string() + ": " + e.what());
  }
}

}  // namespace qdtune
