#pragma once

#include "qdtune/common.hpp"
#include "qdtune/dataset.hpp"
#include "qdtune/dse.hpp"
#include "qdtune/nn/train.hpp"
#include "qdtune/quality.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace qdtune::dqc {

inline constexpr int kDefaultBins = 28;
inline constexpr double kLowerFraction = 0.025;
inline constexpr double kUpperFraction = 0.5;

struct StateCurve {
  bool available = false;
  std::vector<double> centers;  // used bins only, ascending
  std::vector<double> mean_mae;
  std::vector<std::size_t> counts;
  double min = 0.0, max = 0.0;
  double range() const { return max - min; }
};

struct MaeCurves {
  double scale_min = 0.0, scale_max = 7.0;
  int bins = kDefaultBins;
  std::array<StateCurve, kStateCount> states;

  const StateCurve& operator[](State s) const { return states[static_cast<int>(s)]; }
  StateCurve& operator[](State s) { return states[static_cast<int>(s)]; }
  double bin_width() const { return (scale_max - scale_min) / bins; }
};

/// Bins per-sample MAE by noise scale (uniform edges on [lo, hi]) separately for each true
/// dominant state. Empty partitions are marked unavailable.
MaeCurves build_mae_curves(const std::vector<double>& mae, const std::vector<double>& noise_scale,
                           const std::vector<State>& state, int bins = kDefaultBins, double lo = 0.0, double hi = 7.0);

/// Evaluates the DSE ensemble (mean prediction) on a threshold-sweep sample set.
MaeCurves build_mae_curves(std::vector<nn::Network<float>>& dse, const std::vector<data::Sample>& sweep,
                           int bins = kDefaultBins, bool clip = false);

/// Smallest scale at which the curve reaches min + fraction * range, searching from the
/// curve minimum onward and interpolating linearly between bin centers.
double crossing(const StateCurve& curve, double fraction);

class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// Per-state 2.5 % / 50 % crossings; ND gets the minimum over the other four states.
QualityThresholds calibrate_thresholds(const MaeCurves& curves, double flat_epsilon = 1e-6);

void to_json(nlohmann::json& j, const MaeCurves& c);

/// Gradient image mean-centered but not rescaled, so absolute noise amplitude stays visible.
Eigen::VectorXf quality_input(const GridF& gradient);

/// One-hot quality targets; every sample must carry a quality label.
nn::LabeledImages quality_images(const std::vector<data::Sample>& samples);

struct DqcOptions {
  int models = 1;
  std::uint64_t seed = 0;
  int epochs = 5;
  int batch_size = 64;
  int patience = 5;
  std::function<void(const std::string&)> log;
};

/// Trains the DQC architecture. Returns warnings (class imbalance below 5 %) through `warnings`.
dse::TrainedEnsemble train_dqc(const nn::LabeledImages& train, const nn::LabeledImages& val, const DqcOptions& options,
                               std::vector<std::string>* warnings = nullptr);

/// Ensemble-mean probabilities (3 x N) for preprocessed quality inputs.
nn::Mat<float> predict_quality(std::vector<nn::Network<float>>& dqc, const nn::Mat<float>& inputs);
Quality predict_quality(std::vector<nn::Network<float>>& dqc, const GridF& gradient);

struct ClassStats {
  std::size_t count = 0;
  bool included = false;  // at least kMinClassSamples samples
  std::vector<double> model_accuracy, model_mae;
  double accuracy_mean = 0, accuracy_std = 0, mae_mean = 0, mae_std = 0;
};

struct CorrelationReport {
  std::array<ClassStats, kQualityCount> classes;
  double dqc_accuracy = 0.0;  // vs. true quality labels, when present
  bool ordering_checked = false;
  bool accuracy_ordering = false;
  bool mae_ordering = false;
  bool variance_ordering = false;
  std::vector<std::string> notes;
};

inline constexpr std::size_t kMinClassSamples = 10;

/// Partitions samples by DQC-predicted class and scores each DSE model per class.
CorrelationReport validate_quality_correlation(std::vector<nn::Network<float>>& dqc,
                                               std::vector<nn::Network<float>>& dse,
                                               const std::vector<data::Sample>& samples, bool clip = false,
                                               std::size_t min_class_samples = kMinClassSamples);

void to_json(nlohmann::json& j, const CorrelationReport& r);

}  // namespace qdtune::dqc
