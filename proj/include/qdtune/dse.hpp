#pragma once

#include "qdtune/common.hpp"
#include "qdtune/dataset.hpp"
#include "qdtune/nn/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace qdtune::dse {

inline constexpr double kClipLow = 0.02;
inline constexpr double kClipHigh = 0.98;

/// Optional 2/98 percentile clipping, then per-image standardization (std floor 1e-8).
/// Returns the image flattened row-major.
Eigen::VectorXf preprocess(const GridF& image, bool clip);

/// Inputs from sample gradients, targets from state labels.
nn::LabeledImages state_images(const std::vector<data::Sample>& samples, bool clip);
nn::LabeledImages state_images(data::DatasetReader& reader, const std::vector<std::size_t>& indices, bool clip);

/// Softmax output for one gradient image.
StateLabel predict_state(nn::Network<float>& net, const GridF& gradient, bool clip);

/// Mean over the 5 components of |p - t|, per column.
Eigen::VectorXd sample_mae(const nn::Mat<float>& predictions, const nn::Mat<float>& targets);

struct ModelMetrics {
  double accuracy = 0.0;
  double mae = 0.0;
  std::array<double, kStateCount> state_accuracy{};
  std::array<double, kStateCount> state_mae{};
  std::array<std::size_t, kStateCount> state_count{};
};

ModelMetrics score(const nn::Mat<float>& predictions, const nn::Mat<float>& targets);

struct EvaluationReport {
  std::vector<ModelMetrics> models;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double mae_mean = 0.0, mae_std = 0.0;
  /// Ensemble-mean prediction per sample (classes x N).
  nn::Mat<float> predictions;
  nn::Mat<float> targets;
};

/// Scores every model on the set; std is the sample standard deviation over models.
EvaluationReport evaluate(std::vector<nn::Network<float>>& nets, const nn::LabeledImages& set);

void to_json(nlohmann::json& j, const EvaluationReport& r);

/// "value(uncertainty)" with the uncertainty in units of the last shown digit, e.g. 92.5(7).
std::string value_uncertainty(double value, double uncertainty);

struct EnsembleOptions {
  nn::NetworkSpec spec = nn::NetworkSpec::noiseless_dse();
  int models = 5;
  std::uint64_t seed = 0;
  int epochs = 30;
  int batch_size = 64;
  int patience = 5;
  std::function<void(const std::string&)> log;
};

struct TrainedEnsemble {
  std::vector<nn::Network<float>> nets;
  std::vector<nn::TrainHistory> histories;
};

/// Model m is built and trained with seeds derived from (seed, m).
TrainedEnsemble train_ensemble(const nn::LabeledImages& train, const nn::LabeledImages& val,
                               const EnsembleOptions& options);

void save_ensemble(const TrainedEnsemble& e, const std::filesystem::path& dir);
TrainedEnsemble load_ensemble(const std::filesystem::path& dir);

struct BoxStats {
  double median = 0, q1 = 0, q3 = 0, whisker_low = 0, whisker_high = 0, min = 0, max = 0;
  std::size_t n = 0;
};
/// Tukey box statistics; quartiles by linear interpolation, whiskers at the furthest data
/// point within 1.5 IQR.
BoxStats box_stats(std::vector<double> values);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Training conditions in figure order.
struct MatrixCondition {
  std::string name;
  data::DatasetKind kind = data::DatasetKind::Noiseless;
  noise::NoiseType noise_type = noise::NoiseType::White;
  bool clip = false;
  std::string arch = "noiseless";
};
std::vector<MatrixCondition> default_conditions();

struct MatrixConfig {
  std::vector<MatrixCondition> conditions = default_conditions();
  int models_per_cell = 20;
  std::size_t train_count = 2000;
  std::size_t test_count = 500;
  std::uint64_t seed = 0;
  int epochs = 30;
  noise::NoiseParams base_noise = noise::default_noise_params();
  std::function<void(const std::string&)> log;
};

struct MatrixCell {
  MatrixCondition condition;
  std::vector<double> accuracy, mae;
  BoxStats accuracy_box, mae_box;
  double spearman_acc_mae = 0.0;
};

/// Trains models_per_cell models per condition and scores them on one held-out combined-noise
/// test set.
std::vector<MatrixCell> run_matrix_experiment(const MatrixConfig& config);
nlohmann::json matrix_json(const std::vector<MatrixCell>& cells);
/// Box-plot figure of accuracy per condition.
std::string matrix_svg(const std::vector<MatrixCell>& cells);

}  // namespace qdtune::dse
