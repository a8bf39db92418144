#pragma once

#include "qdtune/nn/network.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace qdtune::nn {

/// In-memory labeled images: inputs are (height * width) x N, targets are classes x N.
struct LabeledImages {
  Mat<float> inputs;
  Mat<float> targets;
  int height = 0;
  int width = 0;

  Eigen::Index size() const { return inputs.cols(); }
};

struct TrainOptions {
  int epochs = 30;
  int batch_size = 64;
  int patience = 5;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool restore_best = true;
  /// Called after every epoch with a one-line summary; may be empty.
  std::function<void(const std::string&)> log;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_val_loss = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch Adam on mean soft-target cross-entropy with per-epoch shuffling, validation, and
/// early stopping. Deterministic per options.seed.
TrainHistory train(Network<float>& net, const LabeledImages& train_set, const LabeledImages& val_set,
                   const TrainOptions& options);

/// Inference-mode probabilities (classes x N), evaluated in batches.
Mat<float> predict(Network<float>& net, const Mat<float>& inputs, int batch_size = 256);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean cross-entropy and argmax accuracy in inference mode.
Evaluation evaluate(Network<float>& net, const LabeledImages& set, int batch_size = 256);

/// argmax(prediction) == argmax(target), column-wise.
double argmax_accuracy(const Mat<float>& predictions, const Mat<float>& targets);

void to_json(nlohmann::json& j, const TrainHistory& h);
void from_json(const nlohmann::json& j, TrainHistory& h);

/// Checkpoint directory: checkpoint.json (spec, shapes, optimizer step, history) and
/// params.bin (float32 little-endian parameters, then Adam first and second moments).
void save_checkpoint(const Network<float>& net, const TrainHistory& history, const std::filesystem::path& dir);
Network<float> load_checkpoint(const std::filesystem::path& dir, TrainHistory* history = nullptr);

}  // namespace qdtune::nn
