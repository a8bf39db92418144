#pragma once

#include "qdtune/common.hpp"
#include "qdtune/noise.hpp"
#include "qdtune/nn/network.hpp"
#include "qdtune/simcore.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace qdtune::tune {

enum class Action { ClassifyAndOptimize, Recalibrate, Terminate };

std::string_view to_string(Action a);

/// Routing table: high -> classify/optimize, moderate -> recalibrate (terminate once the
/// budget is spent), low -> terminate.
Action route(Quality quality, int budget_remaining);

/// Measurement source for the loop.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual GridD measure(const sim::VoltageWindow& window) = 0;
  virtual double noise_scale() const = 0;
  virtual void recalibrate(double factor) = 0;
};

/// Simulator-backed device; every measurement draws a fresh noise realization.
class SimulatedEnvironment : public Environment {
 public:
  SimulatedEnvironment(sim::DeviceParams device, noise::NoiseParams noise, double noise_scale, std::uint64_t seed);

  GridD measure(const sim::VoltageWindow& window) override;
  double noise_scale() const override { return scale_; }
  void recalibrate(double factor) override { scale_ *= factor; }

  const sim::DeviceParams& device() const { return device_; }
  std::size_t measurements() const { return count_; }

 private:
  sim::DeviceParams device_;
  noise::NoiseParams noise_;
  double scale_;
  std::uint64_t seed_;
  std::size_t count_ = 0;
};

using QualityEstimator = std::function<Quality(const GridF& gradient)>;
using StateEstimator = std::function<StateLabel(const GridF& gradient)>;

QualityEstimator quality_estimator(std::vector<nn::Network<float>>& dqc);
StateEstimator state_estimator(std::vector<nn::Network<float>>& dse, bool clip = false);

/// Nelder-Mead over (V_P1, V_P2) advanced one iteration at a time.
class NelderMead {
 public:
  using Point = Eigen::Vector2d;
  using Objective = std::function<double(const Point&)>;

  NelderMead() = default;
  NelderMead(Point lo, Point hi) : lo_(std::move(lo)), hi_(std::move(hi)) {}

  bool initialized() const { return !vertices_.empty(); }
  /// Simplex from `start` (value `f_start`) and steps of `step` along each axis.
  void initialize(const Point& start, double f_start, double step, const Objective& f);
  /// One reflection / expansion / contraction / shrink iteration.
  void iterate(const Objective& f);

  const Point& best() const { return vertices_[0]; }
  double best_value() const { return values_[0]; }
  double diameter() const;
  int iterations() const { return iterations_; }
  /// Clamps to bounds; returns true if clamping changed the point.
  bool clamp(Point& p) const;
  int clamp_events() const { return clamp_events_; }

 private:
  void sort();
  Point clamped(Point p);

  Point lo_{-1e9, -1e9}, hi_{1e9, 1e9};
  std::vector<Point> vertices_;
  std::vector<double> values_;
  int iterations_ = 0;
  int clamp_events_ = 0;
};

struct TunerConfig {
  StateLabel target = StateLabel::one_hot(State::DD);
  int budget = 3;
  double recalibration_factor = 0.5;
  int pixels = 30;
  double pitch = 2.0;
  int max_steps = 100;
  Eigen::Vector2d lower{-100.0, -100.0};
  Eigen::Vector2d upper{200.0, 200.0};
  double initial_step = 20.0;  // mV
  double fitness_tolerance = 0.2;
  double simplex_tolerance = 1.0;  // mV

  void validate() const;
};

struct StepRecord {
  int step = 0;
  double v1 = 0.0, v2 = 0.0;
  double noise_scale = 0.0;
  Quality quality = Quality::High;
  std::optional<StateLabel> prediction;
  Action action = Action::Terminate;
  std::optional<double> fitness;
  int budget_remaining = 0;
  std::string reason;
};

struct TunerState {
  double v1 = 0.0, v2 = 0.0;
  int budget = 3;
  std::vector<StepRecord> log;
  NelderMead optimizer;
  bool terminated = false;
  bool converged = false;
  bool success = false;
  std::string reason;

  static TunerState start(double v1, double v2, const TunerConfig& config);
};

double fitness(const StateLabel& prediction, const StateLabel& target);

/// One loop iteration: measure, gradient, DQC verdict, then route.
Action tune_step(TunerState& state, const QualityEstimator& dqc, const StateEstimator& dse, Environment& env,
                 const TunerConfig& config);

/// Steps until termination, convergence, or max_steps.
TunerState run_tuner(double v1, double v2, const QualityEstimator& dqc, const StateEstimator& dse, Environment& env,
                     const TunerConfig& config);

nlohmann::json to_json(const StepRecord& r);

// --- sliding-window maps --------------------------------------------------

struct MapResult {
  int rows = 0, cols = 0;
  int margin = 0;
  nn::Mat<float> predictions;  // 5 x (rows*cols), row-major pixel order
  Grid<std::uint8_t> quality;

  GridF probability(State s) const;
  /// Pixels whose largest state probability is below `threshold`.
  Grid<std::uint8_t> mixed_mask(double threshold = 0.7) const;
};

using BatchStateEstimator = std::function<nn::Mat<float>(const std::vector<GridF>& gradients)>;
using BatchQualityEstimator = std::function<std::vector<Quality>(const std::vector<GridF>& gradients)>;

BatchStateEstimator batch_state_estimator(std::vector<nn::Network<float>>& dse, bool clip = false);
BatchQualityEstimator batch_quality_estimator(std::vector<nn::Network<float>>& dqc);

class ScanTooSmallError : public Error {
 public:
  using Error::Error;
};

/// Slides a `window`-pixel window over every interior pixel (margin `margin` pixels on each side).
/// The window for pixel (r, c) covers rows r - window/2 .. r + (window+1)/2 - 1.
MapResult evaluate_map(const GridD& sensor, double pitch, const BatchStateEstimator& dse,
                       const BatchQualityEstimator& dqc, int window = 30, int margin = 15);

double iou(const Grid<std::uint8_t>& a, const Grid<std::uint8_t>& b);

/// RGB image; hue averaged by angle over LD/CD/RD/DD weighted by probability, ND darkens.
Grid<std::array<std::uint8_t, 3>> render_state_map(const MapResult& m);
Grid<std::array<std::uint8_t, 3>> render_quality_map(const MapResult& m);

void write_ppm(const std::filesystem::path& path, const Grid<std::array<std::uint8_t, 3>>& image);
void write_pgm(const std::filesystem::path& path, const GridD& image);
/// Raw float32 little-endian tensor plus a JSON header describing its shape.
void write_tensor(const std::filesystem::path& path, const nn::Mat<float>& data, const std::vector<int>& shape);
/// Reads a 2-D tensor written by write_tensor (or write_scan) as a rows x cols grid.
GridD read_scan(const std::filesystem::path& path);
void write_scan(const std::filesystem::path& path, const GridD& scan);

}  // namespace qdtune::tune
