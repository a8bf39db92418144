#include "qdtune/autotune.hpp"

#include "qdtune/dataset.hpp"
#include "qdtune/dqc.hpp"
#include "qdtune/dse.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

namespace qdtune::tune {

std::string_view to_string(Action a) {
  switch (a) {
    case Action::ClassifyAndOptimize: return "classify_and_optimize";
    case Action::Recalibrate: return "recalibrate";
    case Action::Terminate: return "terminate";
  }
  return "?";
}

Action route(Quality quality, int budget_remaining) {
  switch (quality) {
    case Quality::High: return Action::ClassifyAndOptimize;
    case Quality::Moderate: return budget_remaining > 0 ? Action::Recalibrate : Action::Terminate;
    case Quality::Low: return Action::Terminate;
  }
  return Action::Terminate;
}

SimulatedEnvironment::SimulatedEnvironment(sim::DeviceParams device, noise::NoiseParams noise, double noise_scale,
                                           std::uint64_t seed)
    : device_(std::move(device)), noise_(std::move(noise)), scale_(noise_scale), seed_(seed) {
  device_.validate();
  noise_.validate();
  if (!(noise_scale >= 0.0)) throw std::invalid_argument("noise scale must be >= 0");
}

GridD SimulatedEnvironment::measure(const sim::VoltageWindow& window) {
  const auto scan = sim::simulate_scan(device_, window);
  noise::NoiseParams p = noise_;
  p.noise_scale = scale_;
  const std::uint64_t s = derive_seed(seed_, count_++);
  return p.enabled.any() ? noise::apply_noise(scan, p, s) : scan.sensor;
}

QualityEstimator quality_estimator(std::vector<nn::Network<float>>& dqc) {
  return [&dqc](const GridF& g) { return dqc::predict_quality(dqc, g); };
}

StateEstimator state_estimator(std::vector<nn::Network<float>>& dse, bool clip) {
  return [&dse, clip](const GridF& g) {
    if (dse.empty()) throw std::invalid_argument("state estimator: no models");
    StateLabel out;
    for (auto& net : dse) out.probabilities += dse::predict_state(net, g, clip).probabilities / double(dse.size());
    return out;
  };
}

// --- Nelder-Mead -------------------------------------------------------------

bool NelderMead::clamp(Point& p) const {
  const Point q = p.cwiseMax(lo_).cwiseMin(hi_);
  const bool changed = q != p;
  p = q;
  return changed;
}

NelderMead::Point NelderMead::clamped(Point p) {
  if (clamp(p)) ++clamp_events_;
  return p;
}

void NelderMead::sort() {
  std::vector<std::size_t> idx(vertices_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return values_[a] < values_[b]; });
  std::vector<Point> v;
  std::vector<double> f;
  for (auto i : idx) {
    v.push_back(vertices_[i]);
    f.push_back(values_[i]);
  }
  vertices_ = std::move(v);
  values_ = std::move(f);
}

void NelderMead::initialize(const Point& start, double f_start, double step, const Objective& f) {
  vertices_ = {clamped(start)};
  values_ = {f_start};
  for (int axis = 0; axis < 2; ++axis) {
    Point p = start;
    p[axis] += step;
    // step away from the bound instead of collapsing onto it
    if (p[axis] > hi_[axis]) p[axis] = start[axis] - step;
    p = clamped(p);
    vertices_.push_back(p);
    values_.push_back(f(p));
  }
  sort();
}

void NelderMead::iterate(const Objective& f) {
  if (!initialized()) throw std::logic_error("NelderMead::iterate before initialize");
  constexpr double alpha = 1.0, gamma = 2.0, rho = 0.5, sigma = 0.5;
  const Point c = 0.5 * (vertices_[0] + vertices_[1]);
  const Point worst = vertices_[2];
  const Point xr = clamped(c + alpha * (c - worst));
  const double fr = f(xr);
  auto replace_worst = [&](const Point& p, double v) {
    vertices_[2] = p;
    values_[2] = v;
  };
  if (fr < values_[0]) {
    const Point xe = clamped(c + gamma * (xr - c));
    const double fe = f(xe);
    if (fe < fr)
      replace_worst(xe, fe);
    else
      replace_worst(xr, fr);
  } else if (fr < values_[1]) {
    replace_worst(xr, fr);
  } else {
    const bool outside = fr < values_[2];
    const Point xc = clamped(outside ? Point(c + rho * (xr - c)) : Point(c + rho * (worst - c)));
    const double fc = f(xc);
    if (outside ? fc <= fr : fc < values_[2]) {
      replace_worst(xc, fc);
    } else {
      for (int i = 1; i < 3; ++i) {
        vertices_[i] = clamped(vertices_[0] + sigma * (vertices_[i] - vertices_[0]));
        values_[i] = f(vertices_[i]);
      }
    }
  }
  sort();
  ++iterations_;
}

double NelderMead::diameter() const {
  double d = 0.0;
  for (std::size_t i = 0; i < vertices_.size(); ++i)
    for (std::size_t j = i + 1; j < vertices_.size(); ++j) d = std::max(d, (vertices_[i] - vertices_[j]).norm());
  return d;
}

// --- loop ----------------------------------------------------------------------

void TunerConfig::validate() const {
  target.validate(1e-6);
  if (budget < 0) throw std::invalid_argument("recalibration budget must be >= 0");
  if (!(recalibration_factor > 0.0 && recalibration_factor < 1.0))
    throw std::invalid_argument("recalibration factor must lie in (0, 1)");
  if (pixels < 2 || !(pitch > 0.0)) throw std::invalid_argument("bad tuner window geometry");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (!(upper.array() > lower.array()).all()) throw std::invalid_argument("tuner bounds must satisfy lower < upper");
}

TunerState TunerState::start(double v1, double v2, const TunerConfig& config) {
  config.validate();
  TunerState s;
  s.v1 = v1;
  s.v2 = v2;
  s.budget = config.budget;
  s.optimizer = NelderMead(config.lower, config.upper);
  Eigen::Vector2d p(v1, v2);
  if (s.optimizer.clamp(p)) {
    s.v1 = p[0];
    s.v2 = p[1];
    s.reason = "start point clamped to bounds";
  }
  return s;
}

double fitness(const StateLabel& prediction, const StateLabel& target) {
  return (prediction.probabilities - target.probabilities).norm();
}

namespace {

GridF gradient_at(Environment& env, double v1, double v2, const TunerConfig& config) {
  const auto window = sim::VoltageWindow::centered(v1, v2, config.pixels, config.pitch);
  return data::gradient_image(env.measure(window), window.pitch_v1()).cast<float>();
}

}  // namespace

Action tune_step(TunerState& state, const QualityEstimator& dqc, const StateEstimator& dse, Environment& env,
                 const TunerConfig& config) {
  if (state.terminated || state.converged) throw std::logic_error("tune_step on a finished tuner");
  StepRecord rec;
  rec.step = static_cast<int>(state.log.size());
  rec.v1 = state.v1;
  rec.v2 = state.v2;
  rec.noise_scale = env.noise_scale();
  const GridF grad = gradient_at(env, state.v1, state.v2, config);
  rec.quality = dqc(grad);
  rec.action = route(rec.quality, state.budget);

  switch (rec.action) {
    case Action::ClassifyAndOptimize: {
      const StateLabel pred = dse(grad);
      rec.prediction = pred;
      const double f = fitness(pred, config.target);
      rec.fitness = f;
      if (f < config.fitness_tolerance) {
        state.converged = true;
        state.success = pred.dominant() == config.target.dominant();
        state.reason = rec.reason = "fitness below tolerance";
        break;
      }
      const NelderMead::Objective objective = [&](const NelderMead::Point& p) {
        return fitness(dse(gradient_at(env, p[0], p[1], config)), config.target);
      };
      const int clamps_before = state.optimizer.clamp_events();
      if (!state.optimizer.initialized())
        state.optimizer.initialize({state.v1, state.v2}, f, config.initial_step, objective);
      else
        state.optimizer.iterate(objective);
      if (state.optimizer.clamp_events() > clamps_before) rec.reason = "simplex point clamped to bounds";
      state.v1 = state.optimizer.best()[0];
      state.v2 = state.optimizer.best()[1];
      if (state.optimizer.best_value() < config.fitness_tolerance ||
          state.optimizer.diameter() < config.simplex_tolerance) {
        state.converged = true;
        const StateLabel at_best = dse(gradient_at(env, state.v1, state.v2, config));
        state.success = at_best.dominant() == config.target.dominant();
        state.reason = state.optimizer.best_value() < config.fitness_tolerance ? "fitness below tolerance"
                                                                                : "simplex below tolerance";
        if (rec.reason.empty()) rec.reason = state.reason;
      }
      break;
    }
    case Action::Recalibrate:
      env.recalibrate(config.recalibration_factor);
      --state.budget;
      rec.reason = "moderate quality: noise scale x" + std::to_string(config.recalibration_factor);
      break;
    case Action::Terminate:
      state.terminated = true;
      state.reason = rec.reason =
          rec.quality == Quality::Low ? "low quality data" : "recalibration budget exhausted";
      break;
  }
  rec.budget_remaining = state.budget;
  state.log.push_back(std::move(rec));
  return state.log.back().action;
}

TunerState run_tuner(double v1, double v2, const QualityEstimator& dqc, const StateEstimator& dse, Environment& env,
                     const TunerConfig& config) {
  TunerState state = TunerState::start(v1, v2, config);
  for (int i = 0; i < config.max_steps && !state.terminated && !state.converged; ++i)
    tune_step(state, dqc, dse, env, config);
  if (!state.terminated && !state.converged) {
    state.terminated = true;
    state.reason = "step limit reached";
  }
  return state;
}

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"step", r.step},
                   {"v1", r.v1},
                   {"v2", r.v2},
                   {"noise_scale", r.noise_scale},
                   {"quality", std::string(to_string(r.quality))},
                   {"action", std::string(to_string(r.action))},
                   {"budget_remaining", r.budget_remaining}};
  if (r.prediction) {
    std::vector<double> p(r.prediction->probabilities.data(), r.prediction->probabilities.data() + kStateCount);
    j["prediction"] = p;
    j["predicted_state"] = std::string(to_string(r.prediction->dominant()));
  }
  if (r.fitness) j["fitness"] = *r.fitness;
  if (!r.reason.empty()) j["reason"] = r.reason;
  return j;
}

// --- maps ----------------------------------------------------------------------

GridF MapResult::probability(State s) const {
  GridF g(rows, cols);
  for (int i = 0; i < rows * cols; ++i) g(i / cols, i % cols) = predictions(static_cast<int>(s), i);
  return g;
}

Grid<std::uint8_t> MapResult::mixed_mask(double threshold) const {
  Grid<std::uint8_t> m(rows, cols);
  for (int i = 0; i < rows * cols; ++i) m(i / cols, i % cols) = predictions.col(i).maxCoeff() < threshold;
  return m;
}

BatchStateEstimator batch_state_estimator(std::vector<nn::Network<float>>& dse, bool clip) {
  return [&dse, clip](const std::vector<GridF>& grads) {
    if (dse.empty()) throw std::invalid_argument("state estimator: no models");
    nn::Mat<float> x(static_cast<Eigen::Index>(grads.front().size()), static_cast<Eigen::Index>(grads.size()));
    for (std::size_t i = 0; i < grads.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = dse::preprocess(grads[i], clip);
    nn::Mat<float> p = nn::Mat<float>::Zero(kStateCount, x.cols());
    for (auto& net : dse) p += nn::predict(net, x) / static_cast<float>(dse.size());
    return p;
  };
}

BatchQualityEstimator batch_quality_estimator(std::vector<nn::Network<float>>& dqc) {
  return [&dqc](const std::vector<GridF>& grads) {
    nn::Mat<float> x(static_cast<Eigen::Index>(grads.front().size()), static_cast<Eigen::Index>(grads.size()));
    for (std::size_t i = 0; i < grads.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = dqc::quality_input(grads[i]);
    const nn::Mat<float> p = dqc::predict_quality(dqc, x);
    std::vector<Quality> out(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Eigen::Index q = 0;
      p.col(static_cast<Eigen::Index>(i)).maxCoeff(&q);
      out[i] = static_cast<Quality>(q);
    }
    return out;
  };
}

MapResult evaluate_map(const GridD& sensor, double pitch, const BatchStateEstimator& dse,
                       const BatchQualityEstimator& dqc, int window, int margin) {
  if (window < 2 || margin < window / 2 || !(pitch > 0.0))
    throw std::invalid_argument("evaluate_map: margin must cover half a window");
  const int h = static_cast<int>(sensor.rows()), w = static_cast<int>(sensor.cols());
  if (h <= window + 2 * margin || w <= window + 2 * margin)
    throw ScanTooSmallError("evaluate_map: scan " + std::to_string(h) + "x" + std::to_string(w) +
                            " is not larger than window + 2 x margin (" + std::to_string(window + 2 * margin) + ")");
  MapResult m;
  m.rows = h - 2 * margin;
  m.cols = w - 2 * margin;
  m.margin = margin;
  m.predictions.resize(kStateCount, static_cast<Eigen::Index>(m.rows) * m.cols);
  m.quality.resize(m.rows, m.cols);
  const int total = m.rows * m.cols;
  constexpr int kChunk = 256;
  for (int start = 0; start < total; start += kChunk) {
    const int n = std::min(kChunk, total - start);
    std::vector<GridF> grads(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      const int r = (start + k) / m.cols + margin, c = (start + k) % m.cols + margin;
      grads[static_cast<std::size_t>(k)] =
          data::gradient_image(sensor.block(r - window / 2, c - window / 2, window, window), pitch).cast<float>();
    }
    m.predictions.middleCols(start, n) = dse(grads);
    const auto q = dqc(grads);
    for (int k = 0; k < n; ++k) m.quality((start + k) / m.cols, (start + k) % m.cols) = static_cast<std::uint8_t>(q[k]);
  }
  return m;
}

double iou(const Grid<std::uint8_t>& a, const Grid<std::uint8_t>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const bool x = a.data()[i] != 0, y = b.data()[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

namespace {

std::array<std::uint8_t, 3> hsv(double h, double s, double v) {
  h = std::fmod(h < 0 ? h + 360.0 : h, 360.0) / 60.0;
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  auto u8 = [](double t) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0))); };
  return {u8(r + m), u8(g + m), u8(b + m)};
}

}  // namespace

Grid<std::array<std::uint8_t, 3>> render_state_map(const MapResult& m) {
  // LD red, CD yellow-green, RD cyan, DD violet; ND has no hue and darkens the pixel
  constexpr std::array<double, kStateCount> hue = {0.0, 0.0, 90.0, 180.0, 270.0};
  Grid<std::array<std::uint8_t, 3>> img(m.rows, m.cols);
  for (int i = 0; i < m.rows * m.cols; ++i) {
    const auto p = m.predictions.col(i);
    double x = 0.0, y = 0.0;
    for (int s = 1; s < kStateCount; ++s) {
      x += p[s] * std::cos(hue[s] * M_PI / 180.0);
      y += p[s] * std::sin(hue[s] * M_PI / 180.0);
    }
    const double occupied = std::max(1e-9, 1.0 - static_cast<double>(p[0]));
    const double sat = std::min(1.0, std::hypot(x, y) / occupied);
    img(i / m.cols, i % m.cols) = hsv(std::atan2(y, x) * 180.0 / M_PI, sat, 1.0 - 0.85 * p[0]);
  }
  return img;
}

Grid<std::array<std::uint8_t, 3>> render_quality_map(const MapResult& m) {
  constexpr std::array<std::array<std::uint8_t, 3>, kQualityCount> colors = {{{0, 170, 0}, {230, 200, 0}, {200, 0, 0}}};
  Grid<std::array<std::uint8_t, 3>> img(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) img(r, c) = colors[m.quality(r, c)];
  return img;
}

void write_ppm(const std::filesystem::path& path, const Grid<std::array<std::uint8_t, 3>>& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "P6\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (Eigen::Index r = 0; r < image.rows(); ++r)
    for (Eigen::Index c = 0; c < image.cols(); ++c) out.write(reinterpret_cast<const char*>(image(r, c).data()), 3);
  if (!out) throw Error("write failed for " + path.string());
}

void write_pgm(const std::filesystem::path& path, const GridD& image) {
  const double lo = image.minCoeff(), hi = image.maxCoeff();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    const double t = hi > lo ? (image.data()[i] - lo) / (hi - lo) : 0.0;
    out.put(static_cast<char>(std::lround(255.0 * t)));
  }
  if (!out) throw Error("write failed for " + path.string());
}

void write_tensor(const std::filesystem::path& path, const nn::Mat<float>& data, const std::vector<int>& shape) {
  static_assert(std::endian::native == std::endian::little, "tensor writer assumes a little-endian host");
  const long expected = std::accumulate(shape.begin(), shape.end(), 1L, std::multiplies<>());
  if (expected != data.size()) throw std::invalid_argument("write_tensor: shape does not match data size");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw Error("write failed for " + path.string());
  std::ofstream header(path.string() + ".json", std::ios::trunc);
  header << nlohmann::json{{"dtype", "float32"}, {"byte_order", "little"}, {"layout", "row-major"}, {"shape", shape}}.dump(2)
         << "\n";
}

void write_scan(const std::filesystem::path& path, const GridD& scan) {
  nn::Mat<float> m = scan.cast<float>().matrix();
  m.transposeInPlace();  // column-major storage of the transpose is row-major order
  write_tensor(path, m, {static_cast<int>(scan.rows()), static_cast<int>(scan.cols())});
}

GridD read_scan(const std::filesystem::path& path) {
  std::ifstream hf(path.string() + ".json");
  if (!hf) throw Error("missing tensor header " + path.string() + ".json");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hf);
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad tensor header " + path.string() + ".json: " + e.what());
  }
  const auto shape = header.value("shape", std::vector<int>{});
  if (header.value("dtype", "") != "float32" || shape.size() != 2 || shape[0] <= 0 || shape[1] <= 0)
    throw Error("expected a 2-D float32 tensor in " + path.string());
  const auto n = static_cast<std::size_t>(shape[0]) * static_cast<std::size_t>(shape[1]);
  std::vector<float> buf(n);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
    throw Error("truncated tensor " + path.string());
  GridD g(shape[0], shape[1]);
  for (int r = 0; r < shape[0]; ++r)
    for (int c = 0; c < shape[1]; ++c) g(r, c) = buf[static_cast<std::size_t>(r) * shape[1] + c];
  return g;
}

}  // namespace qdtune::tune
