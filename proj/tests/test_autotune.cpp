#include "qdtune/autotune.hpp"
#include "qdtune/dataset.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace qdtune;
using namespace qdtune::tune;

namespace {

// Noise-free simulator that remembers the last window so fixtures can look up ground truth.
class RecordingEnvironment : public Environment {
 public:
  explicit RecordingEnvironment(sim::DeviceParams d, double scale = 1.0) : device(d), scale(scale) {}
  GridD measure(const sim::VoltageWindow& w) override {
    last = w;
    ++count;
    return sim::simulate_scan(device, w).sensor;
  }
  double noise_scale() const override { return scale; }
  void recalibrate(double factor) override { scale *= factor; }

  sim::DeviceParams device;
  double scale;
  sim::VoltageWindow last;
  int count = 0;
};

QualityEstimator banded(const Environment& env, double lower, double upper) {
  return [&env, lower, upper](const GridF&) {
    const double s = env.noise_scale();
    return s < lower ? Quality::High : s < upper ? Quality::Moderate : Quality::Low;
  };
}

StateEstimator ground_truth(RecordingEnvironment& env) {
  return [&env](const GridF&) { return sim::label_scan(sim::simulate_scan(env.device, env.last)); };
}

}  // namespace

TEST_CASE("routing table") {
  CHECK(route(Quality::High, 3) == Action::ClassifyAndOptimize);
  CHECK(route(Quality::High, 0) == Action::ClassifyAndOptimize);
  CHECK(route(Quality::Moderate, 3) == Action::Recalibrate);
  CHECK(route(Quality::Moderate, 1) == Action::Recalibrate);
  CHECK(route(Quality::Moderate, 0) == Action::Terminate);
  CHECK(route(Quality::Low, 3) == Action::Terminate);
}

TEST_CASE("tune_step follows the quality bands") {
  TunerConfig cfg;
  RecordingEnvironment env(sim::DeviceParams{});
  const auto dse = ground_truth(env);
  const auto dqc = banded(env, 1.0, 3.0);

  SUBCASE("low quality terminates") {
    env.scale = 5.0;
    auto st = TunerState::start(60, 60, cfg);
    CHECK(tune_step(st, dqc, dse, env, cfg) == Action::Terminate);
    CHECK(st.terminated);
    CHECK(st.log.back().quality == Quality::Low);
    CHECK(st.reason == "low quality data");
  }
  SUBCASE("moderate recalibrates, then high classifies") {
    env.scale = 1.5;
    auto st = TunerState::start(60, 60, cfg);
    CHECK(tune_step(st, dqc, dse, env, cfg) == Action::Recalibrate);
    CHECK(env.scale == doctest::Approx(0.75));
    CHECK(st.budget == 2);
    CHECK(tune_step(st, dqc, dse, env, cfg) == Action::ClassifyAndOptimize);
    CHECK(st.log.back().prediction.has_value());
  }
  SUBCASE("budget exhaustion terminates") {
    const QualityEstimator always_moderate = [](const GridF&) { return Quality::Moderate; };
    auto st = run_tuner(60, 60, always_moderate, dse, env, cfg);
    REQUIRE(st.log.size() == 4);
    for (int i = 0; i < 3; ++i) CHECK(st.log[i].action == Action::Recalibrate);
    CHECK(st.log[3].action == Action::Terminate);
    CHECK(st.reason == "recalibration budget exhausted");
    CHECK(env.scale == doctest::Approx(0.125));
  }
  SUBCASE("logged action is a function of logged quality and budget") {
    env.scale = 2.5;
    const QualityEstimator alternating = [n = 0](const GridF&) mutable {
      return (n++ % 2) ? Quality::High : Quality::Moderate;
    };
    auto st = run_tuner(60, 60, alternating, dse, env, cfg);
    int budget = cfg.budget;
    for (const auto& rec : st.log) {
      CHECK(rec.action == route(rec.quality, budget));
      budget = rec.budget_remaining;
    }
  }
}

TEST_CASE("start inside the target region converges at once") {
  TunerConfig cfg;
  RecordingEnvironment env(sim::DeviceParams{}, 0.5);
  auto st = run_tuner(90, 90, banded(env, 1.0, 3.0), ground_truth(env), env, cfg);
  REQUIRE(st.log.size() == 1);
  CHECK(st.converged);
  CHECK(st.success);
  CHECK(*st.log[0].fitness < 0.2);
}

TEST_CASE("Nelder-Mead reaches the double-dot region from the single-dot region") {
  TunerConfig cfg;
  cfg.max_steps = 50;
  RecordingEnvironment env(sim::DeviceParams{});
  env.scale = 0.5;
  const auto truth = ground_truth(env);
  // confirm the start really is single-dot dominated
  env.last = sim::VoltageWindow::centered(60, -40, 30, 2.0);
  CHECK(truth(GridF()).dominant() == State::LD);

  auto st = run_tuner(60, -40, banded(env, 1.0, 3.0), truth, env, cfg);
  CHECK(st.converged);
  CHECK(st.success);
  CHECK(st.log.size() <= 50);
  env.last = sim::VoltageWindow::centered(st.v1, st.v2, 30, 2.0);
  CHECK(truth(GridF()).dominant() == State::DD);
}

TEST_CASE("identical inputs give identical logs") {
  TunerConfig cfg;
  auto run = [&] {
    tune::SimulatedEnvironment env(sim::DeviceParams{}, noise::default_noise_params(), 0.5, 3);
    // depends on the noisy measurement, so any nondeterminism would show up in the log
    const StateEstimator dse = [](const GridF& g) {
      const double a = 1.0 / (1.0 + std::exp(-10.0 * g.mean()));
      StateLabel l;
      l.probabilities[static_cast<int>(State::DD)] = a;
      l.probabilities[static_cast<int>(State::LD)] = 1.0 - a;
      return l;
    };
    const QualityEstimator dqc = [](const GridF&) { return Quality::High; };
    auto st = run_tuner(60, -40, dqc, dse, env, cfg);
    nlohmann::json log = nlohmann::json::array();
    for (const auto& r : st.log) log.push_back(to_json(r));
    return log.dump();
  };
  CHECK(run() == run());
}

TEST_CASE("tuner configuration is validated") {
  TunerConfig cfg;
  cfg.target.probabilities.setZero();
  CHECK_THROWS_AS(TunerState::start(0, 0, cfg), std::invalid_argument);
  cfg = TunerConfig{};
  cfg.recalibration_factor = 1.5;
  CHECK_THROWS_AS(TunerState::start(0, 0, cfg), std::invalid_argument);
  cfg = TunerConfig{};
  auto st = TunerState::start(500, 0, cfg);
  CHECK(st.v1 == cfg.upper[0]);
  CHECK(!st.reason.empty());
}

TEST_CASE("simplex iterations stay inside the bounds") {
  NelderMead nm({0.0, 0.0}, {10.0, 10.0});
  const NelderMead::Objective f = [](const NelderMead::Point& p) { return (p - Eigen::Vector2d(30, -5)).norm(); };
  nm.initialize({5, 5}, f({5, 5}), 4.0, f);
  for (int i = 0; i < 60; ++i) nm.iterate(f);
  CHECK(nm.best()[0] == doctest::Approx(10.0).epsilon(1e-3));
  CHECK(nm.best()[1] == doctest::Approx(0.0).epsilon(1e-3));
  CHECK(nm.clamp_events() > 0);
}

TEST_CASE("simplex minimizes a smooth bowl") {
  NelderMead nm;
  const NelderMead::Objective f = [](const NelderMead::Point& p) {
    return (p[0] - 3) * (p[0] - 3) + 2 * (p[1] + 1) * (p[1] + 1);
  };
  nm.initialize({0, 0}, f({0, 0}), 1.0, f);
  for (int i = 0; i < 100; ++i) nm.iterate(f);
  CHECK(nm.best()[0] == doctest::Approx(3.0).epsilon(1e-3));
  CHECK(nm.best()[1] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(nm.diameter() < 1e-3);
}

// --- maps -------------------------------------------------------------------

TEST_CASE("map geometry and window centering") {
  // sensor = c^2 / 2 has central-difference gradient exactly c at unit pitch
  const int h = 70, w = 85;
  GridD s(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) s(r, c) = 0.5 * c * c + 0.01 * r;
  const BatchStateEstimator dse = [](const std::vector<GridF>& g) {
    nn::Mat<float> p = nn::Mat<float>::Zero(5, static_cast<Eigen::Index>(g.size()));
    for (std::size_t i = 0; i < g.size(); ++i) p(0, static_cast<Eigen::Index>(i)) = g[i](15, 15);
    return p;
  };
  const BatchQualityEstimator dqc = [](const std::vector<GridF>& g) { return std::vector<Quality>(g.size(), Quality::High); };
  const auto m = evaluate_map(s, 1.0, dse, dqc);
  CHECK(m.rows == h - 30);
  CHECK(m.cols == w - 30);
  CHECK(m.quality.rows() == h - 30);
  for (int r = 0; r < m.rows; r += 7)
    for (int c = 0; c < m.cols; c += 5) CHECK(m.probability(State::ND)(r, c) == doctest::Approx(c + 15));
  CHECK((m.quality == 0).all());
}

TEST_CASE("scans not larger than window plus margins are rejected") {
  const BatchStateEstimator dse = [](const std::vector<GridF>& g) {
    return nn::Mat<float>::Zero(5, static_cast<Eigen::Index>(g.size())).eval();
  };
  const BatchQualityEstimator dqc = [](const std::vector<GridF>& g) { return std::vector<Quality>(g.size()); };
  CHECK_THROWS_AS(evaluate_map(GridD::Zero(60, 100), 2.0, dse, dqc), ScanTooSmallError);
  CHECK_THROWS_AS(evaluate_map(GridD::Zero(100, 60), 2.0, dse, dqc), ScanTooSmallError);
  CHECK(evaluate_map(GridD::Zero(61, 61), 2.0, dse, dqc).rows == 31);
}

TEST_CASE("mixed mask and IoU") {
  MapResult m;
  m.rows = 1;
  m.cols = 3;
  m.predictions = nn::Mat<float>::Zero(5, 3);
  m.predictions.col(0) << 0.9f, 0.1f, 0, 0, 0;
  m.predictions.col(1) << 0.5f, 0.5f, 0, 0, 0;
  m.predictions.col(2) << 0.6f, 0.2f, 0.2f, 0, 0;
  const auto mixed = m.mixed_mask(0.7);
  CHECK(mixed(0, 0) == 0);
  CHECK(mixed(0, 1) == 1);
  CHECK(mixed(0, 2) == 1);

  Grid<std::uint8_t> a(1, 4), b(1, 4);
  a << 1, 1, 0, 0;
  b << 0, 1, 1, 0;
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(a, a) == doctest::Approx(1.0));
}

TEST_CASE("images and tensors on disk") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "qdtune_test_maps";
  fs::remove_all(dir);
  fs::create_directories(dir);
  GridD s(3, 4);
  for (int i = 0; i < 12; ++i) s.data()[i] = i * 0.25;
  write_pgm(dir / "s.pgm", s);
  CHECK(fs::file_size(dir / "s.pgm") == std::string("P5\n4 3\n255\n").size() + 12);
  write_scan(dir / "s.f32", s);
  const auto back = read_scan(dir / "s.f32");
  CHECK(back.isApprox(s));
  Grid<std::array<std::uint8_t, 3>> img(2, 5);
  for (int i = 0; i < 10; ++i) img.data()[i] = {1, 2, 3};
  write_ppm(dir / "i.ppm", img);
  CHECK(fs::file_size(dir / "i.ppm") == std::string("P6\n5 2\n255\n").size() + 30);
  fs::resize_file(dir / "s.f32", 8);
  CHECK_THROWS(read_scan(dir / "s.f32"));
  fs::remove_all(dir);
}

TEST_CASE("state map colors follow the dominant state; ND is dark") {
  MapResult m;
  m.rows = 1;
  m.cols = 2;
  m.predictions = nn::Mat<float>::Zero(5, 2);
  m.predictions(0, 0) = 1.0f;  // ND
  m.predictions(4, 1) = 1.0f;  // DD
  m.quality = Grid<std::uint8_t>::Zero(1, 2);
  const auto img = render_state_map(m);
  const auto& nd = img(0, 0);
  const auto& dd = img(0, 1);
  CHECK(nd[0] + nd[1] + nd[2] < dd[0] + dd[1] + dd[2]);
}
