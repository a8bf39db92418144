#include "qdtune/dqc.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>

using namespace qdtune;

namespace {

struct Logistic {
  double base, height, steepness, mid;
  double operator()(double s) const { return base + height / (1.0 + std::exp(-steepness * (s - mid))); }
  // analytic inverse
  double at_level(double y) const { return mid - std::log(height / (y - base) - 1.0) / steepness; }
};

// Dense noise-free samples of the curve for one state.
void add_curve(std::vector<double>& mae, std::vector<double>& scale, std::vector<State>& state, State s,
               const Logistic& f, int n) {
  for (int i = 0; i < n; ++i) {
    const double x = 7.0 * (i + 0.5) / n;
    mae.push_back(f(x));
    scale.push_back(x);
    state.push_back(s);
  }
}

}  // namespace

TEST_CASE("thresholds recovered from logistic MAE curves") {
  const std::array<Logistic, 4> curves = {Logistic{0.05, 0.3, 2.0, 2.5}, Logistic{0.02, 0.25, 1.5, 3.5},
                                          Logistic{0.08, 0.2, 3.0, 1.8}, Logistic{0.03, 0.35, 1.2, 4.0}};
  std::vector<double> mae, scale;
  std::vector<State> state;
  const std::array<State, 4> states = {State::LD, State::CD, State::RD, State::DD};
  for (int k = 0; k < 4; ++k) add_curve(mae, scale, state, states[k], curves[k], 5600);
  const auto c = dqc::build_mae_curves(mae, scale, state);
  const auto t = dqc::calibrate_thresholds(c);
  const double bin = c.bin_width();
  double nd_lower = 1e9, nd_upper = 1e9;
  for (int k = 0; k < 4; ++k) {
    const auto& f = curves[k];
    const double lo = f(0.0), hi = f(7.0);
    const double expect_lower = f.at_level(lo + 0.025 * (hi - lo));
    const double expect_upper = f.at_level(lo + 0.5 * (hi - lo));
    CAPTURE(k);
    CHECK(std::abs(t[states[k]].lower - expect_lower) <= bin);
    CHECK(std::abs(t[states[k]].upper - expect_upper) <= bin);
    nd_lower = std::min(nd_lower, t[states[k]].lower);
    nd_upper = std::min(nd_upper, t[states[k]].upper);
  }
  CHECK(t[State::ND].lower == nd_lower);
  CHECK(t[State::ND].upper == nd_upper);
}

TEST_CASE("MAE binning by noise scale and state") {
  std::vector<double> mae = {0.1, 0.3, 0.5, 0.7, 0.2};
  std::vector<double> scale = {0.1, 0.2, 6.9, 6.8, 0.15};
  std::vector<State> state = {State::LD, State::LD, State::LD, State::LD, State::DD};
  const auto c = dqc::build_mae_curves(mae, scale, state, 7, 0.0, 7.0);
  const auto& ld = c[State::LD];
  REQUIRE(ld.available);
  REQUIRE(ld.centers.size() == 2);  // only occupied bins
  CHECK(ld.centers[0] == doctest::Approx(0.5));
  CHECK(ld.mean_mae[0] == doctest::Approx(0.2));
  CHECK(ld.counts[0] == 2);
  CHECK(ld.centers[1] == doctest::Approx(6.5));
  CHECK(ld.mean_mae[1] == doctest::Approx(0.6));
  CHECK(!c[State::CD].available);
  CHECK(c[State::DD].available);
}

TEST_CASE("crossing interpolates between bin centers and starts at the minimum") {
  dqc::StateCurve c;
  c.available = true;
  c.centers = {0.5, 1.5, 2.5, 3.5};
  c.mean_mae = {0.3, 0.1, 0.5, 0.9};  // dip first; search from the minimum
  c.min = 0.1;
  c.max = 0.9;
  CHECK(dqc::crossing(c, 0.5) == doctest::Approx(1.5 + (0.5 - 0.1) / 0.4));
  CHECK(dqc::crossing(c, 0.0) == doctest::Approx(1.5));
}

TEST_CASE("flat or missing curves are calibration errors") {
  std::vector<double> mae, scale;
  std::vector<State> state;
  for (State s : {State::LD, State::CD, State::RD, State::DD})
    for (int i = 0; i < 100; ++i) {
      mae.push_back(0.2);
      scale.push_back(7.0 * i / 100.0);
      state.push_back(s);
    }
  CHECK_THROWS_AS(dqc::calibrate_thresholds(dqc::build_mae_curves(mae, scale, state)), dqc::CalibrationError);
  std::vector<double> m2 = {0.1, 0.2};
  std::vector<double> s2 = {1.0, 2.0};
  std::vector<State> st2 = {State::LD, State::LD};
  CHECK_THROWS_AS(dqc::calibrate_thresholds(dqc::build_mae_curves(m2, s2, st2)), dqc::CalibrationError);
}

TEST_CASE("quality assignment uses half-open bands") {
  QualityThresholds t;
  for (auto& b : t.bands) b = {1.0, 2.0};
  CHECK(assign_quality(0.999, State::DD, t) == Quality::High);
  CHECK(assign_quality(1.0, State::DD, t) == Quality::Moderate);
  CHECK(assign_quality(1.999, State::DD, t) == Quality::Moderate);
  CHECK(assign_quality(2.0, State::DD, t) == Quality::Low);
  t[State::LD] = {3.0, 2.0};
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("thresholds persist as JSON") {
  namespace fs = std::filesystem;
  QualityThresholds t;
  for (int s = 0; s < kStateCount; ++s) t.bands[s] = {0.5 + s, 1.25 + s};
  t.calibration_hash = "abc123";
  const auto path = fs::temp_directory_path() / "qdtune_test_thresholds.json";
  t.save(path);
  const auto back = QualityThresholds::load(path);
  for (int s = 0; s < kStateCount; ++s) {
    CHECK(back.bands[s].lower == t.bands[s].lower);
    CHECK(back.bands[s].upper == t.bands[s].upper);
  }
  CHECK(back.calibration_hash == "abc123");
  fs::remove(path);
}

TEST_CASE("quality input keeps absolute noise amplitude") {
  GridF a(30, 30), b(30, 30);
  std::mt19937 rng(2);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = g(rng) + 5.0f;
    b.data()[i] = 3.0f * (a.data()[i] - 5.0f) + 1.0f;
  }
  const auto xa = dqc::quality_input(a), xb = dqc::quality_input(b);
  CHECK(std::abs(xa.mean()) < 1e-4);
  CHECK(xb.isApprox(3.0f * xa, 1e-4f));  // scale survives, offset does not
}

TEST_CASE("quality images need labels") {
  data::DatasetConfig cfg;
  cfg.kind = data::DatasetKind::Noiseless;
  cfg.count = 4;
  CHECK_THROWS_AS(dqc::quality_images(data::generate_samples(cfg, 1)), std::invalid_argument);
}

TEST_CASE("correlation report partitions every sample") {
  data::DatasetConfig cfg;
  cfg.kind = data::DatasetKind::DqcLabeled;
  cfg.count = 30;
  QualityThresholds t;
  for (auto& b : t.bands) b = {1.0, 3.0};
  cfg.thresholds = t;
  const auto samples = data::generate_samples(cfg, 1);
  std::vector<nn::Network<float>> dqc_nets, dse_nets;
  dqc_nets.push_back(nn::Network<float>::build(nn::NetworkSpec::dqc(), 1));
  dse_nets.push_back(nn::Network<float>::build(nn::NetworkSpec::noiseless_dse(), 1));
  const auto r = dqc::validate_quality_correlation(dqc_nets, dse_nets, samples, false, 100);
  std::size_t total = 0;
  for (const auto& c : r.classes) {
    total += c.count;
    CHECK(!c.included);  // all below 100
  }
  CHECK(total == samples.size());
  CHECK(!r.ordering_checked);
  CHECK(!r.notes.empty());
}
