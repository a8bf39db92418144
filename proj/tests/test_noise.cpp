#include "oracles.hpp"

#include "qdtune/noise.hpp"

#include <doctest.h>

#include <numeric>

using namespace qdtune;
using namespace qdtune::noise;

TEST_CASE("coulomb lineshape at the peak and one linewidth away") {
  GridD v(1, 3);
  const double A = 0.7, gmax = 2.5, vmin = 0.3;
  v << vmin, vmin + 1.0 / A, vmin - 1.0 / A;
  const auto g = coulomb_peak(v, A, gmax, vmin);
  CHECK(g(0, 0) == gmax);
  const double expected = gmax / (std::cosh(1.0) * std::cosh(1.0));
  CHECK(std::abs(g(0, 1) - expected) < 1e-12);
  CHECK(std::abs(g(0, 2) - expected) < 1e-12);
  CHECK_THROWS_AS(coulomb_peak(v, -1.0, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("coulomb drift moves the peak along the raster") {
  GridD v = GridD::Zero(1, 4);
  v << 0.0, 0.1, 0.2, 0.3;
  const auto g = coulomb_peak(v, 2.0, 1.0, 0.0, 0.1);
  for (int c = 0; c < 4; ++c) CHECK(g(0, c) == doctest::Approx(1.0));
}

TEST_CASE("pink noise has a 1/f magnitude spectrum") {
  const auto field = pink_noise(256, 256, 1.0, 3);
  CHECK(std::abs(field.mean()) < 1e-9);  // zero DC bin
  const double slope = oracle::radial_spectrum_slope(field, 2, 100);
  CHECK(slope == doctest::Approx(-2.0).epsilon(0.15));
}

TEST_CASE("pink noise magnitude scales linearly") {
  const auto a = pink_noise(32, 32, 1.0, 8), b = pink_noise(32, 32, 3.0, 8);
  CHECK((b - 3.0 * a).abs().maxCoeff() < 1e-12);
}

TEST_CASE("white noise statistics") {
  const GridD zero = GridD::Zero(300, 300);
  const auto n = white_noise(zero, 0.5, 4);
  const double mean = n.mean();
  const double var = (n - mean).square().sum() / (n.size() - 1);
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::sqrt(var) == doctest::Approx(0.5).epsilon(0.01));
  CHECK(white_noise(zero, 0.0, 4).isApprox(zero));
}

TEST_CASE("jump run lengths are geometric") {
  const auto mask = jump_mask(1000, 1000, 0.01, 17);
  const auto runs = run_lengths(mask);
  REQUIRE(runs.size() > 5000);
  const double mean = std::accumulate(runs.begin(), runs.end(), 0.0) / runs.size();
  CHECK(std::abs(mean - 100.0) / 100.0 < 0.05);
  const auto gof = oracle::geometric_gof(runs, 0.01);
  CHECK(gof.dof > 20);
  CHECK(gof.p_value > 0.01);
}

TEST_CASE("jump mask segments count jumps in raster order") {
  const auto mask = jump_mask(20, 20, 0.05, 2);
  int count = 0;
  for (Eigen::Index i = 0; i < mask.jumps.size(); ++i) {
    count += mask.jumps.data()[i];
    CHECK(mask.segment.data()[i] == count);
  }
  CHECK(mask.segment_count == count + 1);
}

TEST_CASE("sensor jumps are piecewise constant between jumps") {
  const auto mask = jump_mask(30, 30, 0.02, 5);
  const auto off = sensor_jump_offsets(mask, 0.4, 6);
  for (Eigen::Index i = 1; i < off.size(); ++i)
    if (!mask.jumps.data()[i]) CHECK(off.data()[i] == off.data()[i - 1]);
}

TEST_CASE("dot jump magnitudes follow a Poisson law") {
  const auto m = dot_jump_magnitudes(200000, 1.5, 12);
  double mean = 0, var = 0;
  for (int k : m) mean += k;
  mean /= m.size();
  for (int k : m) var += (k - mean) * (k - mean);
  var /= (m.size() - 1);
  CHECK(mean == doctest::Approx(1.5).epsilon(0.02));
  CHECK(var == doctest::Approx(1.5).epsilon(0.03));
}

TEST_CASE("apply_noise is deterministic and leaves the state map alone") {
  const auto scan = sim::simulate_scan(sim::DeviceParams{}, sim::VoltageWindow::centered(20, 20, 30, 2.0));
  auto params = default_noise_params();
  const auto a = apply_noise(scan, params, 5), b = apply_noise(scan, params, 5), c = apply_noise(scan, params, 6);
  CHECK((a == b).all());
  CHECK(!(a == c).all());

  params.enabled = NoiseMask::none();
  CHECK(apply_noise(scan, params, 5).isApprox(scan.sensor));
}

TEST_CASE("per-pixel scale map of zero disables the scaled processes") {
  const auto scan = sim::simulate_scan(sim::DeviceParams{}, sim::VoltageWindow::centered(20, 20, 30, 2.0));
  auto params = default_noise_params();
  params.enabled = NoiseMask{false, false, true, true, true};
  const GridD zero = GridD::Zero(30, 30);
  CHECK(apply_noise(scan, params, 1, zero).isApprox(scan.sensor));
  GridD ones = GridD::Ones(30, 30);
  CHECK((apply_noise(scan, params, 1, ones) == apply_noise(scan, params, 1)).all());
  CHECK_THROWS_AS(apply_noise(scan, params, 1, GridD::Ones(3, 3)), std::invalid_argument);
}

TEST_CASE("noise parameter sampling modes") {
  const auto base = default_noise_params();
  const auto sweep = sample_noise_params(base, ThresholdSweep{0.0, 7.0}, 3);
  CHECK(sweep.noise_scale >= 0.0);
  CHECK(sweep.noise_scale <= 7.0);
  CHECK(sweep.white_sigma == base.white_sigma);
  const auto per = sample_noise_params(base, PerNoiseOnePercent{}, 3);
  CHECK(std::abs(per.white_sigma - base.white_sigma) < 0.06 * base.white_sigma);
  CHECK_THROWS_AS(sample_noise_params(base, ThresholdSweep{3.0, 1.0}, 3), std::invalid_argument);
}

TEST_CASE("noise config file round trip") {
  const auto p = load_noise_params(QDTUNE_SOURCE_DIR "/config/noise_default.cfg");
  const auto d = default_noise_params();
  CHECK(p.white_sigma == d.white_sigma);
  CHECK(p.pink_magnitude == d.pink_magnitude);
  CHECK(p.sensor_jump_sigma == d.sensor_jump_sigma);
  CHECK(p.enabled == d.enabled);
  const auto back = NoiseParams::from_config(d.to_config());
  CHECK(back.coulomb_vmin == d.coulomb_vmin);
  CHECK(back.enabled == d.enabled);
}
