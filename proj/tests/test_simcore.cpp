#include "oracles.hpp"

#include "qdtune/simcore.hpp"

#include <doctest.h>

#include <random>

using namespace qdtune;
using namespace qdtune::sim;

TEST_CASE("ground state matches exhaustive search on random devices") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> mu(-3.0, 20.0);
  int checked = 0;
  for (int d = 0; d < 40; ++d) {
    const auto device = sample_device(1000 + d);
    for (int k = 0; k < 200; ++k) {
      const double m1 = mu(rng), m2 = mu(rng);
      const auto expected = oracle::brute_force_ground_state(device, m1, m2, 12);
      if (expected.left >= 10 || expected.right >= 10) continue;
      const auto got = ground_state(device, Eigen::Vector2d(m1, m2), 10);
      REQUIRE(got == expected);
      ++checked;
    }
  }
  CHECK(checked > 5000);
}

TEST_CASE("zero potentials give the empty configuration") {
  DeviceParams d;
  CHECK(compute_charge_config(d, 0.0, 0.0) == Occupancy{0, 0});
  CHECK(classify_pixel(d, {0, 0}) == State::ND);
}

TEST_CASE("occupancy bound is reported") {
  DeviceParams d;
  CHECK_THROWS_AS(compute_charge_config(d, 1000.0, 1000.0), BoundExceededError);
}

TEST_CASE("state classification by occupancy") {
  DeviceParams d;  // merge ratio 0.2
  CHECK(classify_pixel(d, {2, 0}) == State::LD);
  CHECK(classify_pixel(d, {0, 1}) == State::RD);
  CHECK(classify_pixel(d, {1, 3}) == State::DD);
  d.mutual_charging_energy = 2.0;  // ratio 0.8 > 0.6
  CHECK(classify_pixel(d, {1, 3}) == State::CD);
  CHECK(classify_pixel(d, {0, 0}) == State::ND);
}

TEST_CASE("scan labels are area fractions") {
  DeviceParams d;
  const auto scan = simulate_scan(d, VoltageWindow::centered(20.0, 20.0, 30, 2.0));
  const auto label = label_scan(scan);
  CHECK(label.probabilities.sum() == doctest::Approx(1.0));
  std::array<int, 5> counts{};
  for (Eigen::Index i = 0; i < scan.state_map.size(); ++i) ++counts[scan.state_map.data()[i]];
  for (int s = 0; s < 5; ++s) CHECK(label.probabilities[s] == doctest::Approx(counts[s] / 900.0));
  CHECK_NOTHROW(label.validate());
}

TEST_CASE("sensor is linear in occupancy and voltage") {
  DeviceParams d;
  const auto scan = simulate_scan(d, VoltageWindow::centered(30.0, 30.0, 10, 2.0));
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c) {
      const double expected = d.sensor_coupling[0] * scan.occupancy_left(r, c) +
                              d.sensor_coupling[1] * scan.occupancy_right(r, c) +
                              d.sensor_gate_coupling[0] * scan.window.v1_at(c) +
                              d.sensor_gate_coupling[1] * scan.window.v2_at(r);
      CHECK(scan.sensor(r, c) == doctest::Approx(expected));
    }
}

TEST_CASE("occupancy never decreases with plunger voltage") {
  DeviceParams d;
  const auto scan = simulate_scan(d, VoltageWindow{0.0, 100.0, 0.0, 100.0, 40});
  for (int r = 0; r < 40; ++r)
    for (int c = 1; c < 40; ++c)
      CHECK(scan.occupancy_left(r, c) + scan.occupancy_right(r, c) >=
            scan.occupancy_left(r, c - 1) + scan.occupancy_right(r, c - 1));
}

TEST_CASE("device validation") {
  DeviceParams d;
  CHECK(d.is_valid());
  d.mutual_charging_energy = 3.0;
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
  d = DeviceParams{};
  d.lever_arm_matrix << 0.02, 0.1, 0.1, 0.02;
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
  CHECK_THROWS_AS((VoltageWindow{10.0, 0.0, 0.0, 10.0, 30}.validate()), std::invalid_argument);
}

TEST_CASE("sampled devices are valid and deterministic") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto a = sample_device(s), b = sample_device(s);
    CHECK(a.is_valid());
    CHECK(a.charging_energy_left == b.charging_energy_left);
    CHECK(a.lever_arm_matrix == b.lever_arm_matrix);
  }
  const auto pinned = sample_device(5, DeviceRanges::pinned(DeviceParams{}));
  CHECK(pinned.charging_energy_left == DeviceParams{}.charging_energy_left);
}

TEST_CASE("device config round trip") {
  auto d = sample_device(77);
  const auto back = DeviceParams::from_config(d.to_config());
  CHECK(back.charging_energy_right == doctest::Approx(d.charging_energy_right));
  CHECK(back.lever_arm_matrix.isApprox(d.lever_arm_matrix));
  CHECK(back.offset_left == doctest::Approx(d.offset_left));
}
