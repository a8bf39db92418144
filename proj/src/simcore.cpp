#include "qdtune/simcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace qdtune::sim {

void DeviceParams::validate() const {
  auto fail = [](const char* what) { throw std::invalid_argument(std::string("DeviceParams: ") + what); };
  if (!(charging_energy_left > 0.0) || !(charging_energy_right > 0.0))
    fail("charging energies must be > 0");
  if (!(mutual_charging_energy >= 0.0))
    fail("mutual charging energy must be >= 0");
  if (!(mutual_charging_energy < std::min(charging_energy_left, charging_energy_right)))
    fail("mutual charging energy must be below both charging energies");
  const Eigen::Matrix2d lever = effective_lever();
  if (!lever.allFinite() || (lever.array() < 0.0).any()) fail("lever arms must be >= 0");
  if (!(lever(0, 0) > lever(0, 1) && lever(0, 0) > lever(1, 0) && lever(1, 1) > lever(0, 1) &&
        lever(1, 1) > lever(1, 0)))
    fail("lever-arm diagonal must dominate the off-diagonal couplings");
  if (!(merge_ratio_threshold > 0.0 && merge_ratio_threshold < 1.0))
    fail("merge ratio threshold must lie in (0, 1)");
  if (!sensor_coupling.allFinite() || !sensor_gate_coupling.allFinite() ||
      !std::isfinite(offset_left) || !std::isfinite(offset_right))
    fail("non-finite sensor coupling or offset");
}

bool DeviceParams::is_valid() const noexcept {
  try {
    validate();
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

Eigen::Matrix2d DeviceParams::effective_lever() const {
  Eigen::Matrix2d l = lever_arm_matrix;
  l(0, 1) += cross_talk;
  l(1, 0) += cross_talk;
  return l;
}

double DeviceParams::merge_ratio() const {
  return mutual_charging_energy / (0.5 * (charging_energy_left + charging_energy_right));
}

Eigen::Vector2d DeviceParams::chemical_potentials(double v1, double v2) const {
  return effective_lever() * Eigen::Vector2d(v1, v2) - Eigen::Vector2d(offset_left, offset_right);
}

KeyValueConfig DeviceParams::to_config() const {
  KeyValueConfig c;
  c.set("charging_energy_left", charging_energy_left);
  c.set("charging_energy_right", charging_energy_right);
  c.set("mutual_charging_energy", mutual_charging_energy);
  c.set("lever_11", lever_arm_matrix(0, 0));
  c.set("lever_12", lever_arm_matrix(0, 1));
  c.set("lever_21", lever_arm_matrix(1, 0));
  c.set("lever_22", lever_arm_matrix(1, 1));
  c.set("cross_talk", cross_talk);
  c.set("sensor_coupling_left", sensor_coupling[0]);
  c.set("sensor_coupling_right", sensor_coupling[1]);
  c.set("sensor_gate_coupling_v1", sensor_gate_coupling[0]);
  c.set("sensor_gate_coupling_v2", sensor_gate_coupling[1]);
  c.set("offset_left", offset_left);
  c.set("offset_right", offset_right);
  c.set("merge_ratio_threshold", merge_ratio_threshold);
  return c;
}

DeviceParams DeviceParams::from_config(const KeyValueConfig& cfg) {
  DeviceParams d;
  d.charging_energy_left = cfg.get_double("charging_energy_left", d.charging_energy_left);
  d.charging_energy_right = cfg.get_double("charging_energy_right", d.charging_energy_right);
  d.mutual_charging_energy = cfg.get_double("mutual_charging_energy", d.mutual_charging_energy);
  d.lever_arm_matrix(0, 0) = cfg.get_double("lever_11", d.lever_arm_matrix(0, 0));
  d.lever_arm_matrix(0, 1) = cfg.get_double("lever_12", d.lever_arm_matrix(0, 1));
  d.lever_arm_matrix(1, 0) = cfg.get_double("lever_21", d.lever_arm_matrix(1, 0));
  d.lever_arm_matrix(1, 1) = cfg.get_double("lever_22", d.lever_arm_matrix(1, 1));
  d.cross_talk = cfg.get_double("cross_talk", d.cross_talk);
  d.sensor_coupling[0] = cfg.get_double("sensor_coupling_left", d.sensor_coupling[0]);
  d.sensor_coupling[1] = cfg.get_double("sensor_coupling_right", d.sensor_coupling[1]);
  d.sensor_gate_coupling[0] = cfg.get_double("sensor_gate_coupling_v1", d.sensor_gate_coupling[0]);
  d.sensor_gate_coupling[1] = cfg.get_double("sensor_gate_coupling_v2", d.sensor_gate_coupling[1]);
  d.offset_left = cfg.get_double("offset_left", d.offset_left);
  d.offset_right = cfg.get_double("offset_right", d.offset_right);
  d.merge_ratio_threshold = cfg.get_double("merge_ratio_threshold", d.merge_ratio_threshold);
  d.validate();
  return d;
}

void VoltageWindow::validate() const {
  if (!(v1_stop > v1_start) || !(v2_stop > v2_start))
    throw std::invalid_argument("VoltageWindow: stop must exceed start on both axes");
  if (pixels_per_axis < 2) throw std::invalid_argument("VoltageWindow: pixels_per_axis must be >= 2");
}

VoltageWindow VoltageWindow::centered(double v1, double v2, int pixels, double pitch) {
  const double half = 0.5 * pitch * (pixels - 1);
  return VoltageWindow{v1 - half, v1 + half, v2 - half, v2 + half, pixels};
}

double electrostatic_energy(const DeviceParams& device, Occupancy n, const Eigen::Vector2d& mu) {
  const double n1 = n.left;
  const double n2 = n.right;
  return 0.5 * device.charging_energy_left * n1 * (n1 - 1.0) - n1 * mu[0] +
         0.5 * device.charging_energy_right * n2 * (n2 - 1.0) - n2 * mu[1] +
         device.mutual_charging_energy * n1 * n2;
}

namespace {

bool better(double u, Occupancy n, double best_u, Occupancy best) {
  if (u != best_u) return u < best_u;
  const int total = n.left + n.right;
  const int best_total = best.left + best.right;
  if (total != best_total) return total < best_total;
  return n.left < best.left;
}

}  // namespace

Occupancy ground_state(const DeviceParams& device, const Eigen::Vector2d& mu, int n_max) {
  if (n_max < 1) throw std::invalid_argument("occupancy bound must be >= 1");
  // For fixed N1 the energy is a convex parabola in N2: electron k on the right dot is added
  // iff Ec2 * (k - 1) < mu2 - Em * N1. Scan N1 and refine N2 among its integer neighbours.
  Occupancy best{};
  double best_u = std::numeric_limits<double>::infinity();
  for (int n1 = 0; n1 <= n_max; ++n1) {
    const double effective = mu[1] - device.mutual_charging_energy * n1;
    int guess = effective <= 0.0 ? 0 : static_cast<int>(std::ceil(effective / device.charging_energy_right));
    guess = std::clamp(guess, 0, n_max);
    for (int n2 = std::max(0, guess - 1); n2 <= std::min(n_max, guess + 1); ++n2) {
      const Occupancy cand{n1, n2};
      const double u = electrostatic_energy(device, cand, mu);
      if (better(u, cand, best_u, best)) {
        best_u = u;
        best = cand;
      }
    }
  }
  if (best.left >= n_max || best.right >= n_max)
    throw BoundExceededError("charge configuration reached the occupancy bound " + std::to_string(n_max) +
                             " (window extends beyond the modeled electron range)");
  return best;
}

Occupancy compute_charge_config(const DeviceParams& device, double v1, double v2, int n_max) {
  return ground_state(device, device.chemical_potentials(v1, v2), n_max);
}

State classify_pixel(const DeviceParams& device, Occupancy occupancy) {
  if (occupancy.left == 0 && occupancy.right == 0) return State::ND;
  if (device.merge_ratio() > device.merge_ratio_threshold) return State::CD;
  if (occupancy.right == 0) return State::LD;
  if (occupancy.left == 0) return State::RD;
  return State::DD;
}

double sensor_signal(const DeviceParams& device, Occupancy occupancy, double v1, double v2) {
  return device.sensor_coupling[0] * occupancy.left + device.sensor_coupling[1] * occupancy.right +
         device.sensor_gate_coupling[0] * v1 + device.sensor_gate_coupling[1] * v2;
}

StabilityScan simulate_scan(const DeviceParams& device, const VoltageWindow& window) {
  device.validate();
  window.validate();
  const int n = window.pixels_per_axis;
  StabilityScan scan;
  scan.window = window;
  scan.device = device;
  scan.sensor.resize(n, n);
  scan.state_map.resize(n, n);
  scan.occupancy_left.resize(n, n);
  scan.occupancy_right.resize(n, n);
  for (int r = 0; r < n; ++r) {
    const double v2 = window.v2_at(r);
    for (int c = 0; c < n; ++c) {
      const double v1 = window.v1_at(c);
      const Occupancy occ = compute_charge_config(device, v1, v2);
      scan.occupancy_left(r, c) = occ.left;
      scan.occupancy_right(r, c) = occ.right;
      scan.state_map(r, c) = static_cast<std::uint8_t>(classify_pixel(device, occ));
      scan.sensor(r, c) = sensor_signal(device, occ, v1, v2);
    }
  }
  return scan;
}

StateLabel label_state_map(const Grid<std::uint8_t>& state_map) {
  StateLabel label;
  if (state_map.size() == 0) throw std::invalid_argument("empty state map");
  for (Eigen::Index i = 0; i < state_map.size(); ++i) label.probabilities[state_map.data()[i]] += 1.0;
  label.probabilities /= static_cast<double>(state_map.size());
  return label;
}

StateLabel label_scan(const StabilityScan& scan) { return label_state_map(scan.state_map); }

DeviceRanges DeviceRanges::pinned(const DeviceParams& d) {
  auto at = [](double v) { return Range{v, v}; };
  DeviceRanges r;
  r.charging_energy_left = at(d.charging_energy_left);
  r.charging_energy_right = at(d.charging_energy_right);
  r.mutual_charging_energy = at(d.mutual_charging_energy);
  r.lever_11 = at(d.lever_arm_matrix(0, 0));
  r.lever_12 = at(d.lever_arm_matrix(0, 1));
  r.lever_21 = at(d.lever_arm_matrix(1, 0));
  r.lever_22 = at(d.lever_arm_matrix(1, 1));
  r.cross_talk = at(d.cross_talk);
  r.sensor_coupling_left = at(d.sensor_coupling[0]);
  r.sensor_coupling_right = at(d.sensor_coupling[1]);
  r.sensor_gate_coupling_v1 = at(d.sensor_gate_coupling[0]);
  r.sensor_gate_coupling_v2 = at(d.sensor_gate_coupling[1]);
  r.offset_left = at(d.offset_left);
  r.offset_right = at(d.offset_right);
  r.merge_ratio_threshold = at(d.merge_ratio_threshold);
  return r;
}

DeviceParams sample_device(std::uint64_t seed, const DeviceRanges& ranges) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](const DeviceRanges::Range& r) {
    if (r.second < r.first) throw std::invalid_argument("device range has max < min");
    const double u = unit(rng);
    return r.first == r.second ? r.first : r.first + u * (r.second - r.first);
  };
  for (int attempt = 0; attempt < std::max(1, ranges.max_retries); ++attempt) {
    DeviceParams d;
    d.charging_energy_left = draw(ranges.charging_energy_left);
    d.charging_energy_right = draw(ranges.charging_energy_right);
    d.mutual_charging_energy = draw(ranges.mutual_charging_energy);
    d.lever_arm_matrix << draw(ranges.lever_11), draw(ranges.lever_12), draw(ranges.lever_21),
        draw(ranges.lever_22);
    d.cross_talk = draw(ranges.cross_talk);
    d.sensor_coupling << draw(ranges.sensor_coupling_left), draw(ranges.sensor_coupling_right);
    d.sensor_gate_coupling << draw(ranges.sensor_gate_coupling_v1), draw(ranges.sensor_gate_coupling_v2);
    d.offset_left = draw(ranges.offset_left);
    d.offset_right = draw(ranges.offset_right);
    d.merge_ratio_threshold = draw(ranges.merge_ratio_threshold);
    if (d.is_valid()) return d;
  }
  throw Error("sample_device: retries exhausted; parameter ranges are infeasible");
}

}  // namespace qdtune::sim
