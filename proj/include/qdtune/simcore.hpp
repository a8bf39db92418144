#pragma once

#include "qdtune/common.hpp"
#include "qdtune/kvconfig.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <utility>

namespace qdtune::sim {

/// Constant-interaction double-dot device with a linear charge sensor.
///
/// Chemical potentials are mu = L_eff * (v1, v2) - offset (meV, voltages in mV), where
/// L_eff is the lever-arm matrix with `cross_talk` added to both off-diagonal entries.
/// The electrostatic energy of an occupancy (N1, N2) is
///   U = sum_i [ Ec_i / 2 * N_i (N_i - 1) - N_i mu_i ] + Em * N1 * N2.
struct DeviceParams {
  double charging_energy_left = 2.5;
  double charging_energy_right = 2.5;
  double mutual_charging_energy = 0.5;
  Eigen::Matrix2d lever_arm_matrix = (Eigen::Matrix2d() << 0.1, 0.03, 0.03, 0.1).finished();
  double cross_talk = 0.0;
  Eigen::Vector2d sensor_coupling{1.0, 0.7};
  Eigen::Vector2d sensor_gate_coupling{0.002, 0.002};
  double offset_left = 0.0;
  double offset_right = 0.0;
  double merge_ratio_threshold = 0.6;

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
  bool is_valid() const noexcept;

  Eigen::Matrix2d effective_lever() const;
  /// Em / mean(Ec1, Ec2).
  double merge_ratio() const;
  Eigen::Vector2d chemical_potentials(double v1, double v2) const;

  KeyValueConfig to_config() const;
  static DeviceParams from_config(const KeyValueConfig& cfg);
};

struct Occupancy {
  int left = 0;
  int right = 0;
  friend bool operator==(const Occupancy&, const Occupancy&) = default;
};

/// Sampling window. Pixel pitch is (stop - start) / (pixels - 1) on both axes.
struct VoltageWindow {
  double v1_start = 0.0;
  double v1_stop = 58.0;
  double v2_start = 0.0;
  double v2_stop = 58.0;
  int pixels_per_axis = 30;

  void validate() const;
  double pitch_v1() const { return (v1_stop - v1_start) / (pixels_per_axis - 1); }
  double pitch_v2() const { return (v2_stop - v2_start) / (pixels_per_axis - 1); }
  double v1_at(int col) const { return v1_start + col * pitch_v1(); }
  double v2_at(int row) const { return v2_start + row * pitch_v2(); }

  /// Square window of `pixels` pixels at `pitch` mV centered on (v1, v2).
  static VoltageWindow centered(double v1, double v2, int pixels, double pitch);
};

struct StabilityScan {
  VoltageWindow window;
  DeviceParams device;
  GridD sensor;
  Grid<std::uint8_t> state_map;
  GridI occupancy_left;
  GridI occupancy_right;

  int rows() const { return static_cast<int>(sensor.rows()); }
  int cols() const { return static_cast<int>(sensor.cols()); }
};

class BoundExceededError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kDefaultMaxOccupancy = 10;

/// U(N1, N2) for the given chemical potentials.
double electrostatic_energy(const DeviceParams& device, Occupancy n, const Eigen::Vector2d& mu);

/// Energy-minimizing occupancy at chemical potentials `mu` over [0, n_max]^2. Ties go to the
/// smallest total electron number, then the smallest N_left. Throws BoundExceededError when
/// the minimizer sits on the n_max boundary.
Occupancy ground_state(const DeviceParams& device, const Eigen::Vector2d& mu,
                       int n_max = kDefaultMaxOccupancy);

Occupancy compute_charge_config(const DeviceParams& device, double v1, double v2,
                                int n_max = kDefaultMaxOccupancy);

State classify_pixel(const DeviceParams& device, Occupancy occupancy);

/// Linear sensor response: sensor_coupling . N + sensor_gate_coupling . (v1, v2).
double sensor_signal(const DeviceParams& device, Occupancy occupancy, double v1, double v2);

StabilityScan simulate_scan(const DeviceParams& device, const VoltageWindow& window);

StateLabel label_scan(const StabilityScan& scan);
StateLabel label_state_map(const Grid<std::uint8_t>& state_map);

/// Inclusive (min, max) ranges for sample_device; min == max pins the value.
struct DeviceRanges {
  using Range = std::pair<double, double>;
  Range charging_energy_left{2.0, 3.0};
  Range charging_energy_right{2.0, 3.0};
  Range mutual_charging_energy{0.2, 2.0};
  Range lever_11{0.08, 0.12};
  Range lever_12{0.02, 0.045};
  Range lever_21{0.02, 0.045};
  Range lever_22{0.08, 0.12};
  Range cross_talk{0.0, 0.0};
  Range sensor_coupling_left{0.8, 1.2};
  Range sensor_coupling_right{0.5, 0.9};
  Range sensor_gate_coupling_v1{0.0, 0.004};
  Range sensor_gate_coupling_v2{0.0, 0.004};
  Range offset_left{-0.5, 0.5};
  Range offset_right{-0.5, 0.5};
  Range merge_ratio_threshold{0.6, 0.6};
  int max_retries = 1000;

  /// Ranges collapsed onto a single device.
  static DeviceRanges pinned(const DeviceParams& device);
};

DeviceParams sample_device(std::uint64_t seed, const DeviceRanges& ranges = {});

}  // namespace qdtune::sim
