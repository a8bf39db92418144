#pragma once

#include "qdtune/common.hpp"
#include "qdtune/kvconfig.hpp"
#include "qdtune/simcore.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>

namespace qdtune::noise {

enum class NoiseType : std::uint8_t { DotJumps = 0, Coulomb = 1, White = 2, Pink = 3, SensorJumps = 4 };

inline constexpr int kNoiseTypeCount = 5;

std::string_view to_string(NoiseType t);
NoiseType parse_noise_type(std::string_view name);

struct NoiseMask {
  bool dot_jumps = true;
  bool coulomb = true;
  bool white = true;
  bool pink = true;
  bool sensor_jumps = true;

  static NoiseMask none() { return {false, false, false, false, false}; }
  static NoiseMask only(NoiseType t);
  bool enabled(NoiseType t) const;
  bool any() const { return dot_jumps || coulomb || white || pink || sensor_jumps; }
  friend bool operator==(const NoiseMask&, const NoiseMask&) = default;
};

/// Magnitudes and rates of the five noise processes, in sensor-signal units unless noted.
struct NoiseParams {
  double white_sigma = 0.0;
  /// Amplitude of the 1/f spectrum at |f| = 1 cycle/pixel (unitary DFT normalization).
  double pink_magnitude = 0.0;
  /// Linewidth parameter A of the cosh^-2 sensor lineshape (1 / signal units).
  double coulomb_A = 0.0;
  double coulomb_gmax = 1.0;
  /// Peak center, relative to the signal of the first raster pixel.
  double coulomb_vmin = 0.0;
  /// Linear drift of the peak center per raster pixel.
  double coulomb_vmin_slope = 0.0;
  double sensor_jump_prob = 0.0;
  double sensor_jump_sigma = 0.0;
  double dot_jump_prob = 0.0;
  /// Poisson rate of the jump magnitude, in units of one pixel pitch of plunger voltage.
  double dot_jump_rate = 0.0;
  NoiseMask enabled = NoiseMask::none();
  double noise_scale = 1.0;

  void validate() const;

  KeyValueConfig to_config() const;
  static NoiseParams from_config(const KeyValueConfig& cfg);
};

/// Base magnitudes shipped in config/noise_default.cfg.
NoiseParams default_noise_params();
NoiseParams load_noise_params(const std::filesystem::path& path);

struct PerNoiseOnePercent {};
struct JointThird {};
struct ThresholdSweep {
  double scale_min = 0.0;
  double scale_max = 7.0;
};
using NoiseSampleMode = std::variant<PerNoiseOnePercent, JointThird, ThresholdSweep>;

// --- individual processes -------------------------------------------------

GridD white_noise(const GridD& map, double sigma, std::uint64_t seed);

/// Real 2D field whose Fourier magnitude is magnitude / |f| (f in cycles/pixel) with uniform
/// random phases on a Hermitian-symmetric spectrum and a zero DC bin.
GridD pink_noise(int rows, int cols, double magnitude, std::uint64_t seed);

/// gmax * cosh^-2(A (V - vmin)) elementwise.
GridD coulomb_peak(const GridD& map, double A, double gmax, double vmin);
/// Same lineshape with a peak center that drifts by `vmin_slope` per raster pixel.
GridD coulomb_peak(const GridD& map, double A, double gmax, double vmin, double vmin_slope);

struct JumpMask {
  Grid<std::uint8_t> jumps;
  /// Number of jumps at or before each pixel in raster order.
  GridI segment;
  int segment_count = 1;
};

JumpMask jump_mask(int rows, int cols, double prob, std::uint64_t seed);

/// Run lengths between successive jumps in the raster sequence (completed runs only).
std::vector<int> run_lengths(const JumpMask& mask);

/// Random-walk sensor offsets: at each jump a N(0, sigma^2) increment joins the running offset.
GridD sensor_jump_offsets(const JumpMask& mask, double sigma, std::uint64_t seed);
GridD sensor_jumps(const GridD& map, double prob, double sigma, std::uint64_t seed);

/// Per-pixel chemical-potential shifts (meV) for the left and right dot.
struct PotentialShift {
  GridD left;
  GridD right;
};

/// Each segment gets a Poisson(rate) integer shift with random sign on a randomly chosen dot.
/// `unit_left` / `unit_right` convert one integer step to meV.
PotentialShift dot_jumps(int rows, int cols, double prob, double rate, double unit_left, double unit_right,
                         std::uint64_t seed);

/// Raw integer jump magnitudes (before sign) as drawn by dot_jumps, for moment checks.
std::vector<int> dot_jump_magnitudes(int count, double rate, std::uint64_t seed);

// --- composite --------------------------------------------------------------

/// Noisy sensor map for a scan: dot jumps -> Coulomb lineshape -> pink + white -> sensor jumps.
/// white/pink/sensor-jump magnitudes are multiplied by params.noise_scale. The scan's state
/// map is never modified.
GridD apply_noise(const sim::StabilityScan& scan, const NoiseParams& params, std::uint64_t seed);

/// As above with a per-pixel noise scale multiplying white/pink/sensor-jump magnitudes
/// instead of params.noise_scale.
GridD apply_noise(const sim::StabilityScan& scan, const NoiseParams& params, std::uint64_t seed,
                  const GridD& scale_map);

NoiseParams sample_noise_params(const NoiseParams& base, const NoiseSampleMode& mode, std::uint64_t seed);

}  // namespace qdtune::noise
