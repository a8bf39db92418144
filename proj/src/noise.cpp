#include "qdtune/noise.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <stdexcept>

namespace qdtune::noise {

namespace {

constexpr std::array<std::string_view, kNoiseTypeCount> kNoiseNames = {"dot_jumps", "coulomb", "white", "pink",
                                                                         "sensor_jumps"};

// Sub-stream indices used by apply_noise; each process draws from its own stream so that
// toggling one process never changes the realization of another.
enum Stream : std::uint64_t { kDotStream = 1, kPinkStream = 2, kWhiteStream = 3, kSensorStream = 4 };

GridD standard_normal_field(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  GridD out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = z(rng);
  return out;
}

}  // namespace

std::string_view to_string(NoiseType t) { return kNoiseNames[static_cast<int>(t)]; }

NoiseType parse_noise_type(std::string_view name) {
  for (int i = 0; i < kNoiseTypeCount; ++i)
    if (kNoiseNames[i] == name) return static_cast<NoiseType>(i);
  throw std::invalid_argument("unknown noise type '" + std::string(name) + "'");
}

NoiseMask NoiseMask::only(NoiseType t) {
  NoiseMask m = none();
  switch (t) {
    case NoiseType::DotJumps: m.dot_jumps = true; break;
    case NoiseType::Coulomb: m.coulomb = true; break;
    case NoiseType::White: m.white = true; break;
    case NoiseType::Pink: m.pink = true; break;
    case NoiseType::SensorJumps: m.sensor_jumps = true; break;
  }
  return m;
}

bool NoiseMask::enabled(NoiseType t) const {
  switch (t) {
    case NoiseType::DotJumps: return dot_jumps;
    case NoiseType::Coulomb: return coulomb;
    case NoiseType::White: return white;
    case NoiseType::Pink: return pink;
    case NoiseType::SensorJumps: return sensor_jumps;
  }
  return false;
}

void NoiseParams::validate() const {
  auto fail = [](const char* what) { throw std::invalid_argument(std::string("NoiseParams: ") + what); };
  auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob_ok(sensor_jump_prob) || !prob_ok(dot_jump_prob)) fail("jump probabilities must lie in [0, 1]");
  if (!(white_sigma >= 0.0) || !(pink_magnitude >= 0.0) || !(sensor_jump_sigma >= 0.0))
    fail("sigmas and magnitudes must be >= 0");
  if (!(dot_jump_rate >= 0.0)) fail("dot jump rate must be >= 0");
  if (!(coulomb_A >= 0.0) || !(coulomb_gmax >= 0.0)) fail("Coulomb A and gmax must be >= 0");
  if (!std::isfinite(coulomb_vmin) || !std::isfinite(coulomb_vmin_slope)) fail("non-finite Coulomb peak center");
  if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) fail("noise_scale must be >= 0");
}

KeyValueConfig NoiseParams::to_config() const {
  KeyValueConfig c;
  c.set("white_sigma", white_sigma);
  c.set("pink_magnitude", pink_magnitude);
  c.set("coulomb_A", coulomb_A);
  c.set("coulomb_gmax", coulomb_gmax);
  c.set("coulomb_vmin", coulomb_vmin);
  c.set("coulomb_vmin_slope", coulomb_vmin_slope);
  c.set("sensor_jump_prob", sensor_jump_prob);
  c.set("sensor_jump_sigma", sensor_jump_sigma);
  c.set("dot_jump_prob", dot_jump_prob);
  c.set("dot_jump_rate", dot_jump_rate);
  c.set("noise_scale", noise_scale);
  for (int i = 0; i < kNoiseTypeCount; ++i) {
    const auto t = static_cast<NoiseType>(i);
    c.set("enable_" + std::string(to_string(t)), enabled.enabled(t) ? "true" : "false");
  }
  return c;
}

NoiseParams NoiseParams::from_config(const KeyValueConfig& cfg) {
  NoiseParams p;
  p.white_sigma = cfg.get_double("white_sigma", p.white_sigma);
  p.pink_magnitude = cfg.get_double("pink_magnitude", p.pink_magnitude);
  p.coulomb_A = cfg.get_double("coulomb_A", p.coulomb_A);
  p.coulomb_gmax = cfg.get_double("coulomb_gmax", p.coulomb_gmax);
  p.coulomb_vmin = cfg.get_double("coulomb_vmin", p.coulomb_vmin);
  p.coulomb_vmin_slope = cfg.get_double("coulomb_vmin_slope", p.coulomb_vmin_slope);
  p.sensor_jump_prob = cfg.get_double("sensor_jump_prob", p.sensor_jump_prob);
  p.sensor_jump_sigma = cfg.get_double("sensor_jump_sigma", p.sensor_jump_sigma);
  p.dot_jump_prob = cfg.get_double("dot_jump_prob", p.dot_jump_prob);
  p.dot_jump_rate = cfg.get_double("dot_jump_rate", p.dot_jump_rate);
  p.noise_scale = cfg.get_double("noise_scale", p.noise_scale);
  p.enabled.dot_jumps = cfg.get_bool("enable_dot_jumps", false);
  p.enabled.coulomb = cfg.get_bool("enable_coulomb", false);
  p.enabled.white = cfg.get_bool("enable_white", false);
  p.enabled.pink = cfg.get_bool("enable_pink", false);
  p.enabled.sensor_jumps = cfg.get_bool("enable_sensor_jumps", false);
  p.validate();
  return p;
}

NoiseParams default_noise_params() {
  // Mirrors config/noise_default.cfg.
  NoiseParams p;
  p.white_sigma = 0.12;
  p.pink_magnitude = 0.012;
  p.coulomb_A = 0.35;
  p.coulomb_gmax = 1.0;
  p.coulomb_vmin = 1.5;
  p.coulomb_vmin_slope = 0.0;
  p.sensor_jump_prob = 0.002;
  p.sensor_jump_sigma = 0.4;
  p.dot_jump_prob = 0.002;
  p.dot_jump_rate = 1.0;
  p.enabled = NoiseMask{true, false, true, true, true};
  p.noise_scale = 1.0;
  return p;
}

NoiseParams load_noise_params(const std::filesystem::path& path) {
  return NoiseParams::from_config(KeyValueConfig::load(path));
}

GridD white_noise(const GridD& map, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("white_noise: sigma must be >= 0");
  if (sigma == 0.0) return map;
  return map + sigma * standard_normal_field(static_cast<int>(map.rows()), static_cast<int>(map.cols()), seed);
}

GridD pink_noise(int rows, int cols, double magnitude, std::uint64_t seed) {
  if (magnitude < 0.0) throw std::invalid_argument("pink_noise: magnitude must be >= 0");
  if (rows < 1 || cols < 1) throw std::invalid_argument("pink_noise: empty shape");
  using Complex = std::complex<double>;
  Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic> spectrum =
      Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic>::Zero(rows, cols);
  Grid<std::uint8_t> assigned = Grid<std::uint8_t>::Zero(rows, cols);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  auto signed_freq = [](int k, int n) { return (k <= n / 2 ? k : k - n) / static_cast<double>(n); };

  for (int ky = 0; ky < rows; ++ky) {
    for (int kx = 0; kx < cols; ++kx) {
      if (assigned(ky, kx)) continue;
      const int my = (rows - ky) % rows;
      const int mx = (cols - kx) % cols;
      assigned(ky, kx) = assigned(my, mx) = 1;
      if (ky == 0 && kx == 0) continue;  // DC stays zero
      const double fy = signed_freq(ky, rows);
      const double fx = signed_freq(kx, cols);
      const double amplitude = 1.0 / std::sqrt(fx * fx + fy * fy);
      const double phase = phase_dist(rng);
      if (my == ky && mx == kx) {
        spectrum(ky, kx) = std::cos(phase) >= 0.0 ? amplitude : -amplitude;
      } else {
        spectrum(ky, kx) = std::polar(amplitude, phase);
        spectrum(my, mx) = std::polar(amplitude, -phase);
      }
    }
  }

  // Separable inverse transform: rows, then columns. Eigen's inverse carries 1/n per axis.
  Eigen::FFT<double> fft;
  Eigen::VectorXcd in, out;
  for (int r = 0; r < rows; ++r) {
    in = spectrum.row(r).transpose();
    fft.inv(out, in);
    spectrum.row(r) = out.transpose();
  }
  for (int c = 0; c < cols; ++c) {
    in = spectrum.col(c);
    fft.inv(out, in);
    spectrum.col(c) = out;
  }
  // Unitary normalization: x = (1 / sqrt(n)) sum X e^{+i...} = sqrt(n) * ifft(X).
  const double norm = std::sqrt(static_cast<double>(rows) * cols) * magnitude;
  GridD field(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) field(r, c) = norm * spectrum(r, c).real();
  return field;
}

GridD coulomb_peak(const GridD& map, double A, double gmax, double vmin) {
  return coulomb_peak(map, A, gmax, vmin, 0.0);
}

GridD coulomb_peak(const GridD& map, double A, double gmax, double vmin, double vmin_slope) {
  if (A < 0.0) throw std::invalid_argument("coulomb_peak: A must be >= 0");
  if (!(gmax > 0.0)) throw std::invalid_argument("coulomb_peak: gmax must be > 0");
  GridD out(map.rows(), map.cols());
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    const double center = vmin + vmin_slope * static_cast<double>(i);
    const double c = std::cosh(A * (map.data()[i] - center));
    out.data()[i] = gmax / (c * c);
  }
  return out;
}

JumpMask jump_mask(int rows, int cols, double prob, std::uint64_t seed) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("jump_mask: prob must lie in [0, 1]");
  JumpMask mask;
  mask.jumps = Grid<std::uint8_t>::Zero(rows, cols);
  mask.segment = GridI::Zero(rows, cols);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int count = 0;
  for (Eigen::Index i = 0; i < mask.jumps.size(); ++i) {
    // Draw on every pixel so the stream position depends only on the raster index.
    const bool jump = unit(rng) < prob;
    if (jump) ++count;
    mask.jumps.data()[i] = jump ? 1 : 0;
    mask.segment.data()[i] = count;
  }
  mask.segment_count = count + (mask.jumps.size() > 0 && mask.jumps.data()[0] ? 0 : 1);
  return mask;
}

std::vector<int> run_lengths(const JumpMask& mask) {
  std::vector<int> runs;
  Eigen::Index last = -1;
  for (Eigen::Index i = 0; i < mask.jumps.size(); ++i) {
    if (!mask.jumps.data()[i]) continue;
    if (last >= 0) runs.push_back(static_cast<int>(i - last));
    last = i;
  }
  return runs;
}

GridD sensor_jump_offsets(const JumpMask& mask, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("sensor_jumps: sigma must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  GridD offsets(mask.jumps.rows(), mask.jumps.cols());
  double running = 0.0;
  for (Eigen::Index i = 0; i < offsets.size(); ++i) {
    if (mask.jumps.data()[i]) running += sigma * z(rng);
    offsets.data()[i] = running;
  }
  return offsets;
}

GridD sensor_jumps(const GridD& map, double prob, double sigma, std::uint64_t seed) {
  if (prob == 0.0 || sigma == 0.0) {
    if (!(prob >= 0.0 && prob <= 1.0) || sigma < 0.0) throw std::invalid_argument("sensor_jumps: invalid parameters");
    return map;
  }
  const auto mask = jump_mask(static_cast<int>(map.rows()), static_cast<int>(map.cols()), prob, derive_seed(seed, 0));
  return map + sensor_jump_offsets(mask, sigma, derive_seed(seed, 1));
}

std::vector<int> dot_jump_magnitudes(int count, double rate, std::uint64_t seed) {
  if (rate < 0.0) throw std::invalid_argument("dot_jumps: rate must be >= 0");
  std::vector<int> out(static_cast<std::size_t>(std::max(count, 0)), 0);
  if (rate == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> poisson(rate);
  for (auto& v : out) v = poisson(rng);
  return out;
}

PotentialShift dot_jumps(int rows, int cols, double prob, double rate, double unit_left, double unit_right,
                         std::uint64_t seed) {
  if (rate < 0.0) throw std::invalid_argument("dot_jumps: rate must be >= 0");
  const auto mask = jump_mask(rows, cols, prob, derive_seed(seed, 0));
  const int jumps = mask.segment.size() > 0 ? mask.segment.data()[mask.segment.size() - 1] : 0;
  const auto magnitudes = dot_jump_magnitudes(jumps, rate, derive_seed(seed, 1));
  std::mt19937_64 rng(derive_seed(seed, 2));
  std::bernoulli_distribution coin(0.5);
  // Segment s (s >= 1) holds the trap configuration created by jump s; segment 0 is unshifted.
  std::vector<double> left(static_cast<std::size_t>(jumps) + 1, 0.0), right(left);
  for (int s = 1; s <= jumps; ++s) {
    const double sign = coin(rng) ? 1.0 : -1.0;
    const bool on_left = coin(rng);
    const double step = sign * magnitudes[static_cast<std::size_t>(s - 1)];
    (on_left ? left : right)[static_cast<std::size_t>(s)] = step * (on_left ? unit_left : unit_right);
  }
  PotentialShift shift{GridD::Zero(rows, cols), GridD::Zero(rows, cols)};
  for (Eigen::Index i = 0; i < shift.left.size(); ++i) {
    const auto s = static_cast<std::size_t>(mask.segment.data()[i]);
    shift.left.data()[i] = left[s];
    shift.right.data()[i] = right[s];
  }
  return shift;
}

namespace {

GridD noisy_sensor(const sim::StabilityScan& scan, const NoiseParams& params, std::uint64_t seed,
                   const GridD* scale_map) {
  params.validate();
  const int rows = scan.rows();
  const int cols = scan.cols();
  const auto& m = params.enabled;
  GridD signal = scan.sensor;

  if (m.dot_jumps && params.dot_jump_prob > 0.0 && params.dot_jump_rate > 0.0) {
    const auto& dev = scan.device;
    const Eigen::Matrix2d lever = dev.effective_lever();
    const auto shift = dot_jumps(rows, cols, params.dot_jump_prob, params.dot_jump_rate,
                                 scan.window.pitch_v1() * lever(0, 0), scan.window.pitch_v2() * lever(1, 1),
                                 derive_seed(seed, kDotStream));
    for (int r = 0; r < rows; ++r) {
      const double v2 = scan.window.v2_at(r);
      for (int c = 0; c < cols; ++c) {
        if (shift.left(r, c) == 0.0 && shift.right(r, c) == 0.0) continue;
        const double v1 = scan.window.v1_at(c);
        const Eigen::Vector2d mu = dev.chemical_potentials(v1, v2) + Eigen::Vector2d(shift.left(r, c), shift.right(r, c));
        signal(r, c) = sim::sensor_signal(dev, sim::ground_state(dev, mu), v1, v2);
      }
    }
  }

  if (m.coulomb) {
    const double reference = signal.size() > 0 ? signal(0, 0) : 0.0;
    signal = coulomb_peak(signal - reference, params.coulomb_A, params.coulomb_gmax, params.coulomb_vmin,
                          params.coulomb_vmin_slope);
  }

  auto scaled = [&](double magnitude) -> GridD {
    if (scale_map) return magnitude * (*scale_map);
    return GridD::Constant(rows, cols, magnitude * params.noise_scale);
  };

  if (m.pink && params.pink_magnitude > 0.0)
    signal += scaled(params.pink_magnitude) * pink_noise(rows, cols, 1.0, derive_seed(seed, kPinkStream));
  if (m.white && params.white_sigma > 0.0)
    signal += scaled(params.white_sigma) * standard_normal_field(rows, cols, derive_seed(seed, kWhiteStream));
  if (m.sensor_jumps && params.sensor_jump_prob > 0.0 && params.sensor_jump_sigma > 0.0) {
    const std::uint64_t s = derive_seed(seed, kSensorStream);
    const auto mask = jump_mask(rows, cols, params.sensor_jump_prob, derive_seed(s, 0));
    signal += scaled(params.sensor_jump_sigma) * sensor_jump_offsets(mask, 1.0, derive_seed(s, 1));
  }
  return signal;
}

}  // namespace

GridD apply_noise(const sim::StabilityScan& scan, const NoiseParams& params, std::uint64_t seed) {
  return noisy_sensor(scan, params, seed, nullptr);
}

GridD apply_noise(const sim::StabilityScan& scan, const NoiseParams& params, std::uint64_t seed,
                  const GridD& scale_map) {
  if (scale_map.rows() != scan.rows() || scale_map.cols() != scan.cols())
    throw std::invalid_argument("apply_noise: scale map shape mismatch");
  if ((scale_map < 0.0).any()) throw std::invalid_argument("apply_noise: negative noise scale");
  return noisy_sensor(scan, params, seed, &scale_map);
}

NoiseParams sample_noise_params(const NoiseParams& base, const NoiseSampleMode& mode, std::uint64_t seed) {
  base.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  auto vary = [&](double v) { return v + 0.01 * v * z(rng); };
  auto nonneg = [](double v) { return std::max(0.0, v); };
  auto prob = [](double v) { return std::clamp(v, 0.0, 1.0); };

  NoiseParams out = base;
  auto vary_dot_jumps = [&] {
    out.dot_jump_prob = prob(vary(base.dot_jump_prob));
    out.dot_jump_rate = nonneg(vary(base.dot_jump_rate));
  };

  if (std::holds_alternative<PerNoiseOnePercent>(mode)) {
    out.white_sigma = nonneg(vary(base.white_sigma));
    out.pink_magnitude = nonneg(vary(base.pink_magnitude));
    out.coulomb_A = nonneg(vary(base.coulomb_A));
    out.coulomb_gmax = nonneg(vary(base.coulomb_gmax));
    out.coulomb_vmin = vary(base.coulomb_vmin);
    out.sensor_jump_prob = prob(vary(base.sensor_jump_prob));
    out.sensor_jump_sigma = nonneg(vary(base.sensor_jump_sigma));
    vary_dot_jumps();
  } else if (std::holds_alternative<JointThird>(mode)) {
    const double factor = std::max(0.0, 1.0 + z(rng) / 3.0);
    out.noise_scale = base.noise_scale * factor;
    out.coulomb_A = nonneg(vary(base.coulomb_A));
    out.coulomb_vmin = vary(base.coulomb_vmin);
    vary_dot_jumps();
  } else {
    const auto& sweep = std::get<ThresholdSweep>(mode);
    if (!(sweep.scale_min >= 0.0 && sweep.scale_min < sweep.scale_max))
      throw std::invalid_argument("ThresholdSweep requires 0 <= scale_min < scale_max");
    std::uniform_real_distribution<double> u(sweep.scale_min, sweep.scale_max);
    out.noise_scale = u(rng);
    vary_dot_jumps();
  }
  return out;
}

}  // namespace qdtune::noise
