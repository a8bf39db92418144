#pragma once

// Independent reference implementations used by the unit and acceptance tests. Nothing here
// calls into the library code being checked.

#include "qdtune/nn/network.hpp"
#include "qdtune/simcore.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <vector>

namespace oracle {

/// Exhaustive minimum of the constant-interaction energy, written out from the formula.
inline qdtune::sim::Occupancy brute_force_ground_state(const qdtune::sim::DeviceParams& d, double mu1, double mu2,
                                                       int n_max) {
  qdtune::sim::Occupancy best;
  double best_u = std::numeric_limits<double>::infinity();
  for (int total = 0; total <= 2 * n_max; ++total)
    for (int n1 = 0; n1 <= n_max; ++n1) {
      const int n2 = total - n1;
      if (n2 < 0 || n2 > n_max) continue;
      const double u = 0.5 * d.charging_energy_left * n1 * (n1 - 1) - n1 * mu1 +
                       0.5 * d.charging_energy_right * n2 * (n2 - 1) - n2 * mu2 +
                       d.mutual_charging_energy * n1 * n2;
      if (u < best_u - 1e-12) {
        best_u = u;
        best = {n1, n2};
      }
    }
  return best;
}

/// Naive 1-D DFT, O(n^2).
inline std::vector<std::complex<double>> dft(const std::vector<std::complex<double>>& x) {
  const auto n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      acc += x[j] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * j % n) / static_cast<double>(n));
    out[k] = acc;
  }
  return out;
}

/// Log-log slope of the radially averaged power spectrum of a square field, fitted over
/// integer radii [r_lo, r_hi].
inline double radial_spectrum_slope(const qdtune::GridD& field, int r_lo, int r_hi) {
  const int n = static_cast<int>(field.rows());
  Eigen::MatrixXcd f(n, n);
  for (int r = 0; r < n; ++r) {
    std::vector<std::complex<double>> row(n);
    for (int c = 0; c < n; ++c) row[c] = field(r, c);
    const auto t = dft(row);
    for (int c = 0; c < n; ++c) f(r, c) = t[c];
  }
  for (int c = 0; c < n; ++c) {
    std::vector<std::complex<double>> col(n);
    for (int r = 0; r < n; ++r) col[r] = f(r, c);
    const auto t = dft(col);
    for (int r = 0; r < n; ++r) f(r, c) = t[r];
  }
  std::vector<double> sum(n, 0.0), cnt(n, 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const int kr = r <= n / 2 ? r : r - n, kc = c <= n / 2 ? c : c - n;
      const int rad = static_cast<int>(std::lround(std::sqrt(double(kr * kr + kc * kc))));
      if (rad < n) {
        sum[rad] += std::norm(f(r, c));
        cnt[rad] += 1.0;
      }
    }
  double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0;
  for (int rad = r_lo; rad <= r_hi; ++rad) {
    if (cnt[rad] == 0) continue;
    const double x = std::log(static_cast<double>(rad)), y = std::log(sum[rad] / cnt[rad]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    m += 1;
  }
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

/// Regularized upper incomplete gamma Q(a, x) (series below a + 1, continued fraction above).
inline double gamma_q(double a, double x) {
  if (x <= 0) return 1.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 10000; ++i) {
      ap += 1;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
  }
  double b = x + 1 - a, c = 1e300, d = 1 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - lg) * h;
}

struct ChiSquare {
  double statistic = 0;
  int dof = 0;
  double p_value = 0;
};

/// Pearson goodness of fit of positive integer samples against Geometric(p) on {1, 2, ...},
/// with bins merged until each expects at least 5 counts.
inline ChiSquare geometric_gof(const std::vector<int>& samples, double p) {
  const double n = static_cast<double>(samples.size());
  int kmax = 0;
  for (int s : samples) kmax = std::max(kmax, s);
  std::vector<double> observed(kmax + 2, 0.0);
  for (int s : samples) observed[s] += 1;
  ChiSquare out;
  double obs = 0, exp = 0, tail = 1.0;
  int bins = 0;
  for (int k = 1; k <= kmax; ++k) {
    const double pk = std::pow(1 - p, k - 1) * p;
    obs += observed[k];
    exp += n * pk;
    tail -= pk;
    if (exp >= 5 && n * tail >= 5) {
      out.statistic += (obs - exp) * (obs - exp) / exp;
      ++bins;
      obs = exp = 0;
    }
  }
  // everything left, including k > kmax
  exp += n * tail;
  out.statistic += (obs - exp) * (obs - exp) / exp;
  ++bins;
  out.dof = bins - 1;
  out.p_value = gamma_q(out.dof / 2.0, out.statistic / 2.0);
  return out;
}

/// Softmax cross-entropy of a network's forward pass, computed here rather than by the library.
template <class Net, class Batch>
double loss_of(Net& net, const Batch& x, const Eigen::MatrixXd& targets, std::uint64_t dropout_seed) {
  net.reseed_dropout(dropout_seed);
  const auto p = net.forward(x, true);
  double loss = 0;
  for (Eigen::Index j = 0; j < p.cols(); ++j)
    for (Eigen::Index i = 0; i < p.rows(); ++i) loss -= targets(i, j) * std::log(p(i, j));
  return loss / static_cast<double>(p.cols());
}

struct GradientCheck {
  double worst_param_error = 0;
  double input_error = 0;
};

/// Central finite differences (step h) against backward() for every parameter tensor and the
/// input; errors are ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12) per tensor.
inline GradientCheck check_gradients(qdtune::nn::Network<double>& net, const Eigen::MatrixXd& images, int height,
                                     int width, const Eigen::MatrixXd& targets, double h = 1e-6) {
  const std::uint64_t seed = 99;
  auto x = qdtune::nn::make_batch<double>(images, height, width);
  net.zero_grad();
  net.reseed_dropout(seed);
  net.forward(x, true);
  net.backward(targets);
  const auto analytic = net.gradients();
  const Eigen::MatrixXd input_analytic = net.input_gradient();

  auto rel = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).norm() / std::max(a.norm() + b.norm(), 1e-12);
  };
  GradientCheck out;
  auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    Eigen::MatrixXd numeric(params[k].value->rows(), params[k].value->cols());
    for (Eigen::Index i = 0; i < params[k].value->size(); ++i) {
      double& w = params[k].value->data()[i];
      const double w0 = w;
      w = w0 + h;
      const double up = loss_of(net, x, targets, seed);
      w = w0 - h;
      const double down = loss_of(net, x, targets, seed);
      w = w0;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    out.worst_param_error = std::max(out.worst_param_error, rel(analytic[k], numeric));
  }
  Eigen::MatrixXd numeric_in(input_analytic.rows(), input_analytic.cols());
  for (Eigen::Index i = 0; i < x.data.size(); ++i) {
    double& v = x.data.data()[i];
    const double v0 = v;
    v = v0 + h;
    const double up = loss_of(net, x, targets, seed);
    v = v0 - h;
    const double down = loss_of(net, x, targets, seed);
    v = v0;
    numeric_in.data()[i] = (up - down) / (2 * h);
  }
  out.input_error = rel(input_analytic, numeric_in);
  return out;
}

}  // namespace oracle
