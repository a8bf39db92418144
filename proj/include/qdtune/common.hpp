#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qdtune {

/// Row-major 2D map. Rows follow V_P2, columns follow V_P1 (the fast raster axis).
template <class Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using GridD = Grid<double>;
using GridF = Grid<float>;
using GridI = Grid<int>;

inline constexpr int kStateCount = 5;
inline constexpr int kQualityCount = 3;

/// Device state codes. The numeric value is the index into a StateLabel vector.
enum class State : std::uint8_t { ND = 0, LD = 1, CD = 2, RD = 3, DD = 4 };

enum class Quality : std::uint8_t { High = 0, Moderate = 1, Low = 2 };

using StateVector = Eigen::Matrix<double, kStateCount, 1>;

std::string_view to_string(State s);
std::string_view to_string(Quality q);
State parse_state(std::string_view name);
Quality parse_quality(std::string_view name);

/// Length-5 probability vector over (ND, LD, CD, RD, DD).
struct StateLabel {
  StateVector probabilities = StateVector::Zero();

  State dominant() const;
  /// Throws std::invalid_argument unless entries are >= 0 and sum to 1 within tol.
  void validate(double tol = 1e-9) const;

  static StateLabel one_hot(State s);
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Per-item seed derived from a master seed: seed = mix(mix(master) ^ index).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

/// Worker count: QDTUNE_WORKERS if set, else hardware concurrency.
int default_workers();

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is processed exactly
/// once; results must be written to per-index slots to stay deterministic.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body);

}  // namespace qdtune
