#include "qdtune/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace qdtune {

namespace {
constexpr std::array<std::string_view, kStateCount> kStateNames = {"ND", "LD", "CD", "RD", "DD"};
constexpr std::array<std::string_view, kQualityCount> kQualityNames = {"high", "moderate", "low"};
}  // namespace

std::string_view to_string(State s) { return kStateNames[static_cast<int>(s)]; }
std::string_view to_string(Quality q) { return kQualityNames[static_cast<int>(q)]; }

State parse_state(std::string_view name) {
  for (int i = 0; i < kStateCount; ++i)
    if (kStateNames[i] == name) return static_cast<State>(i);
  throw std::invalid_argument("unknown state '" + std::string(name) + "'");
}

Quality parse_quality(std::string_view name) {
  for (int i = 0; i < kQualityCount; ++i)
    if (kQualityNames[i] == name) return static_cast<Quality>(i);
  throw std::invalid_argument("unknown quality '" + std::string(name) + "'");
}

State StateLabel::dominant() const {
  Eigen::Index idx = 0;
  probabilities.maxCoeff(&idx);
  return static_cast<State>(idx);
}

void StateLabel::validate(double tol) const {
  if ((probabilities.array() < 0.0).any() || !probabilities.allFinite())
    throw std::invalid_argument("state label has negative or non-finite entries");
  if (std::abs(probabilities.sum() - 1.0) > tol)
    throw std::invalid_argument("state label is not normalized");
}

StateLabel StateLabel::one_hot(State s) {
  StateLabel l;
  l.probabilities[static_cast<int>(s)] = 1.0;
  return l;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master) ^ (index * 0xd1342543de82ef95ULL + 1));
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int default_workers() {
  if (const char* env = std::getenv("QDTUNE_WORKERS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace qdtune
