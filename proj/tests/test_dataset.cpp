#include "qdtune/dataset.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace qdtune;
using namespace qdtune::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("qdtune_test_" + name);
  fs::remove_all(d);
  return d;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void flip_byte(const fs::path& p, std::streamoff at) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(at);
  char c = 0;
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x40);
  f.seekp(at);
  f.write(&c, 1);
}

DatasetConfig small(DatasetKind kind, std::size_t count = 24) {
  DatasetConfig c;
  c.kind = kind;
  c.count = count;
  c.seed = 31;
  return c;
}

}  // namespace

TEST_CASE("gradient matches central differences") {
  GridD s(3, 5);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) s(r, c) = 0.3 * c * c + r;
  const auto g = gradient_image(s, 2.0);
  for (int r = 0; r < 3; ++r) {
    CHECK(g(r, 0) == doctest::Approx((s(r, 1) - s(r, 0)) / 2.0));
    for (int c = 1; c < 4; ++c) CHECK(g(r, c) == doctest::Approx((s(r, c + 1) - s(r, c - 1)) / 4.0));
    CHECK(g(r, 4) == doctest::Approx((s(r, 4) - s(r, 3)) / 2.0));
  }
  // exact on a linear ramp
  GridD ramp(2, 6);
  for (int c = 0; c < 6; ++c) ramp.col(c).setConstant(1.5 * c);
  CHECK((gradient_image(ramp, 0.5) - 3.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("samples are a pure function of (config, index)") {
  const auto cfg = small(DatasetKind::Combined);
  const auto a = generate_sample(cfg, 7), b = generate_sample(cfg, 7), c = generate_sample(cfg, 8);
  CHECK((a.sensor == b.sensor).all());
  CHECK(a.state_label.probabilities == b.state_label.probabilities);
  CHECK(!(a.sensor == c.sensor).all());
  const auto batch = generate_samples(cfg, 3);
  CHECK((batch[7].gradient == a.gradient).all());
}

TEST_CASE("labels are valid distributions; quality only on dqc-labeled sets") {
  for (const auto& s : generate_samples(small(DatasetKind::Noiseless), 1)) {
    CHECK_NOTHROW(s.state_label.validate(1e-6));
    CHECK(!s.quality.has_value());
    CHECK(s.sensor.rows() == 30);
    CHECK(s.sensor.cols() == 30);
  }
  auto cfg = small(DatasetKind::DqcLabeled);
  QualityThresholds thr;
  for (auto& b : thr.bands) b = {1.0, 3.0};
  cfg.thresholds = thr;
  for (const auto& s : generate_samples(cfg, 1)) {
    REQUIRE(s.quality.has_value());
    CHECK(*s.quality == assign_quality(s.noise_scale, s.state_label.dominant(), thr));
  }
  auto missing = small(DatasetKind::DqcLabeled);
  CHECK_THROWS_AS(missing.validate(), std::invalid_argument);
}

TEST_CASE("threshold sweep covers the requested scale range") {
  auto cfg = small(DatasetKind::ThresholdSweep, 200);
  cfg.sweep_max = 4.0;
  double lo = 1e9, hi = -1e9;
  for (const auto& s : generate_samples(cfg, 1)) {
    lo = std::min<double>(lo, s.noise_scale);
    hi = std::max<double>(hi, s.noise_scale);
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 4.0);
  CHECK(hi - lo > 3.0);
}

TEST_CASE("dataset round trip") {
  const auto dir = fresh_dir("roundtrip");
  auto cfg = small(DatasetKind::ThresholdSweep);
  generate_dataset(cfg, dir, 2);
  CHECK(fs::file_size(dir / "samples.bin") == cfg.count * record_bytes(30, 30));
  CHECK(record_bytes(30, 30) == 2 * 900 * 4 + 5 * 4 + 1 + 4);

  DatasetReader reader(dir);
  CHECK(reader.size() == cfg.count);
  CHECK(reader.config_hash() == cfg.hash());
  const auto expected = generate_samples(cfg, 1);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const auto s = reader.read(i);
    CHECK((s.sensor == expected[i].sensor).all());
    CHECK((s.gradient == expected[i].gradient).all());
    CHECK(s.noise_scale == expected[i].noise_scale);
    CHECK(s.state_label.probabilities == expected[i].state_label.probabilities);
  }
  CHECK_THROWS_AS(reader.read(cfg.count), std::out_of_range);

  // identical bytes when regenerated
  const auto dir2 = fresh_dir("roundtrip2");
  generate_dataset(cfg, dir2, 1);
  CHECK(read_bytes(dir / "samples.bin") == read_bytes(dir2 / "samples.bin"));
  CHECK(read_bytes(dir / "manifest.json") == read_bytes(dir2 / "manifest.json"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("splits are disjoint, exhaustive and seeded") {
  const auto s = make_splits(103, {0.8, 0.1, 0.1}, 5);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (auto i : *part) CHECK(all.insert(i).second);
  CHECK(all.size() == 103);
  CHECK(s.train.size() > s.val.size());
  CHECK(make_splits(103, {0.8, 0.1, 0.1}, 5).train == s.train);
  CHECK(make_splits(103, {0.8, 0.1, 0.1}, 6).train != s.train);
  CHECK_THROWS_AS(make_splits(10, {0.8, 0.3, 0.1}, 1), std::invalid_argument);
}

TEST_CASE("truncated and corrupted files are detected") {
  const auto dir = fresh_dir("corrupt");
  auto cfg = small(DatasetKind::Noiseless, 6);
  generate_dataset(cfg, dir, 1);
  const auto rb = static_cast<std::streamoff>(record_bytes(30, 30));

  SUBCASE("checksum") {
    flip_byte(dir / "samples.bin", 2 * rb + 100);
    DatasetReader reader(dir);
    CHECK_NOTHROW(reader.read(1));
    try {
      reader.read(2);
      FAIL("expected a checksum error");
    } catch (const DatasetError& e) {
      CHECK(e.kind() == DatasetError::Kind::ChecksumMismatch);
    }
  }
  SUBCASE("truncation") {
    fs::resize_file(dir / "samples.bin", static_cast<std::uintmax_t>(5 * rb + 10));
    // caught when the file is opened, before any record is served
    try {
      DatasetReader reader(dir);
      FAIL("expected a truncation error");
    } catch (const DatasetError& e) {
      CHECK(e.kind() == DatasetError::Kind::TruncatedRecord);
    }
  }
  SUBCASE("manifest") {
    std::ofstream(dir / "manifest.json", std::ios::trunc) << "{\"format\": 3";
    try {
      DatasetReader reader(dir);
      FAIL("expected a manifest error");
    } catch (const DatasetError& e) {
      CHECK(e.kind() == DatasetError::Kind::CorruptManifest);
    }
  }
  SUBCASE("missing") {
    fs::remove_all(dir);
    try {
      DatasetReader reader(dir);
      FAIL("expected an io error");
    } catch (const DatasetError& e) {
      CHECK(e.kind() == DatasetError::Kind::Io);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("config validation and hashing") {
  auto cfg = small(DatasetKind::Combined);
  CHECK_NOTHROW(cfg.validate());
  auto other = cfg;
  other.seed = 32;
  CHECK(other.hash() != cfg.hash());
  nlohmann::json j = cfg;
  CHECK(j.get<DatasetConfig>().hash() == cfg.hash());
  cfg.count = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small(DatasetKind::Combined);
  cfg.window_min = 40;
  cfg.window_max = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
