#include "qdtune/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>
#include <random>

namespace qdtune::data {

namespace {

constexpr std::array<const char*, 5> kKindNames = {"noiseless", "per-noise", "combined", "threshold-sweep",
                                                   "dqc-labeled"};

nlohmann::json noise_json(const noise::NoiseParams& p) {
  nlohmann::json j = nlohmann::json::object();
  const auto kv = p.to_config();
  for (const auto& [k, v] : kv.values()) j[k] = v;
  return j;
}

noise::NoiseParams noise_from_json(const nlohmann::json& j) {
  KeyValueConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) cfg.set(it.key(), it.value().get<std::string>());
  return noise::NoiseParams::from_config(cfg);
}

nlohmann::json ranges_json(const sim::DeviceRanges& r) {
  auto pr = [](const sim::DeviceRanges::Range& x) { return nlohmann::json::array({x.first, x.second}); };
  return {{"charging_energy_left", pr(r.charging_energy_left)},
          {"charging_energy_right", pr(r.charging_energy_right)},
          {"mutual_charging_energy", pr(r.mutual_charging_energy)},
          {"lever_11", pr(r.lever_11)},
          {"lever_12", pr(r.lever_12)},
          {"lever_21", pr(r.lever_21)},
          {"lever_22", pr(r.lever_22)},
          {"cross_talk", pr(r.cross_talk)},
          {"sensor_coupling_left", pr(r.sensor_coupling_left)},
          {"sensor_coupling_right", pr(r.sensor_coupling_right)},
          {"sensor_gate_coupling_v1", pr(r.sensor_gate_coupling_v1)},
          {"sensor_gate_coupling_v2", pr(r.sensor_gate_coupling_v2)},
          {"offset_left", pr(r.offset_left)},
          {"offset_right", pr(r.offset_right)},
          {"merge_ratio_threshold", pr(r.merge_ratio_threshold)},
          {"max_retries", r.max_retries}};
}

sim::DeviceRanges ranges_from_json(const nlohmann::json& j) {
  auto pr = [&](const char* key) {
    const auto& a = j.at(key);
    return sim::DeviceRanges::Range{a.at(0).get<double>(), a.at(1).get<double>()};
  };
  sim::DeviceRanges r;
  r.charging_energy_left = pr("charging_energy_left");
  r.charging_energy_right = pr("charging_energy_right");
  r.mutual_charging_energy = pr("mutual_charging_energy");
  r.lever_11 = pr("lever_11");
  r.lever_12 = pr("lever_12");
  r.lever_21 = pr("lever_21");
  r.lever_22 = pr("lever_22");
  r.cross_talk = pr("cross_talk");
  r.sensor_coupling_left = pr("sensor_coupling_left");
  r.sensor_coupling_right = pr("sensor_coupling_right");
  r.sensor_gate_coupling_v1 = pr("sensor_gate_coupling_v1");
  r.sensor_gate_coupling_v2 = pr("sensor_gate_coupling_v2");
  r.offset_left = pr("offset_left");
  r.offset_right = pr("offset_right");
  r.merge_ratio_threshold = pr("merge_ratio_threshold");
  r.max_retries = j.at("max_retries").get<int>();
  return r;
}

template <class T>
void put(std::vector<char>& buf, std::size_t& pos, const T& v) {
  std::memcpy(buf.data() + pos, &v, sizeof(T));
  pos += sizeof(T);
}

template <class T>
T take(const std::vector<char>& buf, std::size_t& pos) {
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::vector<char> encode(const Sample& s) {
  const int h = static_cast<int>(s.sensor.rows());
  const int w = static_cast<int>(s.sensor.cols());
  std::vector<char> buf(record_bytes(h, w));
  std::size_t pos = 0;
  std::memcpy(buf.data(), s.sensor.data(), sizeof(float) * h * w);
  pos += sizeof(float) * h * w;
  std::memcpy(buf.data() + pos, s.gradient.data(), sizeof(float) * h * w);
  pos += sizeof(float) * h * w;
  for (int k = 0; k < kStateCount; ++k) put(buf, pos, static_cast<float>(s.state_label.probabilities[k]));
  put(buf, pos, s.quality ? static_cast<std::uint8_t>(*s.quality) : kNoQuality);
  put(buf, pos, s.noise_scale);
  return buf;
}

nlohmann::json window_json(const sim::VoltageWindow& w) {
  return nlohmann::json::array({w.v1_start, w.v1_stop, w.v2_start, w.v2_stop, w.pixels_per_axis});
}

}  // namespace

std::string to_string(DatasetKind k) { return kKindNames[static_cast<int>(k)]; }

DatasetKind parse_dataset_kind(const std::string& s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (s == kKindNames[i]) return static_cast<DatasetKind>(i);
  throw std::invalid_argument("unknown dataset kind '" + s +
                              "' (expected noiseless, per-noise, combined, threshold-sweep or dqc-labeled)");
}

std::size_t record_bytes(int height, int width) {
  return 2 * sizeof(float) * static_cast<std::size_t>(height) * width + kStateCount * sizeof(float) + 1 +
         sizeof(float);
}

void DatasetConfig::validate() const {
  if (count < 1) throw std::invalid_argument("dataset count must be >= 1");
  if (pixels < 2) throw std::invalid_argument("dataset pixels must be >= 2");
  if (!(pitch > 0.0)) throw std::invalid_argument("dataset pitch must be > 0");
  if (!(window_max >= window_min)) throw std::invalid_argument("window_max must be >= window_min");
  if (!(sweep_min >= 0.0 && sweep_min < sweep_max)) throw std::invalid_argument("sweep range must satisfy 0 <= min < max");
  if (!(splits.train >= 0 && splits.val >= 0 && splits.test >= 0) ||
      std::abs(splits.train + splits.val + splits.test - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  base_noise.validate();
  if (kind == DatasetKind::DqcLabeled) {
    if (!thresholds) throw std::invalid_argument("dqc-labeled datasets need quality thresholds");
    thresholds->validate();
  }
  // Infeasible device ranges surface here rather than midway through generation.
  (void)sim::sample_device(derive_seed(seed, 0), devices);
}

noise::NoiseParams DatasetConfig::kind_noise() const {
  noise::NoiseParams p = base_noise;
  switch (kind) {
    case DatasetKind::Noiseless:
      p.enabled = noise::NoiseMask::none();
      p.noise_scale = 0.0;
      break;
    case DatasetKind::PerNoise: p.enabled = noise::NoiseMask::only(noise_type); break;
    default: break;
  }
  return p;
}

std::string DatasetConfig::hash() const {
  const std::string s = nlohmann::json(*this).dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"count", c.count},
                     {"seed", c.seed},
                     {"pixels", c.pixels},
                     {"pitch", c.pitch},
                     {"window_min", c.window_min},
                     {"window_max", c.window_max},
                     {"sweep_min", c.sweep_min},
                     {"sweep_max", c.sweep_max},
                     {"devices", ranges_json(c.devices)},
                     {"base_noise", noise_json(c.base_noise)},
                     {"splits", {{"train", c.splits.train}, {"val", c.splits.val}, {"test", c.splits.test}}}};
  if (c.kind == DatasetKind::PerNoise) j["noise_type"] = std::string(noise::to_string(c.noise_type));
  if (c.thresholds) j["thresholds"] = *c.thresholds;
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c = DatasetConfig{};
  c.kind = parse_dataset_kind(j.at("kind").get<std::string>());
  c.count = j.at("count").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.pixels = j.at("pixels").get<int>();
  c.pitch = j.at("pitch").get<double>();
  c.window_min = j.at("window_min").get<double>();
  c.window_max = j.at("window_max").get<double>();
  c.sweep_min = j.at("sweep_min").get<double>();
  c.sweep_max = j.at("sweep_max").get<double>();
  c.devices = ranges_from_json(j.at("devices"));
  c.base_noise = noise_from_json(j.at("base_noise"));
  c.splits = {j.at("splits").at("train").get<double>(), j.at("splits").at("val").get<double>(),
              j.at("splits").at("test").get<double>()};
  if (j.contains("noise_type")) c.noise_type = noise::parse_noise_type(j.at("noise_type").get<std::string>());
  if (j.contains("thresholds")) c.thresholds = j.at("thresholds").get<QualityThresholds>();
}

GridD gradient_image(const GridD& sensor, double pitch) {
  const Eigen::Index w = sensor.cols();
  if (w < 2) throw std::invalid_argument("gradient_image needs at least 2 columns");
  GridD g(sensor.rows(), w);
  g.col(0) = (sensor.col(1) - sensor.col(0)) / pitch;
  g.col(w - 1) = (sensor.col(w - 1) - sensor.col(w - 2)) / pitch;
  if (w > 2) g.middleCols(1, w - 2) = (sensor.rightCols(w - 2) - sensor.leftCols(w - 2)) / (2.0 * pitch);
  return g;
}

Sample generate_sample(const DatasetConfig& config, std::size_t index) {
  const std::uint64_t s = derive_seed(config.seed, index);
  Sample out;
  out.device_id = derive_seed(s, 0);
  const sim::DeviceParams device = sim::sample_device(out.device_id, config.devices);

  std::mt19937_64 rng(derive_seed(s, 1));
  std::uniform_real_distribution<double> corner(config.window_min, config.window_max);
  const double v1 = corner(rng);
  const double v2 = corner(rng);
  const double span = config.pitch * (config.pixels - 1);
  out.window = {v1, v1 + span, v2, v2 + span, config.pixels};
  const sim::StabilityScan scan = sim::simulate_scan(device, out.window);

  noise::NoiseParams params = config.kind_noise();
  switch (config.kind) {
    case DatasetKind::Noiseless: break;
    case DatasetKind::PerNoise:
      params = noise::sample_noise_params(params, noise::PerNoiseOnePercent{}, derive_seed(s, 2));
      break;
    case DatasetKind::Combined:
      params = noise::sample_noise_params(params, noise::JointThird{}, derive_seed(s, 2));
      break;
    case DatasetKind::ThresholdSweep:
    case DatasetKind::DqcLabeled:
      params = noise::sample_noise_params(params, noise::ThresholdSweep{config.sweep_min, config.sweep_max},
                                          derive_seed(s, 2));
      break;
  }
  const GridD sensor = params.enabled.any() ? noise::apply_noise(scan, params, derive_seed(s, 3)) : scan.sensor;

  out.sensor = sensor.cast<float>();
  out.gradient = gradient_image(sensor, out.window.pitch_v1()).cast<float>();
  out.state_label = sim::label_scan(scan);
  // Stored labels are float32; round here so in-memory and reloaded samples agree.
  for (auto& p : out.state_label.probabilities) p = static_cast<float>(p);
  out.noise_scale = static_cast<float>(params.noise_scale);
  out.noise_params = params;
  if (config.kind == DatasetKind::DqcLabeled)
    out.quality = assign_quality(out.noise_scale, out.state_label.dominant(), *config.thresholds);
  return out;
}

std::vector<Sample> generate_samples(const DatasetConfig& config, int workers) {
  config.validate();
  std::vector<Sample> samples(config.count);
  parallel_for(config.count, workers, [&](std::size_t i) { samples[i] = generate_sample(config, i); });
  return samples;
}

Splits make_splits(std::size_t count, const SplitFractions& fractions, std::uint64_t seed) {
  if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0 ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with explicit index draws: std::shuffle differs between standard libraries.
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * static_cast<double>(count)));
  const auto n_val =
      std::min(count - std::min(count, n_train), static_cast<std::size_t>(std::llround(fractions.val * count)));
  Splits s;
  const std::size_t a = std::min(count, n_train), b = a + n_val;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(a));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(a), order.begin() + static_cast<std::ptrdiff_t>(b));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(b), order.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

void write_dataset(const std::filesystem::path& dir, const DatasetConfig& config, const std::vector<Sample>& samples) {
  static_assert(std::endian::native == std::endian::little, "dataset writer assumes a little-endian host");
  if (samples.empty()) throw std::invalid_argument("refusing to write an empty dataset");
  const int h = static_cast<int>(samples.front().sensor.rows());
  const int w = static_cast<int>(samples.front().sensor.cols());
  const std::size_t rb = record_bytes(h, w);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DatasetError(DatasetError::Kind::Io, "cannot create " + dir.string() + ": " + ec.message());

  nlohmann::json checksums = nlohmann::json::array(), meta = nlohmann::json::array(),
                 offsets = nlohmann::json::array();
  const auto bin_tmp = dir / "samples.bin.tmp";
  {
    std::ofstream out(bin_tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError(DatasetError::Kind::Io, "cannot write " + bin_tmp.string());
    std::size_t offset = 0;
    for (const auto& s : samples) {
      if (s.sensor.rows() != h || s.sensor.cols() != w || s.gradient.rows() != h || s.gradient.cols() != w)
        throw std::invalid_argument("dataset samples must share one image shape");
      const auto rec = encode(s);
      out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
      checksums.push_back(hex64(fnv1a64(rec.data(), rec.size())));
      offsets.push_back(offset);
      offset += rb;
      meta.push_back({{"device_id", hex64(s.device_id)}, {"window", window_json(s.window)},
                      {"noise_params", noise_json(s.noise_params)}});
    }
    out.flush();
    if (!out) throw DatasetError(DatasetError::Kind::Io, "write failed for " + bin_tmp.string() + " (disk full?)");
  }
  const Splits splits = make_splits(samples.size(), config.splits, derive_seed(config.seed, 0x5e11));
  nlohmann::json manifest{{"format", "qdtune-dataset"},
                          {"version", 1},
                          {"kind", to_string(config.kind)},
                          {"sample_count", samples.size()},
                          {"image_shape", {h, w}},
                          {"dtype", "float32"},
                          {"byte_order", "little"},
                          {"layout", "row-major"},
                          {"record_bytes", rb},
                          {"record_layout", "sensor f32[h*w], gradient f32[h*w], state_label f32[5], quality u8 "
                                            "(255 = absent), noise_scale f32"},
                          {"offsets", offsets},
                          {"checksums", checksums},
                          {"splits",
                           {{"fractions", {{"train", config.splits.train}, {"val", config.splits.val},
                                           {"test", config.splits.test}}},
                            {"seed", derive_seed(config.seed, 0x5e11)},
                            {"train", splits.train},
                            {"val", splits.val},
                            {"test", splits.test}}},
                          {"config", config},
                          {"config_hash", config.hash()},
                          {"samples", meta}};
  const auto man_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(man_tmp, std::ios::trunc);
    out << manifest.dump(1) << "\n";
    out.flush();
    if (!out) throw DatasetError(DatasetError::Kind::Io, "write failed for " + man_tmp.string());
  }
  std::filesystem::rename(bin_tmp, dir / "samples.bin");
  std::filesystem::rename(man_tmp, dir / "manifest.json");
}

void generate_dataset(const DatasetConfig& config, const std::filesystem::path& dir, int workers) {
  write_dataset(dir, config, generate_samples(config, workers));
}

DatasetReader::DatasetReader(const std::filesystem::path& dir) : dir_(dir) {
  using K = DatasetError::Kind;
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DatasetError(K::Io, "cannot open " + (dir / "manifest.json").string());
  try {
    manifest_ = nlohmann::json::parse(in);
    if (manifest_.at("format").get<std::string>() != "qdtune-dataset")
      throw DatasetError(K::CorruptManifest, "not a qdtune dataset manifest: " + dir.string());
    count_ = manifest_.at("sample_count").get<std::size_t>();
    height_ = manifest_.at("image_shape").at(0).get<int>();
    width_ = manifest_.at("image_shape").at(1).get<int>();
    record_bytes_ = manifest_.at("record_bytes").get<std::size_t>();
    config_ = manifest_.at("config").get<DatasetConfig>();
    const auto& offsets = manifest_.at("offsets");
    const auto& checks = manifest_.at("checksums");
    if (height_ < 1 || width_ < 1 || record_bytes_ != record_bytes(height_, width_))
      throw DatasetError(K::CorruptManifest, "manifest image shape and record size disagree");
    if (offsets.size() != count_ || checks.size() != count_ || manifest_.at("samples").size() != count_)
      throw DatasetError(K::CorruptManifest, "manifest per-sample tables do not match sample_count");
    for (std::size_t i = 0; i < count_; ++i) {
      if (offsets[i].get<std::size_t>() != i * record_bytes_)
        throw DatasetError(K::CorruptManifest, "record offsets are not contiguous at index " + std::to_string(i));
      checksums_.push_back(std::stoull(checks[i].get<std::string>(), nullptr, 16));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(K::CorruptManifest, "corrupt manifest in " + dir.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(K::CorruptManifest, "corrupt manifest in " + dir.string() + ": " + e.what());
  }
  const auto bin = dir / "samples.bin";
  std::error_code ec;
  const auto size = std::filesystem::file_size(bin, ec);
  if (ec) throw DatasetError(K::Io, "cannot stat " + bin.string());
  if (size < count_ * record_bytes_)
    throw DatasetError(K::TruncatedRecord, "samples.bin is truncated: record " + std::to_string(size / record_bytes_) +
                                               " is incomplete");
  if (size > count_ * record_bytes_)
    throw DatasetError(K::CorruptManifest, "samples.bin is larger than the manifest describes");
  bin_.open(bin, std::ios::binary);
  if (!bin_) throw DatasetError(K::Io, "cannot open " + bin.string());
}

Sample DatasetReader::read(std::size_t index) {
  using K = DatasetError::Kind;
  if (index >= count_) throw std::out_of_range("sample index " + std::to_string(index) + " out of range");
  std::vector<char> buf(record_bytes_);
  bin_.clear();
  bin_.seekg(static_cast<std::streamoff>(index * record_bytes_));
  bin_.read(buf.data(), static_cast<std::streamsize>(record_bytes_));
  if (!bin_) throw DatasetError(K::TruncatedRecord, "record " + std::to_string(index) + " is truncated");
  if (fnv1a64(buf.data(), buf.size()) != checksums_[index])
    throw DatasetError(K::ChecksumMismatch, "checksum mismatch in record " + std::to_string(index));

  Sample s;
  s.sensor.resize(height_, width_);
  s.gradient.resize(height_, width_);
  const std::size_t n = static_cast<std::size_t>(height_) * width_;
  std::size_t pos = 0;
  std::memcpy(s.sensor.data(), buf.data(), n * sizeof(float));
  pos += n * sizeof(float);
  std::memcpy(s.gradient.data(), buf.data() + pos, n * sizeof(float));
  pos += n * sizeof(float);
  for (int k = 0; k < kStateCount; ++k) s.state_label.probabilities[k] = take<float>(buf, pos);
  const auto q = take<std::uint8_t>(buf, pos);
  if (q != kNoQuality) {
    if (q >= kQualityCount) throw DatasetError(K::CorruptManifest, "bad quality code in record " + std::to_string(index));
    s.quality = static_cast<Quality>(q);
  }
  s.noise_scale = take<float>(buf, pos);

  const auto& meta = manifest_.at("samples").at(index);
  s.device_id = std::stoull(meta.at("device_id").get<std::string>(), nullptr, 16);
  const auto& w = meta.at("window");
  s.window = {w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>(), w.at(3).get<double>(),
              w.at(4).get<int>()};
  s.noise_params = noise_from_json(meta.at("noise_params"));
  return s;
}

std::vector<std::size_t> DatasetReader::split(const std::string& name) const {
  const auto& s = manifest_.at("splits");
  if (!s.contains(name) || name == "fractions" || name == "seed")
    throw std::invalid_argument("unknown split '" + name + "'");
  return s.at(name).get<std::vector<std::size_t>>();
}

}  // namespace qdtune::data
