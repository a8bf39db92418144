#include "qdtune/dse.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace qdtune::dse {

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return 0.0;
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

nn::LabeledImages collect(std::size_t n, int h, int w, const std::function<const data::Sample&(std::size_t)>& get,
                          bool clip) {
  nn::LabeledImages out;
  out.height = h;
  out.width = w;
  out.inputs.resize(static_cast<Eigen::Index>(h) * w, static_cast<Eigen::Index>(n));
  out.targets.resize(kStateCount, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = get(i);
    out.inputs.col(static_cast<Eigen::Index>(i)) = preprocess(s.gradient, clip);
    out.targets.col(static_cast<Eigen::Index>(i)) = s.state_label.probabilities.cast<float>();
  }
  return out;
}

}  // namespace

Eigen::VectorXf preprocess(const GridF& image, bool clip) {
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXf>(image.data(), image.size()).cast<double>();
  if (!x.allFinite()) throw std::invalid_argument("preprocess: non-finite input");
  if (clip && x.size() > 1) {
    std::vector<double> sorted(x.data(), x.data() + x.size());
    std::sort(sorted.begin(), sorted.end());
    const double lo = quantile_sorted(sorted, kClipLow);
    const double hi = quantile_sorted(sorted, kClipHigh);
    x = x.cwiseMax(lo).cwiseMin(hi);
  }
  const double mean = x.mean();
  const double sd = std::sqrt((x.array() - mean).square().mean());
  return ((x.array() - mean) / std::max(sd, 1e-8)).cast<float>().matrix();
}

nn::LabeledImages state_images(const std::vector<data::Sample>& samples, bool clip) {
  if (samples.empty()) throw std::invalid_argument("state_images: no samples");
  return collect(
      samples.size(), static_cast<int>(samples[0].gradient.rows()), static_cast<int>(samples[0].gradient.cols()),
      [&](std::size_t i) -> const data::Sample& { return samples[i]; }, clip);
}

nn::LabeledImages state_images(data::DatasetReader& reader, const std::vector<std::size_t>& indices, bool clip) {
  data::Sample current;
  return collect(
      indices.size(), reader.height(), reader.width(),
      [&](std::size_t i) -> const data::Sample& {
        current = reader.read(indices[i]);
        return current;
      },
      clip);
}

StateLabel predict_state(nn::Network<float>& net, const GridF& gradient, bool clip) {
  const Eigen::VectorXf x = preprocess(gradient, clip);
  if (gradient.rows() != net.spec().input_height || gradient.cols() != net.spec().input_width)
    throw std::invalid_argument("predict_state: image shape does not match the network input");
  if (net.spec().outputs != kStateCount) throw std::invalid_argument("predict_state: network is not a 5-state model");
  const nn::Mat<float> p = net.forward(nn::make_batch<float>(x, net.spec().input_height, net.spec().input_width), false);
  StateLabel out;
  out.probabilities = p.col(0).cast<double>();
  return out;
}

Eigen::VectorXd sample_mae(const nn::Mat<float>& predictions, const nn::Mat<float>& targets) {
  return (predictions - targets).cast<double>().cwiseAbs().colwise().mean().transpose();
}

ModelMetrics score(const nn::Mat<float>& predictions, const nn::Mat<float>& targets) {
  if (predictions.cols() == 0) throw std::invalid_argument("score: empty set");
  ModelMetrics m;
  const Eigen::VectorXd mae = sample_mae(predictions, targets);
  std::array<double, kStateCount> hits{}, mae_sum{};
  double total_hits = 0.0;
  for (Eigen::Index c = 0; c < predictions.cols(); ++c) {
    Eigen::Index p = 0, t = 0;
    predictions.col(c).maxCoeff(&p);
    targets.col(c).maxCoeff(&t);
    const bool hit = p == t;
    total_hits += hit;
    hits[t] += hit;
    mae_sum[t] += mae[c];
    ++m.state_count[t];
  }
  m.accuracy = total_hits / static_cast<double>(predictions.cols());
  m.mae = mae.mean();
  for (int s = 0; s < kStateCount; ++s) {
    const auto n = static_cast<double>(m.state_count[s]);
    m.state_accuracy[s] = n > 0 ? hits[s] / n : 0.0;
    m.state_mae[s] = n > 0 ? mae_sum[s] / n : 0.0;
  }
  return m;
}

EvaluationReport evaluate(std::vector<nn::Network<float>>& nets, const nn::LabeledImages& set) {
  if (nets.empty()) throw std::invalid_argument("evaluate: no models");
  if (set.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  EvaluationReport r;
  r.targets = set.targets;
  r.predictions = nn::Mat<float>::Zero(set.targets.rows(), set.size());
  std::vector<double> acc, mae;
  for (auto& net : nets) {
    const nn::Mat<float> p = nn::predict(net, set.inputs);
    r.predictions += p / static_cast<float>(nets.size());
    r.models.push_back(score(p, set.targets));
    acc.push_back(r.models.back().accuracy);
    mae.push_back(r.models.back().mae);
  }
  std::tie(r.accuracy_mean, r.accuracy_std) = mean_std(acc);
  std::tie(r.mae_mean, r.mae_std) = mean_std(mae);
  return r;
}

std::string value_uncertainty(double value, double uncertainty) {
  // One decimal place; uncertainties below 1 are written in units of that decimal.
  char buf[64];
  const double u = std::isfinite(uncertainty) ? std::max(0.0, uncertainty) : 0.0;
  if (std::round(u * 10.0) < 10.0)
    std::snprintf(buf, sizeof buf, "%.1f(%ld)", value, std::lround(u * 10.0));
  else
    std::snprintf(buf, sizeof buf, "%.1f(%.1f)", value, u);
  return buf;
}

void to_json(nlohmann::json& j, const EvaluationReport& r) {
  auto per_state = [](const std::array<double, kStateCount>& a) {
    nlohmann::json o = nlohmann::json::object();
    for (int s = 0; s < kStateCount; ++s) o[std::string(to_string(static_cast<State>(s)))] = a[s];
    return o;
  };
  j = nlohmann::json::object();
  j["models"] = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json counts = nlohmann::json::object();
    for (int s = 0; s < kStateCount; ++s) counts[std::string(to_string(static_cast<State>(s)))] = m.state_count[s];
    j["models"].push_back({{"accuracy", m.accuracy},
                           {"mae", m.mae},
                           {"state_accuracy", per_state(m.state_accuracy)},
                           {"state_mae", per_state(m.state_mae)},
                           {"state_count", counts}});
  }
  j["accuracy"] = {{"mean", r.accuracy_mean},
                   {"std", r.accuracy_std},
                   {"percent", value_uncertainty(100.0 * r.accuracy_mean, 100.0 * r.accuracy_std)}};
  j["mae"] = {{"mean", r.mae_mean}, {"std", r.mae_std}};
  nlohmann::json preds = nlohmann::json::array();
  for (Eigen::Index c = 0; c < r.predictions.cols(); ++c) {
    Eigen::Index p = 0, t = 0;
    r.predictions.col(c).maxCoeff(&p);
    r.targets.col(c).maxCoeff(&t);
    std::vector<float> v(r.predictions.col(c).data(), r.predictions.col(c).data() + r.predictions.rows());
    preds.push_back({{"prediction", v},
                     {"predicted", to_string(static_cast<State>(p))},
                     {"true", to_string(static_cast<State>(t))}});
  }
  j["samples"] = preds;
}

TrainedEnsemble train_ensemble(const nn::LabeledImages& train, const nn::LabeledImages& val,
                               const EnsembleOptions& options) {
  if (options.models < 1) throw std::invalid_argument("train_ensemble: need at least one model");
  TrainedEnsemble e;
  for (int m = 0; m < options.models; ++m) {
    const std::uint64_t s = derive_seed(options.seed, static_cast<std::uint64_t>(m));
    auto net = nn::Network<float>::build(options.spec, derive_seed(s, 0));
    nn::TrainOptions t;
    t.epochs = options.epochs;
    t.batch_size = options.batch_size;
    t.patience = options.patience;
    t.learning_rate = options.spec.learning_rate;
    t.seed = derive_seed(s, 1);
    if (options.log) t.log = [&, m](const std::string& line) { options.log("model " + std::to_string(m) + " " + line); };
    e.histories.push_back(nn::train(net, train, val, t));
    e.nets.push_back(std::move(net));
  }
  return e;
}

void save_ensemble(const TrainedEnsemble& e, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index{{"format", "qdtune-ensemble"}, {"models", nlohmann::json::array()}};
  for (std::size_t m = 0; m < e.nets.size(); ++m) {
    char name[32];
    std::snprintf(name, sizeof name, "model_%03zu", m);
    nn::save_checkpoint(e.nets[m], e.histories[m], dir / name);
    index["models"].push_back(name);
  }
  std::ofstream out(dir / "ensemble.json", std::ios::trunc);
  out << index.dump(2) << "\n";
  if (!out) throw Error("write failed for " + (dir / "ensemble.json").string());
}

TrainedEnsemble load_ensemble(const std::filesystem::path& dir) {
  TrainedEnsemble e;
  if (std::filesystem::exists(dir / "checkpoint.json")) {
    e.histories.emplace_back();
    e.nets.push_back(nn::load_checkpoint(dir, &e.histories.back()));
    return e;
  }
  std::ifstream in(dir / "ensemble.json");
  if (!in) throw Error("no ensemble.json or checkpoint.json in " + dir.string());
  const auto index = nlohmann::json::parse(in);
  for (const auto& name : index.at("models")) {
    e.histories.emplace_back();
    e.nets.push_back(nn::load_checkpoint(dir / name.get<std::string>(), &e.histories.back()));
  }
  if (e.nets.empty()) throw Error("ensemble in " + dir.string() + " has no models");
  return e;
}

BoxStats box_stats(std::vector<double> values) {
  BoxStats b;
  b.n = values.size();
  if (values.empty()) return b;
  std::sort(values.begin(), values.end());
  b.min = values.front();
  b.max = values.back();
  b.median = quantile_sorted(values, 0.5);
  b.q1 = quantile_sorted(values, 0.25);
  b.q3 = quantile_sorted(values, 0.75);
  const double iqr = b.q3 - b.q1;
  b.whisker_low = b.q1;
  b.whisker_high = b.q3;
  for (double v : values)
    if (v >= b.q1 - 1.5 * iqr) {
      b.whisker_low = std::min(v, b.q1);
      break;
    }
  for (auto it = values.rbegin(); it != values.rend(); ++it)
    if (*it <= b.q3 + 1.5 * iqr) {
      b.whisker_high = std::max(*it, b.q3);
      break;
    }
  return b;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: size mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = ranks(x), ry = ranks(y);
  const auto [mx, sx] = mean_std(rx);
  const auto [my, sy] = mean_std(ry);
  if (sx == 0.0 || sy == 0.0) return 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) cov += (rx[i] - mx) * (ry[i] - my);
  return cov / (static_cast<double>(rx.size() - 1) * sx * sy);
}

std::vector<MatrixCondition> default_conditions() {
  using data::DatasetKind;
  using noise::NoiseType;
  return {{"A", DatasetKind::Noiseless, NoiseType::White, false, "noiseless"},
          {"A_proc", DatasetKind::Noiseless, NoiseType::White, true, "noiseless"},
          {"B", DatasetKind::PerNoise, NoiseType::DotJumps, false, "noiseless"},
          {"C", DatasetKind::PerNoise, NoiseType::Coulomb, false, "noiseless"},
          {"D", DatasetKind::PerNoise, NoiseType::White, false, "noiseless"},
          {"E", DatasetKind::PerNoise, NoiseType::Pink, false, "noiseless"},
          {"F", DatasetKind::PerNoise, NoiseType::SensorJumps, false, "noiseless"},
          {"G", DatasetKind::Combined, NoiseType::White, false, "noiseless"},
          {"G_opt", DatasetKind::Combined, NoiseType::White, false, "noisy"}};
}

std::vector<MatrixCell> run_matrix_experiment(const MatrixConfig& config) {
  if (config.conditions.empty()) throw std::invalid_argument("matrix experiment: no conditions");
  if (config.models_per_cell < 1) throw std::invalid_argument("matrix experiment: models_per_cell must be >= 1");
  data::DatasetConfig test_cfg;
  test_cfg.kind = data::DatasetKind::Combined;
  test_cfg.count = config.test_count;
  test_cfg.seed = derive_seed(config.seed, 1000);
  test_cfg.base_noise = config.base_noise;
  const auto test_samples = data::generate_samples(test_cfg);

  std::vector<MatrixCell> cells;
  for (std::size_t c = 0; c < config.conditions.size(); ++c) {
    const auto& cond = config.conditions[c];
    if (config.log) config.log("condition " + cond.name);
    data::DatasetConfig train_cfg;
    train_cfg.kind = cond.kind;
    train_cfg.noise_type = cond.noise_type;
    train_cfg.count = config.train_count;
    // Conditions on the same kind share their training data.
    train_cfg.seed = derive_seed(config.seed, 2000 + static_cast<std::uint64_t>(cond.kind) * 16 +
                                                  static_cast<std::uint64_t>(cond.noise_type));
    train_cfg.base_noise = config.base_noise;
    const auto samples = data::generate_samples(train_cfg);
    const auto splits = data::make_splits(samples.size(), {0.9, 0.1, 0.0}, derive_seed(train_cfg.seed, 1));
    std::vector<data::Sample> tr, va;
    for (auto i : splits.train) tr.push_back(samples[i]);
    for (auto i : splits.val) va.push_back(samples[i]);
    if (va.empty()) va = tr;

    EnsembleOptions opt;
    opt.spec = nn::NetworkSpec::by_name(cond.arch);
    opt.models = config.models_per_cell;
    opt.seed = derive_seed(config.seed, 3000 + c);
    opt.epochs = config.epochs;
    auto ensemble = train_ensemble(state_images(tr, cond.clip), state_images(va, cond.clip), opt);
    const auto report = evaluate(ensemble.nets, state_images(test_samples, cond.clip));

    MatrixCell cell;
    cell.condition = cond;
    for (const auto& m : report.models) {
      cell.accuracy.push_back(m.accuracy);
      cell.mae.push_back(m.mae);
    }
    cell.accuracy_box = box_stats(cell.accuracy);
    cell.mae_box = box_stats(cell.mae);
    cell.spearman_acc_mae = spearman(cell.accuracy, cell.mae);
    cells.push_back(std::move(cell));
  }
  return cells;
}

nlohmann::json matrix_json(const std::vector<MatrixCell>& cells) {
  auto box = [](const BoxStats& b) {
    return nlohmann::json{{"median", b.median}, {"q1", b.q1}, {"q3", b.q3}, {"whisker_low", b.whisker_low},
                          {"whisker_high", b.whisker_high}, {"min", b.min}, {"max", b.max}, {"n", b.n}};
  };
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : cells)
    j.push_back({{"condition", c.condition.name},
                 {"training_kind", data::to_string(c.condition.kind)},
                 {"noise_type", c.condition.kind == data::DatasetKind::PerNoise
                                    ? std::string(noise::to_string(c.condition.noise_type))
                                    : std::string()},
                 {"clip", c.condition.clip},
                 {"arch", c.condition.arch},
                 {"accuracy", c.accuracy},
                 {"mae", c.mae},
                 {"accuracy_box", box(c.accuracy_box)},
                 {"mae_box", box(c.mae_box)},
                 {"spearman_accuracy_mae", c.spearman_acc_mae}});
  return j;
}

std::string matrix_svg(const std::vector<MatrixCell>& cells) {
  const double w = 80.0 * static_cast<double>(cells.size()) + 80.0, h = 320.0, top = 20.0, bottom = 280.0;
  auto y = [&](double acc) { return bottom - acc * (bottom - top); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int t = 0; t <= 10; t += 2) {
    const double yy = y(t / 10.0);
    s << "<line x1=\"50\" x2=\"" << w - 10 << "\" y1=\"" << yy << "\" y2=\"" << yy << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"45\" y=\"" << yy + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << t * 10 << "%</text>\n";
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& b = cells[i].accuracy_box;
    const double cx = 90.0 + 80.0 * static_cast<double>(i);
    s << "<line x1=\"" << cx << "\" x2=\"" << cx << "\" y1=\"" << y(b.whisker_low) << "\" y2=\"" << y(b.whisker_high)
      << "\" stroke=\"black\"/>\n";
    s << "<rect x=\"" << cx - 20 << "\" y=\"" << y(b.q3) << "\" width=\"40\" height=\"" << std::max(0.5, y(b.q1) - y(b.q3))
      << "\" fill=\"#9cc3e6\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << cx - 20 << "\" x2=\"" << cx + 20 << "\" y1=\"" << y(b.median) << "\" y2=\"" << y(b.median)
      << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << cx << "\" y=\"" << bottom + 20 << "\" font-size=\"12\" text-anchor=\"middle\">"
      << cells[i].condition.name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace qdtune::dse
