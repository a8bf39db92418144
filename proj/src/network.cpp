#include "qdtune/nn/train.hpp"

#include "qdtune/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace qdtune::nn {

template class Network<float>;
template class Network<double>;

namespace {

constexpr std::array<const char*, 9> kKindNames = {"conv2d", "dropout", "layer_norm", "relu", "swish",
                                                   "max_pool", "global_avg_pool", "dense", "softmax"};

}  // namespace

std::string to_string(LayerKind k) { return kKindNames[static_cast<int>(k)]; }

LayerKind parse_layer_kind(const std::string& s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (s == kKindNames[i]) return static_cast<LayerKind>(i);
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

LayerSpec LayerSpec::conv(int kernel, int filters, int stride, Padding padding) {
  LayerSpec s;
  s.kind = LayerKind::Conv2D;
  s.kernel = kernel;
  s.units = filters;
  s.stride = stride;
  s.padding = padding;
  return s;
}
LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec s;
  s.kind = LayerKind::Dropout;
  s.rate = rate;
  return s;
}
LayerSpec LayerSpec::layer_norm() { return LayerSpec{LayerKind::LayerNorm}; }
LayerSpec LayerSpec::relu() { return LayerSpec{LayerKind::ReLU}; }
LayerSpec LayerSpec::swish() { return LayerSpec{LayerKind::Swish}; }
LayerSpec LayerSpec::max_pool(int size, int stride) {
  LayerSpec s;
  s.kind = LayerKind::MaxPool;
  s.kernel = size;
  s.stride = stride;
  s.padding = Padding::Valid;
  return s;
}
LayerSpec LayerSpec::global_avg_pool() { return LayerSpec{LayerKind::GlobalAvgPool}; }
LayerSpec LayerSpec::dense(int units) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.units = units;
  return s;
}
LayerSpec LayerSpec::softmax() { return LayerSpec{LayerKind::Softmax}; }

std::vector<Shape> NetworkSpec::infer_shapes() const {
  auto fail = [&](std::size_t i, const std::string& why) {
    throw std::invalid_argument(name + ": layer " + std::to_string(i) + " (" + to_string(layers[i].kind) + "): " + why);
  };
  if (input_height < 1 || input_width < 1) throw std::invalid_argument(name + ": empty input shape");
  if (layers.empty() || layers.back().kind != LayerKind::Softmax)
    throw std::invalid_argument(name + ": the last layer must be the softmax output");
  if (std::count_if(layers.begin(), layers.end(), [](auto& l) { return l.kind == LayerKind::Softmax; }) != 1)
    throw std::invalid_argument(name + ": exactly one softmax layer is required");

  std::vector<Shape> shapes;
  Shape s{1, input_height, input_width};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv2D: {
        if (l.kernel < 1 || l.units < 1) fail(i, "kernel and filter count must be >= 1");
        if (l.stride < 1) fail(i, "stride must be >= 1");
        if (s.height == 1 && s.width == 1 && i > 0 && layers[i - 1].kind == LayerKind::GlobalAvgPool)
          fail(i, "convolution after global pooling");
        const int h = detail::conv_out(s.height, l.kernel, l.stride, l.padding);
        const int w = detail::conv_out(s.width, l.kernel, l.stride, l.padding);
        if (h < 1 || w < 1) fail(i, "output spatial size below 1x1 for input " + std::to_string(s.height) + "x" + std::to_string(s.width));
        s = {l.units, h, w};
        break;
      }
      case LayerKind::MaxPool: {
        if (l.kernel < 1 || l.stride < 1) fail(i, "pool size and stride must be >= 1");
        const int h = detail::conv_out(s.height, l.kernel, l.stride, Padding::Valid);
        const int w = detail::conv_out(s.width, l.kernel, l.stride, Padding::Valid);
        if (h < 1 || w < 1) fail(i, "pooling below 1x1 spatial size for input " + std::to_string(s.height) + "x" + std::to_string(s.width));
        s.height = h;
        s.width = w;
        break;
      }
      case LayerKind::Dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) fail(i, "dropout rate must lie in [0, 1)");
        break;
      case LayerKind::LayerNorm:
      case LayerKind::ReLU:
      case LayerKind::Swish:
        break;
      case LayerKind::GlobalAvgPool:
        s.height = s.width = 1;
        break;
      case LayerKind::Dense:
        if (l.units < 1) fail(i, "unit count must be >= 1");
        if (s.height != 1 || s.width != 1) fail(i, "dense layer requires pooled 1x1 input");
        s = {l.units, 1, 1};
        break;
      case LayerKind::Softmax:
        if (s.height != 1 || s.width != 1 || i == 0 || layers[i - 1].kind != LayerKind::Dense)
          fail(i, "softmax must follow a dense output layer");
        if (s.channels != outputs) fail(i, "output layer has " + std::to_string(s.channels) + " units, spec expects " + std::to_string(outputs));
        break;
    }
    shapes.push_back(s);
  }
  return shapes;
}

std::size_t NetworkSpec::parameter_count() const {
  const auto shapes = infer_shapes();
  std::size_t total = 0;
  int in_channels = 1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto c_in = static_cast<std::size_t>(in_channels);
    const auto units = static_cast<std::size_t>(l.units);
    switch (l.kind) {
      case LayerKind::Conv2D: total += static_cast<std::size_t>(l.kernel * l.kernel) * c_in * units + units; break;
      case LayerKind::Dense: total += c_in * units + units; break;
      case LayerKind::LayerNorm: total += 2 * c_in; break;
      default: break;
    }
    in_channels = shapes[i].channels;
  }
  return total;
}

NetworkSpec NetworkSpec::noiseless_dse() {
  NetworkSpec s;
  s.name = "noiseless_dse";
  s.learning_rate = 3.45e-3;
  s.outputs = 5;
  s.layers = {LayerSpec::conv(5, 23, 2), LayerSpec::dropout(0.12), LayerSpec::layer_norm(), LayerSpec::relu(),
              LayerSpec::conv(5, 7, 2),  LayerSpec::dropout(0.28), LayerSpec::layer_norm(), LayerSpec::relu(),
              LayerSpec::conv(5, 18, 2), LayerSpec::dropout(0.30), LayerSpec::layer_norm(), LayerSpec::relu(),
              LayerSpec::global_avg_pool(), LayerSpec::dense(5), LayerSpec::softmax()};
  return s;
}

NetworkSpec NetworkSpec::noisy_dse() {
  NetworkSpec s;
  s.name = "noisy_dse";
  s.learning_rate = 1.21e-3;
  s.outputs = 5;
  s.layers = {LayerSpec::conv(7, 22, 1), LayerSpec::dropout(0.66), LayerSpec::relu(),
              LayerSpec::conv(7, 22, 2), LayerSpec::dropout(0.66), LayerSpec::relu(),
              LayerSpec::conv(7, 35, 1), LayerSpec::dropout(0.19), LayerSpec::relu(),
              LayerSpec::conv(7, 35, 2), LayerSpec::dropout(0.19), LayerSpec::relu(),
              LayerSpec::global_avg_pool(), LayerSpec::dense(5), LayerSpec::softmax()};
  return s;
}

NetworkSpec NetworkSpec::dqc() {
  NetworkSpec s;
  s.name = "dqc";
  s.learning_rate = 2.65e-4;
  s.outputs = 3;
  s.layers = {LayerSpec::conv(7, 184, 1, Padding::Valid), LayerSpec::dropout(0.05), LayerSpec::layer_norm(),
              LayerSpec::swish(),
              LayerSpec::conv(3, 249, 1, Padding::Valid), LayerSpec::layer_norm(), LayerSpec::swish(),
              LayerSpec::max_pool(2, 2),
              LayerSpec::global_avg_pool(), LayerSpec::dense(161), LayerSpec::dropout(0.6), LayerSpec::dense(3),
              LayerSpec::softmax()};
  return s;
}

NetworkSpec NetworkSpec::by_name(const std::string& name) {
  if (name == "noiseless" || name == "noiseless_dse") return noiseless_dse();
  if (name == "noisy" || name == "noisy_dse") return noisy_dse();
  if (name == "dqc") return dqc();
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case LayerKind::Conv2D:
      j["kernel"] = s.kernel;
      j["filters"] = s.units;
      j["stride"] = s.stride;
      j["padding"] = s.padding == Padding::Same ? "same" : "valid";
      break;
    case LayerKind::MaxPool:
      j["size"] = s.kernel;
      j["stride"] = s.stride;
      break;
    case LayerKind::Dropout: j["rate"] = s.rate; break;
    case LayerKind::Dense: j["units"] = s.units; break;
    default: break;
  }
}

void from_json(const nlohmann::json& j, LayerSpec& s) {
  s = LayerSpec{};
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  switch (s.kind) {
    case LayerKind::Conv2D:
      s.kernel = j.at("kernel").get<int>();
      s.units = j.at("filters").get<int>();
      s.stride = j.at("stride").get<int>();
      s.padding = j.at("padding").get<std::string>() == "valid" ? Padding::Valid : Padding::Same;
      break;
    case LayerKind::MaxPool:
      s.kernel = j.at("size").get<int>();
      s.stride = j.at("stride").get<int>();
      s.padding = Padding::Valid;
      break;
    case LayerKind::Dropout: s.rate = j.at("rate").get<double>(); break;
    case LayerKind::Dense: s.units = j.at("units").get<int>(); break;
    default: break;
  }
}

void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"input_shape", {s.input_height, s.input_width}},
                     {"layers", s.layers},
                     {"optimizer", s.optimizer},
                     {"learning_rate", s.learning_rate},
                     {"loss", s.loss},
                     {"outputs", s.outputs}};
}

void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.name = j.at("name").get<std::string>();
  s.input_height = j.at("input_shape").at(0).get<int>();
  s.input_width = j.at("input_shape").at(1).get<int>();
  s.layers = j.at("layers").get<std::vector<LayerSpec>>();
  s.optimizer = j.at("optimizer").get<std::string>();
  s.learning_rate = j.at("learning_rate").get<double>();
  s.loss = j.at("loss").get<std::string>();
  s.outputs = j.at("outputs").get<int>();
}

// ---------------------------------------------------------------------------
// Training

double argmax_accuracy(const Mat<float>& predictions, const Mat<float>& targets) {
  if (predictions.cols() == 0) return 0.0;
  Eigen::Index hits = 0;
  for (Eigen::Index c = 0; c < predictions.cols(); ++c) {
    Eigen::Index p = 0, t = 0;
    predictions.col(c).maxCoeff(&p);
    targets.col(c).maxCoeff(&t);
    hits += p == t;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.cols());
}

Mat<float> predict(Network<float>& net, const Mat<float>& inputs, int batch_size) {
  const int h = net.spec().input_height;
  const int w = net.spec().input_width;
  if (inputs.rows() != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("predict: input rows do not match the network input shape");
  Mat<float> out(net.spec().outputs, inputs.cols());
  for (Eigen::Index start = 0; start < inputs.cols(); start += batch_size) {
    const Eigen::Index n = std::min<Eigen::Index>(batch_size, inputs.cols() - start);
    out.middleCols(start, n) = net.forward(make_batch<float>(inputs.middleCols(start, n), h, w), false);
  }
  return out;
}

Evaluation evaluate(Network<float>& net, const LabeledImages& set, int batch_size) {
  const Mat<float> p = predict(net, set.inputs, batch_size);
  return {static_cast<double>(cross_entropy<float>(p, set.targets)), argmax_accuracy(p, set.targets)};
}

TrainHistory train(Network<float>& net, const LabeledImages& train_set, const LabeledImages& val_set,
                   const TrainOptions& options) {
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (val_set.size() == 0) throw std::invalid_argument("train: empty validation set");
  if (train_set.targets.cols() != train_set.size() || val_set.targets.cols() != val_set.size())
    throw std::invalid_argument("train: inputs/targets size mismatch");
  if (options.batch_size < 1 || options.epochs < 1) throw std::invalid_argument("train: bad batch size or epochs");

  const int h = net.spec().input_height;
  const int w = net.spec().input_width;
  std::mt19937_64 shuffle_rng(derive_seed(options.seed, 0));
  net.reseed_dropout(derive_seed(options.seed, 1));

  std::vector<Eigen::Index> order(static_cast<std::size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), 0);

  TrainHistory history;
  std::vector<Mat<float>> best_params = net.parameter_values();
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  Mat<float> batch_inputs, batch_targets;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, acc_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t n = std::min<std::size_t>(options.batch_size, order.size() - start);
      batch_inputs.resize(train_set.inputs.rows(), static_cast<Eigen::Index>(n));
      batch_targets.resize(train_set.targets.rows(), static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        batch_inputs.col(static_cast<Eigen::Index>(k)) = train_set.inputs.col(order[start + k]);
        batch_targets.col(static_cast<Eigen::Index>(k)) = train_set.targets.col(order[start + k]);
      }
      const Mat<float> probs = net.forward(make_batch<float>(batch_inputs, h, w), true);
      net.zero_grad();
      const double loss = net.backward(batch_targets);
      if (!std::isfinite(loss))
        throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(start / options.batch_size));
      net.adam_step(options.learning_rate);
      loss_sum += loss * static_cast<double>(n);
      acc_sum += argmax_accuracy(probs, batch_targets) * static_cast<double>(n);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.train_accuracy = acc_sum / static_cast<double>(order.size());
    const auto val = evaluate(net, val_set);
    stats.val_loss = val.loss;
    stats.val_accuracy = val.accuracy;
    if (!std::isfinite(stats.val_loss))
      throw DivergenceError("training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    history.epochs.push_back(stats);
    if (options.log) {
      std::ostringstream line;
      line << "epoch " << epoch << " loss " << stats.train_loss << " acc " << stats.train_accuracy << " val_loss "
           << stats.val_loss << " val_acc " << stats.val_accuracy;
      options.log(line.str());
    }
    if (stats.val_loss < best_loss) {
      best_loss = stats.val_loss;
      history.best_epoch = epoch;
      best_params = net.parameter_values();
      since_best = 0;
    } else if (++since_best >= options.patience) {
      break;
    }
  }
  history.best_val_loss = best_loss;
  if (options.restore_best) net.set_parameter_values(best_params);
  return history;
}

void to_json(nlohmann::json& j, const TrainHistory& h) {
  j = nlohmann::json{{"best_epoch", h.best_epoch}, {"best_val_loss", h.best_val_loss}, {"epochs", nlohmann::json::array()}};
  for (const auto& e : h.epochs)
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"train_accuracy", e.train_accuracy},
                           {"val_loss", e.val_loss},
                           {"val_accuracy", e.val_accuracy}});
}

void from_json(const nlohmann::json& j, TrainHistory& h) {
  h = TrainHistory{};
  h.best_epoch = j.at("best_epoch").get<int>();
  h.best_val_loss = j.at("best_val_loss").get<double>();
  for (const auto& e : j.at("epochs")) {
    EpochStats s;
    s.epoch = e.at("epoch").get<int>();
    s.train_loss = e.at("train_loss").get<double>();
    s.train_accuracy = e.at("train_accuracy").get<double>();
    s.val_loss = e.at("val_loss").get<double>();
    s.val_accuracy = e.at("val_accuracy").get<double>();
    h.epochs.push_back(s);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_block(std::ofstream& out, const Mat<float>& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
}

void read_block(std::ifstream& in, Mat<float>& m, const std::filesystem::path& path) {
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  if (!in) throw Error("checkpoint " + path.string() + ": truncated parameter file");
}

}  // namespace

void save_checkpoint(const Network<float>& net, const TrainHistory& history, const std::filesystem::path& dir) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::filesystem::create_directories(dir);
  const auto params = net.parameter_values();
  nlohmann::json shapes = nlohmann::json::array();
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  {
    std::ofstream out(dir / "params.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "params.bin").string());
    for (const auto* group : {&params, &net.adam_first_moments(), &net.adam_second_moments()})
      for (const auto& m : *group) {
        write_block(out, m);
        checksum = fnv1a64(m.data(), static_cast<std::size_t>(m.size()) * sizeof(float), checksum);
      }
    if (!out) throw Error("write failed for " + (dir / "params.bin").string());
  }
  for (const auto& p : params) shapes.push_back({p.rows(), p.cols()});
  nlohmann::json j{{"format", "qdtune-checkpoint"},
                   {"version", 1},
                   {"dtype", "float32"},
                   {"byte_order", "little"},
                   {"spec", net.spec()},
                   {"parameter_count", net.parameter_count()},
                   {"parameter_shapes", shapes},
                   {"adam_step", net.step()},
                   {"checksum", hex64(checksum)},
                   {"history", history}};
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  out << j.dump(2) << "\n";
  if (!out) throw Error("write failed for " + (dir / "checkpoint.json").string());
}

Network<float> load_checkpoint(const std::filesystem::path& dir, TrainHistory* history) {
  std::ifstream jin(dir / "checkpoint.json");
  if (!jin) throw Error("cannot open checkpoint " + (dir / "checkpoint.json").string());
  nlohmann::json j;
  try {
    jin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt checkpoint manifest " + dir.string() + ": " + e.what());
  }
  const auto spec = j.at("spec").get<NetworkSpec>();
  auto net = Network<float>::build(spec, 0);
  auto params = net.parameter_values();
  auto m = net.adam_first_moments();
  auto v = net.adam_second_moments();
  std::ifstream in(dir / "params.bin", std::ios::binary);
  if (!in) throw Error("cannot open " + (dir / "params.bin").string());
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  for (auto* group : {&params, &m, &v})
    for (auto& block : *group) {
      read_block(in, block, dir);
      checksum = fnv1a64(block.data(), static_cast<std::size_t>(block.size()) * sizeof(float), checksum);
    }
  if (hex64(checksum) != j.at("checksum").get<std::string>())
    throw Error("checkpoint " + dir.string() + ": checksum mismatch");
  net.set_parameter_values(params);
  net.adam_first_moments() = m;
  net.adam_second_moments() = v;
  net.set_step(j.at("adam_step").get<std::int64_t>());
  if (history) *history = j.at("history").get<TrainHistory>();
  return net;
}

}  // namespace qdtune::nn
