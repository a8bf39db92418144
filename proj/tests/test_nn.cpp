#include "oracles.hpp"

#include "qdtune/nn/train.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace qdtune;
using namespace qdtune::nn;

namespace {

NetworkSpec micro(std::vector<LayerSpec> body, int outputs = 3) {
  NetworkSpec s;
  s.name = "micro";
  s.input_height = s.input_width = 6;
  s.outputs = outputs;
  s.layers = std::move(body);
  return s;
}

Eigen::MatrixXd random_images(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(36, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Eigen::MatrixXd soft_targets(int classes, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Eigen::MatrixXd t(classes, n);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  for (int j = 0; j < n; ++j) t.col(j) /= t.col(j).sum();
  return t;
}

// Toy problem: class = which quadrant holds the bright blob.
LabeledImages quadrant_set(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 0.2f);
  LabeledImages set;
  set.height = set.width = 8;
  set.inputs.resize(64, n);
  set.targets = Mat<float>::Zero(4, n);
  for (int j = 0; j < n; ++j) {
    const int q = static_cast<int>(rng() % 4);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        const bool on = (r < 4) == (q < 2) && (c < 4) == (q % 2 == 0);
        set.inputs(r * 8 + c, j) = (on ? 1.0f : 0.0f) + g(rng);
      }
    set.targets(q, j) = 1.0f;
  }
  return set;
}

NetworkSpec toy_spec() {
  NetworkSpec s;
  s.name = "toy";
  s.input_height = s.input_width = 8;
  s.outputs = 4;
  s.learning_rate = 1e-2;
  s.layers = {LayerSpec::conv(3, 4, 1), LayerSpec::relu(), LayerSpec::max_pool(2, 2), LayerSpec::conv(3, 8, 1),
              LayerSpec::relu(), LayerSpec::global_avg_pool(), LayerSpec::dense(4), LayerSpec::softmax()};
  return s;
}

}  // namespace

TEST_CASE("reference architecture parameter totals") {
  CHECK(NetworkSpec::noiseless_dse().parameter_count() == 7989);
  CHECK(NetworkSpec::noisy_dse().parameter_count() == 122843);
  CHECK(NetworkSpec::dqc().parameter_count() == 463395);
  // instantiated networks agree with the layer-list arithmetic
  CHECK(Network<float>::build(NetworkSpec::noiseless_dse(), 1).parameter_count() == 7989);
  CHECK(Network<float>::build(NetworkSpec::dqc(), 1).parameter_count() == 463395);
}

TEST_CASE("hand-counted parameters for a small spec") {
  // conv 3x3x1->2: 18 + 2, LN over 2 channels: 4, dense 2->3: 6 + 3
  auto s = micro({LayerSpec::conv(3, 2, 1), LayerSpec::layer_norm(), LayerSpec::global_avg_pool(), LayerSpec::dense(3),
                  LayerSpec::softmax()});
  CHECK(s.parameter_count() == 33);
}

TEST_CASE("shape inference rejects malformed specs") {
  CHECK_THROWS_AS(micro({LayerSpec::conv(3, 2, 1), LayerSpec::dense(3), LayerSpec::softmax()}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(micro({LayerSpec::conv(3, 2, 1), LayerSpec::global_avg_pool(), LayerSpec::dense(3)}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(micro({LayerSpec::conv(9, 2, 1, Padding::Valid), LayerSpec::global_avg_pool(), LayerSpec::dense(3),
                         LayerSpec::softmax()})
                      .validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(micro({LayerSpec::global_avg_pool(), LayerSpec::dense(4), LayerSpec::softmax()}).validate(),
                  std::invalid_argument);
  try {
    micro({LayerSpec::conv(3, 2, 1), LayerSpec::max_pool(7, 7), LayerSpec::global_avg_pool(), LayerSpec::dense(3),
           LayerSpec::softmax()})
        .validate();
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("valid and same padding output sizes") {
  auto s = micro({LayerSpec::conv(3, 2, 1, Padding::Valid), LayerSpec::conv(3, 2, 2, Padding::Same),
                  LayerSpec::global_avg_pool(), LayerSpec::dense(3), LayerSpec::softmax()});
  const auto shapes = s.infer_shapes();
  CHECK(shapes[0] == Shape{2, 4, 4});
  CHECK(shapes[1] == Shape{2, 2, 2});
}

TEST_CASE("analytic gradients match central differences for every layer kind") {
  const auto gap = LayerSpec::global_avg_pool();
  const auto out = LayerSpec::dense(3);
  const auto sm = LayerSpec::softmax();
  const std::vector<std::pair<std::string, NetworkSpec>> cases = {
      {"conv same", micro({LayerSpec::conv(3, 2, 1), gap, out, sm})},
      {"conv valid stride 2", micro({LayerSpec::conv(3, 2, 2, Padding::Valid), gap, out, sm})},
      {"layer norm", micro({LayerSpec::conv(3, 2, 1), LayerSpec::layer_norm(), gap, out, sm})},
      {"relu", micro({LayerSpec::conv(3, 3, 1), LayerSpec::relu(), gap, out, sm})},
      {"swish", micro({LayerSpec::conv(3, 2, 1), LayerSpec::swish(), gap, out, sm})},
      {"max pool", micro({LayerSpec::conv(3, 2, 1), LayerSpec::max_pool(2, 2), gap, out, sm})},
      {"dropout", micro({LayerSpec::conv(3, 2, 1), LayerSpec::dropout(0.3), gap, out, sm})},
      {"dense stack", micro({LayerSpec::conv(3, 2, 1), gap, LayerSpec::dense(4), LayerSpec::swish(), out, sm})},
  };
  const auto images = random_images(3, 5);
  const auto targets = soft_targets(3, 3, 6);
  for (const auto& [name, spec] : cases) {
    CAPTURE(name);
    auto net = Network<double>::build(spec, 11);
    const auto r = oracle::check_gradients(net, images, 6, 6, targets);
    CHECK(r.worst_param_error < 1e-4);
    CHECK(r.input_error < 1e-4);
  }
}

TEST_CASE("build is deterministic per seed") {
  auto a = Network<float>::build(NetworkSpec::noiseless_dse(), 3).parameter_values();
  auto b = Network<float>::build(NetworkSpec::noiseless_dse(), 3).parameter_values();
  auto c = Network<float>::build(NetworkSpec::noiseless_dse(), 4).parameter_values();
  bool same = true, differ = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a[i] == b[i];
    differ = differ || a[i] != c[i];
  }
  CHECK(same);
  CHECK(differ);
}

TEST_CASE("softmax outputs are distributions") {
  auto net = Network<float>::build(NetworkSpec::noiseless_dse(), 2);
  Mat<float> x = Mat<float>::Random(900, 4);
  const auto p = predict(net, x);
  CHECK(p.rows() == 5);
  for (int j = 0; j < 4; ++j) {
    CHECK(p.col(j).sum() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(p.col(j).minCoeff() >= 0.0f);
  }
}

TEST_CASE("training learns a separable toy problem and is reproducible") {
  const auto train_set = quadrant_set(400, 1), val_set = quadrant_set(100, 2);
  TrainOptions opt;
  opt.epochs = 15;
  opt.batch_size = 32;
  opt.learning_rate = 1e-2;
  opt.seed = 9;
  auto a = Network<float>::build(toy_spec(), 1);
  const auto ha = train(a, train_set, val_set, opt);
  CHECK(evaluate(a, val_set).accuracy > 0.9);
  auto b = Network<float>::build(toy_spec(), 1);
  const auto hb = train(b, train_set, val_set, opt);
  REQUIRE(ha.epochs.size() == hb.epochs.size());
  CHECK(ha.epochs.back().train_loss == hb.epochs.back().train_loss);
}

TEST_CASE("divergent training is reported") {
  const auto set = quadrant_set(64, 3);
  TrainOptions opt;
  opt.epochs = 3;
  opt.learning_rate = 1e30;
  auto net = Network<float>::build(toy_spec(), 1);
  CHECK_THROWS_AS(train(net, set, set, opt), DivergenceError);
}

TEST_CASE("checkpoint round trip and corruption detection") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "qdtune_test_ckpt";
  fs::remove_all(dir);
  auto net = Network<float>::build(toy_spec(), 5);
  const auto set = quadrant_set(64, 4);
  TrainOptions opt;
  opt.epochs = 2;
  const auto hist = train(net, set, set, opt);
  save_checkpoint(net, hist, dir);

  TrainHistory loaded_hist;
  auto loaded = load_checkpoint(dir, &loaded_hist);
  CHECK(loaded.step() == net.step());
  CHECK(loaded_hist.epochs.size() == hist.epochs.size());
  const auto pa = net.parameter_values(), pb = loaded.parameter_values();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
  CHECK(predict(loaded, set.inputs) == predict(net, set.inputs));

  {
    std::fstream f(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(17);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5a);
    f.seekp(17);
    f.write(&c, 1);
  }
  CHECK_THROWS(load_checkpoint(dir));
  fs::resize_file(dir / "params.bin", 10);
  CHECK_THROWS(load_checkpoint(dir));
  fs::remove_all(dir);
}
