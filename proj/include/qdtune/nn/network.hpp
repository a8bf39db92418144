#pragma once

#include "qdtune/nn/layers.hpp"
#include "qdtune/nn/spec.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <vector>

namespace qdtune::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// Sequential network built from a NetworkSpec. The trailing softmax is applied by forward();
/// backward() starts from the softmax cross-entropy gradient.
template <class Scalar>
class Network {
 public:
  Network() = default;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network& other) { *this = other; }
  Network& operator=(const Network& other) {
    if (this == &other) return *this;
    if (other.layers_.empty()) {
      *this = Network();
      return *this;
    }
    *this = build(other.spec_, 0);
    copy_state_from(other);
    return *this;
  }

  /// He-uniform conv/dense weights, zero biases, unit layer-norm gains; deterministic per seed.
  static Network build(const NetworkSpec& spec, std::uint64_t seed) {
    const auto shapes = spec.infer_shapes();
    Network net;
    net.spec_ = spec;
    std::mt19937_64 init_rng(seed);
    net.dropout_rng_.seed(seed ^ 0x5deece66dULL);
    Shape in{1, spec.input_height, spec.input_width};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      if (auto layer = make_layer<Scalar>(spec.layers[i], in)) {
        layer->init(init_rng);
        net.layers_.push_back(std::move(layer));
      }
      in = shapes[i];
    }
    for (auto& p : net.parameters()) {
      net.adam_m_.push_back(Mat<Scalar>::Zero(p.value->rows(), p.value->cols()));
      net.adam_v_.push_back(Mat<Scalar>::Zero(p.value->rows(), p.value->cols()));
    }
    return net;
  }

  const NetworkSpec& spec() const { return spec_; }

  /// Softmax probabilities (classes x batch). Dropout is active only when `training`.
  Mat<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    if (x.channels() != 1 || x.height != spec_.input_height || x.width != spec_.input_width)
      throw std::invalid_argument("Network: input shape does not match " + spec_.name + " spec");
    Tensor<Scalar> h = x;
    for (auto& layer : layers_) h = layer->forward(h, training, dropout_rng_);
    probabilities_ = softmax<Scalar>(h.data);
    return probabilities_;
  }

  /// Accumulates gradients of the mean soft-target cross-entropy of the last forward pass;
  /// returns the loss.
  Scalar backward(const Mat<Scalar>& targets) {
    if (targets.rows() != probabilities_.rows() || targets.cols() != probabilities_.cols())
      throw std::invalid_argument("Network: target shape mismatch");
    const Scalar loss = cross_entropy<Scalar>(probabilities_, targets);
    Tensor<Scalar> g;
    g.height = g.width = 1;
    g.batch = static_cast<int>(targets.cols());
    g.data = (probabilities_ - targets) / static_cast<Scalar>(targets.cols());
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    input_grad_ = std::move(g.data);
    return loss;
  }

  /// Gradient w.r.t. the network input from the most recent backward().
  const Mat<Scalar>& input_gradient() const { return input_grad_; }

  void zero_grad() {
    for (auto& p : parameters()) p.grad->setZero();
  }

  /// Bias-corrected Adam update using the accumulated gradients; increments the step counter.
  void adam_step(double learning_rate, const AdamConfig& cfg = {}) {
    ++step_;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    auto params = parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& m = adam_m_[i];
      auto& v = adam_v_[i];
      const auto& g = *params[i].grad;
      m = static_cast<Scalar>(cfg.beta1) * m + static_cast<Scalar>(1.0 - cfg.beta1) * g;
      v = static_cast<Scalar>(cfg.beta2) * v + static_cast<Scalar>(1.0 - cfg.beta2) * g.cwiseProduct(g);
      params[i].value->array() -=
          static_cast<Scalar>(learning_rate) * (m.array() / static_cast<Scalar>(c1)) /
          ((v.array() / static_cast<Scalar>(c2)).sqrt() + static_cast<Scalar>(cfg.epsilon));
    }
  }

  std::vector<ParamRef<Scalar>> parameters() {
    std::vector<ParamRef<Scalar>> out;
    for (auto& layer : layers_)
      for (auto& p : layer->params()) out.push_back(p);
    return out;
  }

  std::vector<Mat<Scalar>> parameter_values() const {
    std::vector<Mat<Scalar>> out;
    for (auto& p : const_cast<Network*>(this)->parameters()) out.push_back(*p.value);
    return out;
  }

  void set_parameter_values(const std::vector<Mat<Scalar>>& values) {
    auto params = parameters();
    if (values.size() != params.size()) throw std::invalid_argument("parameter list size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (values[i].rows() != params[i].value->rows() || values[i].cols() != params[i].value->cols())
        throw std::invalid_argument("parameter shape mismatch");
      *params[i].value = values[i];
    }
  }

  std::vector<Mat<Scalar>> gradients() const {
    std::vector<Mat<Scalar>> out;
    for (auto& p : const_cast<Network*>(this)->parameters()) out.push_back(*p.grad);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : const_cast<Network*>(this)->parameters()) n += static_cast<std::size_t>(p.value->size());
    return n;
  }

  std::vector<Mat<Scalar>>& adam_first_moments() { return adam_m_; }
  std::vector<Mat<Scalar>>& adam_second_moments() { return adam_v_; }
  const std::vector<Mat<Scalar>>& adam_first_moments() const { return adam_m_; }
  const std::vector<Mat<Scalar>>& adam_second_moments() const { return adam_v_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  /// Converts parameters and optimizer state to another scalar type.
  template <class Other>
  Network<Other> cast() const {
    Network<Other> out = Network<Other>::build(spec_, 0);
    std::vector<Mat<Other>> values, m, v;
    for (const auto& p : parameter_values()) values.push_back(p.template cast<Other>());
    for (const auto& p : adam_m_) m.push_back(p.template cast<Other>());
    for (const auto& p : adam_v_) v.push_back(p.template cast<Other>());
    out.set_parameter_values(values);
    out.adam_first_moments() = m;
    out.adam_second_moments() = v;
    out.set_step(step_);
    return out;
  }

 private:
  void copy_state_from(const Network& other) {
    set_parameter_values(other.parameter_values());
    adam_m_ = other.adam_m_;
    adam_v_ = other.adam_v_;
    step_ = other.step_;
    dropout_rng_ = other.dropout_rng_;
  }

  NetworkSpec spec_;
  std::vector<std::unique_ptr<Layer<Scalar>>> layers_;
  std::vector<Mat<Scalar>> adam_m_, adam_v_;
  std::int64_t step_ = 0;
  std::mt19937_64 dropout_rng_;
  Mat<Scalar> probabilities_;
  Mat<Scalar> input_grad_;
};

/// Images (height * width rows, one column per sample, row-major pixels) to a batch tensor.
template <class Scalar, class Derived>
Tensor<Scalar> make_batch(const Eigen::MatrixBase<Derived>& images, int height, int width) {
  Tensor<Scalar> t;
  t.height = height;
  t.width = width;
  t.batch = static_cast<int>(images.cols());
  t.data.resize(1, images.size());
  Eigen::Index k = 0;
  for (Eigen::Index c = 0; c < images.cols(); ++c)
    for (Eigen::Index r = 0; r < images.rows(); ++r) t.data(0, k++) = static_cast<Scalar>(images(r, c));
  return t;
}

extern template class Network<float>;
extern template class Network<double>;

}  // namespace qdtune::nn
