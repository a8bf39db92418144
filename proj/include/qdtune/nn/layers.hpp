#pragma once

#include "qdtune/nn/spec.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace qdtune::nn {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Batch of feature maps stored as channels x (batch * height * width); column
/// (b * height + y) * width + x holds the channel vector of one pixel.
template <class Scalar>
struct Tensor {
  Mat<Scalar> data;
  int height = 0;
  int width = 0;
  int batch = 0;

  int channels() const { return static_cast<int>(data.rows()); }
  int pixels() const { return height * width; }
  Shape shape() const { return {channels(), height, width}; }
};

/// Non-owning view of one trainable tensor and its gradient.
template <class Scalar>
struct ParamRef {
  Mat<Scalar>* value;
  Mat<Scalar>* grad;
};

template <class Scalar>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, std::mt19937_64& rng) = 0;
  /// Gradient w.r.t. the layer input; parameter gradients are accumulated.
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& grad) = 0;
  virtual std::vector<ParamRef<Scalar>> params() { return {}; }
  virtual void init(std::mt19937_64& /*rng*/) {}
};

namespace detail {

inline int conv_out(int in, int kernel, int stride, Padding padding) {
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  return in < kernel ? 0 : (in - kernel) / stride + 1;  // integer division truncates toward zero
}

inline int conv_pad(int in, int out, int kernel, int stride, Padding padding) {
  if (padding == Padding::Valid) return 0;
  const int total = std::max((out - 1) * stride + kernel - in, 0);
  return total / 2;
}

template <class Scalar>
void he_uniform(Mat<Scalar>& w, int fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-limit, limit);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(u(rng));
}

}  // namespace detail

/// 2D convolution via im2col; weights are filters x (kernel * kernel * in_channels), with the
/// column index ordered (ky, kx, channel).
template <class Scalar>
class Conv2D final : public Layer<Scalar> {
 public:
  Conv2D(int in_channels, int kernel, int filters, int stride, Padding padding)
      : in_channels_(in_channels), kernel_(kernel), stride_(stride), padding_(padding),
        weight_(Mat<Scalar>::Zero(filters, kernel * kernel * in_channels)),
        bias_(Mat<Scalar>::Zero(filters, 1)),
        dweight_(Mat<Scalar>::Zero(filters, kernel * kernel * in_channels)),
        dbias_(Mat<Scalar>::Zero(filters, 1)) {}

  LayerKind kind() const override { return LayerKind::Conv2D; }

  void init(std::mt19937_64& rng) override {
    detail::he_uniform(weight_, kernel_ * kernel_ * in_channels_, rng);
    bias_.setZero();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool /*training*/, std::mt19937_64& /*rng*/) override {
    if (x.channels() != in_channels_) throw std::invalid_argument("Conv2D: channel mismatch");
    in_h_ = x.height;
    in_w_ = x.width;
    batch_ = x.batch;
    out_h_ = detail::conv_out(in_h_, kernel_, stride_, padding_);
    out_w_ = detail::conv_out(in_w_, kernel_, stride_, padding_);
    pad_top_ = detail::conv_pad(in_h_, out_h_, kernel_, stride_, padding_);
    pad_left_ = detail::conv_pad(in_w_, out_w_, kernel_, stride_, padding_);

    const Eigen::Index out_pixels = static_cast<Eigen::Index>(batch_) * out_h_ * out_w_;
    cols_.setZero(weight_.cols(), out_pixels);
    for_each_tap([&](Eigen::Index out_col, Eigen::Index in_col, Eigen::Index row) {
      cols_.col(out_col).segment(row, in_channels_) = x.data.col(in_col);
    });

    Tensor<Scalar> y;
    y.height = out_h_;
    y.width = out_w_;
    y.batch = batch_;
    y.data.noalias() = weight_ * cols_;
    y.data.colwise() += bias_.col(0);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    dweight_.noalias() += grad.data * cols_.transpose();
    dbias_.col(0) += grad.data.rowwise().sum();
    Mat<Scalar> dcols;
    dcols.noalias() = weight_.transpose() * grad.data;
    Tensor<Scalar> dx;
    dx.height = in_h_;
    dx.width = in_w_;
    dx.batch = batch_;
    dx.data.setZero(in_channels_, static_cast<Eigen::Index>(batch_) * in_h_ * in_w_);
    for_each_tap([&](Eigen::Index out_col, Eigen::Index in_col, Eigen::Index row) {
      dx.data.col(in_col) += dcols.col(out_col).segment(row, in_channels_);
    });
    return dx;
  }

  std::vector<ParamRef<Scalar>> params() override { return {{&weight_, &dweight_}, {&bias_, &dbias_}}; }

 private:
  template <class F>
  void for_each_tap(F&& f) const {
    for (int b = 0; b < batch_; ++b)
      for (int oy = 0; oy < out_h_; ++oy)
        for (int ox = 0; ox < out_w_; ++ox) {
          const Eigen::Index out_col = (static_cast<Eigen::Index>(b) * out_h_ + oy) * out_w_ + ox;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_top_ + ky;
            if (iy < 0 || iy >= in_h_) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - pad_left_ + kx;
              if (ix < 0 || ix >= in_w_) continue;
              const Eigen::Index in_col = (static_cast<Eigen::Index>(b) * in_h_ + iy) * in_w_ + ix;
              f(out_col, in_col, static_cast<Eigen::Index>(ky * kernel_ + kx) * in_channels_);
            }
          }
        }
  }

  int in_channels_, kernel_, stride_;
  Padding padding_;
  Mat<Scalar> weight_, bias_, dweight_, dbias_;
  Mat<Scalar> cols_;
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0, batch_ = 0, pad_top_ = 0, pad_left_ = 0;
};

/// Inverted dropout: kept activations are scaled by 1 / (1 - rate) during training.
template <class Scalar>
class Dropout final : public Layer<Scalar> {
 public:
  explicit Dropout(double rate) : rate_(rate) {}
  LayerKind kind() const override { return LayerKind::Dropout; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, std::mt19937_64& rng) override {
    active_ = training && rate_ > 0.0;
    if (!active_) return x;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate_));
    mask_.resize(x.data.rows(), x.data.cols());
    for (Eigen::Index i = 0; i < mask_.size(); ++i) mask_.data()[i] = u(rng) >= rate_ ? keep_scale : Scalar(0);
    Tensor<Scalar> y = x;
    y.data.array() *= mask_.array();
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    if (!active_) return grad;
    Tensor<Scalar> dx = grad;
    dx.data.array() *= mask_.array();
    return dx;
  }

 private:
  double rate_;
  bool active_ = false;
  Mat<Scalar> mask_;
};

/// Normalizes each pixel's channel vector, then applies per-channel gain and bias.
template <class Scalar>
class LayerNorm final : public Layer<Scalar> {
 public:
  explicit LayerNorm(int channels, double epsilon = 1e-3)
      : epsilon_(epsilon), gamma_(Mat<Scalar>::Ones(channels, 1)), beta_(Mat<Scalar>::Zero(channels, 1)),
        dgamma_(Mat<Scalar>::Zero(channels, 1)), dbeta_(Mat<Scalar>::Zero(channels, 1)) {}

  LayerKind kind() const override { return LayerKind::LayerNorm; }

  void init(std::mt19937_64& /*rng*/) override {
    gamma_.setOnes();
    beta_.setZero();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool /*training*/, std::mt19937_64& /*rng*/) override {
    const auto c = static_cast<Scalar>(x.data.rows());
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean = x.data.colwise().sum() / c;
    xhat_ = x.data.rowwise() - mean;
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> var = xhat_.array().square().colwise().sum() / c;
    inv_std_ = (var.array() + static_cast<Scalar>(epsilon_)).rsqrt().matrix();
    xhat_.array().rowwise() *= inv_std_.array();
    Tensor<Scalar> y = x;
    y.data = gamma_.col(0).asDiagonal() * xhat_;
    y.data.colwise() += beta_.col(0);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    dgamma_.col(0) += (grad.data.array() * xhat_.array()).rowwise().sum().matrix();
    dbeta_.col(0) += grad.data.rowwise().sum();
    const auto c = static_cast<Scalar>(grad.data.rows());
    Mat<Scalar> dxhat = gamma_.col(0).asDiagonal() * grad.data;
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean_d = dxhat.colwise().sum() / c;
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean_dx =
        (dxhat.array() * xhat_.array()).colwise().sum().matrix() / c;
    Tensor<Scalar> dx = grad;
    dx.data = dxhat.rowwise() - mean_d;
    dx.data.array() -= xhat_.array().rowwise() * mean_dx.array();
    dx.data.array().rowwise() *= inv_std_.array();
    return dx;
  }

  std::vector<ParamRef<Scalar>> params() override { return {{&gamma_, &dgamma_}, {&beta_, &dbeta_}}; }

 private:
  double epsilon_;
  Mat<Scalar> gamma_, beta_, dgamma_, dbeta_;
  Mat<Scalar> xhat_;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> inv_std_;
};

template <class Scalar>
class ReLU final : public Layer<Scalar> {
 public:
  LayerKind kind() const override { return LayerKind::ReLU; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool, std::mt19937_64&) override {
    input_ = x.data;
    Tensor<Scalar> y = x;
    y.data = x.data.cwiseMax(Scalar(0));
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> dx = grad;
    dx.data = (input_.array() > Scalar(0)).select(grad.data, Scalar(0));
    return dx;
  }

 private:
  Mat<Scalar> input_;
};

/// x * sigmoid(x).
template <class Scalar>
class Swish final : public Layer<Scalar> {
 public:
  LayerKind kind() const override { return LayerKind::Swish; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool, std::mt19937_64&) override {
    sigmoid_ = (Scalar(1) + (-x.data.array()).exp()).inverse().matrix();
    Tensor<Scalar> y = x;
    y.data = (x.data.array() * sigmoid_.array()).matrix();
    output_ = y.data;
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> dx = grad;
    dx.data = (grad.data.array() * (sigmoid_.array() + output_.array() * (Scalar(1) - sigmoid_.array()))).matrix();
    return dx;
  }

 private:
  Mat<Scalar> sigmoid_, output_;
};

template <class Scalar>
class MaxPool final : public Layer<Scalar> {
 public:
  MaxPool(int size, int stride) : size_(size), stride_(stride) {}
  LayerKind kind() const override { return LayerKind::MaxPool; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool, std::mt19937_64&) override {
    in_h_ = x.height;
    in_w_ = x.width;
    batch_ = x.batch;
    const int oh = detail::conv_out(in_h_, size_, stride_, Padding::Valid);
    const int ow = detail::conv_out(in_w_, size_, stride_, Padding::Valid);
    const auto c = x.data.rows();
    Tensor<Scalar> y;
    y.height = oh;
    y.width = ow;
    y.batch = batch_;
    y.data.resize(c, static_cast<Eigen::Index>(batch_) * oh * ow);
    argmax_.resize(c, y.data.cols());
    for (int b = 0; b < batch_; ++b)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Eigen::Index oc = (static_cast<Eigen::Index>(b) * oh + oy) * ow + ox;
          for (Eigen::Index ch = 0; ch < c; ++ch) {
            Scalar best = -std::numeric_limits<Scalar>::infinity();
            Eigen::Index best_col = 0;
            for (int ky = 0; ky < size_; ++ky)
              for (int kx = 0; kx < size_; ++kx) {
                const Eigen::Index ic =
                    (static_cast<Eigen::Index>(b) * in_h_ + oy * stride_ + ky) * in_w_ + ox * stride_ + kx;
                if (x.data(ch, ic) > best) {
                  best = x.data(ch, ic);
                  best_col = ic;
                }
              }
            y.data(ch, oc) = best;
            argmax_(ch, oc) = best_col;
          }
        }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> dx;
    dx.height = in_h_;
    dx.width = in_w_;
    dx.batch = batch_;
    dx.data.setZero(grad.data.rows(), static_cast<Eigen::Index>(batch_) * in_h_ * in_w_);
    for (Eigen::Index oc = 0; oc < grad.data.cols(); ++oc)
      for (Eigen::Index ch = 0; ch < grad.data.rows(); ++ch) dx.data(ch, argmax_(ch, oc)) += grad.data(ch, oc);
    return dx;
  }

 private:
  int size_, stride_;
  int in_h_ = 0, in_w_ = 0, batch_ = 0;
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> argmax_;
};

template <class Scalar>
class GlobalAvgPool final : public Layer<Scalar> {
 public:
  LayerKind kind() const override { return LayerKind::GlobalAvgPool; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool, std::mt19937_64&) override {
    in_h_ = x.height;
    in_w_ = x.width;
    batch_ = x.batch;
    const Eigen::Index n = static_cast<Eigen::Index>(in_h_) * in_w_;
    Tensor<Scalar> y;
    y.height = y.width = 1;
    y.batch = batch_;
    y.data.resize(x.data.rows(), batch_);
    for (int b = 0; b < batch_; ++b) y.data.col(b) = x.data.middleCols(b * n, n).rowwise().mean();
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    const Eigen::Index n = static_cast<Eigen::Index>(in_h_) * in_w_;
    Tensor<Scalar> dx;
    dx.height = in_h_;
    dx.width = in_w_;
    dx.batch = batch_;
    dx.data.resize(grad.data.rows(), batch_ * n);
    for (int b = 0; b < batch_; ++b)
      dx.data.middleCols(b * n, n) = (grad.data.col(b) / static_cast<Scalar>(n)).replicate(1, n);
    return dx;
  }

 private:
  int in_h_ = 0, in_w_ = 0, batch_ = 0;
};

template <class Scalar>
class Dense final : public Layer<Scalar> {
 public:
  Dense(int inputs, int units)
      : weight_(Mat<Scalar>::Zero(units, inputs)), bias_(Mat<Scalar>::Zero(units, 1)),
        dweight_(Mat<Scalar>::Zero(units, inputs)), dbias_(Mat<Scalar>::Zero(units, 1)) {}

  LayerKind kind() const override { return LayerKind::Dense; }

  void init(std::mt19937_64& rng) override {
    detail::he_uniform(weight_, static_cast<int>(weight_.cols()), rng);
    bias_.setZero();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool, std::mt19937_64&) override {
    if (x.height != 1 || x.width != 1) throw std::invalid_argument("Dense: expects pooled 1x1 input");
    input_ = x.data;
    Tensor<Scalar> y = x;
    y.data.noalias() = weight_ * x.data;
    y.data.colwise() += bias_.col(0);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    dweight_.noalias() += grad.data * input_.transpose();
    dbias_.col(0) += grad.data.rowwise().sum();
    Tensor<Scalar> dx = grad;
    dx.data.noalias() = weight_.transpose() * grad.data;
    return dx;
  }

  std::vector<ParamRef<Scalar>> params() override { return {{&weight_, &dweight_}, {&bias_, &dbias_}}; }

 private:
  Mat<Scalar> weight_, bias_, dweight_, dbias_;
  Mat<Scalar> input_;
};

/// Column-wise softmax of a logits matrix (classes x batch).
template <class Scalar>
Mat<Scalar> softmax(const Mat<Scalar>& logits) {
  Mat<Scalar> p = logits.rowwise() - logits.colwise().maxCoeff();
  p = p.array().exp().matrix();
  p.array().rowwise() /= p.colwise().sum().array();
  return p;
}

/// Mean over the batch of -sum_k t_k log p_k for soft targets t.
template <class Scalar>
Scalar cross_entropy(const Mat<Scalar>& probabilities, const Mat<Scalar>& targets) {
  const Scalar tiny = std::numeric_limits<Scalar>::min();
  const Mat<Scalar> logp = probabilities.array().max(tiny).log().matrix();
  return -(targets.array() * logp.array()).sum() / static_cast<Scalar>(targets.cols());
}

template <class Scalar>
std::unique_ptr<Layer<Scalar>> make_layer(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::Conv2D:
      return std::make_unique<Conv2D<Scalar>>(in.channels, spec.kernel, spec.units, spec.stride, spec.padding);
    case LayerKind::Dropout: return std::make_unique<Dropout<Scalar>>(spec.rate);
    case LayerKind::LayerNorm: return std::make_unique<LayerNorm<Scalar>>(in.channels);
    case LayerKind::ReLU: return std::make_unique<ReLU<Scalar>>();
    case LayerKind::Swish: return std::make_unique<Swish<Scalar>>();
    case LayerKind::MaxPool: return std::make_unique<MaxPool<Scalar>>(spec.kernel, spec.stride);
    case LayerKind::GlobalAvgPool: return std::make_unique<GlobalAvgPool<Scalar>>();
    case LayerKind::Dense: return std::make_unique<Dense<Scalar>>(in.channels, spec.units);
    case LayerKind::Softmax: return nullptr;
  }
  return nullptr;
}

}  // namespace qdtune::nn
