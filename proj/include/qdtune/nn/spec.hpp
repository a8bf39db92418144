#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <string>
#include <vector>

namespace qdtune::nn {

enum class LayerKind { Conv2D, Dropout, LayerNorm, ReLU, Swish, MaxPool, GlobalAvgPool, Dense, Softmax };
enum class Padding { Same, Valid };

std::string to_string(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int kernel = 0;   // Conv2D kernel side, MaxPool window side
  int units = 0;    // Conv2D filters, Dense units
  int stride = 1;
  Padding padding = Padding::Same;
  double rate = 0.0;  // Dropout

  static LayerSpec conv(int kernel, int filters, int stride, Padding padding = Padding::Same);
  static LayerSpec dropout(double rate);
  static LayerSpec layer_norm();
  static LayerSpec relu();
  static LayerSpec swish();
  static LayerSpec max_pool(int size, int stride);
  static LayerSpec global_avg_pool();
  static LayerSpec dense(int units);
  static LayerSpec softmax();
};

/// Activation shape (channels, height, width) flowing between layers.
struct Shape {
  int channels = 1;
  int height = 0;
  int width = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
};

struct NetworkSpec {
  std::string name;
  int input_height = 30;
  int input_width = 30;
  std::vector<LayerSpec> layers;
  std::string optimizer = "adam";
  double learning_rate = 1e-3;
  std::string loss = "cross_entropy";
  int outputs = 5;

  /// Shape after each layer; throws std::invalid_argument naming the offending layer.
  std::vector<Shape> infer_shapes() const;
  void validate() const { (void)infer_shapes(); }

  /// Trainable parameters implied by the layer list alone.
  std::size_t parameter_count() const;

  /// Reference architectures on 30x30 gradient images.
  static NetworkSpec noiseless_dse();
  static NetworkSpec noisy_dse();
  static NetworkSpec dqc();
  static NetworkSpec by_name(const std::string& name);
};

void to_json(nlohmann::json& j, const LayerSpec& s);
void from_json(const nlohmann::json& j, LayerSpec& s);
void to_json(nlohmann::json& j, const NetworkSpec& s);
void from_json(const nlohmann::json& j, NetworkSpec& s);

}  // namespace qdtune::nn
