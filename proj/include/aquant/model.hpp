#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "aquant/dataset.hpp"
#include "aquant/quantizers.hpp"
#include "aquant/rng.hpp"
#include "aquant/tensor.hpp"

namespace aquant {

namespace layer {

struct Linear {
  Index in = 0, out = 0;
  bool bias = true;
  bool operator==(const Linear&) const = default;
};

struct Conv2d {
  Index in_ch = 0, out_ch = 0, kernel = 1, stride = 1, pad = 0;
  bool bias = true;
  bool operator==(const Conv2d&) const = default;
};

/// Parameters live in the graph as <name>.gamma/.beta/.running_mean/.running_var.
struct BatchNorm {
  Index ch = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  bool operator==(const BatchNorm&) const = default;
};

struct ReLU {
  bool operator==(const ReLU&) const = default;
};

/// Non-overlapping k x k average pooling (stride k, floor on odd extents).
struct AvgPool {
  Index k = 2;
  bool operator==(const AvgPool&) const = default;
};

struct Flatten {
  bool operator==(const Flatten&) const = default;
};

}  // namespace layer

using LayerKind = std::variant<layer::Linear, layer::Conv2d, layer::BatchNorm, layer::ReLU, layer::AvgPool,
                               layer::Flatten>;

struct LayerSpec {
  std::string name;
  LayerKind kind;

  bool has_weights() const {
    return std::holds_alternative<layer::Linear>(kind) || std::holds_alternative<layer::Conv2d>(kind);
  }
  bool operator==(const LayerSpec&) const = default;
};

std::string kind_name(const LayerKind& kind);

/// Quantization artifacts attached to a quantized graph.
struct QuantMetadata {
  std::map<std::string, QuantSpec> weights;      // layer -> weight quantizer
  std::map<std::string, QuantSpec> activations;  // layer -> quantizer applied to its output
  std::map<std::string, int> bit_assignment;
  std::map<std::string, std::uint32_t> alpha_crc32;
  std::string rounder;

  bool empty() const { return weights.empty() && activations.empty() && bit_assignment.empty(); }
  bool operator==(const QuantMetadata&) const = default;
};

/// Sequential chain of layers with named parameter tensors.
struct ModelGraph {
  Shape input_shape;  // per-sample, e.g. {1, 28, 28}
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensorf> params;
  QuantMetadata quant;

  /// Appends a layer and zero-initialised parameters for it.
  ModelGraph& add(std::string name, LayerKind kind);

  std::size_t index_of(std::string_view name) const;
  const LayerSpec& layer(std::string_view name) const { return layers[index_of(name)]; }
  std::vector<std::string> weight_layers() const;

  Tensorf& param(const std::string& key);
  const Tensorf& param(const std::string& key) const;
  bool has_param(const std::string& key) const { return params.count(key) != 0; }

  /// Checks name uniqueness, parameter shapes, and that layer shapes compose.
  /// Returns the per-sample output shape.
  Shape validate() const;

  bool operator==(const ModelGraph&) const = default;
};

/// He-normal weights, zero biases, identity batch norm.
void init_params(ModelGraph& model, Rng& rng);

/// conv(8)-BN-ReLU-pool, conv(16)-BN-ReLU-pool, linear(64)-ReLU, linear(classes).
ModelGraph make_toy_cnn(Index in_ch = 1, Index height = 28, Index width = 28, int classes = 10);

enum class Mode { eval, train };

/// Applies layer `index` to a batch (eval-mode batch norm, no activation quantizers).
Tensorf apply_layer(const ModelGraph& model, std::size_t index, const Tensorf& x);

/// Output of the model, or the activation right after layer `tap`.
/// Activation quantizers recorded in `model.quant.activations` are applied.
Tensorf forward(const ModelGraph& model, const Tensorf& x, std::optional<std::string_view> tap = std::nullopt);

/// Forward pass with batch norm normalising by the statistics of this batch.
Tensorf forward_train(const ModelGraph& model, const Tensorf& x);

using Gradients = std::map<std::string, Tensorf>;

/// Reverse-mode gradients of <grad_out, forward(x)> for every parameter
/// (keyed like `params`) and for the input (key "input"). In train mode batch
/// norm uses batch statistics.
Gradients backward(const ModelGraph& model, const Tensorf& x, const Tensorf& grad_out, Mode mode = Mode::eval);

/// Folds every batch norm into the preceding Linear/Conv2d.
ModelGraph fuse_bn(const ModelGraph& model);

struct TrainOptions {
  int epochs = 8;
  double lr = 0.05;
  double momentum = 0.9;
  Index batch = 64;
};

struct TrainResult {
  ModelGraph model;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double final_loss = 0.0;
};

class TrainingError : public Error {
public:
  TrainingError(const std::string& what, ModelGraph checkpoint)
      : Error(what), checkpoint_(std::move(checkpoint)) {}
  const ModelGraph& checkpoint() const noexcept { return checkpoint_; }

private:
  ModelGraph checkpoint_;
};

/// Minibatch SGD with momentum on softmax cross-entropy. Deterministic given rng.
TrainResult train_baseline(const ModelGraph& model, const Dataset& train, const Dataset& test,
                           const TrainOptions& options, Rng& rng);

struct Accuracy {
  double top1 = 0.0;
  std::vector<double> per_class;
  std::vector<Index> per_class_count;
};

/// Top-1 accuracy; throws SizeError on an empty dataset.
Accuracy evaluate(const ModelGraph& model, const Dataset& data, Index batch = 256);

/// Mean softmax cross-entropy and its gradient with respect to the logits.
double cross_entropy(const Tensorf& logits, std::span<const int> labels, Tensorf* grad = nullptr);

/// Points where activation quantizers sit: after each weight layer, or after the
/// ReLU that directly follows it. `second` is true for post-ReLU (unsigned) points.
std::vector<std::pair<std::string, bool>> activation_points(const ModelGraph& model);

}  // namespace aquant
