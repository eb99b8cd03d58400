#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "subnetscope/data.hpp"
#include "subnetscope/tape.hpp"
#include "subnetscope/tensor.hpp"

namespace subnetscope {

enum class LayerKind { conv, relu, maxpool, flatten, dense };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// One layer of a sequential network. For conv layers `in`/`out` are channel
/// counts; for dense layers they are feature counts.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  bool gated = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
  std::size_t in_channels = 0;
  std::size_t in_height = 0;
  std::size_t in_width = 0;

  /// Throws ShapeError when layer shapes do not chain or gating rules are broken.
  void validate() const;

  std::vector<std::size_t> gated_layers() const;
  /// Output-channel count of each gated layer, in layer order.
  std::vector<std::size_t> gate_sizes() const;
  std::size_t gated_channel_count() const;

  /// Parameter name for a conv/dense layer: "conv1.weight", "dense2.bias", ...
  std::string param_name(std::size_t layer, std::string_view suffix) const;
  /// Every parameter with its expected shape. Dense weights are in x out.
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

using Weights = std::map<std::string, Tensor>;

/// Control gates: one non-negative value per output channel of each gated layer.
struct GateVector {
  std::vector<std::vector<double>> layers;

  static GateVector filled(const ModelSpec& spec, double value);
  static GateVector from_flat(const ModelSpec& spec, std::span<const double> flat);
  std::vector<double> flat() const;
  std::size_t size() const;

  friend bool operator==(const GateVector&, const GateVector&) = default;
};

/// Fixed desk-scale architecture:
/// conv16-relu-pool, conv32-relu-pool, conv64-relu-pool, flatten, dense128-relu, dense K.
ModelSpec build_reference_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t num_classes);

/// He-normal weights, zero biases.
Weights init_weights(const ModelSpec& spec, std::uint64_t seed);
void check_weights(const ModelSpec& spec, const Weights& weights);

/// Intermediate nodes recorded by a taped forward pass.
struct ForwardTrace {
  /// Post-activation (post-gate when gated) output of each gated layer.
  std::vector<Var> gated_activations;
  /// Same values after the pooling layer that follows, if any. These are the
  /// per-block features used for scoring.
  std::vector<Var> block_outputs;
  /// Rectified (and gated) output of every conv layer, before pooling.
  std::vector<Var> conv_activations;
};

using WeightVars = std::map<std::string, Var>;

WeightVars bind_weights(Tape& tape, const Weights& weights, bool trainable);
std::vector<Var> bind_gates(Tape& tape, const ModelSpec& spec, const GateVector& gates, bool trainable);

/// Taped forward pass. When `gates` is non-null each gated layer's output
/// channel j is multiplied by gate j after its rectifier.
Var forward(Tape& tape, const ModelSpec& spec, const WeightVars& weights, Var x, const std::vector<Var>* gates,
            ForwardTrace* trace = nullptr);

/// Untaped convenience: logits for a batch, processed in chunks of `batch`.
Tensor forward(const ModelSpec& spec, const Weights& weights, const Tensor& x, const GateVector* gates = nullptr,
               std::size_t batch = 100);

std::vector<int> argmax_rows(const Tensor& logits);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.002;
  double weight_decay = 0.0;  // decoupled, applied to weight tensors only
  double logit_penalty = 0.05;  // weight of mean z^2 over all logits
  std::uint64_t seed = 1;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainLog {
  double initial_loss = 0.0;  // mean cross-entropy on the validation set before any update
  std::vector<EpochLog> epochs;

  double final_loss() const { return epochs.empty() ? initial_loss : epochs.back().val_loss; }
};

struct TrainResult {
  Weights weights;
  TrainLog log;
};

/// Softmax cross-entropy with Adam. Deterministic given config.seed.
TrainResult train_base(const ModelSpec& spec, const LabeledSet& train, const LabeledSet& val, const TrainConfig& config);

/// Mean cross-entropy and accuracy of the (optionally gated) model on a set.
std::pair<double, double> evaluate(const ModelSpec& spec, const Weights& weights, const LabeledSet& set,
                                   const GateVector* gates = nullptr);

// Model file: "SSNM", u32 version 1, u64 header length, JSON header
// {spec, tensors: [{name, shape, offset}]}, little-endian f32 payload.
void save_model(const std::filesystem::path& path, const ModelSpec& spec, const Weights& weights);
std::pair<ModelSpec, Weights> load_model(const std::filesystem::path& path);
std::string encode_model(const ModelSpec& spec, const Weights& weights);
std::pair<ModelSpec, Weights> decode_model(std::string bytes);

}  // namespace subnetscope
