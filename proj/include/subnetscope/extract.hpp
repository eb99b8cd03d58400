#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "subnetscope/data.hpp"
#include "subnetscope/model.hpp"

namespace subnetscope {

struct ExtractionConfig {
  double gamma = 0.5;           // sparsity weight
  std::size_t epochs = 5;       // T
  double tau = 0.5;             // sparsity ceiling for selection
  double lr = 0.1;
  std::size_t batch_size = 64;
  double epsilon = 0.01;        // gates at or below this are dropped from the final subnetwork
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const ExtractionConfig&, const ExtractionConfig&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;    // 1-based
  double train_loss = 0.0;  // mean objective over the epoch's batches
  double val_loss = 0.0;    // objective on the fixed validation slice
  double sparsity = 0.0;    // fraction of gates above epsilon

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

/// A class-specific subnetwork: the frozen base weights plus this gate vector.
struct SubnetworkBundle {
  int class_id = 0;
  GateVector gates;             // sub-epsilon entries already zeroed
  double sparsity = 1.0;
  std::size_t selected_epoch = 0;
  std::vector<EpochRecord> history;
  bool met_tau = false;
  ExtractionConfig config;

  friend bool operator==(const SubnetworkBundle&, const SubnetworkBundle&) = default;
};

/// Fraction of gates strictly above `epsilon`.
double gate_sparsity(const GateVector& gates, double epsilon);
/// Copy with every gate <= epsilon set to zero.
GateVector zero_small_gates(const GateVector& gates, double epsilon);

/// BCE(a, b) = -a log b - (1 - a) log(1 - b), b clamped to [1e-7, 1 - 1e-7].
double binary_cross_entropy(double a, double b);

/// Distillation objective on plain values: mean over samples of
/// BCE(sigmoid(teacher), sigmoid(student)) + gamma * mean |gate|.
double distill_loss(std::span<const double> teacher_logits, std::span<const double> student_logits,
                    const GateVector& gates, double gamma);

/// Same objective recorded on a tape so gradients reach the gate variables.
Var distill_loss(Var student_logits, Var teacher_probs, std::span<const Var> gates, double gamma);

/// Learns the gate vector for class `target` with the base weights frozen.
/// `teacher_train` / `teacher_val` are optional precomputed full-model logits
/// (N x K) for the respective sets; they are computed when empty.
SubnetworkBundle extract_subnetwork(const ModelSpec& spec, const Weights& weights, const LabeledSet& train,
                                    const LabeledSet& val, int target, const ExtractionConfig& config,
                                    const Tensor* teacher_train = nullptr, const Tensor* teacher_val = nullptr);

/// Logits of the class subnetwork.
Tensor subnet_forward(const ModelSpec& spec, const Weights& weights, const SubnetworkBundle& bundle, const Tensor& x);

nlohmann::json bundle_to_json(const SubnetworkBundle& bundle);
SubnetworkBundle bundle_from_json(const nlohmann::json& j);
void save_bundle(const std::filesystem::path& path, const SubnetworkBundle& bundle);
SubnetworkBundle load_bundle(const std::filesystem::path& path);

}  // namespace subnetscope
