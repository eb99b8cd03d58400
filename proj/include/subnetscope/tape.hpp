#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subnetscope/tensor.hpp"

namespace subnetscope {

/// How the rectifier propagates gradients. Only relu's backward pass reads
/// this; every forward pass is identical under all three rules.
enum class BackwardRule {
  standard,  // g * 1[x > 0]
  deconv,    // g * 1[g > 0]
  guided,    // g * 1[g > 0] * 1[x > 0]
};

std::string_view to_string(BackwardRule rule);

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  const Tape* tape = nullptr;
  std::size_t id = 0;
};

/// Gradients produced by one backward sweep, indexed by node.
class GradientMap {
 public:
  const Tensor* find(Var v) const;
  const Tensor& at(Var v) const;
  bool contains(Var v) const { return find(v) != nullptr; }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

/// Append-only record of primitive operations for reverse-mode
/// differentiation. A tape is owned by one thread at a time.
class Tape {
 public:
  explicit Tape(BackwardRule rule = BackwardRule::standard) : rule_(rule) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient on backward.
  Var variable(Tensor value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  BackwardRule rule() const { return rule_; }
  void set_rule(BackwardRule rule) { rule_ = rule; }

  /// Reverse sweep from a scalar loss.
  GradientMap backward(Var loss) const;
  /// Reverse sweep seeded with an explicit output cotangent of the same shape.
  GradientMap backward(Var output, const Tensor& seed) const;

  /// Records a node. `fn` may be empty for operations with no differentiable inputs.
  Var record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn fn);

  /// Throws TapeError unless `v` was recorded on this tape.
  void check_owned(Var v) const;

 private:
  friend class BackwardContext;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  BackwardRule rule_;
};

/// View handed to a node's backward function.
class BackwardContext {
 public:
  const Tensor& grad_output() const { return *grad_out_; }
  const Tensor& output() const { return node_->value; }
  const Tensor& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Zero-initialised (on first use) gradient buffer for input `i`.
  Tensor& grad(std::size_t i);
  BackwardRule rule() const { return tape_->rule_; }

 private:
  friend class Tape;
  BackwardContext(const Tape* tape, const Tape::Node* node, const Tensor* grad_out,
                  std::vector<std::optional<Tensor>>* grads)
      : tape_(tape), node_(node), grad_out_(grad_out), grads_(grads) {}

  const Tape* tape_;
  const Tape::Node* node_;
  const Tensor* grad_out_;
  std::vector<std::optional<Tensor>>* grads_;
};

enum class ConvAlgo { direct, im2col };

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var abs(Var a);
/// (M x K) * (K x N).
Var matmul(Var a, Var b);
/// x: N x C x H x W, kernel: K x C x kh x kw.
Var conv2d(Var x, Var kernel, int stride = 1, int padding = 0, ConvAlgo algo = ConvAlgo::im2col);
/// 2x2 window, stride 2; odd trailing rows/cols are dropped.
Var maxpool2x2(Var x);
Var relu(Var x);
Var sigmoid(Var x);
/// Row-wise softmax over the last axis of a 2-D tensor.
Var softmax(Var x);
Var sum(Var x);
Var mean(Var x);
Var concat(std::span<const Var> xs, std::size_t axis);
Var reshape(Var x, Shape shape);
/// Adds b[c] to every element of channel c (axis 1).
Var add_bias(Var x, Var b);
/// Multiplies channel c (axis 1) by g[c].
Var channel_scale(Var x, Var g);
/// For a N x K tensor returns the length-N vector x[n, cols[n]].
Var gather_cols(Var x, std::vector<std::size_t> cols);
/// Mean softmax cross-entropy of N x K logits against integer labels.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
/// Elementwise BCE(a, clamp(sigmoid(s))) with a = target probability.
Var bce_with_logits(Var student_logits, Var target_probs, double clamp = 1e-7);

}  // namespace ops

/// Generic entry point mirroring the primitive table.
enum class OpKind {
  add, sub, mul, matmul, conv2d, maxpool2x2, relu, sigmoid, softmax,
  mean, sum, scale, concat, add_bias, channel_scale, abs,
};

struct OpAttrs {
  int stride = 1;
  int padding = 0;
  double factor = 1.0;
  std::size_t axis = 0;
  ConvAlgo conv_algo = ConvAlgo::im2col;
};

Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

}  // namespace subnetscope
