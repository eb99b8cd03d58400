#include "subnetscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "subnetscope/error.hpp"
#include "subnetscope/optim.hpp"

namespace subnetscope {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (LayerKind k : {LayerKind::conv, LayerKind::relu, LayerKind::maxpool, LayerKind::flatten, LayerKind::dense}) {
    if (to_string(k) == name) return k;
  }
  throw LayoutError("unknown layer kind '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  if (num_classes < 2) throw ShapeError("model needs at least 2 classes, got " + std::to_string(num_classes));
  if (layers.empty()) throw ShapeError("model has no layers");
  std::size_t c = in_channels, h = in_height, w = in_width, features = 0;
  bool flat = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + ")";
    if (l.gated && l.kind != LayerKind::conv && l.kind != LayerKind::dense) {
      throw ShapeError(where + ": only conv and dense layers carry gates");
    }
    switch (l.kind) {
      case LayerKind::conv: {
        if (flat) throw ShapeError(where + ": conv after flatten");
        if (l.in != c) throw ShapeError(where + ": expects " + std::to_string(l.in) + " channels, gets " + std::to_string(c));
        if (l.kernel <= 0 || l.stride <= 0 || l.padding < 0) throw AttributeError(where + ": invalid kernel/stride/padding");
        const long eh = static_cast<long>(h) + 2 * l.padding - l.kernel;
        const long ew = static_cast<long>(w) + 2 * l.padding - l.kernel;
        if (eh < 0 || ew < 0) throw ShapeError(where + ": kernel larger than padded input");
        h = static_cast<std::size_t>(eh / l.stride + 1);
        w = static_cast<std::size_t>(ew / l.stride + 1);
        c = l.out;
        break;
      }
      case LayerKind::maxpool:
        if (flat || h < 2 || w < 2) throw ShapeError(where + ": input too small to pool");
        h /= 2;
        w /= 2;
        break;
      case LayerKind::flatten:
        if (flat) throw ShapeError(where + ": already flat");
        flat = true;
        features = c * h * w;
        break;
      case LayerKind::dense:
        if (!flat) throw ShapeError(where + ": dense before flatten");
        if (l.in != features) {
          throw ShapeError(where + ": expects " + std::to_string(l.in) + " features, gets " + std::to_string(features));
        }
        features = l.out;
        break;
      case LayerKind::relu:
        break;
    }
    if ((l.kind == LayerKind::conv || l.kind == LayerKind::dense) && l.out == 0) {
      throw ShapeError(where + ": zero output width");
    }
  }
  const LayerSpec& last = layers.back();
  if (last.kind != LayerKind::dense || last.out != num_classes) {
    throw ShapeError("final layer must be dense with " + std::to_string(num_classes) + " outputs");
  }
  if (last.gated) throw ShapeError("final classifier layer must not be gated");
  if (gated_layers().empty()) throw ShapeError("model has no gated layer");
}

std::vector<std::size_t> ModelSpec::gated_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].gated) out.push_back(i);
  return out;
}

std::vector<std::size_t> ModelSpec::gate_sizes() const {
  std::vector<std::size_t> out;
  for (std::size_t i : gated_layers()) out.push_back(layers[i].out);
  return out;
}

std::size_t ModelSpec::gated_channel_count() const {
  auto sizes = gate_sizes();
  return std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
}

std::string ModelSpec::param_name(std::size_t layer, std::string_view suffix) const {
  const LayerKind kind = layers.at(layer).kind;
  std::size_t ordinal = 0;
  for (std::size_t i = 0; i <= layer; ++i)
    if (layers[i].kind == kind) ++ordinal;
  return std::string(to_string(kind)) + std::to_string(ordinal) + "." + std::string(suffix);
}

std::vector<std::pair<std::string, Shape>> ModelSpec::parameter_shapes() const {
  std::vector<std::pair<std::string, Shape>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const auto k = static_cast<std::size_t>(l.kernel);
    if (l.kind == LayerKind::conv) {
      out.emplace_back(param_name(i, "weight"), Shape{l.out, l.in, k, k});
      out.emplace_back(param_name(i, "bias"), Shape{l.out});
    } else if (l.kind == LayerKind::dense) {
      out.emplace_back(param_name(i, "weight"), Shape{l.in, l.out});
      out.emplace_back(param_name(i, "bias"), Shape{l.out});
    }
  }
  return out;
}

GateVector GateVector::filled(const ModelSpec& spec, double value) {
  GateVector g;
  for (std::size_t n : spec.gate_sizes()) g.layers.emplace_back(n, value);
  return g;
}

GateVector GateVector::from_flat(const ModelSpec& spec, std::span<const double> flat) {
  if (flat.size() != spec.gated_channel_count()) {
    throw ShapeError("gate vector has " + std::to_string(flat.size()) + " entries, model has " +
                     std::to_string(spec.gated_channel_count()) + " gated channels");
  }
  GateVector g;
  std::size_t off = 0;
  for (std::size_t n : spec.gate_sizes()) {
    g.layers.emplace_back(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + n));
    off += n;
  }
  return g;
}

std::vector<double> GateVector::flat() const {
  std::vector<double> out;
  for (const auto& l : layers) out.insert(out.end(), l.begin(), l.end());
  return out;
}

std::size_t GateVector::size() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

ModelSpec build_reference_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t num_classes) {
  if (num_classes < 2) throw ShapeError("reference CNN needs at least 2 classes, got " + std::to_string(num_classes));
  ModelSpec spec;
  spec.num_classes = num_classes;
  spec.in_channels = channels;
  spec.in_height = height;
  spec.in_width = width;
  std::size_t c = channels, h = height, w = width;
  for (std::size_t out : {16u, 32u, 64u}) {
    spec.layers.push_back({LayerKind::conv, c, out, 3, 1, 1, true});
    spec.layers.push_back({LayerKind::relu});
    spec.layers.push_back({LayerKind::maxpool});
    c = out;
    h /= 2;
    w /= 2;
  }
  spec.layers.push_back({LayerKind::flatten});
  spec.layers.push_back({LayerKind::dense, c * h * w, 128, 0, 1, 0, true});
  spec.layers.push_back({LayerKind::relu});
  spec.layers.push_back({LayerKind::dense, 128, num_classes, 0, 1, 0, false});
  spec.validate();
  return spec;
}

Weights init_weights(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  Weights w;
  for (const auto& [name, shape] : spec.parameter_shapes()) {
    Tensor t(shape, 0.0);
    if (name.ends_with(".weight")) {
      const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
      const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : t.storage()) v = sigma * normal(rng);
    }
    w.emplace(name, std::move(t));
  }
  return w;
}

void check_weights(const ModelSpec& spec, const Weights& weights) {
  for (const auto& [name, shape] : spec.parameter_shapes()) {
    auto it = weights.find(name);
    if (it == weights.end()) throw ShapeError("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_to_string(it->second.shape()) + ", expected " +
                       shape_to_string(shape));
    }
  }
}

WeightVars bind_weights(Tape& tape, const Weights& weights, bool trainable) {
  WeightVars out;
  for (const auto& [name, t] : weights) out.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
  return out;
}

std::vector<Var> bind_gates(Tape& tape, const ModelSpec& spec, const GateVector& gates, bool trainable) {
  const auto sizes = spec.gate_sizes();
  const auto layer_ids = spec.gated_layers();
  if (gates.layers.size() != sizes.size()) {
    throw ShapeError("gate vector has " + std::to_string(gates.layers.size()) + " layers, model has " +
                     std::to_string(sizes.size()) + " gated layers");
  }
  std::vector<Var> out;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (gates.layers[i].size() != sizes[i]) {
      throw ShapeError("gate length mismatch at layer " + spec.param_name(layer_ids[i], "gate") + ": got " +
                       std::to_string(gates.layers[i].size()) + ", expected " + std::to_string(sizes[i]));
    }
    Tensor t(Shape{sizes[i]}, gates.layers[i]);
    out.push_back(trainable ? tape.variable(std::move(t)) : tape.constant(std::move(t)));
  }
  return out;
}

Var forward(Tape& tape, const ModelSpec& spec, const WeightVars& weights, Var x, const std::vector<Var>* gates,
            ForwardTrace* trace) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 4 || xv.dim(1) != spec.in_channels || xv.dim(2) != spec.in_height || xv.dim(3) != spec.in_width) {
    throw ShapeError("forward: input " + shape_to_string(xv.shape()) + " does not match model input " +
                     shape_to_string({spec.in_channels, spec.in_height, spec.in_width}));
  }
  const auto gated = spec.gated_layers();
  if (gates && gates->size() != gated.size()) {
    throw ShapeError("forward: " + std::to_string(gates->size()) + " gate tensors for " +
                     std::to_string(gated.size()) + " gated layers");
  }
  if (gates) {
    for (std::size_t g = 0; g < gated.size(); ++g) {
      const Tensor& gv = tape.value((*gates)[g]);
      if (gv.rank() != 1 || gv.dim(0) != spec.layers[gated[g]].out) {
        throw ShapeError("gate length mismatch at layer " + spec.param_name(gated[g], "gate") + ": got " +
                         shape_to_string(gv.shape()) + ", expected " + std::to_string(spec.layers[gated[g]].out));
      }
    }
  }
  auto param = [&](std::size_t layer, std::string_view suffix) {
    const std::string name = spec.param_name(layer, suffix);
    auto it = weights.find(name);
    if (it == weights.end()) throw ShapeError("forward: missing parameter '" + name + "'");
    return it->second;
  };

  Var h = x;
  std::size_t gate_index = 0;
  std::optional<std::size_t> pending_gate;  // gate to apply after the next rectifier
  bool open_block = false;                   // next maxpool closes a gated block
  auto apply_gate = [&](std::size_t g) {
    if (gates) h = ops::channel_scale(h, (*gates)[g]);
    if (trace) trace->gated_activations.push_back(h);
    open_block = true;
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv:
        h = ops::conv2d(h, param(i, "weight"), l.stride, l.padding);
        h = ops::add_bias(h, param(i, "bias"));
        break;
      case LayerKind::dense:
        h = ops::matmul(h, param(i, "weight"));
        h = ops::add_bias(h, param(i, "bias"));
        break;
      case LayerKind::relu:
        h = ops::relu(h);
        break;
      case LayerKind::maxpool:
        h = ops::maxpool2x2(h);
        break;
      case LayerKind::flatten: {
        const Tensor& v = tape.value(h);
        h = ops::reshape(h, Shape{v.dim(0), v.numel() / v.dim(0)});
        break;
      }
    }
    if (l.kind == LayerKind::maxpool && open_block) {
      if (trace) trace->block_outputs.push_back(h);
      open_block = false;
    }
    if (l.gated) {
      const bool rectifier_follows = i + 1 < spec.layers.size() && spec.layers[i + 1].kind == LayerKind::relu;
      if (rectifier_follows) {
        pending_gate = gate_index++;
      } else {
        apply_gate(gate_index++);
      }
    } else if (l.kind == LayerKind::relu && pending_gate) {
      apply_gate(*pending_gate);
      pending_gate.reset();
    }
    if (trace) {
      const bool conv_out = (l.kind == LayerKind::conv &&
                             !(i + 1 < spec.layers.size() && spec.layers[i + 1].kind == LayerKind::relu)) ||
                            (l.kind == LayerKind::relu && i > 0 && spec.layers[i - 1].kind == LayerKind::conv);
      if (conv_out) trace->conv_activations.push_back(h);
    }
    if (open_block) {
      const bool pool_follows = i + 1 < spec.layers.size() && spec.layers[i + 1].kind == LayerKind::maxpool;
      if (!pool_follows) {
        if (trace) trace->block_outputs.push_back(h);
        open_block = false;
      }
    }
  }
  return h;
}

Tensor forward(const ModelSpec& spec, const Weights& weights, const Tensor& x, const GateVector* gates,
               std::size_t batch) {
  if (x.rank() != 4) throw ShapeError("forward: expected N x C x H x W input, got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t per = x.numel() / n;
  Tensor out(Shape{n, spec.num_classes});
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    Shape bs = x.shape();
    bs[0] = len;
    Tensor xb(bs, std::vector<double>(x.data().begin() + static_cast<long>(start * per),
                                      x.data().begin() + static_cast<long>((start + len) * per)));
    Tape tape;
    WeightVars wv = bind_weights(tape, weights, false);
    std::vector<Var> gv;
    if (gates) gv = bind_gates(tape, spec, *gates, false);
    Var logits = forward(tape, spec, wv, tape.constant(std::move(xb)), gates ? &gv : nullptr);
    const Tensor& lv = tape.value(logits);
    std::copy(lv.data().begin(), lv.data().end(), out.data().begin() + static_cast<long>(start * spec.num_classes));
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data().data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

std::pair<double, double> evaluate(const ModelSpec& spec, const Weights& weights, const LabeledSet& set,
                                   const GateVector* gates) {
  if (set.empty()) throw DataError("evaluate: empty dataset");
  const Tensor logits = forward(spec, weights, stack_images(set), gates);
  const std::vector<int> labels = labels_of(set);
  Tape tape;
  const double loss = tape.value(ops::softmax_cross_entropy(tape.constant(logits), labels)).item();
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return {loss, static_cast<double>(correct) / static_cast<double>(set.size())};
}

TrainResult train_base(const ModelSpec& spec, const LabeledSet& train, const LabeledSet& val,
                       const TrainConfig& config) {
  spec.validate();
  if (train.empty()) throw DataError("train_base: empty training set");
  if (config.batch_size == 0) throw ConfigError("train_base: batch size must be positive");
  for (const LabeledSet* set : {&train, &val})
    for (const auto& s : *set)
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= spec.num_classes) {
        throw DataError("train_base: label " + std::to_string(s.label) + " out of range [0, " +
                        std::to_string(spec.num_classes) + ")");
      }

  TrainResult result;
  result.weights = init_weights(spec, config.seed);
  const LabeledSet& monitor = val.empty() ? train : val;
  result.log.initial_loss = evaluate(spec, result.weights, monitor).first;

  AdamState state = AdamState::zeros_like(result.weights);
  AdamConfig adam;
  adam.lr = config.lr;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(config.seed, 0x7ea1, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    // Cosine decay to zero over the run.
    adam.lr = 0.5 * config.lr *
              (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(config.epochs)));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train[i].label);

      Tape tape;
      WeightVars wv = bind_weights(tape, result.weights, true);
      Var logits = forward(tape, spec, wv, tape.constant(stack_images(train, idx)), nullptr);
      Var loss = ops::softmax_cross_entropy(logits, labels);
      if (config.logit_penalty > 0.0) {
        // Keeps logits out of saturation so sigmoid(logit) stays informative.
        loss = ops::add(loss, ops::scale(ops::mean(ops::mul(logits, logits)), config.logit_penalty));
      }
      GradientMap grads = tape.backward(loss);

      NamedTensors g;
      for (const auto& [name, var] : wv) g.emplace(name, grads.at(var));
      adam_step(result.weights, g, state, adam);
      if (config.weight_decay > 0.0) {
        const double shrink = 1.0 - adam.lr * config.weight_decay;
        for (auto& [name, t] : result.weights)
          if (name.ends_with(".weight"))
            for (double& v : t.storage()) v *= shrink;
      }

      loss_sum += tape.value(loss).item() * static_cast<double>(len);
      const auto pred = argmax_rows(tape.value(logits));
      for (std::size_t i = 0; i < len; ++i) correct += pred[i] == labels[i] ? 1 : 0;
    }
    EpochLog e;
    e.epoch = epoch + 1;
    e.train_loss = loss_sum / static_cast<double>(train.size());
    e.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    std::tie(e.val_loss, e.val_accuracy) = evaluate(spec, result.weights, monitor);
    result.log.epochs.push_back(e);
  }
  return result;
}

}  // namespace subnetscope
