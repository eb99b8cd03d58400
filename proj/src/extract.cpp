#include "subnetscope/extract.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "binary_io.hpp"
#include "subnetscope/error.hpp"
#include "subnetscope/optim.hpp"

namespace subnetscope {

using json = nlohmann::json;

namespace {

constexpr double kProbClamp = 1e-7;

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Tensor class_column(const Tensor& logits, int c) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = logits[i * k + static_cast<std::size_t>(c)];
  return out;
}

}  // namespace

void ExtractionConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("extract.gamma must be >= 0");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("extract.tau must lie in (0, 1]");
  if (!(epsilon > 0.0)) throw ConfigError("extract.epsilon must be > 0");
  if (epochs < 1) throw ConfigError("extract.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("extract.batch_size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("extract.lr must be >= 0");
}

double gate_sparsity(const GateVector& gates, double epsilon) {
  std::size_t active = 0, total = 0;
  for (const auto& layer : gates.layers)
    for (double g : layer) {
      active += g > epsilon ? 1 : 0;
      ++total;
    }
  return total == 0 ? 0.0 : static_cast<double>(active) / static_cast<double>(total);
}

GateVector zero_small_gates(const GateVector& gates, double epsilon) {
  GateVector out = gates;
  for (auto& layer : out.layers)
    for (double& g : layer)
      if (g <= epsilon) g = 0.0;
  return out;
}

double binary_cross_entropy(double a, double b) {
  b = std::clamp(b, kProbClamp, 1.0 - kProbClamp);
  return -a * std::log(b) - (1.0 - a) * std::log(1.0 - b);
}

double distill_loss(std::span<const double> teacher_logits, std::span<const double> student_logits,
                    const GateVector& gates, double gamma) {
  if (teacher_logits.size() != student_logits.size() || teacher_logits.empty()) {
    throw ShapeError("distill_loss: teacher/student batch sizes differ or are empty");
  }
  double bce = 0.0;
  for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
    bce += binary_cross_entropy(sigmoid(teacher_logits[i]), sigmoid(student_logits[i]));
  }
  bce /= static_cast<double>(teacher_logits.size());
  double l1 = 0.0;
  const std::size_t g = gates.size();
  for (const auto& layer : gates.layers)
    for (double v : layer) l1 += std::abs(v);
  return bce + (g == 0 ? 0.0 : gamma * l1 / static_cast<double>(g));
}

Var distill_loss(Var student_logits, Var teacher_probs, std::span<const Var> gates, double gamma) {
  Var fit = ops::mean(ops::bce_with_logits(student_logits, teacher_probs, kProbClamp));
  if (gates.empty()) return fit;
  Var reg = ops::scale(ops::mean(ops::abs(ops::concat(gates, 0))), gamma);
  return ops::add(fit, reg);
}

namespace {

struct Slice {
  std::vector<std::size_t> indices;
  Tensor teacher_probs;
};

double objective_on(const ModelSpec& spec, const Weights& weights, const LabeledSet& set, const Slice& slice,
                    const Tensor& teacher_logits_c, int target, const GateVector& gates, double gamma) {
  const Tensor logits = forward(spec, weights, stack_images(set, slice.indices), &gates);
  std::vector<double> teacher, student;
  for (std::size_t k = 0; k < slice.indices.size(); ++k) {
    teacher.push_back(teacher_logits_c[slice.indices[k]]);
    student.push_back(logits[k * spec.num_classes + static_cast<std::size_t>(target)]);
  }
  return distill_loss(teacher, student, gates, gamma);
}

}  // namespace

SubnetworkBundle extract_subnetwork(const ModelSpec& spec, const Weights& weights, const LabeledSet& train,
                                    const LabeledSet& val, int target, const ExtractionConfig& config,
                                    const Tensor* teacher_train, const Tensor* teacher_val) {
  config.validate();
  spec.validate();
  check_weights(spec, weights);
  if (target < 0 || static_cast<std::size_t>(target) >= spec.num_classes) {
    throw DataError("extract_subnetwork: class " + std::to_string(target) + " out of range");
  }
  const std::uint64_t job_seed = mix_seed(config.seed, 0xc1a55, static_cast<std::uint64_t>(target));

  const Tensor full_train = teacher_train ? *teacher_train : forward(spec, weights, stack_images(train));
  const Tensor full_val = teacher_val ? *teacher_val : forward(spec, weights, stack_images(val));
  if (full_train.dim(0) != train.size() || full_val.dim(0) != val.size()) {
    throw ShapeError("extract_subnetwork: teacher logits do not match dataset sizes");
  }
  const Tensor teacher_train_c = class_column(full_train, target);
  const Tensor teacher_val_c = class_column(full_val, target);

  // Fixed balanced validation slice.
  Slice val_slice;
  for (const auto& s : balanced_epoch(val, target, mix_seed(job_seed, 0x7a1), 0)) val_slice.indices.push_back(s.index);

  GateVector gates = GateVector::filled(spec, 1.0);
  const std::size_t total_gates = gates.size();
  NamedTensors params{{"gates", Tensor(Shape{total_gates}, gates.flat())}};
  AdamState state = AdamState::zeros_like(params);
  AdamConfig adam;
  adam.lr = config.lr;

  SubnetworkBundle bundle;
  bundle.class_id = target;
  bundle.config = config;
  std::vector<GateVector> snapshots;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto samples = balanced_epoch(train, target, job_seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < samples.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, samples.size() - start);
      std::vector<std::size_t> idx;
      Tensor probs(Shape{len});
      for (std::size_t k = 0; k < len; ++k) {
        idx.push_back(samples[start + k].index);
        probs[k] = sigmoid(teacher_train_c[idx.back()]);
      }

      Tape tape;
      const WeightVars wv = bind_weights(tape, weights, false);
      const std::vector<Var> gv = bind_gates(tape, spec, gates, true);
      Var logits = forward(tape, spec, wv, tape.constant(stack_images(train, idx)), &gv);
      Var student = ops::gather_cols(logits, std::vector<std::size_t>(len, static_cast<std::size_t>(target)));
      Var loss = distill_loss(student, tape.constant(std::move(probs)), gv, config.gamma);
      const GradientMap grads = tape.backward(loss);

      Tensor flat_grad(Shape{total_gates}, 0.0);
      std::size_t off = 0;
      for (Var g : gv) {
        const Tensor& gg = grads.at(g);
        std::copy(gg.data().begin(), gg.data().end(), flat_grad.data().begin() + static_cast<long>(off));
        off += gg.numel();
      }
      adam_step(params, NamedTensors{{"gates", std::move(flat_grad)}}, state, adam);
      for (double& v : params.at("gates").storage()) v = std::max(v, 0.0);
      gates = GateVector::from_flat(spec, params.at("gates").data());

      loss_sum += tape.value(loss).item();
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_loss = objective_on(spec, weights, val, val_slice, teacher_val_c, target, gates, config.gamma);
    rec.sparsity = gate_sparsity(gates, config.epsilon);
    bundle.history.push_back(rec);
    snapshots.push_back(gates);
  }

  // Lowest validation objective among epochs under the sparsity ceiling;
  // otherwise the sparsest epoch.
  std::optional<std::size_t> best;
  for (std::size_t e = 0; e < bundle.history.size(); ++e) {
    const auto& r = bundle.history[e];
    if (r.sparsity <= config.tau && (!best || r.val_loss < bundle.history[*best].val_loss)) best = e;
  }
  bundle.met_tau = best.has_value();
  if (!best) {
    best = 0;
    for (std::size_t e = 1; e < bundle.history.size(); ++e)
      if (bundle.history[e].sparsity < bundle.history[*best].sparsity) best = e;
  }
  bundle.selected_epoch = bundle.history[*best].epoch;
  bundle.gates = zero_small_gates(snapshots[*best], config.epsilon);
  bundle.sparsity = gate_sparsity(bundle.gates, config.epsilon);
  return bundle;
}

Tensor subnet_forward(const ModelSpec& spec, const Weights& weights, const SubnetworkBundle& bundle, const Tensor& x) {
  return forward(spec, weights, x, &bundle.gates);
}

// ---------------------------------------------------------------------------
// Bundle files

json bundle_to_json(const SubnetworkBundle& b) {
  json history = json::array();
  for (const auto& r : b.history) {
    history.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"sparsity", r.sparsity}});
  }
  const ExtractionConfig& c = b.config;
  return json{{"class_id", b.class_id},
              {"config",
               {{"gamma", c.gamma},
                {"epochs", c.epochs},
                {"tau", c.tau},
                {"lr", c.lr},
                {"batch_size", c.batch_size},
                {"epsilon", c.epsilon},
                {"seed", c.seed}}},
              {"gates", b.gates.layers},
              {"sparsity", b.sparsity},
              {"selected_epoch", b.selected_epoch},
              {"loss_history", std::move(history)},
              {"met_tau", b.met_tau}};
}

SubnetworkBundle bundle_from_json(const json& j) {
  try {
    SubnetworkBundle b;
    b.class_id = j.at("class_id");
    const json& c = j.at("config");
    b.config.gamma = c.at("gamma");
    b.config.epochs = c.at("epochs");
    b.config.tau = c.at("tau");
    b.config.lr = c.at("lr");
    b.config.batch_size = c.at("batch_size");
    b.config.epsilon = c.at("epsilon");
    b.config.seed = c.at("seed");
    b.gates.layers = j.at("gates").get<std::vector<std::vector<double>>>();
    b.sparsity = j.at("sparsity");
    b.selected_epoch = j.at("selected_epoch");
    for (const auto& r : j.at("loss_history")) {
      b.history.push_back({r.at("epoch"), r.at("train_loss"), r.at("val_loss"), r.at("sparsity")});
    }
    b.met_tau = j.at("met_tau");
    for (const auto& layer : b.gates.layers)
      for (double g : layer)
        if (!(g >= 0.0)) throw LayoutError("bundle: negative gate value");
    return b;
  } catch (const json::exception& e) {
    throw LayoutError(std::string("bundle: ") + e.what());
  }
}

void save_bundle(const std::filesystem::path& path, const SubnetworkBundle& bundle) {
  io::write_file(path, bundle_to_json(bundle).dump(2) + "\n");
}

SubnetworkBundle load_bundle(const std::filesystem::path& path) {
  try {
    return bundle_from_json(json::parse(io::read_file(path)));
  } catch (const json::parse_error& e) {
    throw LayoutError(std::string("bundle: ") + e.what());
  }
}

}  // namespace subnetscope
