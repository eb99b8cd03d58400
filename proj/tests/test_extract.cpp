#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "subnetscope/error.hpp"
#include "subnetscope/extract.hpp"

using namespace subnetscope;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Fixture {
  ModelSpec spec;
  Weights weights;
  DatasetSplits data;
};

// small shapes model, trained once and shared by the tests below
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    ShapesConfig sc;
    sc.image_size = 16;
    sc.train_per_class = 30;
    sc.val_per_class = 10;
    sc.test_per_class = 10;
    out.data = generate_shapes(sc);
    out.spec = build_reference_cnn(1, 16, 16, 10);
    TrainConfig tc;
    tc.epochs = 4;
    tc.lr = 0.004;
    out.weights = train_base(out.spec, out.data.train, out.data.val, tc).weights;
    return out;
  }();
  return f;
}

ExtractionConfig quick_config() {
  ExtractionConfig c;
  c.epochs = 3;
  c.batch_size = 20;
  return c;
}

double l1(const GateVector& g) {
  double s = 0.0;
  for (double v : g.flat()) s += std::abs(v);
  return s;
}

}  // namespace

TEST(Bce, FormulaExample) {
  EXPECT_NEAR(binary_cross_entropy(0.8, 0.6), -0.8 * std::log(0.6) - 0.2 * std::log(0.4), 1e-15);
  EXPECT_NEAR(binary_cross_entropy(0.8, 0.6), 0.5920, 1e-4);  // 0.59192 exactly
}

TEST(Bce, MinimisedAtMatchingProbability) {
  for (double a : {0.1, 0.35, 0.8}) {
    const double h = binary_cross_entropy(a, a);
    EXPECT_NEAR(h, -a * std::log(a) - (1 - a) * std::log(1 - a), 1e-12);
    for (double b = 0.05; b < 1.0; b += 0.05) EXPECT_GE(binary_cross_entropy(a, b), h - 1e-12);
  }
}

TEST(Bce, ClampedAtExtremes) {
  EXPECT_NEAR(binary_cross_entropy(1.0, 0.0), -std::log(1e-7), 1e-9);
  EXPECT_TRUE(std::isfinite(binary_cross_entropy(0.0, 1.0)));
}

TEST(DistillLoss, HandExample) {
  const ModelSpec spec = build_reference_cnn(1, 16, 16, 3);
  const GateVector ones = GateVector::filled(spec, 1.0);
  const std::vector<double> t{2.0}, s{2.0};
  EXPECT_NEAR(distill_loss(t, s, ones, 0.05), 0.4153, 5e-5);
}

TEST(DistillLoss, PenaltyIsMeanOfGates) {
  const ModelSpec spec = build_reference_cnn(1, 16, 16, 3);
  const GateVector half = GateVector::filled(spec, 0.5);
  const std::vector<double> t{0.3, -1.0}, s{0.3, -1.0};
  const double bce = (binary_cross_entropy(sigmoid(0.3), sigmoid(0.3)) +
                      binary_cross_entropy(sigmoid(-1.0), sigmoid(-1.0))) / 2;
  EXPECT_NEAR(distill_loss(t, s, half, 0.2), bce + 0.2 * 0.5, 1e-12);
}

TEST(DistillLoss, TapedMatchesPlainAndGradients) {
  std::mt19937_64 rng(4);
  const Tensor student = gradcheck::random_tensor({5}, rng, -3.0, 3.0);
  const Tensor teacher = gradcheck::random_tensor({5}, rng, -3.0, 3.0);
  const Tensor g1 = gradcheck::random_tensor({3}, rng, 0.1, 1.5);
  const Tensor g2 = gradcheck::random_tensor({4}, rng, 0.1, 1.5);

  Tensor probs({5});
  for (std::size_t i = 0; i < 5; ++i) probs[i] = sigmoid(teacher[i]);
  const GateVector gv{{g1.storage(), g2.storage()}};
  {
    Tape tape;
    const std::vector<Var> gates{tape.variable(g1), tape.variable(g2)};
    const Var loss = distill_loss(tape.variable(student), tape.constant(probs), gates, 0.3);
    EXPECT_NEAR(tape.value(loss).item(), distill_loss(teacher.storage(), student.storage(), gv, 0.3), 1e-12);
  }
  const auto rep = gradcheck::check({student, g1, g2}, [&](Tape& tape, const std::vector<Var>& v) {
    const std::vector<Var> gates{v[1], v[2]};
    return distill_loss(v[0], tape.constant(probs), gates, 0.3);
  });
  EXPECT_EQ(rep.passed, rep.checked) << rep.max_rel;
}

TEST(Sparsity, ThresholdExample) {
  const GateVector g{{{1.0, 0.5, 0.009, 0.0}}};
  EXPECT_DOUBLE_EQ(gate_sparsity(g, 0.01), 0.5);
  const GateVector z = zero_small_gates(g, 0.01);
  EXPECT_EQ(z.layers[0], (std::vector<double>{1.0, 0.5, 0.0, 0.0}));
}

TEST(ExtractionConfig, Validation) {
  ExtractionConfig c;
  c.gamma = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.tau = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epsilon = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Extract, NoStepsKeepsFullModel) {
  const Fixture& f = fixture();
  ExtractionConfig c = quick_config();
  c.gamma = 0.0;
  c.lr = 0.0;
  c.epochs = 1;
  const SubnetworkBundle b = extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 2, c);
  EXPECT_EQ(b.gates, GateVector::filled(f.spec, 1.0));
  EXPECT_DOUBLE_EQ(b.sparsity, 1.0);
  EXPECT_FALSE(b.met_tau);
  const Tensor x = stack_images(f.data.test);
  const Tensor a = forward(f.spec, f.weights, x);
  const Tensor s = subnet_forward(f.spec, f.weights, b, x);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], s[i]);
}

TEST(Extract, ZeroGateBundleIsConstant) {
  const Fixture& f = fixture();
  SubnetworkBundle b;
  b.gates = GateVector::filled(f.spec, 0.0);
  const Tensor s = subnet_forward(f.spec, f.weights, b, stack_images(f.data.test));
  const std::size_t k = f.spec.num_classes;
  for (std::size_t i = k; i < s.numel(); ++i) EXPECT_EQ(s[i], s[i % k]);
}

TEST(Extract, SelectionAndInvariants) {
  const Fixture& f = fixture();
  ExtractionConfig c = quick_config();
  c.gamma = 1.0;
  const SubnetworkBundle b = extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 5, c);
  ASSERT_EQ(b.history.size(), c.epochs);
  for (double g : b.gates.flat()) EXPECT_TRUE(g == 0.0 || g > c.epsilon);
  EXPECT_DOUBLE_EQ(b.sparsity, gate_sparsity(b.gates, c.epsilon));

  // selection rule replayed from the history
  std::size_t expect = 0;
  bool met = false;
  double best = 0.0;
  for (const auto& e : b.history)
    if (e.sparsity <= c.tau && (!met || e.val_loss < best)) {
      met = true;
      best = e.val_loss;
      expect = e.epoch;
    }
  if (!met) {
    double lowest = 2.0;
    for (const auto& e : b.history)
      if (e.sparsity < lowest) {
        lowest = e.sparsity;
        expect = e.epoch;
      }
  }
  EXPECT_EQ(b.met_tau, met);
  EXPECT_EQ(b.selected_epoch, expect);
  EXPECT_DOUBLE_EQ(b.history[expect - 1].sparsity, b.sparsity);
}

TEST(Extract, SelectedObjectiveBelowInitial) {
  const Fixture& f = fixture();
  ExtractionConfig c = quick_config();
  const SubnetworkBundle b = extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 0, c);
  // identity gates on the validation slice cost the binary entropy plus gamma
  ExtractionConfig none = c;
  none.lr = 0.0;
  none.epochs = 1;
  const SubnetworkBundle id = extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 0, none);
  EXPECT_LE(b.history[b.selected_epoch - 1].val_loss, id.history[0].val_loss);
}

TEST(Extract, Deterministic) {
  const Fixture& f = fixture();
  const ExtractionConfig c = quick_config();
  EXPECT_EQ(extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 7, c),
            extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 7, c));
}

TEST(Extract, StrongerPenaltyShrinksGates) {
  const Fixture& f = fixture();
  std::vector<double> weak, strong;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExtractionConfig c = quick_config();
    c.seed = seed;
    c.gamma = 0.05;
    weak.push_back(l1(extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 3, c).gates));
    c.gamma = 1.0;
    strong.push_back(l1(extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 3, c).gates));
  }
  std::sort(weak.begin(), weak.end());
  std::sort(strong.begin(), strong.end());
  EXPECT_LE(strong[2], weak[2]);
}

TEST(Extract, MissingClassRejected) {
  const Fixture& f = fixture();
  LabeledSet only(f.data.train.begin(), f.data.train.begin() + 30);
  EXPECT_THROW(extract_subnetwork(f.spec, f.weights, only, f.data.val, 9, quick_config()), DataError);
}

TEST(Bundle, JsonAndFileRoundTrip) {
  const Fixture& f = fixture();
  const SubnetworkBundle b = extract_subnetwork(f.spec, f.weights, f.data.train, f.data.val, 1, quick_config());
  EXPECT_EQ(bundle_from_json(bundle_to_json(b)), b);
  const auto path = std::filesystem::temp_directory_path() / "subnetscope_test_bundle.json";
  save_bundle(path, b);
  const SubnetworkBundle c = load_bundle(path);
  std::filesystem::remove(path);
  EXPECT_EQ(c, b);
}
