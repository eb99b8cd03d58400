#include "subnetscope/explain.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "subnetscope/error.hpp"

namespace subnetscope {

using json = nlohmann::json;

std::string_view to_string(SaliencyMethod m) {
  switch (m) {
    case SaliencyMethod::gradient: return "gradient";
    case SaliencyMethod::deconv: return "deconv";
    case SaliencyMethod::guided_bp: return "guided_bp";
    case SaliencyMethod::gradcam: return "gradcam";
    case SaliencyMethod::intgrad: return "intgrad";
    case SaliencyMethod::smoothgrad: return "smoothgrad";
  }
  return "?";
}

SaliencyMethod saliency_method_from_string(std::string_view name) {
  for (SaliencyMethod m : all_saliency_methods())
    if (to_string(m) == name) return m;
  throw ConfigError("unknown saliency method '" + std::string(name) + "'");
}

const std::vector<SaliencyMethod>& all_saliency_methods() {
  static const std::vector<SaliencyMethod> all{SaliencyMethod::gradient,  SaliencyMethod::deconv,
                                               SaliencyMethod::guided_bp, SaliencyMethod::gradcam,
                                               SaliencyMethod::intgrad,   SaliencyMethod::smoothgrad};
  return all;
}

void SaliencyParams::validate() const {
  if (intgrad_steps < 1) throw ConfigError("intgrad steps must be >= 1");
  if (smoothgrad_samples < 1) throw ConfigError("smoothgrad samples must be >= 1");
  if (!(smoothgrad_sigma >= 0.0)) throw ConfigError("smoothgrad sigma must be >= 0");
}

namespace {

struct Gradients {
  Tensor dx;    // N x C x H x W
  Tensor act;   // last conv activation, only for gradcam
  Tensor dact;
};

// Gradient of sum_i f^{classes[i]}(x_i); samples do not interact, so slice i
// of the result is the per-image input gradient.
Gradients class_gradients(const ModelSpec& spec, const Weights& weights, const GateVector* gates, const Tensor& x,
                          std::span<const int> classes, BackwardRule rule, bool want_cam) {
  Tape tape(rule);
  const WeightVars wv = bind_weights(tape, weights, false);
  std::vector<Var> gv;
  if (gates) gv = bind_gates(tape, spec, *gates, false);
  Var xv = tape.variable(x);
  ForwardTrace trace;
  Var logits = forward(tape, spec, wv, xv, gates ? &gv : nullptr, want_cam ? &trace : nullptr);
  const std::size_t k = spec.num_classes;
  Tensor seed(tape.value(logits).shape(), 0.0);
  for (std::size_t i = 0; i < classes.size(); ++i) seed[i * k + static_cast<std::size_t>(classes[i])] = 1.0;
  const GradientMap g = tape.backward(logits, seed);
  Gradients out;
  out.dx = g.at(xv);
  if (want_cam) {
    if (trace.conv_activations.empty()) throw ShapeError("gradcam: model has no conv layer");
    const Var a = trace.conv_activations.back();
    out.act = tape.value(a);
    const Tensor* da = g.find(a);
    out.dact = da ? *da : Tensor(out.act.shape(), 0.0);
  }
  return out;
}

Tensor channel_max_abs(const Tensor& g, std::size_t i) {
  const std::size_t c = g.dim(1), h = g.dim(2), w = g.dim(3);
  Tensor out(Shape{h, w}, 0.0);
  const double* base = g.data().data() + i * c * h * w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) out[p] = std::max(out[p], std::abs(base[ch * h * w + p]));
  return out;
}

// Half-pixel-centre bilinear resize.
Tensor bilinear(const Tensor& src, std::size_t oh, std::size_t ow) {
  const std::size_t ih = src.dim(0), iw = src.dim(1);
  Tensor out(Shape{oh, ow});
  auto coord = [](std::size_t d, std::size_t in, std::size_t outn, std::size_t& lo, std::size_t& hi, double& t) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, in - 1);
    t = s - static_cast<double>(lo);
  };
  for (std::size_t r = 0; r < oh; ++r) {
    std::size_t r0, r1;
    double tr;
    coord(r, ih, oh, r0, r1, tr);
    for (std::size_t c = 0; c < ow; ++c) {
      std::size_t c0, c1;
      double tc;
      coord(c, iw, ow, c0, c1, tc);
      const double top = src[r0 * iw + c0] * (1 - tc) + src[r0 * iw + c1] * tc;
      const double bot = src[r1 * iw + c0] * (1 - tc) + src[r1 * iw + c1] * tc;
      out[r * ow + c] = top * (1 - tr) + bot * tr;
    }
  }
  return out;
}

void welford(Tensor& mean, const Tensor& sample, std::size_t count) {
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += (sample[i] - mean[i]) * inv;
}

Tensor average_path_gradient(const ModelSpec& spec, const Weights& weights, const GateVector* gates, const Tensor& x,
                             std::span<const int> classes, std::size_t steps) {
  Tensor avg(x.shape(), 0.0);
  for (std::size_t t = 1; t <= steps; ++t) {
    Tensor xt = x;
    const double frac = static_cast<double>(t) / static_cast<double>(steps);
    for (double& v : xt.storage()) v *= frac;
    welford(avg, class_gradients(spec, weights, gates, xt, classes, BackwardRule::standard, false).dx, t);
  }
  return avg;
}

}  // namespace

std::vector<SaliencyMap> saliency_batch(SaliencyMethod method, const ModelSpec& spec, const Weights& weights,
                                        const GateVector* gates, const Tensor& x, std::span<const int> classes,
                                        const SaliencyParams& params, std::span<const std::uint64_t> noise_keys) {
  params.validate();
  if (x.rank() != 4) throw ShapeError("saliency: expected N x C x H x W input, got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (classes.size() != n) throw ShapeError("saliency: one class per image required");
  if (!noise_keys.empty() && noise_keys.size() != n) throw ShapeError("saliency: one noise key per image required");
  for (int c : classes)
    if (c < 0 || static_cast<std::size_t>(c) >= spec.num_classes) {
      throw DataError("saliency: class " + std::to_string(c) + " out of range");
    }

  std::vector<Tensor> grids(n);
  switch (method) {
    case SaliencyMethod::gradient:
    case SaliencyMethod::deconv:
    case SaliencyMethod::guided_bp: {
      const BackwardRule rule = method == SaliencyMethod::gradient ? BackwardRule::standard
                                : method == SaliencyMethod::deconv ? BackwardRule::deconv
                                                                   : BackwardRule::guided;
      const Tensor dx = class_gradients(spec, weights, gates, x, classes, rule, false).dx;
      for (std::size_t i = 0; i < n; ++i) grids[i] = channel_max_abs(dx, i);
      break;
    }
    case SaliencyMethod::gradcam: {
      const Gradients g = class_gradients(spec, weights, gates, x, classes, BackwardRule::standard, true);
      const std::size_t k = g.act.dim(1), ah = g.act.dim(2), aw = g.act.dim(3);
      for (std::size_t i = 0; i < n; ++i) {
        Tensor cam(Shape{ah, aw}, 0.0);
        for (std::size_t ch = 0; ch < k; ++ch) {
          const double* a = g.act.data().data() + (i * k + ch) * ah * aw;
          const double* da = g.dact.data().data() + (i * k + ch) * ah * aw;
          double alpha = 0.0;
          for (std::size_t p = 0; p < ah * aw; ++p) alpha += da[p];
          alpha /= static_cast<double>(ah * aw);
          for (std::size_t p = 0; p < ah * aw; ++p) cam[p] += alpha * a[p];
        }
        for (double& v : cam.storage()) v = std::max(v, 0.0);
        grids[i] = bilinear(cam, h, w);
      }
      break;
    }
    case SaliencyMethod::intgrad: {
      const Tensor avg = average_path_gradient(spec, weights, gates, x, classes, params.intgrad_steps);
      Tensor attr = x;
      for (std::size_t i = 0; i < attr.numel(); ++i) attr[i] *= avg[i];
      for (std::size_t i = 0; i < n; ++i) grids[i] = channel_max_abs(attr, i);
      break;
    }
    case SaliencyMethod::smoothgrad: {
      const std::size_t per = x.numel() / n;
      std::vector<double> sigma(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto first = x.data().begin() + static_cast<long>(i * per);
        const auto [lo, hi] = std::minmax_element(first, first + static_cast<long>(per));
        sigma[i] = params.smoothgrad_sigma * (*hi - *lo);
      }
      for (std::size_t i = 0; i < n; ++i) grids[i] = Tensor(Shape{h, w}, 0.0);
      for (std::size_t t = 0; t < params.smoothgrad_samples; ++t) {
        Tensor noisy = x;
        for (std::size_t i = 0; i < n; ++i) {
          const std::uint64_t key = noise_keys.empty() ? i : noise_keys[i];
          std::mt19937_64 rng(mix_seed(params.seed, key, t));
          std::normal_distribution<double> z(0.0, 1.0);
          for (std::size_t p = 0; p < per; ++p) noisy[i * per + p] += sigma[i] * z(rng);
        }
        const Tensor dx = class_gradients(spec, weights, gates, noisy, classes, BackwardRule::standard, false).dx;
        for (std::size_t i = 0; i < n; ++i) welford(grids[i], channel_max_abs(dx, i), t + 1);
      }
      break;
    }
  }

  std::vector<SaliencyMap> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!grids[i].all_finite()) throw NumericError("saliency: non-finite map for image " + std::to_string(i));
    out[i] = {std::move(grids[i]), method, classes[i], gates != nullptr};
  }
  return out;
}

SaliencyMap saliency(SaliencyMethod method, const ModelSpec& spec, const Weights& weights, const GateVector* gates,
                     const Tensor& image, int class_id, const SaliencyParams& params, std::uint64_t noise_key) {
  if (image.rank() != 3) throw ShapeError("saliency: expected C x H x W image, got " + shape_to_string(image.shape()));
  const Tensor x = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  const int classes[] = {class_id};
  const std::uint64_t keys[] = {noise_key};
  return saliency_batch(method, spec, weights, gates, x, classes, params, keys).front();
}

Tensor intgrad_attribution(const ModelSpec& spec, const Weights& weights, const GateVector* gates, const Tensor& image,
                           int class_id, std::size_t steps) {
  if (steps < 1) throw ConfigError("intgrad steps must be >= 1");
  const Tensor x = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  const int classes[] = {class_id};
  const Tensor avg = average_path_gradient(spec, weights, gates, x, classes, steps);
  Tensor attr = image;
  for (std::size_t i = 0; i < attr.numel(); ++i) attr[i] *= avg[i];
  return attr;
}

// ---------------------------------------------------------------------------
// Localization

std::vector<std::uint8_t> threshold_mask(const Tensor& grid, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  double mean = 0.0;
  for (double v : grid.data()) mean += v;
  mean /= static_cast<double>(grid.numel());
  const double cut = alpha * mean;
  std::vector<std::uint8_t> mask(grid.numel());
  for (std::size_t i = 0; i < grid.numel(); ++i) mask[i] = grid[i] >= cut ? 1 : 0;
  return mask;
}

BBox saliency_to_bbox(const Tensor& grid, double alpha) {
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  const auto mask = threshold_mask(grid, alpha);
  std::vector<int> label(h * w, -1);
  std::size_t best_size = 0;
  BBox best{0, 0, static_cast<int>(h) - 1, static_cast<int>(w) - 1};
  std::vector<std::size_t> stack;
  int next = 0;
  for (std::size_t s = 0; s < h * w; ++s) {
    if (!mask[s] || label[s] >= 0) continue;
    std::size_t size = 0;
    BBox box{static_cast<int>(s / w), static_cast<int>(s % w), static_cast<int>(s / w), static_cast<int>(s % w)};
    stack.assign(1, s);
    label[s] = next;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++size;
      const int r = static_cast<int>(p / w), c = static_cast<int>(p % w);
      box.row0 = std::min(box.row0, r);
      box.row1 = std::max(box.row1, r);
      box.col0 = std::min(box.col0, c);
      box.col1 = std::max(box.col1, c);
      const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
      for (int d = 0; d < 4; ++d) {
        const int nr = r + dr[d], nc = c + dc[d];
        if (nr < 0 || nc < 0 || nr >= static_cast<int>(h) || nc >= static_cast<int>(w)) continue;
        const std::size_t q = static_cast<std::size_t>(nr) * w + static_cast<std::size_t>(nc);
        if (mask[q] && label[q] < 0) {
          label[q] = next;
          stack.push_back(q);
        }
      }
    }
    ++next;
    if (size > best_size) {
      best_size = size;
      best = box;
    }
  }
  return best;
}

double iou(const BBox& a, const BBox& b) {
  const int r0 = std::max(a.row0, b.row0), r1 = std::min(a.row1, b.row1);
  const int c0 = std::max(a.col0, b.col0), c1 = std::min(a.col1, b.col1);
  const long inter = (r1 >= r0 && c1 >= c0) ? static_cast<long>(r1 - r0 + 1) * (c1 - c0 + 1) : 0;
  return static_cast<double>(inter) / static_cast<double>(a.area() + b.area() - inter);
}

std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 20; ++i) g.push_back(0.5 * i);
  return g;
}

std::vector<bool> localization_hits(std::span<const Tensor> maps, std::span<const BBox> truth,
                                    const std::vector<bool>& correct, double alpha, double iou_threshold) {
  std::vector<bool> hits(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    hits[i] = correct[i] && iou(saliency_to_bbox(maps[i], alpha), truth[i]) >= iou_threshold;
  }
  return hits;
}

namespace {

struct SplitMaps {
  std::vector<Tensor> maps;
  std::vector<BBox> truth;
  std::vector<bool> correct;
};

SplitMaps explain_split(SaliencyMethod method, const ModelSpec& spec, const Weights& weights,
                        const std::vector<SubnetworkBundle>* bundles, const LabeledSet& set, const WsolConfig& config,
                        std::uint64_t split_key) {
  SplitMaps out;
  const std::size_t n = set.size();
  out.maps.resize(n);
  out.correct.resize(n);
  for (const auto& s : set) {
    if (!s.has_mask()) throw DataError("wsol_eval: dataset has no localization masks");
    out.truth.push_back(s.bbox);
  }
  const std::vector<int> pred = argmax_rows(forward(spec, weights, stack_images(set)));
  // Group by predicted class so each batch shares one subnetwork; normal mode
  // uses the same batches so identity gates reproduce it exactly.
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    out.correct[i] = pred[i] == set[i].label;
    groups[pred[i]].push_back(i);
  }
  for (const auto& [c, members] : groups) {
    const GateVector* gates = nullptr;
    if (bundles) {
      auto it = std::find_if(bundles->begin(), bundles->end(), [c](const SubnetworkBundle& b) { return b.class_id == c; });
      if (it == bundles->end()) throw DataError("wsol_eval: no subnetwork for class " + std::to_string(c));
      gates = &it->gates;
    }
    for (std::size_t start = 0; start < members.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, members.size() - start);
      std::vector<std::size_t> idx(members.begin() + static_cast<long>(start),
                                   members.begin() + static_cast<long>(start + len));
      std::vector<std::uint64_t> keys;
      for (std::size_t i : idx) keys.push_back(mix_seed(split_key, i));
      const std::vector<int> classes(len, c);
      auto maps = saliency_batch(method, spec, weights, gates, stack_images(set, idx), classes, config.saliency, keys);
      for (std::size_t k = 0; k < len; ++k) out.maps[idx[k]] = std::move(maps[k].grid);
    }
  }
  return out;
}

double error_rate(const std::vector<bool>& hits) {
  const auto ok = std::count(hits.begin(), hits.end(), true);
  return 1.0 - static_cast<double>(ok) / static_cast<double>(hits.size());
}

}  // namespace

LocResult wsol_eval(SaliencyMethod method, const ModelSpec& spec, const Weights& weights,
                    const std::vector<SubnetworkBundle>* bundles, const LabeledSet& heldout, const LabeledSet& test,
                    const WsolConfig& config) {
  if (config.alphas.empty()) throw ConfigError("wsol: alpha grid is empty");
  if (heldout.empty() || test.empty()) throw DataError("wsol: empty held-out or test split");
  if (config.batch_size < 1) throw ConfigError("wsol: batch size must be >= 1");
  const SplitMaps h = explain_split(method, spec, weights, bundles, heldout, config, 1);
  const SplitMaps t = explain_split(method, spec, weights, bundles, test, config, 2);

  LocResult r;
  r.method = method;
  r.subnet = bundles != nullptr;
  r.alphas = config.alphas;
  r.heldout_count = heldout.size();
  r.test_count = test.size();
  std::size_t best = 0;
  for (std::size_t a = 0; a < config.alphas.size(); ++a) {
    r.heldout_error.push_back(error_rate(localization_hits(h.maps, h.truth, h.correct, config.alphas[a], config.iou_threshold)));
    r.test_error.push_back(error_rate(localization_hits(t.maps, t.truth, t.correct, config.alphas[a], config.iou_threshold)));
    if (r.heldout_error[a] < r.heldout_error[best]) best = a;
  }
  r.alpha_star = config.alphas[best];
  r.error_at_alpha_star = r.test_error[best];
  return r;
}

json loc_result_json(const LocResult& r) {
  return json{{"method", to_string(r.method)},
              {"mode", r.subnet ? "subnet" : "normal"},
              {"alphas", r.alphas},
              {"heldout_error", r.heldout_error},
              {"test_error", r.test_error},
              {"alpha_star", r.alpha_star},
              {"error", r.error_at_alpha_star},
              {"heldout_count", r.heldout_count},
              {"test_count", r.test_count}};
}

std::string table1_csv(std::span<const LocResult> results) {
  std::ostringstream os;
  os << "method,mode,alpha_star,error\n";
  for (const auto& r : results) {
    os << to_string(r.method) << ',' << (r.subnet ? "subnet" : "normal") << ',' << r.alpha_star << ','
       << std::setprecision(6) << r.error_at_alpha_star << '\n';
  }
  return os.str();
}

std::string map_to_pgm(const Tensor& grid) {
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  double mx = 0.0;
  for (double v : grid.data()) mx = std::max(mx, v);
  std::ostringstream os;
  os << "P2\n" << w << ' ' << h << "\n255\n";
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double v = mx > 0 ? grid[r * w + c] / mx : 0.0;
      os << (c ? " " : "") << static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    os << '\n';
  }
  return os.str();
}

std::string map_to_csv(const Tensor& grid) {
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  std::ostringstream os;
  os << std::setprecision(9);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) os << (c ? "," : "") << static_cast<float>(grid[r * w + c]);
    os << '\n';
  }
  return os.str();
}

}  // namespace subnetscope
