#include "run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "subnetscope/error.hpp"

namespace subnetscope::cli {

using nlohmann::json;

namespace {

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  throw ConfigError("config key '" + key + "': " + why);
}

std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

// Strict view over one JSON object. Every key read is marked; finish() rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad_key(path_.empty() ? "<root>" : path_, "expected an object");
  }

  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) bad_key(join(path_, key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) bad_key(join(path_, key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) bad_key(join(path_, key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) bad_key(join(path_, key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) bad_key(join(path_, key), "expected an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) bad_key(join(path_, key), "expected an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  template <class T, class Parse>
  void get_names(const char* key, std::vector<T>& out, Parse parse) {
    if (const json* v = find(key)) {
      if (!v->is_array()) bad_key(join(path_, key), "expected an array of names");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) bad_key(join(path_, key), "expected an array of names");
        try {
          out.push_back(parse(e.get<std::string>()));
        } catch (const ConfigError& err) {
          bad_key(join(path_, key), err.what());
        }
      }
    }
  }

  std::string key(const char* k) const { return join(path_, k); }
  const std::string& path() const { return path_; }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) bad_key(join(path_, item.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& key, const std::string& why) {
  if (!ok) bad_key(key, why);
}

json attack_json(const AttackSpec& a) {
  return {{"kind", to_string(a.kind)}, {"epsilon", a.epsilon}, {"steps", a.steps},
          {"overshoot", a.overshoot}, {"clip_lo", a.clip_lo}, {"clip_hi", a.clip_hi}};
}

AttackSpec attack_from_json(const json& j, const std::string& path) {
  Section s(j, path);
  AttackSpec a;
  if (const json* k = s.find("kind")) {
    if (!k->is_string()) bad_key(s.key("kind"), "expected a string");
    try {
      a = AttackSpec::defaults(attack_kind_from_string(k->get<std::string>()));
    } catch (const ConfigError& e) {
      bad_key(s.key("kind"), e.what());
    }
  } else {
    bad_key(s.key("kind"), "required");
  }
  s.get("epsilon", a.epsilon);
  s.get("steps", a.steps);
  s.get("overshoot", a.overshoot);
  s.get("clip_lo", a.clip_lo);
  s.get("clip_hi", a.clip_hi);
  s.finish();
  try {
    a.validate();
  } catch (const ConfigError& e) {
    bad_key(path, e.what());
  }
  return a;
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& sh = c.dataset.shapes;
  const auto& ix = c.dataset.idx;
  json metrics = json::array();
  for (Metric m : c.signatures.metrics) metrics.push_back(to_string(m));
  json methods = json::array();
  for (SaliencyMethod m : c.explain.methods) methods.push_back(to_string(m));
  json attacks = json::array();
  for (const auto& a : c.detect.attacks) attacks.push_back(attack_json(a));
  const auto& w = c.explain.wsol;
  return {
      {"dataset",
       {{"source", c.dataset.source},
        {"shapes",
         {{"image_size", sh.image_size}, {"channels", sh.channels}, {"train_per_class", sh.train_per_class},
          {"val_per_class", sh.val_per_class}, {"test_per_class", sh.test_per_class}, {"noise", sh.noise},
          {"seed", sh.seed}}},
        {"idx",
         {{"train_images", ix.train_images}, {"train_labels", ix.train_labels}, {"test_images", ix.test_images},
          {"test_labels", ix.test_labels}, {"val_fraction", ix.val_fraction}}}}},
      {"train",
       {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay}, {"logit_penalty", c.train.logit_penalty}, {"seed", c.train.seed}}},
      {"extract",
       {{"gamma", c.extract.gamma}, {"epochs", c.extract.epochs}, {"tau", c.extract.tau}, {"lr", c.extract.lr},
        {"batch_size", c.extract.batch_size}, {"epsilon", c.extract.epsilon}, {"seed", c.extract.seed}}},
      {"signatures", {{"metrics", metrics}, {"n_clusters", c.signatures.n_clusters}}},
      {"explain",
       {{"methods", methods}, {"alphas", w.alphas}, {"iou_threshold", w.iou_threshold},
        {"batch_size", w.batch_size}, {"intgrad_steps", w.saliency.intgrad_steps},
        {"smoothgrad_samples", w.saliency.smoothgrad_samples}, {"smoothgrad_sigma", w.saliency.smoothgrad_sigma},
        {"seed", w.saliency.seed}, {"heldout_per_class", c.explain.heldout_per_class},
        {"test_per_class", c.explain.test_per_class}, {"maps_per_class", c.explain.maps_per_class}}},
      {"detect",
       {{"attacks", attacks}, {"max_samples", c.detect.max_samples}, {"min_successful", c.detect.min_successful},
        {"per_class_features", c.detect.per_class_features}, {"seed", c.detect.seed},
        {"detector",
         {{"lr", c.detect.detector.lr}, {"iterations", c.detect.detector.iterations},
          {"l2", c.detect.detector.l2}}}}},
      {"output", c.output},
      {"workers", c.workers}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");

  if (const json* d = root.find("dataset")) {
    Section s(*d, "dataset");
    s.get("source", c.dataset.source);
    check(c.dataset.source == "shapes" || c.dataset.source == "idx", s.key("source"), "expected \"shapes\" or \"idx\"");
    if (const json* sj = s.find("shapes")) {
      Section t(*sj, "dataset.shapes");
      auto& sh = c.dataset.shapes;
      t.get("image_size", sh.image_size);
      t.get("channels", sh.channels);
      t.get("train_per_class", sh.train_per_class);
      t.get("val_per_class", sh.val_per_class);
      t.get("test_per_class", sh.test_per_class);
      t.get("noise", sh.noise);
      std::size_t seed = sh.seed;
      t.get("seed", seed);
      sh.seed = seed;
      t.finish();
      try {
        sh.validate();
      } catch (const ConfigError& e) {
        bad_key("dataset.shapes", e.what());
      }
    }
    if (const json* ij = s.find("idx")) {
      Section t(*ij, "dataset.idx");
      auto& ix = c.dataset.idx;
      t.get("train_images", ix.train_images);
      t.get("train_labels", ix.train_labels);
      t.get("test_images", ix.test_images);
      t.get("test_labels", ix.test_labels);
      t.get("val_fraction", ix.val_fraction);
      check(ix.val_fraction > 0.0 && ix.val_fraction < 1.0, t.key("val_fraction"), "must lie in (0, 1)");
      t.finish();
    }
    if (c.dataset.source == "idx")
      for (const auto& [k, v] : {std::pair<const char*, const std::string*>{"train_images", &c.dataset.idx.train_images},
                                 {"train_labels", &c.dataset.idx.train_labels},
                                 {"test_images", &c.dataset.idx.test_images},
                                 {"test_labels", &c.dataset.idx.test_labels}})
        check(!v->empty(), std::string("dataset.idx.") + k, "required when dataset.source is \"idx\"");
    s.finish();
  }

  if (const json* tj = root.find("train")) {
    Section s(*tj, "train");
    auto& t = c.train;
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("lr", t.lr);
    s.get("weight_decay", t.weight_decay);
    s.get("logit_penalty", t.logit_penalty);
    std::size_t seed = t.seed;
    s.get("seed", seed);
    t.seed = seed;
    s.finish();
    check(t.batch_size >= 1, "train.batch_size", "must be >= 1");
    check(t.lr >= 0.0, "train.lr", "must be >= 0");
    check(t.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
    check(t.logit_penalty >= 0.0, "train.logit_penalty", "must be >= 0");
  }

  if (const json* ej = root.find("extract")) {
    Section s(*ej, "extract");
    auto& e = c.extract;
    s.get("gamma", e.gamma);
    s.get("epochs", e.epochs);
    s.get("tau", e.tau);
    s.get("lr", e.lr);
    s.get("batch_size", e.batch_size);
    s.get("epsilon", e.epsilon);
    std::size_t seed = e.seed;
    s.get("seed", seed);
    e.seed = seed;
    s.finish();
    try {
      e.validate();
    } catch (const ConfigError& err) {
      // the module message already carries the dotted key
      throw ConfigError(std::string("config key ") + err.what());
    }
  }

  if (const json* sj = root.find("signatures")) {
    Section s(*sj, "signatures");
    s.get_names("metrics", c.signatures.metrics, [](const std::string& n) { return metric_from_string(n); });
    check(!c.signatures.metrics.empty(), "signatures.metrics", "must not be empty");
    s.get("n_clusters", c.signatures.n_clusters);
    check(c.signatures.n_clusters >= 1, "signatures.n_clusters", "must be >= 1");
    s.finish();
  }

  if (const json* xj = root.find("explain")) {
    Section s(*xj, "explain");
    auto& x = c.explain;
    s.get_names("methods", x.methods, [](const std::string& n) { return saliency_method_from_string(n); });
    check(!x.methods.empty(), "explain.methods", "must not be empty");
    s.get("alphas", x.wsol.alphas);
    check(!x.wsol.alphas.empty(), "explain.alphas", "must not be empty");
    for (double a : x.wsol.alphas) check(a > 0.0, "explain.alphas", "every alpha must be > 0");
    s.get("iou_threshold", x.wsol.iou_threshold);
    check(x.wsol.iou_threshold > 0.0 && x.wsol.iou_threshold <= 1.0, "explain.iou_threshold", "must lie in (0, 1]");
    s.get("batch_size", x.wsol.batch_size);
    check(x.wsol.batch_size >= 1, "explain.batch_size", "must be >= 1");
    s.get("intgrad_steps", x.wsol.saliency.intgrad_steps);
    check(x.wsol.saliency.intgrad_steps >= 1, "explain.intgrad_steps", "must be >= 1");
    s.get("smoothgrad_samples", x.wsol.saliency.smoothgrad_samples);
    check(x.wsol.saliency.smoothgrad_samples >= 1, "explain.smoothgrad_samples", "must be >= 1");
    s.get("smoothgrad_sigma", x.wsol.saliency.smoothgrad_sigma);
    check(x.wsol.saliency.smoothgrad_sigma >= 0.0, "explain.smoothgrad_sigma", "must be >= 0");
    std::size_t seed = x.wsol.saliency.seed;
    s.get("seed", seed);
    x.wsol.saliency.seed = seed;
    s.get("heldout_per_class", x.heldout_per_class);
    s.get("test_per_class", x.test_per_class);
    s.get("maps_per_class", x.maps_per_class);
    s.finish();
  }

  if (const json* dj = root.find("detect")) {
    Section s(*dj, "detect");
    auto& d = c.detect;
    if (const json* aj = s.find("attacks")) {
      if (!aj->is_array() || aj->empty()) bad_key("detect.attacks", "expected a non-empty array");
      d.attacks.clear();
      for (std::size_t i = 0; i < aj->size(); ++i)
        d.attacks.push_back(attack_from_json((*aj)[i], "detect.attacks." + std::to_string(i)));
    }
    s.get("max_samples", d.max_samples);
    check(d.max_samples >= 2, "detect.max_samples", "must be >= 2");
    s.get("min_successful", d.min_successful);
    s.get("per_class_features", d.per_class_features);
    std::size_t seed = d.seed;
    s.get("seed", seed);
    d.seed = seed;
    if (const json* lj = s.find("detector")) {
      Section t(*lj, "detect.detector");
      t.get("lr", d.detector.lr);
      check(d.detector.lr > 0.0, "detect.detector.lr", "must be > 0");
      t.get("iterations", d.detector.iterations);
      t.get("l2", d.detector.l2);
      check(d.detector.l2 >= 0.0, "detect.detector.l2", "must be >= 0");
      t.finish();
    }
    s.finish();
  }

  root.get("output", c.output);
  check(!c.output.empty(), "output", "must not be empty");
  root.get("workers", c.workers);
  check(c.workers >= 1, "workers", "must be >= 1");
  root.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (node->is_object()) {
      const auto it = node->find(part);
      if (it == node->end()) bad_key(key, "unknown key");
      node = &*it;
    } else if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(part, &used);
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        bad_key(key, "expected an array index at '" + part + "'");
      }
      if (idx >= node->size()) bad_key(key, "array index out of range");
      node = &(*node)[idx];
    } else {
      bad_key(key, "unknown key");
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = std::move(value);
}

void set_all_seeds(RunConfig& c, std::uint64_t seed) {
  c.dataset.shapes.seed = seed;
  c.train.seed = seed;
  c.extract.seed = seed;
  c.explain.wsol.saliency.seed = seed;
  c.detect.seed = seed;
}

}  // namespace subnetscope::cli
