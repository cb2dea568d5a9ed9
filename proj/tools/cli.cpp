#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string_view>

#include "CLI11.hpp"
#include "f2at/attacks.hpp"
#include "f2at/bitplane.hpp"
#include "f2at/data.hpp"
#include "f2at/infotheory.hpp"
#include "f2at/kernels.hpp"
#include "f2at/losses.hpp"
#include "f2at/model.hpp"
#include "f2at/train.hpp"
#include "json.hpp"

namespace f2at::cli {
namespace fs = std::filesystem;

namespace {

// Rejected input: unknown token, bad value, unreadable path. Exit status 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  const char* key;
  const char* default_value;
  const char* help;
};

constexpr KeySpec kKeys[] = {
    {"seed", "0", "random seed"},
    {"data_seed", "1", "seed of the synthetic generator"},
    {"epochs", "10", "training epochs"},
    {"batch_size", "128", "minibatch size"},
    {"k", "2", "bit-plane split level in [0, 8]"},
    {"alpha", "0.1", "weight of the pattern-dependent loss"},
    {"gamma", "1.0", "weight of the soft margin loss"},
    {"tau", "0.07", "contrastive temperature"},
    {"upsilon", "0.995", "soft margin sharpness"},
    {"epsilon", "8/255", "L-infinity budget (fractions like 8/255 allowed)"},
    {"steps", "10", "attack iterations"},
    {"step_size", "0.007", "attack step size"},
    {"lr", "0.1", "base learning rate"},
    {"momentum", "0.9", "SGD momentum"},
    {"weight_decay", "0.0002", "SGD weight decay"},
    {"max_grad_norm", "0", "global gradient norm clip (0 = off)"},
    {"augment", "true", "random crop and flip during training"},
    {"probe_size", "500", "evaluation examples attacked after every epoch"},
    {"probe_steps", "10", "PGD steps of the per-epoch probe"},
    {"method", "", "train: f2at|sat; attack: fgsm|pgd|mifgsm"},
    {"dataset", "synth", "synth|cifar10|idx"},
    {"data_path", "", "dataset directory (cifar10, idx)"},
    {"train_size", "2000", "training examples (0 = all)"},
    {"test_size", "500", "evaluation examples (0 = all)"},
    {"classes", "2", "synthetic class count"},
    {"side", "8", "synthetic image side"},
    {"checkpoint", "", "model checkpoint (eval: comma list, optional name=path)"},
    {"surrogate", "", "surrogate checkpoint for transfer attacks"},
    {"attacks", "fgsm,pgd20,pgd100,mifgsm", "attack grid: fgsm, pgdT, mifgsm"},
    {"attack", "pgd20", "attack used by report"},
    {"k_values", "2,8", "comma-separated K list"},
    {"input", "", "plane image file"},
    {"count", "16", "pattern pairs dumped from a dataset"},
    {"trials", "100", "random tables and systems"},
    {"bins", "10", "confidence histogram bins"},
    {"kernels", "", "kernel backend: scalar|avx2|neon (default: best available)"},
};

const KeySpec& key_spec(std::string_view key) {
  for (const KeySpec& k : kKeys) {
    if (key == k.key) return k;
  }
  throw std::logic_error("unregistered key " + std::string(key));
}

bool known_key(std::string_view key) {
  return std::any_of(std::begin(kKeys), std::end(kKeys), [&](const KeySpec& k) { return key == k.key; });
}

struct SubcommandSpec {
  const char* name;
  const char* help;
  std::vector<std::pair<const char*, const char*>> keys;  // key, default override (nullptr = table default)
};

const std::vector<std::pair<const char*, const char*>> kDataKeys = {
    {"dataset", nullptr}, {"data_path", nullptr}, {"data_seed", nullptr}, {"train_size", nullptr},
    {"test_size", nullptr}, {"classes", nullptr},   {"side", nullptr},
};

std::vector<std::pair<const char*, const char*>> with_data(std::vector<std::pair<const char*, const char*>> keys) {
  keys.insert(keys.end(), kDataKeys.begin(), kDataKeys.end());
  keys.push_back({"kernels", nullptr});
  return keys;
}

const std::vector<SubcommandSpec>& subcommands() {
  static const std::vector<SubcommandSpec> specs = {
      {"slice", "bit-plane pattern dump and discrepancy report",
       with_data({{"input", nullptr}, {"k", nullptr}, {"epsilon", nullptr}, {"seed", nullptr},
                  {"checkpoint", nullptr}, {"steps", "20"}, {"step_size", nullptr}, {"count", nullptr}})},
      {"mi-verify", "information identity and theorem residual report",
       {{"trials", nullptr}, {"seed", nullptr}}},
      {"attack", "per-example robustness CSV for one attack",
       with_data({{"checkpoint", nullptr}, {"surrogate", nullptr}, {"method", "pgd"}, {"seed", nullptr},
                  {"epsilon", nullptr}, {"steps", "20"}, {"step_size", nullptr}, {"batch_size", nullptr}})},
      {"train", "train a model and stream metrics",
       with_data({{"method", "f2at"}, {"seed", nullptr}, {"epochs", nullptr}, {"batch_size", nullptr},
                  {"lr", nullptr}, {"momentum", nullptr}, {"weight_decay", nullptr}, {"max_grad_norm", nullptr}, {"augment", nullptr},
                  {"probe_size", nullptr}, {"probe_steps", nullptr}, {"k", nullptr}, {"alpha", nullptr},
                  {"gamma", nullptr}, {"tau", nullptr}, {"upsilon", nullptr}, {"epsilon", nullptr},
                  {"steps", nullptr}, {"step_size", nullptr}})},
      {"eval", "defense-versus-attack accuracy grid",
       with_data({{"checkpoint", nullptr}, {"surrogate", nullptr}, {"attacks", nullptr}, {"seed", nullptr},
                  {"epsilon", nullptr}, {"step_size", nullptr}})},
      {"ksweep", "train one model per K and tabulate accuracy",
       with_data({{"k_values", nullptr}, {"attacks", "fgsm,pgd20"}, {"seed", nullptr}, {"epochs", nullptr},
                  {"batch_size", nullptr}, {"lr", nullptr}, {"momentum", nullptr}, {"weight_decay", nullptr}, {"max_grad_norm", nullptr},
                  {"augment", nullptr}, {"probe_size", nullptr}, {"probe_steps", nullptr}, {"alpha", nullptr},
                  {"gamma", nullptr}, {"tau", nullptr}, {"upsilon", nullptr}, {"epsilon", nullptr},
                  {"steps", nullptr}, {"step_size", nullptr}})},
      {"report", "class frequency, confidence histogram and margin CSVs",
       with_data({{"checkpoint", nullptr}, {"attack", nullptr}, {"bins", nullptr}, {"seed", nullptr},
                  {"epsilon", nullptr}, {"step_size", nullptr}})},
  };
  return specs;
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Resolved key/value settings of one invocation.
class Settings {
 public:
  Settings(const SubcommandSpec& spec) : spec_(&spec) {
    for (const auto& [key, override] : spec.keys) values_[key] = override ? override : key_spec(key).default_value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value, const std::string& origin) {
    if (!known_key(key)) throw UsageError(origin + ": unknown key '" + key + "'");
    // Keys that belong to other subcommands are accepted in shared files and ignored.
    if (has(key)) values_[key] = value;
  }

  const std::string& text(const std::string& key) const { return values_.at(key); }

  double number(const std::string& key) const {
    const std::string& s = text(key);
    const auto slash = s.find('/');
    if (slash != std::string::npos) return parse_double(key, s.substr(0, slash)) / parse_double(key, s.substr(slash + 1));
    return parse_double(key, s);
  }

  std::uint64_t count(const std::string& key) const {
    const std::string& s = text(key);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      throw UsageError("invalid value '" + s + "' for --" + dashed(key) + " (expected a non-negative integer)");
    }
    return v;
  }

  bool flag(const std::string& key) const {
    const std::string& s = text(key);
    if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "off" || s == "0" || s == "no") return false;
    throw UsageError("invalid value '" + s + "' for --" + dashed(key) + " (expected true or false)");
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  const SubcommandSpec& spec() const { return *spec_; }

 private:
  static double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
      throw UsageError("invalid value '" + s + "' for --" + dashed(key) + " (expected a number)");
    }
    return v;
  }

  const SubcommandSpec* spec_;
  std::map<std::string, std::string> values_;
};

// Returns the file's out_dir entry, if any; every other key is a setting.
std::optional<std::string> load_config_file(const std::string& path, Settings& settings) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::optional<std::string> out_dir;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    const std::string origin = path + ":" + std::to_string(n);
    if (eq == std::string::npos) throw UsageError(origin + ": expected 'key = value', got '" + trim(line) + "'");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    if (key == "out_dir") {
      out_dir = trim(line.substr(eq + 1));
    } else {
      settings.set(key, trim(line.substr(eq + 1)), origin);
    }
  }
  return out_dir;
}

void load_manifest(const std::string& path, const std::string& subcommand, Settings& settings) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read manifest '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("manifest '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.value("subcommand", "") != subcommand) {
    throw UsageError("manifest '" + path + "' records subcommand '" + j.value("subcommand", "") + "', not '" +
                     subcommand + "'");
  }
  for (const auto& [key, value] : j.at("config").items()) settings.set(key, value.get<std::string>(), path);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void require_file(const std::string& key, const std::string& path) {
  if (path.empty()) throw UsageError("--" + dashed(key) + " is required");
  if (!fs::is_regular_file(path)) throw UsageError("cannot read --" + dashed(key) + " '" + path + "'");
}

// Everything a subcommand needs, validated before any output is written.
struct Run {
  std::string subcommand;
  Settings settings;
  fs::path out_dir;
  std::ostream* out = nullptr;
  std::map<std::string, std::string> inputs;
  std::vector<std::string> outputs;

  fs::path output(const std::string& name) {
    outputs.push_back(name);
    return out_dir / name;
  }
};

std::ofstream open_output(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  return f;
}

void write_manifest(Run& run, const std::vector<std::string>& planned_outputs) {
  nlohmann::ordered_json j;
  j["tool"] = "f2at";
  j["version"] = kToolVersion;
  j["subcommand"] = run.subcommand;
  const auto& values = run.settings.values();
  j["seed"] = values.count("seed") ? values.at("seed") : "";
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& [key, value] : values) config[key] = value;
  j["config"] = config;
  j["inputs"] = run.inputs;
  j["outputs"] = planned_outputs;
  j["out_dir"] = run.out_dir.string();
  auto f = open_output(run.out_dir / "manifest.json");
  f << j.dump(2) << "\n";
}

// ---- typed views --------------------------------------------------------

AttackConfig attack_config(const Settings& s) {
  AttackConfig a;
  a.epsilon = s.number("epsilon");
  if (s.has("steps")) a.steps = s.count("steps");
  a.step_size = s.number("step_size");
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return a;
}

LossConfig loss_config(const Settings& s) {
  LossConfig l;
  l.alpha = s.number("alpha");
  l.gamma = s.number("gamma");
  l.tau = s.number("tau");
  l.upsilon = s.number("upsilon");
  try {
    l.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return l;
}

unsigned split_level(const std::string& key, std::uint64_t v) {
  if (v > kDefaultDepth) throw UsageError("--" + dashed(key) + " " + std::to_string(v) + " is outside [0, 8]");
  return static_cast<unsigned>(v);
}

TrainConfig train_config(const Settings& s) {
  TrainConfig c;
  c.epochs = s.count("epochs");
  c.batch_size = s.count("batch_size");
  c.seed = s.count("seed");
  c.attack = attack_config(s);
  c.loss = loss_config(s);
  if (s.has("k")) c.k = split_level("k", s.count("k"));
  c.learning_rate = s.number("lr");
  c.sgd.momentum = s.number("momentum");
  c.sgd.weight_decay = s.number("weight_decay");
  c.sgd.max_grad_norm = s.number("max_grad_norm");
  c.augment = s.flag("augment");
  c.probe_size = s.count("probe_size");
  c.probe_steps = s.count("probe_steps");
  if (c.sgd.momentum < 0.0 || c.sgd.momentum >= 1.0) throw UsageError("--momentum must lie in [0, 1)");
  if (c.sgd.weight_decay < 0.0) throw UsageError("--weight-decay must be non-negative");
  if (c.sgd.max_grad_norm < 0.0) throw UsageError("--max-grad-norm must be non-negative");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

std::vector<NamedAttack> attack_list(const Settings& s, const std::string& key) {
  std::vector<NamedAttack> out;
  const double eps = s.number("epsilon");
  const double step = s.number("step_size");
  for (const std::string& name : split_list(s.text(key))) {
    try {
      out.push_back(parse_named_attack(name, eps, step));
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string(e.what()) + " in --" + dashed(key));
    }
  }
  if (out.empty()) throw UsageError("--" + dashed(key) + " names no attack");
  return out;
}

struct DataPlan {
  std::string kind;
  fs::path path;
  std::uint64_t seed = 1;
  std::size_t train_size = 0, test_size = 0, classes = 2, side = 8;
};

DataPlan data_plan(const Settings& s) {
  DataPlan p;
  p.kind = s.text("dataset");
  p.path = s.text("data_path");
  p.seed = s.count("data_seed");
  p.train_size = s.count("train_size");
  p.test_size = s.count("test_size");
  p.classes = s.count("classes");
  p.side = s.count("side");
  if (p.kind == "synth") {
    if (p.classes < 2) throw UsageError("--classes must be >= 2");
    if (p.side < 8 || p.side % 4 != 0) throw UsageError("--side must be a multiple of 4 and >= 8");
    if (p.train_size < p.classes || p.test_size < 1) {
      throw UsageError("--train-size must be >= --classes and --test-size >= 1 for synthetic data");
    }
  } else if (p.kind == "cifar10") {
    if (!fs::is_regular_file(p.path / "test_batch.bin")) {
      throw UsageError("--data-path '" + p.path.string() + "' has no test_batch.bin");
    }
  } else if (p.kind == "idx") {
    for (const char* f : {"t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
      if (!fs::is_regular_file(p.path / f)) throw UsageError("--data-path '" + p.path.string() + "' has no " + f);
    }
  } else {
    throw UsageError("invalid value '" + p.kind + "' for --dataset (expected synth, cifar10 or idx)");
  }
  return p;
}

Dataset truncate(Dataset d, std::size_t n) { return n == 0 || n >= d.size() ? d : subset(d, 0, n); }

std::pair<Dataset, Dataset> load_data(const DataPlan& p, bool need_train) {
  if (p.kind == "synth") {
    const Dataset all = synth_dataset(p.seed, p.train_size + p.test_size, p.classes, p.side);
    return {subset(all, 0, p.train_size), subset(all, p.train_size, p.test_size)};
  }
  Dataset train, test;
  if (p.kind == "cifar10") {
    test = load_cifar10_binary((p.path / "test_batch.bin").string());
    if (need_train) {
      train.class_count = 10;
      for (int b = 1; b <= 5; ++b) {
        const fs::path f = p.path / ("data_batch_" + std::to_string(b) + ".bin");
        if (!fs::is_regular_file(f)) continue;
        Dataset part = load_cifar10_binary(f.string());
        train.images.insert(train.images.end(), part.images.begin(), part.images.end());
        train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
      }
    }
  } else {
    test = load_idx_dataset((p.path / "t10k-images-idx3-ubyte").string(), (p.path / "t10k-labels-idx1-ubyte").string());
    if (need_train) {
      train = load_idx_dataset((p.path / "train-images-idx3-ubyte").string(),
                               (p.path / "train-labels-idx1-ubyte").string());
    }
  }
  if (need_train && train.empty()) throw UsageError("no training data under '" + p.path.string() + "'");
  if (need_train) test.class_count = train.class_count = std::max(train.class_count, test.class_count);
  return {truncate(std::move(train), p.train_size), truncate(std::move(test), p.test_size)};
}

NetworkParams load_model(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::runtime_error& e) {
    throw UsageError("checkpoint '" + path + "': " + e.what());
  }
}

void check_compatible(const NetworkParams& p, const Dataset& d, const std::string& what) {
  const NetworkConfig c = p.config;
  const Shape s = d.image_shape();
  if (c.input_shape() != s || c.num_classes < d.class_count) {
    throw UsageError(what + " expects " + shape_string(c.input_shape()) + " inputs with " +
                     std::to_string(c.num_classes) + " classes; data is " + shape_string(s) + " with " +
                     std::to_string(d.class_count));
  }
}

// ---- subcommands --------------------------------------------------------

std::string range_of(const QuantImage& q) {
  const auto [lo, hi] = std::minmax_element(q.data().begin(), q.data().end());
  return "[" + std::to_string(*lo) + ", " + std::to_string(*hi) + "]";
}

int cmd_slice(Run& run) {
  const Settings& s = run.settings;
  const unsigned k = split_level("k", s.count("k"));
  const std::string input = s.text("input");
  const AttackConfig attack = attack_config(s);
  const std::uint64_t seed = s.count("seed");
  const std::size_t count = s.count("count");
  std::vector<QuantImage> clean;
  std::vector<std::size_t> labels;
  std::optional<NetworkParams> model;
  if (!input.empty()) {
    require_file("input", input);
    run.inputs["input"] = input;
    std::ifstream in(input);
    try {
      clean.push_back(read_plane_image(in));
    } catch (const std::exception& e) {
      throw UsageError("--input '" + input + "': " + e.what());
    }
  } else {
    const DataPlan plan = data_plan(s);
    run.inputs["dataset"] = plan.kind;
    const Dataset test = load_data(plan, false).second;
    clean = test.images;
    labels = test.labels;
    if (!s.text("checkpoint").empty()) {
      require_file("checkpoint", s.text("checkpoint"));
      run.inputs["checkpoint"] = s.text("checkpoint");
      model = load_model(s.text("checkpoint"));
      check_compatible(*model, test, "checkpoint");
    }
  }

  // Adversarial counterpart of every image: PGD on the checkpoint if one is
  // given, otherwise a random sign perturbation of round(255 * epsilon) levels.
  std::vector<QuantImage> adv;
  Rng rng(seed);
  if (model) {
    const NetworkClassifier net(*model);
    Dataset d;
    d.images = clean;
    d.labels = labels;
    d.class_count = model->config.num_classes;
    for (std::size_t start = 0, b = 0; start < d.size(); start += 128, ++b) {
      std::vector<std::size_t> idx(std::min<std::size_t>(128, d.size() - start));
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
      Rng batch_rng(derive_seed(seed, b));
      const Tensor x = generate_adversarial(AttackMethod::kPgd, net, to_batch(d, idx), labels_of(d, idx), attack,
                                            batch_rng);
      const std::size_t per = x.size() / idx.size();
      for (std::size_t e = 0; e < idx.size(); ++e) {
        const Shape sh = d.image_shape();
        Tensor one(sh, std::vector<double>(x.data().begin() + e * per, x.data().begin() + (e + 1) * per));
        adv.push_back(quantize(one, clean[0].depth()));
      }
    }
  } else {
    for (const QuantImage& q : clean) {
      const auto levels = static_cast<int>(std::lround(attack.epsilon * q.max_value()));
      std::vector<std::uint16_t> px(q.data().begin(), q.data().end());
      for (auto& v : px) {
        const int shifted = static_cast<int>(v) + (rng.coin() ? levels : -levels);
        v = static_cast<std::uint16_t>(std::clamp(shifted, 0, static_cast<int>(q.max_value())));
      }
      adv.emplace_back(q.depth(), q.channels(), q.height(), q.width(), std::move(px));
    }
  }

  fs::create_directories(run.out_dir);
  write_manifest(run, {"pattern_pairs.txt", "discrepancy.csv"});
  {
    auto f = open_output(run.output("pattern_pairs.txt"));
    for (std::size_t i = 0; i < std::min(count, clean.size()); ++i) write_pattern_pair(f, slice(clean[i], k));
  }
  {
    auto f = open_output(run.output("discrepancy.csv"));
    f << "k,discrepancy_ratio\n";
    for (unsigned kk = 0; kk <= clean[0].depth(); ++kk) f << kk << "," << num(discrepancy_ratio(clean, adv, kk)) << "\n";
  }
  const PatternPair first = slice(clean[0], k);
  *run.out << "k=" << k << " natural " << range_of(first.natural) << " perturbed " << range_of(first.perturbed)
           << " discrepancy_ratio " << num(discrepancy_ratio(clean, adv, k)) << "\n";
  return 0;
}

int cmd_mi_verify(Run& run) {
  const Settings& s = run.settings;
  const std::size_t trials = s.count("trials");
  const std::uint64_t seed = s.count("seed");
  if (trials < 1) throw UsageError("--trials must be >= 1");
  fs::create_directories(run.out_dir);
  write_manifest(run, {"mi_verify.jsonl"});
  auto f = open_output(run.output("mi_verify.jsonl"));
  double identity_max = 0.0, five_term_max = 0.0, equality_max = 0.0;
  double triple_lo = 0.0, triple_hi = 0.0;
  static const char* kNames[] = {"X", "Y", "Z"};
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, 2 * t));
    std::vector<info::Variable> vars;
    const std::size_t n = 2 + rng.below(2);
    for (std::size_t v = 0; v < n; ++v) vars.push_back({kNames[v], 2 + rng.below(7)});
    const info::JointTable table = info::random_table(rng, vars);
    for (const info::Residual& r : info::verify_identities(table)) {
      nlohmann::ordered_json j;
      j["suite"] = "identities";
      j["trial"] = t;
      j["name"] = r.name;
      j["residual"] = r.residual;
      f << j.dump() << "\n";
      identity_max = std::max(identity_max, r.residual);
    }
  }
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, 2 * t + 1));
    const info::TheoremReport r = info::verify_theorems(info::make_bitplane_system(rng, {}));
    const std::pair<const char*, double> rows[] = {
        {"decomposition.five_term", r.theorem1_residual},
        {"decomposition.entropy_equality", r.h_equality_residual},
    };
    for (const auto& [name, value] : rows) {
      nlohmann::ordered_json j;
      j["suite"] = "theorems";
      j["trial"] = t;
      j["name"] = name;
      j["residual"] = value;
      f << j.dump() << "\n";
    }
    nlohmann::ordered_json j;
    j["suite"] = "theorems";
    j["trial"] = t;
    j["name"] = "decomposition.triple_mi";
    j["value"] = r.triple_mi_value;
    j["linear_approximation_error"] = r.linear_approximation_error;
    f << j.dump() << "\n";
    five_term_max = std::max(five_term_max, r.theorem1_residual);
    equality_max = std::max(equality_max, r.h_equality_residual);
    triple_lo = t == 0 ? r.triple_mi_value : std::min(triple_lo, r.triple_mi_value);
    triple_hi = t == 0 ? r.triple_mi_value : std::max(triple_hi, r.triple_mi_value);
  }
  *run.out << "identity max residual " << num(identity_max) << "; five-term max residual " << num(five_term_max)
           << "; entropy equality max residual " << num(equality_max) << "; triple MI range [" << num(triple_lo)
           << ", " << num(triple_hi) << "] bits\n";
  if (std::max({identity_max, five_term_max, equality_max}) > 1e-12) {
    throw std::runtime_error("residual above 1e-12 (see mi_verify.jsonl)");
  }
  return 0;
}

int cmd_attack(Run& run) {
  const Settings& s = run.settings;
  const AttackMethod method = [&] {
    try {
      return parse_attack_method(s.text("method"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }();
  AttackConfig attack = attack_config(s);
  if (method == AttackMethod::kFgsm) attack.steps = 1;
  const std::uint64_t seed = s.count("seed");
  const std::size_t batch = s.count("batch_size");
  if (batch < 1) throw UsageError("--batch-size must be >= 1");
  require_file("checkpoint", s.text("checkpoint"));
  run.inputs["checkpoint"] = s.text("checkpoint");
  const NetworkParams target = load_model(s.text("checkpoint"));
  std::optional<NetworkParams> surrogate;
  if (!s.text("surrogate").empty()) {
    require_file("surrogate", s.text("surrogate"));
    run.inputs["surrogate"] = s.text("surrogate");
    surrogate = load_model(s.text("surrogate"));
  }
  const DataPlan plan = data_plan(s);
  run.inputs["dataset"] = plan.kind;
  const Dataset test = load_data(plan, false).second;
  check_compatible(target, test, "checkpoint");
  if (surrogate) check_compatible(*surrogate, test, "surrogate");

  fs::create_directories(run.out_dir);
  write_manifest(run, {"attack.csv"});
  const NetworkClassifier target_net(target);
  const NetworkClassifier surrogate_net(surrogate ? *surrogate : target);
  const auto records = attack_dataset(surrogate_net, target_net, test, method, attack, seed, batch);
  auto f = open_output(run.output("attack.csv"));
  f << "index,label,clean_prediction,adversarial_prediction,linf\n";
  for (const AttackRecord& r : records) {
    f << r.index << "," << r.label << "," << r.clean_prediction << "," << r.adversarial_prediction << ","
      << num(r.linf) << "\n";
  }
  *run.out << attack_method_name(method) << (surrogate ? " transfer" : " white-box") << " clean_accuracy "
           << num(clean_accuracy(records)) << " robust_accuracy " << num(robust_accuracy(records)) << "\n";
  return 0;
}

int cmd_train(Run& run) {
  const Settings& s = run.settings;
  const TrainMethod method = [&] {
    try {
      return parse_train_method(s.text("method"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }();
  const TrainConfig config = train_config(s);
  const DataPlan plan = data_plan(s);
  run.inputs["dataset"] = plan.kind;
  const auto [train_set, test_set] = load_data(plan, true);

  fs::create_directories(run.out_dir);
  write_manifest(run, {"metrics.jsonl", "timing.jsonl", "checkpoint.f2at"});
  auto metrics = open_output(run.output("metrics.jsonl"));
  auto timing = open_output(run.output("timing.jsonl"));
  const TrainResult result = train(method, config, train_set, test_set, [&](const EpochRecord& r, const NetworkParams&) {
    metrics << metrics_json(r) << "\n" << std::flush;
    nlohmann::ordered_json t;
    t["epoch"] = r.epoch;
    t["wall_seconds"] = r.wall_seconds;
    timing << t.dump() << "\n" << std::flush;
  });
  save_checkpoint((run.out_dir / "checkpoint.f2at").string(), result.params);
  run.outputs.push_back("checkpoint.f2at");
  const EpochRecord& last = result.metrics.epochs.back();
  *run.out << train_method_name(method) << " epochs " << result.metrics.epochs.size() << " clean_accuracy "
           << num(last.clean_accuracy) << " probe_robust_accuracy "
           << (std::isnan(last.robust_accuracy) ? std::string("n/a") : num(last.robust_accuracy)) << "\n";
  return 0;
}

std::vector<std::pair<std::string, std::string>> checkpoint_list(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const std::string& item : split_list(text)) {
    const auto eq = item.find('=');
    if (eq != std::string::npos) {
      out.push_back({item.substr(0, eq), item.substr(eq + 1)});
    } else {
      out.push_back({fs::path(item).stem().string(), item});
    }
  }
  if (out.empty()) throw UsageError("--checkpoint is required");
  return out;
}

void write_header(std::ostream& f, const std::string& lead, const std::vector<NamedAttack>& attacks) {
  f << lead << ",clean";
  for (const NamedAttack& a : attacks) f << "," << a.name;
  f << "\n";
}

int cmd_eval(Run& run) {
  const Settings& s = run.settings;
  const auto attacks = attack_list(s, "attacks");
  const std::uint64_t seed = s.count("seed");
  const auto list = checkpoint_list(s.text("checkpoint"));
  std::vector<std::pair<std::string, NetworkParams>> models;
  for (const auto& [name, path] : list) {
    require_file("checkpoint", path);
    run.inputs["checkpoint:" + name] = path;
    models.push_back({name, load_model(path)});
  }
  std::optional<NetworkParams> surrogate;
  if (!s.text("surrogate").empty()) {
    require_file("surrogate", s.text("surrogate"));
    run.inputs["surrogate"] = s.text("surrogate");
    surrogate = load_model(s.text("surrogate"));
  }
  const DataPlan plan = data_plan(s);
  run.inputs["dataset"] = plan.kind;
  const Dataset test = load_data(plan, false).second;
  for (const auto& [name, params] : models) check_compatible(params, test, "checkpoint '" + name + "'");
  if (surrogate) check_compatible(*surrogate, test, "surrogate");

  fs::create_directories(run.out_dir);
  write_manifest(run, {"eval.csv"});
  auto f = open_output(run.output("eval.csv"));
  write_header(f, "defense,mode", attacks);
  for (const auto& [name, params] : models) {
    const NetworkClassifier model(params);
    const EvalRow row = evaluate_grid(name, model, test, attacks, seed);
    f << name << ",white-box," << num(row.clean_accuracy);
    for (double v : row.robust_accuracy) f << "," << num(v);
    f << "\n";
    *run.out << name << " white-box clean " << num(row.clean_accuracy);
    for (std::size_t i = 0; i < attacks.size(); ++i) *run.out << " " << attacks[i].name << " " << num(row.robust_accuracy[i]);
    *run.out << "\n";
    if (surrogate) {
      const NetworkClassifier source(*surrogate);
      f << name << ",black-box," << num(row.clean_accuracy);
      for (std::size_t i = 0; i < attacks.size(); ++i) {
        f << "," << num(transfer_attack(source, model, test, attacks[i].method, attacks[i].config, derive_seed(seed, i)));
      }
      f << "\n";
    }
  }
  return 0;
}

int cmd_ksweep(Run& run) {
  const Settings& s = run.settings;
  const TrainConfig config = train_config(s);
  const auto attacks = attack_list(s, "attacks");
  std::vector<unsigned> ks;
  for (const std::string& item : split_list(s.text("k_values"))) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw UsageError("invalid value '" + item + "' in --k-values");
    }
    ks.push_back(split_level("k-values", v));
  }
  if (ks.empty()) throw UsageError("--k-values names no K");
  const DataPlan plan = data_plan(s);
  run.inputs["dataset"] = plan.kind;
  const auto [train_set, test_set] = load_data(plan, true);

  fs::create_directories(run.out_dir);
  write_manifest(run, {"ksweep.csv"});
  auto f = open_output(run.output("ksweep.csv"));
  write_header(f, "k", attacks);
  for (const KSweepRow& row : k_sweep(config, ks, train_set, test_set, attacks)) {
    f << row.k << "," << num(row.eval.clean_accuracy);
    for (double v : row.eval.robust_accuracy) f << "," << num(v);
    f << "\n" << std::flush;
    *run.out << "k " << row.k << " clean " << num(row.eval.clean_accuracy) << "\n";
  }
  return 0;
}

int cmd_report(Run& run) {
  const Settings& s = run.settings;
  const std::uint64_t seed = s.count("seed");
  const std::size_t bins = s.count("bins");
  if (bins < 1) throw UsageError("--bins must be >= 1");
  NamedAttack attack;
  try {
    attack = parse_named_attack(s.text("attack"), s.number("epsilon"), s.number("step_size"));
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string(e.what()) + " in --attack");
  }
  require_file("checkpoint", s.text("checkpoint"));
  run.inputs["checkpoint"] = s.text("checkpoint");
  const NetworkParams params = load_model(s.text("checkpoint"));
  const DataPlan plan = data_plan(s);
  run.inputs["dataset"] = plan.kind;
  const Dataset test = load_data(plan, false).second;
  check_compatible(params, test, "checkpoint");

  fs::create_directories(run.out_dir);
  write_manifest(run, {"class_frequency.csv", "confidence_histogram.csv", "margins.csv"});
  const NetworkClassifier model(params);
  const Diagnostics d = diagnostics(model, test, attack, seed);
  {
    auto f = open_output(run.output("class_frequency.csv"));
    f << "class,clean_count,adversarial_count\n";
    for (std::size_t c = 0; c < d.clean_class_frequency.size(); ++c) {
      f << c << "," << d.clean_class_frequency[c] << "," << d.adversarial_class_frequency[c] << "\n";
    }
  }
  {
    auto f = open_output(run.output("confidence_histogram.csv"));
    f << "bin_low,bin_high,clean_count,adversarial_count\n";
    const auto hc = histogram(d.clean_confidence, bins);
    const auto ha = histogram(d.adversarial_confidence, bins);
    for (std::size_t b = 0; b < bins; ++b) {
      f << num(static_cast<double>(b) / bins) << "," << num(static_cast<double>(b + 1) / bins) << "," << hc[b] << ","
        << ha[b] << "\n";
    }
  }
  {
    auto f = open_output(run.output("margins.csv"));
    f << "index,label,clean_confidence,adversarial_confidence,clean_margin,adversarial_margin\n";
    for (std::size_t i = 0; i < test.size(); ++i) {
      f << i << "," << test.labels[i] << "," << num(d.clean_confidence[i]) << "," << num(d.adversarial_confidence[i])
        << "," << num(d.clean_margin[i]) << "," << num(d.adversarial_margin[i]) << "\n";
    }
  }
  *run.out << "report " << attack.name << " on " << test.size() << " examples\n";
  return 0;
}

int dispatch(Run& run) {
  const std::string& name = run.subcommand;
  if (name == "slice") return cmd_slice(run);
  if (name == "mi-verify") return cmd_mi_verify(run);
  if (name == "attack") return cmd_attack(run);
  if (name == "train") return cmd_train(run);
  if (name == "eval") return cmd_eval(run);
  if (name == "ksweep") return cmd_ksweep(run);
  if (name == "report") return cmd_report(run);
  throw UsageError("unknown subcommand '" + name + "'");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"f2at: bit-plane feature-factorized adversarial training toolkit", "f2at"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string("f2at ") + kToolVersion);

  struct Bound {
    const SubcommandSpec* spec;
    CLI::App* app;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    std::string config, manifest, out_dir;
    CLI::Option* out_dir_opt = nullptr;
  };
  std::vector<std::unique_ptr<Bound>> bound;
  for (const SubcommandSpec& spec : subcommands()) {
    auto b = std::make_unique<Bound>();
    b->spec = &spec;
    b->app = app.add_subcommand(spec.name, spec.help);
    for (const auto& [key, override] : spec.keys) {
      const KeySpec& k = key_spec(key);
      b->options[key] = b->app->add_option("--" + dashed(key), b->values[key], k.help);
    }
    b->app->add_option("--config", b->config, "flat key = value file; flags override it");
    b->app->add_option("--manifest", b->manifest, "replay the configuration recorded in a manifest");
    b->out_dir_opt = b->app->add_option("--out-dir", b->out_dir, "output directory (default $F2AT_OUT, else f2at_out)");
    bound.push_back(std::move(b));
  }

  // Name the offending token before CLI11 reports it less directly.
  if (!args.empty() && !args[0].starts_with("-")) {
    const auto it = std::find_if(bound.begin(), bound.end(), [&](const auto& b) { return b->spec->name == args[0]; });
    if (it == bound.end()) {
      err << "f2at: error: unknown subcommand '" << args[0] << "'\n";
      return 2;
    }
    for (const std::string& a : args) {
      if (!a.starts_with("--")) continue;
      const std::string flag = a.substr(0, a.find('='));
      if (flag == "--help" || flag == "--version") continue;
      bool known = false;
      for (const CLI::Option* opt : (*it)->app->get_options()) known = known || opt->check_lname(flag.substr(2));
      if (!known) {
        err << "f2at: error: unknown flag '" << flag << "' for '" << args[0] << "'\n";
        return 2;
      }
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << "f2at " << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "f2at: error: " << msg << "\n";
    return 2;
  }

  const Bound* chosen = nullptr;
  for (const auto& b : bound) {
    if (b->app->parsed()) chosen = b.get();
  }
  try {
    Run run{chosen->spec->name, Settings(*chosen->spec), {}, &out, {}, {}};
    if (!chosen->manifest.empty()) load_manifest(chosen->manifest, run.subcommand, run.settings);
    std::optional<std::string> file_out_dir;
    if (!chosen->config.empty()) file_out_dir = load_config_file(chosen->config, run.settings);
    for (const auto& [key, opt] : chosen->options) {
      if (opt->count() > 0) run.settings.set(key, chosen->values.at(key), "--" + dashed(key));
    }
    if (chosen->out_dir_opt->count() > 0) {
      run.out_dir = chosen->out_dir;
    } else if (file_out_dir) {
      run.out_dir = *file_out_dir;
    } else if (const char* env = std::getenv("F2AT_OUT"); env && *env) {
      run.out_dir = env;
    } else {
      run.out_dir = "f2at_out";
    }
    // Reductions are not bitwise equal across backends, so the manifest
    // records the one used and a replay selects it again.
    if (run.settings.has("kernels")) {
      if (!run.settings.text("kernels").empty()) {
        try {
          kernels::set_backend(kernels::parse_backend(run.settings.text("kernels")));
        } catch (const std::exception& e) {
          throw UsageError(std::string(e.what()) + " (--kernels)");
        }
      }
      run.settings.set("kernels", std::string(kernels::backend_name(kernels::active_backend())), "kernels");
    }
    return dispatch(run);
  } catch (const UsageError& e) {
    err << "f2at: error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "f2at: error: " << e.what() << "\n";
    return 1;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace f2at::cli
