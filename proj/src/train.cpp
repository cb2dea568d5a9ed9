#include "f2at/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace f2at {

TrainMethod parse_train_method(std::string_view name) {
  if (name == "f2at") return TrainMethod::kF2at;
  if (name == "sat") return TrainMethod::kSat;
  throw std::invalid_argument("unknown training method '" + std::string(name) + "' (expected f2at or sat)");
}

std::string_view train_method_name(TrainMethod method) { return method == TrainMethod::kF2at ? "f2at" : "sat"; }

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (k > kDefaultDepth) throw std::invalid_argument("k must lie in [0, 8]");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  for (double m : milestones) {
    if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("lr milestones must be epoch fractions in [0, 1]");
  }
  if (probe_size > 0 && probe_steps < 1) throw std::invalid_argument("probe_steps must be >= 1");
  attack.validate();
  loss.validate();
}

NetworkConfig network_config_for(const Dataset& data) {
  const Shape s = data.image_shape();
  NetworkConfig c;
  c.channels = s[0];
  c.height = s[1];
  c.width = s[2];
  c.num_classes = data.class_count;
  c.validate();
  return c;
}

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kBatchTag = 2;
constexpr std::uint64_t kAttackTag = 3;
constexpr std::uint64_t kProbeTag = 4;

std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

}  // namespace

double clean_accuracy(const Classifier& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw std::invalid_argument("clean_accuracy: dataset is empty");
  std::size_t hits = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto idx = iota_indices(start, std::min(batch_size, data.size() - start));
    const auto pred = predict_labels(model, to_batch(data, idx));
    for (std::size_t e = 0; e < idx.size(); ++e) hits += pred[e] == data.labels[idx[e]];
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainResult train(TrainMethod method, const TrainConfig& config, const Dataset& train_set, const Dataset& eval_set,
                  const EpochCallback& on_epoch) {
  config.validate();
  train_set.validate();
  eval_set.validate();
  if (train_set.empty() || eval_set.empty()) throw std::invalid_argument("training and evaluation sets must be non-empty");
  if (train_set.image_shape() != eval_set.image_shape() || train_set.class_count != eval_set.class_count) {
    throw std::invalid_argument("training and evaluation sets differ in geometry or class count");
  }

  LossConfig loss = config.loss;
  if (method == TrainMethod::kSat) loss.alpha = loss.gamma = 0.0;

  TrainResult result;
  result.params = init_network(network_config_for(train_set), derive_seed(config.seed, kInitTag));
  OptimizerState state = make_optimizer_state(result.params, config.learning_rate);
  const Dataset probe = subset(eval_set, 0, std::min(config.probe_size, eval_set.size()));
  AttackConfig probe_attack = config.attack;
  probe_attack.steps = config.probe_steps;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = learning_rate(config.learning_rate, epoch, config.epochs, config.milestones);
    BatchStream stream(train_set, config.batch_size, derive_seed(derive_seed(config.seed, kBatchTag), epoch), true,
                       config.augment);
    LossBreakdown sum;
    std::size_t batches = 0;
    while (auto batch = stream.next()) {
      Tensor adv = batch->images;
      if (config.attack.epsilon > 0.0) {
        const NetworkClassifier model(result.params);
        Rng rng(derive_seed(derive_seed(config.seed, kAttackTag), epoch * 1000003 + batches));
        adv = generate_adversarial(AttackMethod::kPgd, model, batch->images, batch->labels, config.attack, rng);
      }

      Graph g;
      const BoundNetwork net = bind(g, result.params, true);
      const LossNodes nodes = build_total_loss(g, net, adv, batch->labels, loss, config.k);
      const LossBreakdown b = breakdown(g, nodes);
      if (!std::isfinite(b.total) || !std::isfinite(b.ce) || !std::isfinite(b.pd) || !std::isfinite(b.mg_soft)) {
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batches));
      }
      const Gradients grads = g.backward(method == TrainMethod::kSat ? nodes.ce : nodes.total);
      std::vector<Tensor> param_grads;
      for (NodeId id : net.all()) param_grads.push_back(grads[id]);
      sgd_step(result.params, param_grads, state, lr, config.sgd);

      sum.ce += b.ce;
      sum.pd += b.pd;
      sum.mg_soft += b.mg_soft;
      sum.total += b.total;
      ++batches;
    }
    state.epoch = epoch + 1;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const double n = static_cast<double>(batches);
    rec.loss = {sum.ce / n, sum.pd / n, sum.mg_soft / n, sum.total / n};
    const NetworkClassifier model(result.params);
    rec.clean_accuracy = clean_accuracy(model, eval_set);
    if (!probe.empty()) {
      rec.robust_accuracy = evaluate_robustness(model, probe, AttackMethod::kPgd, probe_attack,
                                                derive_seed(derive_seed(config.seed, kProbeTag), epoch));
    } else {
      rec.robust_accuracy = std::numeric_limits<double>::quiet_NaN();
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, result.params);
  }
  return result;
}

TrainResult train_f2at(const TrainConfig& config, const Dataset& train_set, const Dataset& eval_set,
                       const EpochCallback& on_epoch) {
  return train(TrainMethod::kF2at, config, train_set, eval_set, on_epoch);
}

TrainResult train_sat(const TrainConfig& config, const Dataset& train_set, const Dataset& eval_set,
                      const EpochCallback& on_epoch) {
  return train(TrainMethod::kSat, config, train_set, eval_set, on_epoch);
}

std::string metrics_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["ce"] = r.loss.ce;
  j["pd"] = r.loss.pd;
  j["mg_soft"] = r.loss.mg_soft;
  j["total"] = r.loss.total;
  j["clean_accuracy"] = r.clean_accuracy;
  if (std::isnan(r.robust_accuracy)) {
    j["robust_accuracy"] = nullptr;
  } else {
    j["robust_accuracy"] = r.robust_accuracy;
  }
  return j.dump();
}

std::vector<NamedAttack> default_attack_grid(double epsilon, double step_size) {
  std::vector<NamedAttack> out;
  for (const char* name : {"fgsm", "pgd20", "pgd100", "mifgsm"}) out.push_back(parse_named_attack(name, epsilon, step_size));
  return out;
}

NamedAttack parse_named_attack(std::string_view name, double epsilon, double step_size) {
  NamedAttack a;
  a.name = std::string(name);
  a.config.epsilon = epsilon;
  a.config.step_size = step_size;
  if (name == "fgsm") {
    a.method = AttackMethod::kFgsm;
    a.config.steps = 1;
  } else if (name.rfind("pgd", 0) == 0 && name.size() > 3) {
    a.method = AttackMethod::kPgd;
    const std::string digits(name.substr(3));
    if (digits.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument("unknown attack '" + std::string(name) + "'");
    }
    a.config.steps = std::stoul(digits);
  } else if (name == "mifgsm") {
    a.method = AttackMethod::kMiFgsm;
    a.config.steps = 10;
  } else {
    throw std::invalid_argument("unknown attack '" + std::string(name) + "' (expected fgsm, pgdT or mifgsm)");
  }
  a.config.validate();
  return a;
}

EvalRow evaluate_grid(const std::string& defense, const Classifier& model, const Dataset& data,
                      const std::vector<NamedAttack>& attacks, std::uint64_t seed) {
  EvalRow row;
  row.defense = defense;
  row.clean_accuracy = clean_accuracy(model, data);
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    row.robust_accuracy.push_back(
        evaluate_robustness(model, data, attacks[i].method, attacks[i].config, derive_seed(seed, i)));
  }
  return row;
}

std::vector<KSweepRow> k_sweep(const TrainConfig& config, const std::vector<unsigned>& k_values,
                               const Dataset& train_set, const Dataset& eval_set,
                               const std::vector<NamedAttack>& attacks) {
  for (unsigned k : k_values) {
    if (k > kDefaultDepth) throw std::invalid_argument("k " + std::to_string(k) + " outside [0, 8]");
  }
  std::vector<KSweepRow> rows;
  for (unsigned k : k_values) {
    TrainConfig c = config;
    c.k = k;
    const TrainResult run = train_f2at(c, train_set, eval_set);
    const NetworkClassifier model(run.params);
    rows.push_back({k, evaluate_grid("f2at", model, eval_set, attacks, config.seed)});
  }
  return rows;
}

std::vector<double> softmax_row(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - top);
  for (double& v : out) v /= z;
  return out;
}

Diagnostics diagnostics(const Classifier& model, const Dataset& data, const NamedAttack& attack,
                        std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("diagnostics: dataset is empty");
  const std::size_t classes = model.num_classes();
  Diagnostics d;
  d.clean_class_frequency.assign(classes, 0);
  d.adversarial_class_frequency.assign(classes, 0);
  const std::size_t batch_size = 128;
  for (std::size_t start = 0, b = 0; start < data.size(); start += batch_size, ++b) {
    const auto idx = iota_indices(start, std::min(batch_size, data.size() - start));
    const Tensor x = to_batch(data, idx);
    const auto y = labels_of(data, idx);
    Rng rng(derive_seed(seed, b));
    const Tensor adv = generate_adversarial(attack.method, model, x, y, attack.config, rng);
    auto record = [&](const Tensor& batch, std::vector<std::size_t>& freq, std::vector<double>& conf,
                      std::vector<double>& marg) {
      const Tensor logits = predict_logits(model, batch);
      for (std::size_t e = 0; e < idx.size(); ++e) {
        const std::span<const double> row = logits.data().subspan(e * classes, classes);
        const auto p = softmax_row(row);
        const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        ++freq[best];
        conf.push_back(p[best]);
        marg.push_back(margin(row, y[e]));
      }
    };
    record(x, d.clean_class_frequency, d.clean_confidence, d.clean_margin);
    record(adv, d.adversarial_class_frequency, d.adversarial_confidence, d.adversarial_margin);
  }
  return d;
}

std::vector<std::size_t> histogram(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  std::vector<std::size_t> out(bins, 0);
  for (double v : values) {
    const auto b = static_cast<std::size_t>(std::clamp(v, 0.0, 1.0) * static_cast<double>(bins));
    ++out[std::min(b, bins - 1)];
  }
  return out;
}

}  // namespace f2at
