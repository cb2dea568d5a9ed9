#include "f2at/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace f2at {

AttackMethod parse_attack_method(std::string_view name) {
  if (name == "fgsm") return AttackMethod::kFgsm;
  if (name == "pgd") return AttackMethod::kPgd;
  if (name == "mifgsm" || name == "mi-fgsm") return AttackMethod::kMiFgsm;
  throw std::invalid_argument("unknown attack method '" + std::string(name) + "'");
}

std::string_view attack_method_name(AttackMethod method) {
  switch (method) {
    case AttackMethod::kFgsm:
      return "fgsm";
    case AttackMethod::kPgd:
      return "pgd";
    case AttackMethod::kMiFgsm:
      return "mifgsm";
  }
  return "unknown";
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("attack epsilon must lie in [0, 1]");
  if (steps < 1) throw std::invalid_argument("attack steps must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("attack step size must be positive");
  if (!(momentum_decay >= 0.0)) throw std::invalid_argument("attack momentum decay must be non-negative");
}

LossGradient input_gradient(const Classifier& model, const Tensor& batch, const std::vector<std::size_t>& labels) {
  Graph g;
  const NodeId x = g.input(batch, true);
  const NodeId loss = g.mean(g.softmax_cross_entropy(model.logits(g, x), labels));
  LossGradient out;
  out.loss = g.value(loss).item();
  out.gradient = g.backward(loss)[x];
  if (!std::isfinite(out.loss) || !out.gradient.all_finite()) {
    throw std::runtime_error("attack aborted: non-finite loss or input gradient");
  }
  return out;
}

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Clip into [x - eps, x + eps] and then [0, 1].
void project(Tensor& adv, const Tensor& clean, double epsilon) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double v = std::min(std::max(adv[i], clean[i] - epsilon), clean[i] + epsilon);
    adv[i] = std::min(std::max(v, 0.0), 1.0);
  }
}

void check_input(const Classifier& model, const Tensor& batch, const std::vector<std::size_t>& labels) {
  const Shape in = model.input_shape();
  if (batch.rank() != 4 || !std::equal(in.begin(), in.end(), batch.shape().begin() + 1)) {
    throw std::invalid_argument("attack: batch " + shape_string(batch.shape()) + " does not match model input " +
                                shape_string(in));
  }
  if (labels.size() != batch.dim(0)) throw std::invalid_argument("attack: one label per example required");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!(batch[i] >= 0.0 && batch[i] <= 1.0)) {
      throw std::invalid_argument("attack: input entry " + std::to_string(i) + " outside [0, 1]");
    }
  }
}

}  // namespace

Tensor generate_adversarial(AttackMethod method, const Classifier& model, const Tensor& batch,
                            const std::vector<std::size_t>& labels, const AttackConfig& config, Rng& rng) {
  config.validate();
  check_input(model, batch, labels);
  const double eps = config.epsilon;

  if (method == AttackMethod::kFgsm) {
    const Tensor grad = input_gradient(model, batch, labels).gradient;
    Tensor adv = batch;
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = batch[i] + eps * sign_of(grad[i]);
    project(adv, batch, eps);
    return adv;
  }

  Tensor adv = batch;
  if (method == AttackMethod::kPgd && config.random_start) {
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = batch[i] + rng.uniform(-eps, eps);
    project(adv, batch, eps);
  }

  const std::size_t n = batch.dim(0);
  const std::size_t per_example = batch.size() / std::max<std::size_t>(n, 1);
  Tensor momentum(batch.shape());
  for (std::size_t step = 0; step < config.steps; ++step) {
    const Tensor grad = input_gradient(model, adv, labels).gradient;
    if (method == AttackMethod::kMiFgsm) {
      for (std::size_t e = 0; e < n; ++e) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < per_example; ++j) l1 += std::abs(grad[e * per_example + j]);
        for (std::size_t j = 0; j < per_example; ++j) {
          const std::size_t i = e * per_example + j;
          momentum[i] = config.momentum_decay * momentum[i] + (l1 > 0.0 ? grad[i] / l1 : 0.0);
        }
      }
      for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += config.step_size * sign_of(momentum[i]);
    } else {
      for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += config.step_size * sign_of(grad[i]);
    }
    project(adv, batch, eps);
  }
  return adv;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("linf_distance: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<AttackRecord> attack_dataset(const Classifier& surrogate, const Classifier& target, const Dataset& data,
                                         AttackMethod method, const AttackConfig& config, std::uint64_t seed,
                                         std::size_t batch_size) {
  if (surrogate.input_shape() != target.input_shape()) {
    throw std::invalid_argument("surrogate input " + shape_string(surrogate.input_shape()) +
                                " differs from target input " + shape_string(target.input_shape()));
  }
  if (data.empty()) throw std::invalid_argument("attack: dataset is empty");
  if (batch_size == 0) throw std::invalid_argument("attack: batch size must be >= 1");
  config.validate();
  std::vector<AttackRecord> records;
  records.reserve(data.size());
  for (std::size_t start = 0, b = 0; start < data.size(); start += batch_size, ++b) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor x = to_batch(data, idx);
    const std::vector<std::size_t> y = labels_of(data, idx);
    Rng rng(derive_seed(seed, b));
    const Tensor adv = generate_adversarial(method, surrogate, x, y, config, rng);
    const std::vector<std::size_t> clean_pred = predict_labels(target, x);
    const std::vector<std::size_t> adv_pred = predict_labels(target, adv);
    const std::size_t per_example = x.size() / idx.size();
    for (std::size_t e = 0; e < idx.size(); ++e) {
      double d = 0.0;
      for (std::size_t j = 0; j < per_example; ++j) {
        d = std::max(d, std::abs(adv[e * per_example + j] - x[e * per_example + j]));
      }
      records.push_back({idx[e], y[e], clean_pred[e], adv_pred[e], d});
    }
  }
  return records;
}

double robust_accuracy(const std::vector<AttackRecord>& records) {
  if (records.empty()) return 0.0;
  const auto hits = std::count_if(records.begin(), records.end(),
                                  [](const AttackRecord& r) { return r.adversarial_prediction == r.label; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double clean_accuracy(const std::vector<AttackRecord>& records) {
  if (records.empty()) return 0.0;
  const auto hits = std::count_if(records.begin(), records.end(),
                                  [](const AttackRecord& r) { return r.clean_prediction == r.label; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double evaluate_robustness(const Classifier& model, const Dataset& data, AttackMethod method,
                           const AttackConfig& config, std::uint64_t seed, std::size_t batch_size) {
  return robust_accuracy(attack_dataset(model, model, data, method, config, seed, batch_size));
}

double transfer_attack(const Classifier& surrogate, const Classifier& target, const Dataset& data,
                       AttackMethod method, const AttackConfig& config, std::uint64_t seed, std::size_t batch_size) {
  return robust_accuracy(attack_dataset(surrogate, target, data, method, config, seed, batch_size));
}

}  // namespace f2at
