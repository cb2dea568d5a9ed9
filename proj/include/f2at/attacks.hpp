#pragma once
// L-infinity gradient attacks on cross-entropy: FGSM, PGD, MI-FGSM, and a
// transfer harness that crafts on a surrogate and scores on a target.

#include <cstdint>
#include <string_view>
#include <vector>

#include "f2at/data.hpp"
#include "f2at/model.hpp"
#include "f2at/random.hpp"

namespace f2at {

enum class AttackMethod { kFgsm, kPgd, kMiFgsm };

AttackMethod parse_attack_method(std::string_view name);
std::string_view attack_method_name(AttackMethod method);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 10;
  double step_size = 0.007;
  double momentum_decay = 1.0;  // MI-FGSM only
  bool random_start = true;     // PGD only

  // Throws std::invalid_argument unless 0 <= epsilon <= 1, steps >= 1 and
  // step_size > 0.
  void validate() const;
};

struct LossGradient {
  double loss = 0.0;  // mean cross-entropy over the batch
  Tensor gradient;    // d loss / d input, shape of the batch
};

// Throws std::runtime_error if the loss or gradient is non-finite.
LossGradient input_gradient(const Classifier& model, const Tensor& batch, const std::vector<std::size_t>& labels);

// Returns x' with ||x' - x||_inf <= epsilon and entries in [0,1].
Tensor generate_adversarial(AttackMethod method, const Classifier& model, const Tensor& batch,
                            const std::vector<std::size_t>& labels, const AttackConfig& config, Rng& rng);

double linf_distance(const Tensor& a, const Tensor& b);

struct AttackRecord {
  std::size_t index = 0;
  std::size_t label = 0;
  std::size_t clean_prediction = 0;
  std::size_t adversarial_prediction = 0;
  double linf = 0.0;
};

// Attacks every example (in dataset order, `batch_size` at a time; batch b
// uses the stream derive_seed(seed, b)), crafting on `surrogate` and
// predicting with `target`.
std::vector<AttackRecord> attack_dataset(const Classifier& surrogate, const Classifier& target, const Dataset& data,
                                         AttackMethod method, const AttackConfig& config, std::uint64_t seed,
                                         std::size_t batch_size = 128);

double robust_accuracy(const std::vector<AttackRecord>& records);
double clean_accuracy(const std::vector<AttackRecord>& records);

double evaluate_robustness(const Classifier& model, const Dataset& data, AttackMethod method,
                           const AttackConfig& config, std::uint64_t seed, std::size_t batch_size = 128);
// Throws std::invalid_argument if the two models take different inputs.
double transfer_attack(const Classifier& surrogate, const Classifier& target, const Dataset& data,
                       AttackMethod method, const AttackConfig& config, std::uint64_t seed,
                       std::size_t batch_size = 128);

}  // namespace f2at
