#pragma once
// Adversarial training loops (F2AT and SAT), evaluation grids, K sweeps and
// prediction diagnostics.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "f2at/attacks.hpp"
#include "f2at/data.hpp"
#include "f2at/losses.hpp"
#include "f2at/model.hpp"

namespace f2at {

enum class TrainMethod { kF2at, kSat };

TrainMethod parse_train_method(std::string_view name);
std::string_view train_method_name(TrainMethod method);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  AttackConfig attack;  // training-time PGD
  LossConfig loss;
  unsigned k = kDefaultSplit;
  std::vector<double> milestones = {0.5, 0.75};
  double learning_rate = 0.1;
  SgdConfig sgd;
  bool augment = true;
  // Per-epoch robust accuracy uses PGD with probe_steps on the first
  // probe_size evaluation examples; 0 disables the probe.
  std::size_t probe_size = 500;
  std::size_t probe_steps = 10;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;  // mean over the epoch's batches
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;  // NaN when probe_size is 0
  double wall_seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  NetworkParams params;
  RunMetrics metrics;
};

using EpochCallback = std::function<void(const EpochRecord&, const NetworkParams&)>;

// SAT minimizes cross-entropy on the adversarial batch; pd and mg_soft are
// still evaluated and reported, with alpha and gamma taken as zero. Throws
// std::runtime_error naming the epoch and batch on a non-finite loss.
TrainResult train(TrainMethod method, const TrainConfig& config, const Dataset& train_set, const Dataset& eval_set,
                  const EpochCallback& on_epoch = {});
TrainResult train_f2at(const TrainConfig& config, const Dataset& train_set, const Dataset& eval_set,
                       const EpochCallback& on_epoch = {});
TrainResult train_sat(const TrainConfig& config, const Dataset& train_set, const Dataset& eval_set,
                      const EpochCallback& on_epoch = {});

NetworkConfig network_config_for(const Dataset& data);

// One line of a metrics stream. Wall time is left out so equal runs give
// byte-identical streams.
std::string metrics_json(const EpochRecord& record);

struct NamedAttack {
  std::string name;
  AttackMethod method = AttackMethod::kPgd;
  AttackConfig config;
};

// FGSM, PGD-20, PGD-100 and MI-FGSM-10 at epsilon with the given step size.
std::vector<NamedAttack> default_attack_grid(double epsilon, double step_size);
NamedAttack parse_named_attack(std::string_view name, double epsilon, double step_size);

struct EvalRow {
  std::string defense;
  double clean_accuracy = 0.0;
  std::vector<double> robust_accuracy;  // aligned with the attack list
};

EvalRow evaluate_grid(const std::string& defense, const Classifier& model, const Dataset& data,
                      const std::vector<NamedAttack>& attacks, std::uint64_t seed);

double clean_accuracy(const Classifier& model, const Dataset& data, std::size_t batch_size = 256);

struct KSweepRow {
  unsigned k = 0;
  EvalRow eval;
};

// Throws std::invalid_argument if any k exceeds 8.
std::vector<KSweepRow> k_sweep(const TrainConfig& config, const std::vector<unsigned>& k_values,
                               const Dataset& train_set, const Dataset& eval_set,
                               const std::vector<NamedAttack>& attacks);

struct Diagnostics {
  std::vector<std::size_t> clean_class_frequency;        // predicted-class counts
  std::vector<std::size_t> adversarial_class_frequency;
  std::vector<double> clean_confidence;                  // per-example max softmax
  std::vector<double> adversarial_confidence;
  std::vector<double> clean_margin;                      // per-example margin
  std::vector<double> adversarial_margin;
};

Diagnostics diagnostics(const Classifier& model, const Dataset& data, const NamedAttack& attack,
                        std::uint64_t seed);

// Counts of values in [0,1] falling into `bins` equal-width bins (1.0 lands in
// the last bin).
std::vector<std::size_t> histogram(const std::vector<double>& values, std::size_t bins);

std::vector<double> softmax_row(std::span<const double> logits);

}  // namespace f2at
